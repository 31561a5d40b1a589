//! World frame conventions and ray generation.
//!
//! World axes are right-handed (east, north, up). Satellite images are
//! north-up with west on the left. Panorama columns sweep azimuth clockwise
//! from north: the central column looks north, the left and right borders
//! look south, and the left/right quarter columns look west/east.

use std::f64::consts::{FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

/// Axis-aligned scene bounds (meters) mapped onto the normalized cube
/// `[-1, 1]^3`, plus the shared street-camera height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldFrame {
    pub box_min: Vec3,
    pub box_max: Vec3,
    pub camera_height: f64,
}

impl WorldFrame {
    pub fn new(box_min: Vec3, box_max: Vec3, camera_height: f64) -> Result<Self> {
        let f = WorldFrame { box_min, box_max, camera_height };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.box_max[a] - self.box_min[a] > 0.0) {
                return Err(invalid(format!("scene box has non-positive extent on axis {a}")));
            }
        }
        if !(self.camera_height > self.box_min[2] && self.camera_height < self.box_max[2]) {
            return Err(invalid(format!(
                "camera height {} outside vertical scene extent [{}, {}]",
                self.camera_height, self.box_min[2], self.box_max[2]
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.box_max[a] - self.box_min[a])
    }

    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|a| 0.5 * (self.box_max[a] + self.box_min[a]))
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Street camera location for a ground offset (east, north) in meters.
    pub fn street_position(&self, east: f64, north: f64) -> Vec3 {
        [east, north, self.camera_height]
    }
}

/// Result of mapping a world point to normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub coords: Vec3,
    pub outside: bool,
}

/// Affine map of the scene box onto `[-1, 1]^3`; points outside the box are
/// flagged rather than rejected.
pub fn world_to_normalized(p: Vec3, frame: &WorldFrame) -> NormalizedPoint {
    let c = frame.center();
    let e = frame.extent();
    let coords = [0, 1, 2].map(|a| 2.0 * (p[a] - c[a]) / e[a]);
    let outside = coords.iter().any(|v| v.abs() > 1.0);
    NormalizedPoint { coords, outside }
}

/// Row-to-elevation rule for panoramas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElevationMapping {
    /// Elevation linear in the row index (cropped equirectangular).
    #[default]
    Linear,
    /// Rows evenly spaced in height on a unit cylinder: `tan(elevation)`
    /// linear in the row index.
    Cylindrical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanoramaCamera {
    pub position: Vec3,
    /// Radians, clockwise; 0 puts true north on the central column.
    pub heading_offset: f64,
    pub width: usize,
    pub height: usize,
    /// `[e_min, e_max]` in radians.
    pub elevation_range: [f64; 2],
    #[serde(default)]
    pub mapping: ElevationMapping,
}

pub const DEFAULT_ELEVATION_RANGE: [f64; 2] = [-FRAC_PI_4, FRAC_PI_4];

impl PanoramaCamera {
    pub fn new(position: Vec3, heading_offset: f64, width: usize, height: usize) -> Result<Self> {
        let cam = PanoramaCamera {
            position,
            heading_offset,
            width,
            height,
            elevation_range: DEFAULT_ELEVATION_RANGE,
            mapping: ElevationMapping::Linear,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("panorama size {}x{} must be positive", self.height, self.width)));
        }
        if self.width != 4 * self.height {
            return Err(invalid(format!("panorama width {} must be 4x height {}", self.width, self.height)));
        }
        let [lo, hi] = self.elevation_range;
        if !(lo < 0.0 && 0.0 < hi && hi < PI / 2.0 && lo > -PI / 2.0) {
            return Err(invalid(format!("elevation range [{lo}, {hi}] must satisfy -pi/2 < e_min < 0 < e_max < pi/2")));
        }
        Ok(())
    }

    /// Azimuth of column `u` (pixel centers), clockwise from north, before
    /// the heading offset.
    pub fn column_azimuth(&self, u: f64) -> f64 {
        2.0 * PI * (u + 0.5) / self.width as f64 - PI
    }

    /// Elevation of row `v` (pixel centers); row 0 is the top.
    pub fn row_elevation(&self, v: f64) -> f64 {
        let [lo, hi] = self.elevation_range;
        let s = (v + 0.5) / self.height as f64;
        match self.mapping {
            ElevationMapping::Linear => hi + (lo - hi) * s,
            ElevationMapping::Cylindrical => {
                let (tlo, thi) = (lo.tan(), hi.tan());
                (thi + (tlo - thi) * s).atan()
            }
        }
    }

    /// Unit direction through pixel `(row, col)` in (east, north, up).
    pub fn direction(&self, row: usize, col: usize) -> Vec3 {
        let theta = self.column_azimuth(col as f64) + self.heading_offset;
        let phi = self.row_elevation(row as f64);
        [theta.sin() * phi.cos(), theta.cos() * phi.cos(), phi.sin()]
    }
}

/// Nadir-looking orthographic camera centered on the scene box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteOrthoCamera {
    pub ground_sample_distance: f64,
    pub width: usize,
    pub height: usize,
    pub altitude: f64,
}

impl SatelliteOrthoCamera {
    /// Camera whose footprint covers the scene box's horizontal extent with
    /// `size x size` pixels, looking down from the box top.
    pub fn covering(frame: &WorldFrame, size: usize) -> Self {
        let e = frame.extent();
        SatelliteOrthoCamera {
            ground_sample_distance: e[0].max(e[1]) / size as f64,
            width: size,
            height: size,
            altitude: frame.box_max[2],
        }
    }

    /// Same footprint at a coarser resolution.
    pub fn downscaled(&self, factor: usize) -> Self {
        SatelliteOrthoCamera {
            ground_sample_distance: self.ground_sample_distance * factor as f64,
            width: self.width / factor,
            height: self.height / factor,
            altitude: self.altitude,
        }
    }

    pub fn validate(&self, frame: &WorldFrame) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.ground_sample_distance > 0.0) {
            return Err(invalid("satellite camera needs positive size and ground sample distance"));
        }
        let e = frame.extent();
        let tol = 1e-9 * e[0].max(e[1]);
        if self.width as f64 * self.ground_sample_distance > e[0] + tol
            || self.height as f64 * self.ground_sample_distance > e[1] + tol
        {
            return Err(invalid(format!(
                "satellite footprint {}x{} m exceeds scene box {}x{} m",
                self.width as f64 * self.ground_sample_distance,
                self.height as f64 * self.ground_sample_distance,
                e[0],
                e[1]
            )));
        }
        if self.altitude < frame.box_max[2] {
            return Err(invalid("satellite altitude below the top of the scene box"));
        }
        Ok(())
    }

    /// Ground position of the center of pixel `(row, col)`; row 0 is north,
    /// column 0 is west.
    pub fn pixel_ground(&self, frame: &WorldFrame, row: usize, col: usize) -> (f64, f64) {
        let c = frame.center();
        let g = self.ground_sample_distance;
        let x = c[0] + (col as f64 + 0.5 - self.width as f64 / 2.0) * g;
        let y = c[1] - (row as f64 + 0.5 - self.height as f64 / 2.0) * g;
        (x, y)
    }
}

/// Pixel window `[row0, row0 + height) x [col0, col0 + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

/// Rays with their sample distances along each ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    /// `n_rays * n_samples` distances, ray-major.
    pub sample_t: Vec<f64>,
    /// Interval lengths matching `sample_t`.
    pub deltas: Vec<f64>,
    /// `(row, col)` of each ray inside a `height x width` image.
    pub pixel_index: Vec<(usize, usize)>,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
}

impl RayBundle {
    pub fn n_rays(&self) -> usize {
        self.origins.len()
    }

    /// World position of sample `i` of ray `r`.
    pub fn point(&self, r: usize, i: usize) -> Vec3 {
        let t = self.sample_t[r * self.n_samples + i];
        let (o, d) = (self.origins[r], self.directions[r]);
        [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
    }

    /// Whether rays are stored in row-major pixel order covering the image.
    pub fn is_dense_row_major(&self) -> bool {
        self.n_rays() == self.height * self.width
            && self.pixel_index.iter().enumerate().all(|(k, &(r, c))| r * self.width + c == k)
    }
}

/// Uniform midpoint samples on `[t_near, t_far]`: `n` intervals of equal
/// length with one sample at each interval's center. The last interval
/// replicates the previous one, so deltas sum to `t_far - t_near`.
pub fn uniform_samples(n: usize, t_near: f64, t_far: f64) -> (Vec<f64>, Vec<f64>) {
    let step = (t_far - t_near) / n as f64;
    let t: Vec<f64> = (0..n).map(|i| t_near + (i as f64 + 0.5) * step).collect();
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let last = deltas.last().copied().unwrap_or(step);
    deltas.push(last);
    (t, deltas)
}

fn check_sampling(n_samples: usize, t_near: f64, t_far: f64) -> Result<()> {
    if n_samples < 2 {
        return Err(invalid(format!("need at least 2 samples per ray, got {n_samples}")));
    }
    if !(t_near >= 0.0 && t_near < t_far) {
        return Err(invalid(format!("invalid sampling range t_near={t_near}, t_far={t_far}")));
    }
    Ok(())
}

pub fn panorama_rays(cam: &PanoramaCamera, frame: &WorldFrame, n_samples: usize, t_near: f64, t_far: f64) -> Result<RayBundle> {
    cam.validate()?;
    frame.validate()?;
    check_sampling(n_samples, t_near, t_far)?;
    if t_near <= 0.0 {
        return Err(invalid("panorama rays need t_near > 0"));
    }
    let (t, deltas) = uniform_samples(n_samples, t_near, t_far);
    let n_rays = cam.width * cam.height;
    let mut bundle = RayBundle {
        origins: Vec::with_capacity(n_rays),
        directions: Vec::with_capacity(n_rays),
        sample_t: Vec::with_capacity(n_rays * n_samples),
        deltas: Vec::with_capacity(n_rays * n_samples),
        pixel_index: Vec::with_capacity(n_rays),
        n_samples,
        height: cam.height,
        width: cam.width,
    };
    for row in 0..cam.height {
        for col in 0..cam.width {
            bundle.origins.push(cam.position);
            bundle.directions.push(cam.direction(row, col));
            bundle.sample_t.extend_from_slice(&t);
            bundle.deltas.extend_from_slice(&deltas);
            bundle.pixel_index.push((row, col));
        }
    }
    Ok(bundle)
}

/// Default street-ray sampling range: 0.1 m to the scene diagonal.
pub fn default_street_range(frame: &WorldFrame) -> (f64, f64) {
    (0.1, frame.diagonal())
}

pub fn satellite_rays(cam: &SatelliteOrthoCamera, frame: &WorldFrame, n_samples: usize) -> Result<RayBundle> {
    satellite_rays_window(cam, frame, n_samples, None)
}

/// Nadir rays for the whole satellite frame or a pixel window of it. Window
/// rays are computed exactly as the full-frame rays for the same pixels.
pub fn satellite_rays_window(
    cam: &SatelliteOrthoCamera,
    frame: &WorldFrame,
    n_samples: usize,
    window: Option<CropWindow>,
) -> Result<RayBundle> {
    frame.validate()?;
    cam.validate(frame)?;
    let t_far = cam.altitude - frame.box_min[2];
    check_sampling(n_samples, 0.0, t_far)?;
    let win = window.unwrap_or(CropWindow { row0: 0, col0: 0, height: cam.height, width: cam.width });
    if win.height == 0 || win.width == 0 || win.row0 + win.height > cam.height || win.col0 + win.width > cam.width {
        return Err(invalid(format!("crop window {win:?} outside {}x{} image", cam.height, cam.width)));
    }
    let (t, deltas) = uniform_samples(n_samples, 0.0, t_far);
    let mut bundle = RayBundle {
        origins: Vec::new(),
        directions: Vec::new(),
        sample_t: Vec::new(),
        deltas: Vec::new(),
        pixel_index: Vec::new(),
        n_samples,
        height: win.height,
        width: win.width,
    };
    for r in 0..win.height {
        for c in 0..win.width {
            let (x, y) = cam.pixel_ground(frame, win.row0 + r, win.col0 + c);
            bundle.origins.push([x, y, cam.altitude]);
            bundle.directions.push([0.0, 0.0, -1.0]);
            bundle.sample_t.extend_from_slice(&t);
            bundle.deltas.extend_from_slice(&deltas);
            bundle.pixel_index.push((r, c));
        }
    }
    Ok(bundle)
}
