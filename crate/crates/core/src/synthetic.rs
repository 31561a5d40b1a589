//! Procedural box scenes with exact satellite rasterization and panorama ray
//! tracing, used as training fixtures and geometric ground truth.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, SceneSample};
use crate::error::{invalid, Result};
use crate::geometry::{ElevationMapping, PanoramaCamera, SatelliteOrthoCamera, Vec3, WorldFrame};
use crate::illumination::SkyMask;
use crate::imaging::{save_png, Image};
use crate::io::{write_tensor_file, TensorData, TensorFile};

/// Axis-aligned box standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: [f64; 3],
}

impl SceneBox {
    fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x < self.max[0] && y >= self.min[1] && y < self.max[1]
    }

    /// Entry distance and hit axis of a ray starting outside the box.
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, usize)> {
        let (mut t_in, mut t_out, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (t1, t2) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_in {
                t_in = lo;
                axis = a;
            }
            t_out = t_out.min(hi);
        }
        (t_in <= t_out && t_in > 0.0).then_some((t_in, axis))
    }
}

/// Sky color blending from the horizon color at elevation 0 to the zenith
/// color at 45 degrees and above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkyGradient {
    pub horizon: [f64; 3],
    pub zenith: [f64; 3],
}

impl SkyGradient {
    pub fn color(&self, elevation: f64) -> [f64; 3] {
        let s = (elevation / FRAC_PI_4).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| self.horizon[c] + (self.zenith[c] - self.horizon[c]) * s)
    }
}

/// Colored boxes on a flat ground plane that covers the scene box footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxScene {
    pub frame: WorldFrame,
    pub ground_z: f64,
    pub ground_albedo: [f64; 3],
    pub boxes: Vec<SceneBox>,
    pub sky: SkyGradient,
}

/// Relative brightness of box faces by orientation.
const TOP_SHADE: f64 = 1.0;
const NORTH_SOUTH_SHADE: f64 = 0.85;
const EAST_WEST_SHADE: f64 = 0.7;

impl BoxScene {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        let f = &self.frame;
        if !(self.ground_z >= f.box_min[2] && self.ground_z < f.camera_height) {
            return Err(invalid("ground plane must lie inside the scene box below the camera"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let inside = (0..3).all(|a| b.min[a] >= f.box_min[a] && b.max[a] <= f.box_max[a] && b.min[a] < b.max[a]);
            if !inside {
                return Err(invalid(format!("box {i} is empty or leaves the scene box")));
            }
        }
        Ok(())
    }

    /// Same geometry under a different sky.
    pub fn with_sky(&self, sky: SkyGradient) -> BoxScene {
        BoxScene { sky, ..self.clone() }
    }
}

/// Top-down orthographic rendering and the elevation (above the ground
/// plane) of the visible surface at each pixel.
pub fn rasterize_satellite(scene: &BoxScene, cam: &SatelliteOrthoCamera) -> (Image, Image) {
    let mut img = Image::filled(3, cam.height, cam.width, 0.0);
    let mut heights = Image::filled(1, cam.height, cam.width, 0.0);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let (x, y) = cam.pixel_ground(&scene.frame, row, col);
            let top = scene
                .boxes
                .iter()
                .filter(|b| b.covers(x, y))
                .max_by(|a, b| a.max[2].total_cmp(&b.max[2]));
            let (albedo, h) = match top {
                Some(b) => (b.albedo.map(|v| v * TOP_SHADE), b.max[2] - scene.ground_z),
                None => (scene.ground_albedo, 0.0),
            };
            for c in 0..3 {
                img.set(c, row, col, albedo[c]);
            }
            heights.set(0, row, col, h);
        }
    }
    (img, heights)
}

/// Exact panorama rendering of a box scene.
#[derive(Debug, Clone)]
pub struct PanoramaTruth {
    pub image: Image,
    /// Row-major first-hit distances; `f64::INFINITY` for sky.
    pub depth: Vec<f64>,
    pub mask: SkyMask,
}

/// First surface hit along a ray: distance and shaded color.
fn trace(scene: &BoxScene, o: Vec3, d: Vec3) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for b in &scene.boxes {
        if let Some((t, axis)) = b.intersect(o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                let shade = [EAST_WEST_SHADE, NORTH_SOUTH_SHADE, TOP_SHADE][axis];
                best = Some((t, b.albedo.map(|v| v * shade)));
            }
        }
    }
    if d[2] < 0.0 {
        let t = (scene.ground_z - o[2]) / d[2];
        let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
        let f = &scene.frame;
        let on_footprint = x >= f.box_min[0] && x <= f.box_max[0] && y >= f.box_min[1] && y <= f.box_max[1];
        if on_footprint && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, scene.ground_albedo));
        }
    }
    best
}

/// Ray traces every panorama pixel; rays hitting nothing take the sky color
/// and are labeled sky.
pub fn raytrace_panorama(scene: &BoxScene, cam: &PanoramaCamera) -> Result<PanoramaTruth> {
    cam.validate()?;
    let o = cam.position;
    if let Some(i) = scene.boxes.iter().position(|b| b.contains(o)) {
        return Err(invalid(format!("camera at {o:?} is inside box {i}")));
    }
    if o[2] <= scene.ground_z {
        return Err(invalid("camera is below the ground plane"));
    }
    let (h, w) = (cam.height, cam.width);
    let mut image = Image::filled(3, h, w, 0.0);
    let mut depth = vec![f64::INFINITY; h * w];
    let mut sky = vec![0u8; h * w];
    for row in 0..h {
        let elevation = cam.row_elevation(row as f64);
        for col in 0..w {
            let color = match trace(scene, o, cam.direction(row, col)) {
                Some((t, c)) => {
                    depth[row * w + col] = t;
                    c
                }
                None => {
                    sky[row * w + col] = 1;
                    scene.sky.color(elevation)
                }
            };
            for c in 0..3 {
                image.set(c, row, col, color[c]);
            }
        }
    }
    Ok(PanoramaTruth { image, depth, mask: SkyMask::new(h, w, sky)? })
}

/// Sky fixtures with clearly different color statistics.
pub fn sky_fixtures() -> Vec<SkyGradient> {
    vec![
        SkyGradient { horizon: [0.75, 0.85, 0.95], zenith: [0.3, 0.5, 0.9] },
        SkyGradient { horizon: [0.95, 0.6, 0.3], zenith: [0.45, 0.3, 0.55] },
        SkyGradient { horizon: [0.6, 0.62, 0.65], zenith: [0.45, 0.47, 0.5] },
    ]
}

/// A small street block: a 16 m x 16 m scene with four buildings around the
/// origin, ground at z = 0 and the camera 1.5 m above it.
pub fn desk_scene() -> BoxScene {
    let frame = WorldFrame::new([-8.0, -8.0, -0.5], [8.0, 8.0, 5.5], 1.5).expect("valid desk frame");
    let b = |min: Vec3, max: Vec3, albedo: [f64; 3]| SceneBox { min, max, albedo };
    BoxScene {
        frame,
        ground_z: 0.0,
        ground_albedo: [0.35, 0.35, 0.33],
        boxes: vec![
            b([-2.0, 3.0, 0.0], [3.0, 7.0, 4.0], [0.85, 0.3, 0.25]),
            b([-7.0, -3.0, 0.0], [-4.0, 2.0, 2.5], [0.25, 0.65, 0.3]),
            b([4.0, -6.0, 0.0], [7.0, -1.0, 3.0], [0.3, 0.35, 0.85]),
            b([-3.0, -7.0, 0.0], [1.0, -4.5, 1.5], [0.9, 0.8, 0.3]),
        ],
        sky: sky_fixtures()[0],
    }
}

/// One street view of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticView {
    pub east_m: f64,
    pub north_m: f64,
    pub heading_rad: f64,
    /// Index into [`SyntheticSpec::skies`].
    pub sky: usize,
}

/// Scene and views written by [`write_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub scene: BoxScene,
    pub skies: Vec<SkyGradient>,
    pub views: Vec<SyntheticView>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let view = |heading_rad, sky| SyntheticView { east_m: 0.0, north_m: 0.0, heading_rad, sky };
        SyntheticSpec {
            scene: desk_scene(),
            skies: sky_fixtures(),
            views: vec![view(0.0, 0), view(0.0, 1), view(FRAC_PI_2, 2)],
        }
    }
}

/// Image sizes and camera model of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticLayout {
    pub sat_size: usize,
    pub pano_height: usize,
    pub mapping: ElevationMapping,
}

/// Renders every view and writes `sat.png`, `street_NNN.png`,
/// `mask_NNN.png`, `depth_NNN.ptns` (f64 `[H, W]`, infinite for sky) and
/// the manifest into `root`.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, layout: SyntheticLayout, root: &Path) -> Result<Vec<SceneSample>> {
    spec.scene.validate()?;
    fs::create_dir_all(root)?;
    let frame = &spec.scene.frame;
    let sat_cam = SatelliteOrthoCamera::covering(frame, layout.sat_size);
    let (sat, _) = rasterize_satellite(&spec.scene, &sat_cam);
    let sat_path = root.join("sat.png");
    save_png(&sat, &sat_path)?;
    let mut samples = Vec::with_capacity(spec.views.len());
    for (i, v) in spec.views.iter().enumerate() {
        let sky = *spec
            .skies
            .get(v.sky)
            .ok_or_else(|| invalid(format!("view {i} uses sky {} of {}", v.sky, spec.skies.len())))?;
        let mut cam = PanoramaCamera::new(frame.street_position(v.east_m, v.north_m), v.heading_rad, 4 * layout.pano_height, layout.pano_height)?;
        cam.mapping = layout.mapping;
        let truth = raytrace_panorama(&spec.scene.with_sky(sky), &cam)?;
        let sample = SceneSample {
            sat: sat_path.clone(),
            street: root.join(format!("street_{i:03}.png")),
            mask: root.join(format!("mask_{i:03}.png")),
            east_m: v.east_m,
            north_m: v.north_m,
            heading_rad: v.heading_rad,
        };
        save_png(&truth.image, &sample.street)?;
        save_png(&truth.mask.to_image(), &sample.mask)?;
        let depth = TensorFile::new(vec![cam.height, cam.width], TensorData::F64(truth.depth))?;
        write_tensor_file(root.join(format!("depth_{i:03}.ptns")), &depth)?;
        samples.push(sample);
    }
    write_manifest(root, &samples)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn empty_scene() -> BoxScene {
        BoxScene { boxes: vec![], ..desk_scene() }
    }

    #[test]
    fn desk_scene_is_valid() {
        desk_scene().validate().unwrap();
        let mut bad = desk_scene();
        bad.boxes[0].max[2] = 9.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_scene_satellite_is_uniform_ground() {
        let s = empty_scene();
        let cam = SatelliteOrthoCamera::covering(&s.frame, 16);
        let (img, h) = rasterize_satellite(&s, &cam);
        for c in 0..3 {
            assert!(img.data[c * 256..(c + 1) * 256].iter().all(|&v| v == s.ground_albedo[c]));
        }
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_box_footprint_and_stacking() {
        let mut s = empty_scene();
        s.boxes = vec![SceneBox { min: [0.0, 0.0, 0.0], max: [4.0, 4.0, 2.0], albedo: [1.0, 0.0, 0.0] }];
        let cam = SatelliteOrthoCamera::covering(&s.frame, 16);
        let (img, h) = rasterize_satellite(&s, &cam);
        let mut covered = 0;
        for row in 0..16 {
            for col in 0..16 {
                let (x, y) = cam.pixel_ground(&s.frame, row, col);
                let inside = (0.0..4.0).contains(&x) && (0.0..4.0).contains(&y);
                assert_eq!(h.at(0, row, col), if inside { 2.0 } else { 0.0 });
                assert_eq!(img.at(0, row, col), if inside { 1.0 } else { s.ground_albedo[0] });
                covered += inside as usize;
            }
        }
        assert_eq!(covered, 16);
        s.boxes.push(SceneBox { min: [1.0, 1.0, 0.0], max: [3.0, 3.0, 4.0], albedo: [0.0, 0.0, 1.0] });
        let (img, h) = rasterize_satellite(&s, &cam);
        let (row, col) = (6, 9);
        let (x, y) = cam.pixel_ground(&s.frame, row, col);
        assert!((1.0..3.0).contains(&x) && (1.0..3.0).contains(&y));
        assert_eq!(h.at(0, row, col), 4.0);
        assert_eq!(img.at(2, row, col), 1.0);
    }

    #[test]
    fn empty_scene_horizon_split() {
        let s = empty_scene();
        let cam = PanoramaCamera::new(s.frame.street_position(0.0, 0.0), 0.0, 32, 8).unwrap();
        let t = raytrace_panorama(&s, &cam).unwrap();
        for row in 0..8 {
            for col in 0..32 {
                let sky = t.mask.is_sky(row, col);
                if cam.row_elevation(row as f64) > 0.0 {
                    assert!(sky);
                }
                assert_eq!(sky, t.depth[row * 32 + col].is_infinite());
            }
        }
    }

    #[test]
    fn box_due_north_depth() {
        let mut s = empty_scene();
        let d = 5.0;
        s.boxes = vec![SceneBox { min: [-2.0, d, 0.0], max: [2.0, 7.0, 5.0], albedo: [0.5, 0.5, 0.5] }];
        let cam = PanoramaCamera::new(s.frame.street_position(0.0, 0.0), 0.0, 64, 16).unwrap();
        let t = raytrace_panorama(&s, &cam).unwrap();
        let row = 7;
        let phi = cam.row_elevation(row as f64);
        let col = 32;
        let theta = cam.column_azimuth(col as f64);
        let expect = d / (theta.cos() * phi.cos());
        assert_abs_diff_eq!(t.depth[row * 64 + col], expect, epsilon = 1e-9);
        assert_eq!(t.image.at(0, row, col), 0.5 * NORTH_SOUTH_SHADE);
    }

    #[test]
    fn camera_inside_box_is_rejected() {
        let s = desk_scene();
        let cam = PanoramaCamera::new(s.frame.street_position(0.0, 5.0), 0.0, 16, 4).unwrap();
        assert!(raytrace_panorama(&s, &cam).is_err());
    }

    #[test]
    fn sky_gradient_endpoints() {
        let g = sky_fixtures()[1];
        assert_eq!(g.color(-0.3), g.horizon);
        assert_eq!(g.color(0.0), g.horizon);
        assert_eq!(g.color(1.2), g.zenith);
    }

    #[test]
    fn synthetic_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let layout = SyntheticLayout { sat_size: 16, pano_height: 8, mapping: ElevationMapping::Linear };
        let written = write_synthetic_dataset(&SyntheticSpec::default(), layout, dir.path()).unwrap();
        let loaded = crate::dataset::load_dataset(dir.path()).unwrap();
        assert_eq!(written, loaded);
        assert_eq!(loaded.len(), 3);
        let s = loaded[2].load().unwrap();
        assert_eq!(s.street.shape(), [3, 8, 32]);
        assert_eq!(s.sat.shape(), [3, 16, 16]);
        let depth = crate::io::read_tensor_file(dir.path().join("depth_002.ptns")).unwrap().to_f64();
        for (i, d) in depth.iter().enumerate() {
            assert_eq!(s.mask.values()[i] == 1, d.is_infinite());
        }
        let mut bad = SyntheticSpec::default();
        bad.views[0].sky = 7;
        assert!(write_synthetic_dataset(&bad, layout, dir.path()).is_err());
    }
}
