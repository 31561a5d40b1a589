//! Paired satellite/street datasets described by a CSV manifest.
//!
//! `manifest.csv` lives in the dataset root with the header
//! `sat,street,mask,east_m,north_m,heading_rad`; image paths are relative
//! to the root. A satellite image may appear on several rows, one per
//! panorama.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::illumination::SkyMask;
use crate::imaging::{load_gray, load_rgb, Image};

pub const MANIFEST: &str = "manifest.csv";
const HEADER: [&str; 6] = ["sat", "street", "mask", "east_m", "north_m", "heading_rad"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    sat: String,
    street: String,
    mask: String,
    east_m: f64,
    north_m: f64,
    heading_rad: f64,
}

/// One panorama with its satellite tile and camera placement.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub sat: PathBuf,
    pub street: PathBuf,
    pub mask: PathBuf,
    pub east_m: f64,
    pub north_m: f64,
    pub heading_rad: f64,
}

/// Decoded images of a [`SceneSample`].
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sat: Image,
    pub street: Image,
    pub mask: SkyMask,
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), message: message.into() }
}

impl SceneSample {
    pub fn load(&self) -> Result<LoadedSample> {
        let sat = load_rgb(&self.sat)?;
        let street = load_rgb(&self.street)?;
        let (mask, gray) = SkyMask::from_gray(&load_gray(&self.mask)?)?;
        if gray {
            warn!("{}: sky mask has intermediate values; binarized at 0.5", self.mask.display());
        }
        if (mask.height, mask.width) != (street.height, street.width) {
            return Err(dataset_err(&self.mask, "mask size differs from the street image"));
        }
        Ok(LoadedSample { sat, street, mask })
    }
}

/// Reads and validates `root/manifest.csv`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let root = root.as_ref();
    let manifest = root.join(MANIFEST);
    if !manifest.is_file() {
        return Err(dataset_err(&manifest, "manifest not found"));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&manifest)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(dataset_err(&manifest, format!("expected header {}, got {}", HEADER.join(","), header.join(","))));
    }
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| dataset_err(&manifest, format!("line {line}: {e}")))?;
        let sample = SceneSample {
            sat: root.join(&row.sat),
            street: root.join(&row.street),
            mask: root.join(&row.mask),
            east_m: row.east_m,
            north_m: row.north_m,
            heading_rad: row.heading_rad,
        };
        validate_sample(&sample).map_err(|e| match e {
            Error::Dataset { path, message } => {
                dataset_err(&path, format!("manifest line {line}: {message}"))
            }
            other => other,
        })?;
        samples.push(sample);
    }
    if samples.is_empty() {
        warn!("{}: manifest lists no samples", manifest.display());
    }
    Ok(samples)
}

fn validate_sample(s: &SceneSample) -> Result<()> {
    if !(s.east_m.is_finite() && s.north_m.is_finite() && s.heading_rad.is_finite()) {
        return Err(dataset_err(&s.street, "non-finite camera placement"));
    }
    let dims = |p: &Path| image::image_dimensions(p).map_err(|e| dataset_err(p, e.to_string()));
    dims(&s.sat)?;
    let street = dims(&s.street)?;
    let mask = dims(&s.mask)?;
    if street != mask {
        return Err(dataset_err(
            &s.mask,
            format!("mask is {}x{} but street image {} is {}x{}", mask.0, mask.1, s.street.display(), street.0, street.1),
        ));
    }
    Ok(())
}

/// Writes `root/manifest.csv`; sample paths are stored relative to `root`
/// when possible.
pub fn write_manifest(root: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
    let mut w = csv::Writer::from_path(root.join(MANIFEST))?;
    if samples.is_empty() {
        w.write_record(HEADER)?;
    }
    for s in samples {
        w.serialize(ManifestRow {
            sat: rel(&s.sat),
            street: rel(&s.street),
            mask: rel(&s.mask),
            east_m: s.east_m,
            north_m: s.north_m,
            heading_rad: s.heading_rad,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png;

    fn write_sample(root: &Path, name: &str, mask_w: usize) -> SceneSample {
        save_png(&Image::filled(3, 8, 8, 0.5), root.join(format!("{name}_sat.png"))).unwrap();
        save_png(&Image::filled(3, 4, 16, 0.2), root.join(format!("{name}_street.png"))).unwrap();
        save_png(&Image::filled(1, 4, mask_w, 1.0), root.join(format!("{name}_mask.png"))).unwrap();
        SceneSample {
            sat: root.join(format!("{name}_sat.png")),
            street: root.join(format!("{name}_street.png")),
            mask: root.join(format!("{name}_mask.png")),
            east_m: 1.0,
            north_m: -2.0,
            heading_rad: 0.5,
        }
    }

    #[test]
    fn empty_manifest_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[]).unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn one_valid_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_sample(dir.path(), "a", 16);
        write_manifest(dir.path(), std::slice::from_ref(&s)).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with("sat,street,mask,east_m,north_m,heading_rad\na_sat.png,"));
        let got = load_dataset(dir.path()).unwrap();
        assert_eq!(got, vec![s]);
        let loaded = got[0].load().unwrap();
        assert_eq!(loaded.street.shape(), [3, 4, 16]);
        assert_eq!(loaded.mask.sky_count(), 64);
    }

    #[test]
    fn mask_size_mismatch_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_sample(dir.path(), "bad", 8);
        write_manifest(dir.path(), &[s]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bad_mask.png") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), "sat,street,mask,east_m,north_m,heading_rad\nx.png,y.png,z.png,abc,0,0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        fs::write(dir.path().join(MANIFEST), "sat,street,mask,east_m,north_m,heading_rad\nx.png,y.png,z.png,0,0,0\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), "a,b\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
