//! TOML configuration for models, rendering and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderVariant, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::geometry::{default_street_range, ElevationMapping, SatelliteOrthoCamera, WorldFrame};
use crate::illumination::{IlluminationPolicy, STYLE_DIM};
use crate::objectives::LossWeights;
use crate::render::{SkySpec, StreetSampling};
use crate::synthetic::{SyntheticLayout, SyntheticSpec};
use crate::triplane::TriPlaneNetSpec;

/// Network sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sat_size: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub decoder_variant: DecoderVariant,
    pub decoder_hidden: usize,
    pub style_dim: usize,
    pub mapper_hidden: usize,
    pub sky_channels: usize,
    pub sky_blocks: usize,
    pub sr_hidden: usize,
    pub disc_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sat_size: 64,
            plane_res: 64,
            plane_channels: 32,
            base_channels: 16,
            depth: 4,
            decoder_variant: DecoderVariant::Adaptive,
            decoder_hidden: DEFAULT_HIDDEN,
            style_dim: STYLE_DIM,
            mapper_hidden: STYLE_DIM,
            sky_channels: 32,
            sky_blocks: 3,
            sr_hidden: 32,
            disc_widths: vec![16, 32, 64],
        }
    }
}

/// Render resolution and ray sampling. Street ground truth is compared at
/// twice the render resolution after super-resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub n_samples: usize,
    pub t_near: f64,
    /// Defaults to the scene diagonal.
    pub t_far: Option<f64>,
    pub elevation_mapping: ElevationMapping,
    pub sat_samples: usize,
    /// Satellite supervision renders at `sat_size / sat_factor`.
    pub sat_factor: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 64,
            width: 256,
            n_samples: 32,
            t_near: 0.1,
            t_far: None,
            elevation_mapping: ElevationMapping::Linear,
            sat_samples: 32,
            sat_factor: 4,
        }
    }
}

/// Optimization schedule and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Learning-rate multiplier of the illumination mapper.
    pub mapper_lr_mult: f64,
    pub seed: u64,
    pub r1_gamma: f64,
    /// Global gradient-norm cap for both updates (0 disables clipping).
    pub grad_clip: f64,
    pub sky_branch: bool,
    pub use_opacity_loss: bool,
    pub use_sky_loss: bool,
    pub use_sat_loss: bool,
    pub use_gan: bool,
    pub illumination_policy: IlluminationPolicy,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            lr_g: 2e-3,
            lr_d: 2e-3,
            mapper_lr_mult: 0.01,
            seed: 0,
            r1_gamma: 1.0,
            grad_clip: 0.0,
            sky_branch: true,
            use_opacity_loss: true,
            use_sky_loss: true,
            use_sat_loss: true,
            use_gan: true,
            illumination_policy: IlluminationPolicy::Real,
            checkpoint_every: 0,
            weights: LossWeights::default(),
        }
    }
}

/// Dataset and output locations for the command-line driver.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: WorldFrame,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    /// Scene written by `make-synthetic`.
    pub synthetic: SyntheticSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: WorldFrame { box_min: [-8.0, -8.0, -0.5], box_max: [8.0, 8.0, 5.5], camera_height: 1.5 },
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Config {
    /// Small networks and low resolutions that train in minutes on one CPU
    /// core.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.model = ModelConfig {
            sat_size: 64,
            plane_res: 32,
            plane_channels: 8,
            base_channels: 8,
            depth: 3,
            decoder_hidden: 32,
            sky_channels: 8,
            sr_hidden: 8,
            disc_widths: vec![8, 16],
            ..ModelConfig::default()
        };
        c.render = RenderConfig { height: 16, width: 64, n_samples: 24, sat_samples: 16, ..RenderConfig::default() };
        c.train.batch_size = 1;
        c
    }

    /// Tiny networks for smoke tests; trains a step in milliseconds.
    pub fn micro() -> Self {
        let mut c = Config::default();
        c.model = ModelConfig {
            sat_size: 16,
            plane_res: 8,
            plane_channels: 4,
            base_channels: 4,
            depth: 2,
            decoder_hidden: 8,
            style_dim: 8,
            mapper_hidden: 8,
            sky_channels: 4,
            sky_blocks: 2,
            sr_hidden: 4,
            disc_widths: vec![4],
            ..ModelConfig::default()
        };
        c.render = RenderConfig { height: 8, width: 32, n_samples: 6, sat_samples: 4, sat_factor: 2, ..RenderConfig::default() };
        c.train.batch_size = 1;
        c.train.iterations = 2;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| config_err(e.to_string()))?;
        let (m, r, t) = (&self.model, &self.render, &self.train);
        if t.iterations < 1 || t.batch_size < 1 {
            return Err(config_err("iterations and batch_size must be at least 1"));
        }
        if r.width != 4 * r.height || r.height == 0 {
            return Err(config_err(format!("render size {}x{} must have a 1:4 aspect", r.height, r.width)));
        }
        if r.height % (1 << m.sky_blocks) != 0 {
            return Err(config_err(format!("render height {} must be divisible by 2^sky_blocks", r.height)));
        }
        if r.sat_factor == 0 || m.sat_size % (2 * r.sat_factor) != 0 {
            return Err(config_err("sat_size must be divisible by 2 * sat_factor"));
        }
        if r.n_samples < 2 || r.sat_samples < 2 {
            return Err(config_err("need at least 2 samples per ray"));
        }
        if m.disc_widths.is_empty() {
            return Err(config_err("discriminator needs at least one layer"));
        }
        t.weights.validate().map_err(|e| config_err(e.to_string()))?;
        if self.synthetic.scene.frame != self.scene {
            return Err(config_err("synthetic scene frame differs from [scene]"));
        }
        Ok(())
    }

    pub fn triplane_spec(&self) -> TriPlaneNetSpec {
        TriPlaneNetSpec {
            input_size: self.model.sat_size,
            plane_res: self.model.plane_res,
            plane_channels: self.model.plane_channels,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
        }
    }

    pub fn sky_spec(&self) -> SkySpec {
        SkySpec {
            height: self.render.height,
            width: self.render.width,
            channels: self.model.sky_channels,
            blocks: self.model.sky_blocks,
            style_dim: self.model.style_dim,
        }
    }

    pub fn street_sampling(&self) -> StreetSampling {
        let (_, t_far) = default_street_range(&self.scene);
        StreetSampling {
            n_samples: self.render.n_samples,
            t_near: self.render.t_near,
            t_far: self.render.t_far.unwrap_or(t_far),
        }
    }

    /// Full-resolution satellite camera over the scene footprint.
    pub fn satellite_camera(&self) -> SatelliteOrthoCamera {
        SatelliteOrthoCamera::covering(&self.scene, self.model.sat_size)
    }

    /// Synthetic panoramas are written at the street supervision
    /// resolution, twice the render size.
    pub fn synthetic_layout(&self) -> SyntheticLayout {
        SyntheticLayout {
            sat_size: self.model.sat_size,
            pano_height: 2 * self.render.height,
            mapping: self.render.elevation_mapping,
        }
    }

    /// Digest of every setting that shapes parameters or rendering.
    pub fn architecture_hash(&self) -> String {
        #[derive(Serialize)]
        struct Arch<'a> {
            scene: &'a WorldFrame,
            model: &'a ModelConfig,
            render: &'a RenderConfig,
            sky_branch: bool,
        }
        let arch = Arch { scene: &self.scene, model: &self.model, render: &self.render, sky_branch: self.train.sky_branch };
        let text = toml::to_string(&arch).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for c in [Config::default(), Config::desk(), Config::micro()] {
            c.validate().unwrap();
            let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_files_use_defaults() {
        let c = Config::from_toml_str("[train]\niterations = 7\nillumination_policy = \"null\"\n").unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.illumination_policy, IlluminationPolicy::Null);
        assert_eq!(c.train.weights, LossWeights::default());
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn invalid_files_are_rejected() {
        assert!(Config::from_toml_str("[train]\nbatch_size = 0\n").is_err());
        assert!(Config::from_toml_str("[render]\nheight = 16\nwidth = 32\n").is_err());
        assert!(Config::from_toml_str("[train]\nbogus = 1\n").is_err());
        assert!(Config::from_toml_str("[train.weights]\nsky = -1.0\n").is_err());
    }

    #[test]
    fn hash_tracks_architecture_only() {
        let a = Config::desk();
        let mut b = a.clone();
        b.train.iterations = 99;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.model.plane_res = 16;
        assert_ne!(a.architecture_hash(), b.architecture_hash());
    }
}
