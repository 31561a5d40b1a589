//! Satellite-conditioned tri-plane radiance fields with
//! illumination-adaptive street-view panorama synthesis.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod illumination;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod triplane;

pub use error::{Error, Result};
pub use tensor::{grad, no_grad, Tensor};

pub use config::Config;
pub use dataset::{load_dataset, SceneSample};
pub use geometry::{PanoramaCamera, SatelliteOrthoCamera, WorldFrame};
pub use illumination::{IlluminationFeature, SkyMask, StyleVector};
pub use imaging::Image;
pub use training::{StyleSource, TrainState, TrainingSample};
