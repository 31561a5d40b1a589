//! Sky-color histogram features and the mapping network that turns them into
//! style vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;
use crate::io::{TensorData, TensorFile};
use crate::nn::{impl_params, Linear, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 90;
pub const ILLUMINATION_DIM: usize = 3 * HISTOGRAM_BINS;
pub const STYLE_DIM: usize = 512;
pub const MAPPER_LAYERS: usize = 8;

/// Binary per-pixel sky label: 1 = sky, 0 = ground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkyMask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl SkyMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!("{} mask values for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("sky mask values must be 0 or 1".into()));
        }
        Ok(SkyMask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        SkyMask { height, width, data }
    }

    /// Binarizes a single-channel image at 0.5. The flag reports whether any
    /// input value was neither 0 nor 1.
    pub fn from_gray(img: &Image) -> Result<(Self, bool)> {
        if img.channels != 1 {
            return Err(shape_err(format!("mask image must have 1 channel, got {}", img.channels)));
        }
        let graylevel = img.data.iter().any(|&v| v != 0.0 && v != 1.0);
        let data = img.data.iter().map(|&v| (v >= 0.5) as u8).collect();
        Ok((SkyMask { height: img.height, width: img.width, data }, graylevel))
    }

    pub fn is_sky(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn sky_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_image(&self) -> Image {
        Image { channels: 1, height: self.height, width: self.width, data: self.data.iter().map(|&v| v as f64).collect() }
    }

    /// `[1, h, w]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        self.to_image().to_tensor()
    }

    /// Block downsampling: a coarse pixel is sky when at least half of its
    /// block is sky.
    pub fn downsample(&self, factor: usize) -> Result<SkyMask> {
        let img = self.to_image().downsample(factor)?;
        let data = img.data.iter().map(|&v| (v >= 0.5) as u8).collect();
        Ok(SkyMask { height: img.height, width: img.width, data })
    }
}

/// Concatenated normalized R, G, B sky histograms (270 values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationFeature(Vec<f64>);

impl IlluminationFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != ILLUMINATION_DIM {
            return Err(shape_err(format!("illumination feature needs {ILLUMINATION_DIM} values, got {}", values.len())));
        }
        Ok(IlluminationFeature(values))
    }

    pub fn to_file(&self) -> TensorFile {
        TensorFile { dims: vec![ILLUMINATION_DIM], data: TensorData::F64(self.0.clone()) }
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        if file.dims != [ILLUMINATION_DIM] {
            return Err(shape_err(format!("illumination file has dims {:?}, expected [{ILLUMINATION_DIM}]", file.dims)));
        }
        Self::new(file.to_f64())
    }

    pub fn zero() -> Self {
        IlluminationFeature(vec![0.0; ILLUMINATION_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Histogram block for channel `c` (0 = R, 1 = G, 2 = B).
    pub fn block(&self, c: usize) -> &[f64] {
        &self.0[c * HISTOGRAM_BINS..(c + 1) * HISTOGRAM_BINS]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.0.clone(), &[1, ILLUMINATION_DIM])
    }
}

/// Bin of an 8-bit intensity: bin `k` covers `[k*256/90, (k+1)*256/90)`.
pub fn histogram_bin(intensity: u8) -> usize {
    (intensity as usize * HISTOGRAM_BINS / 256).min(HISTOGRAM_BINS - 1)
}

/// Histograms the sky pixels of `pano` (values in `[0, 1]`, quantized to
/// 8-bit intensities) into 90 bins per channel, each normalized by the number
/// of sky pixels. An empty mask yields the zero feature.
pub fn extract_illumination(pano: &Image, mask: &SkyMask) -> Result<IlluminationFeature> {
    if pano.channels != 3 || (pano.height, pano.width) != (mask.height, mask.width) {
        return Err(shape_err(format!(
            "panorama {:?} and mask {}x{} do not match",
            pano.shape(),
            mask.height,
            mask.width
        )));
    }
    let count = mask.sky_count();
    let mut hist = vec![0.0; ILLUMINATION_DIM];
    if count == 0 {
        return Ok(IlluminationFeature(hist));
    }
    let n = pano.height * pano.width;
    for (i, &m) in mask.values().iter().enumerate() {
        if m == 0 {
            continue;
        }
        for c in 0..3 {
            let v = (pano.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            hist[c * HISTOGRAM_BINS + histogram_bin(v)] += 1.0;
        }
    }
    let inv = 1.0 / count as f64;
    hist.iter_mut().for_each(|v| *v *= inv);
    Ok(IlluminationFeature(hist))
}

/// Where a style vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    RandomSampled,
    Null,
}

/// `[1, 512]` style vector.
#[derive(Debug, Clone)]
pub struct StyleVector {
    pub w: Tensor,
    pub provenance: Provenance,
}

impl StyleVector {
    pub fn dim(&self) -> usize {
        self.w.dim(1)
    }

    pub fn is_zero(&self) -> bool {
        self.w.data().iter().all(|&v| v == 0.0)
    }
}

/// The exact zero style used wherever no street illumination exists.
pub fn null_style() -> StyleVector {
    null_style_of(STYLE_DIM)
}

/// Zero style of a custom width.
pub fn null_style_of(dim: usize) -> StyleVector {
    StyleVector { w: Tensor::zeros(&[1, dim]), provenance: Provenance::Null }
}

/// Eight fully connected layers, 270 -> 512 -> ... -> 512, leaky-rectified
/// between layers.
#[derive(Debug, Clone)]
pub struct IlluminationMapper {
    pub layers: Vec<Linear>,
}
impl_params!(IlluminationMapper { layers });

impl IlluminationMapper {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self::with_dims(rng, ILLUMINATION_DIM, STYLE_DIM, STYLE_DIM)
    }

    /// Custom widths, for tiny test configurations.
    pub fn with_dims(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        let layers = (0..MAPPER_LAYERS)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                let fan_out = if i + 1 == MAPPER_LAYERS { output } else { hidden };
                Linear::new(rng, fan_in, fan_out)
            })
            .collect();
        IlluminationMapper { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn forward(&self, f: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(f.clone(), |h, (i, layer)| {
            let h = layer.forward(&h);
            if i < last {
                h.leaky_relu(LEAKY_SLOPE)
            } else {
                h
            }
        })
    }
}

pub fn map_illumination(f: &IlluminationFeature, mapper: &IlluminationMapper) -> StyleVector {
    map_illumination_as(f, mapper, Provenance::Real)
}

pub fn map_illumination_as(f: &IlluminationFeature, mapper: &IlluminationMapper, provenance: Provenance) -> StyleVector {
    StyleVector { w: mapper.forward(&f.to_tensor()), provenance }
}

/// Uniform, seeded draw from a pool of training illuminations.
pub fn sample_training_illumination(pool: &[IlluminationFeature], rng_seed: u64) -> Result<IlluminationFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(draw_illumination(pool, &mut rng)?.clone())
}

pub fn draw_illumination<'a>(pool: &'a [IlluminationFeature], rng: &mut impl Rng) -> Result<&'a IlluminationFeature> {
    if pool.is_empty() {
        return Err(Error::Empty("illumination pool"));
    }
    Ok(&pool[rng.random_range(0..pool.len())])
}

/// Which illumination drives street rendering during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminationPolicy {
    /// Histogram of the ground-truth panorama's own sky.
    #[default]
    Real,
    /// A random histogram from the training pool.
    Random,
    /// The zero style vector.
    Null,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_gradient_error;
    use crate::nn::normal_vec;
    use proptest::prelude::*;

    fn uniform_image(h: usize, w: usize, rgb: [f64; 3]) -> Image {
        let mut img = Image::filled(3, h, w, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, rgb[c]);
                }
            }
        }
        img
    }

    #[test]
    fn uniform_sky_is_one_hot() {
        let img = uniform_image(4, 8, [128.0 / 255.0; 3]);
        let mask = SkyMask::from_fn(4, 8, |_, _| true);
        let f = extract_illumination(&img, &mask).unwrap();
        assert_eq!(histogram_bin(128), 45);
        for c in 0..3 {
            let b = f.block(c);
            assert_eq!(b[45], 1.0);
            assert_eq!(b.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn empty_mask_gives_zero_feature() {
        let img = uniform_image(2, 8, [0.3, 0.5, 0.9]);
        let mask = SkyMask::from_fn(2, 8, |_, _| false);
        assert_eq!(extract_illumination(&img, &mask).unwrap(), IlluminationFeature::zero());
    }

    #[test]
    fn split_sky_gives_half_weights() {
        let mut img = uniform_image(2, 8, [0.0; 3]);
        for c in 0..3 {
            for x in 0..8 {
                img.set(c, 1, x, 1.0);
            }
        }
        let f = extract_illumination(&img, &SkyMask::from_fn(2, 8, |_, _| true)).unwrap();
        for c in 0..3 {
            assert_eq!(f.block(c)[0], 0.5);
            assert_eq!(f.block(c)[89], 0.5);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = uniform_image(2, 8, [0.0; 3]);
        assert!(extract_illumination(&img, &SkyMask::from_fn(2, 4, |_, _| true)).is_err());
    }

    #[test]
    fn mask_binarization_flags_graylevels() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.6, 1.0]).unwrap();
        let (m, gray) = SkyMask::from_gray(&img).unwrap();
        assert!(gray);
        assert_eq!(m.values(), &[0, 1, 1]);
    }

    #[test]
    fn last_bin_closed_at_255() {
        assert_eq!(histogram_bin(255), 89);
        assert_eq!(histogram_bin(0), 0);
        assert_eq!(histogram_bin(2), 0);
        assert_eq!(histogram_bin(3), 1);
    }

    #[test]
    fn null_style_is_zero() {
        let a = null_style();
        assert_eq!(a.dim(), 512);
        assert!(a.is_zero());
        assert_eq!(a.provenance, Provenance::Null);
        assert_eq!(a.w.data(), null_style().w.data());
        assert_eq!(a.w.square().sum().item().sqrt(), 0.0);
    }

    #[test]
    fn mapper_has_eight_layers_and_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mapper = IlluminationMapper::new(&mut rng);
        assert_eq!(mapper.layers.len(), 8);
        let f = IlluminationFeature::new(normal_vec(&mut rng, 270, 0.1)).unwrap();
        let a = map_illumination(&f, &mapper);
        let b = map_illumination(&f, &mapper);
        assert_eq!(a.w.data(), b.w.data());
        assert_eq!(a.provenance, Provenance::Real);
        *mapper.layers.last_mut().unwrap() = Linear::zeros(512, 512);
        assert!(map_illumination(&f, &mapper).is_zero());
    }

    #[test]
    fn mapper_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mapper = IlluminationMapper::with_dims(&mut rng, 6, 5, 4);
        let f = Tensor::from_vec(normal_vec(&mut rng, 6, 1.0), &[1, 6]);
        let w0 = mapper.layers[0].weight.detach();
        let w7 = mapper.layers[7].weight.detach();
        let err = max_gradient_error(
            |t| {
                let mut m = mapper.clone();
                m.layers[0].weight = t[0].clone();
                m.layers[7].weight = t[1].clone();
                m.forward(&f).square().sum()
            },
            &[w0, w7],
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_is_reproducible_and_uniform() {
        let pool: Vec<IlluminationFeature> = (0..4)
            .map(|k| {
                let mut v = vec![0.0; 270];
                v[k] = 1.0;
                IlluminationFeature::new(v).unwrap()
            })
            .collect();
        assert!(sample_training_illumination(&[], 1).is_err());
        assert_eq!(sample_training_illumination(&pool[..1], 99).unwrap(), pool[0]);
        assert_eq!(sample_training_illumination(&pool, 7).unwrap(), sample_training_illumination(&pool, 7).unwrap());
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let f = sample_training_illumination(&pool, seed).unwrap();
            counts[f.values().iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() <= 0.05 * 0.25, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn histogram_ignores_sky_permutation_and_duplication(
            pixels in proptest::collection::vec((0u8..=255, 0u8..=255, 0u8..=255, proptest::bool::ANY), 8),
            rot in 0usize..8,
        ) {
            let build = |px: &[(u8, u8, u8, bool)]| {
                let n = px.len();
                let mut img = Image::filled(3, 1, n, 0.0);
                for (i, p) in px.iter().enumerate() {
                    img.set(0, 0, i, p.0 as f64 / 255.0);
                    img.set(1, 0, i, p.1 as f64 / 255.0);
                    img.set(2, 0, i, p.2 as f64 / 255.0);
                }
                let mask = SkyMask::from_fn(1, n, |_, x| px[x].3);
                extract_illumination(&img, &mask).unwrap()
            };
            let base = build(&pixels);
            let mut rotated = pixels.clone();
            rotated.rotate_left(rot);
            prop_assert_eq!(&base, &build(&rotated));
            let doubled: Vec<_> = pixels.iter().chain(pixels.iter()).cloned().collect();
            let d = build(&doubled);
            for (a, b) in base.values().iter().zip(d.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for c in 0..3 {
                let s: f64 = base.block(c).iter().sum();
                prop_assert!(base.block(c).iter().all(|&v| v >= 0.0));
                if pixels.iter().any(|p| p.3) {
                    prop_assert!((s - 1.0).abs() < 1e-6);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }
    }
}
