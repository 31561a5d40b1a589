//! Training losses: opacity supervision, masked sky reconstruction, image
//! reconstruction with a perceptual term, and the adversarial objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::illumination::SkyMask;
use crate::nn::{conv2d, impl_params, normal_vec, Conv2d, Linear, LEAKY_SLOPE};
use crate::tensor::{grad, Tensor};

pub const OPACITY_EPS: f64 = 1e-6;

/// Per-term loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub d_str: f64,
    pub d_sat: f64,
    pub sat: f64,
    pub str: f64,
    pub sky: f64,
    pub opa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { d_str: 1.0, d_sat: 1.0, sat: 30.0, str: 10.0, sky: 10.0, opa: 25.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d_str, self.d_sat, self.sat, self.str, self.sky, self.opa];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn mask_tensor(mask: &SkyMask, like: &Tensor, channels: usize) -> Result<Tensor> {
    let s = like.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != channels || (s[2], s[3]) != (mask.height, mask.width) {
        return Err(shape_err(format!("image {s:?} does not match a {}x{} mask", mask.height, mask.width)));
    }
    Ok(mask.to_tensor().reshape(&[1, 1, mask.height, mask.width]))
}

/// Binary cross-entropy between the ground opacity `[1, 1, H, W]` and the
/// non-sky target `1 - mask`, averaged over pixels.
pub fn opacity_loss(opacity: &Tensor, mask: &SkyMask) -> Result<Tensor> {
    let m = mask_tensor(mask, opacity, 1)?;
    let target = m.rsub_scalar(1.0);
    let o = opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    let ll = target.mul(&o.ln()).add(&m.mul(&o.rsub_scalar(1.0).ln()));
    Ok(ll.mean().neg())
}

/// Mean absolute error over the sky pixels of `[1, 3, H, W]` images; zero
/// when the mask is empty.
pub fn sky_loss(sky_image: &Tensor, street_gt: &Tensor, mask: &SkyMask) -> Result<Tensor> {
    let m = mask_tensor(mask, sky_image, 3)?;
    if street_gt.shape() != sky_image.shape() {
        return Err(shape_err(format!("sky {:?} vs ground truth {:?}", sky_image.shape(), street_gt.shape())));
    }
    let count = mask.sky_count();
    if count == 0 {
        return Ok(sky_image.mul_scalar(0.0).sum());
    }
    Ok(sky_image.sub(street_gt).mul(&m).abs().sum().mul_scalar(1.0 / (3 * count) as f64))
}

/// Feature-space image distance.
pub trait PerceptualDistance: Send + Sync {
    /// Distance between two `[b, 3, H, W]` batches; differentiable in both.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Tensor;
}

/// Perceptual proxy built from fixed, seeded random convolutions: three
/// stride-2 layers, squared feature differences averaged per layer.
#[derive(Debug, Clone)]
pub struct RandomConvPerceptual {
    weights: Vec<Tensor>,
}

impl RandomConvPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 8, 16, 16];
        let weights = widths
            .windows(2)
            .map(|p| Tensor::from_vec(normal_vec(&mut rng, p[1] * p[0] * 9, (1.0 / (p[0] * 9) as f64).sqrt()), &[p[1], p[0], 3, 3]))
            .collect();
        RandomConvPerceptual { weights }
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut h = x.mul_scalar(2.0).add_scalar(-1.0);
        for w in &self.weights {
            h = conv2d(&h, w, None, 2, 1).leaky_relu(LEAKY_SLOPE);
            out.push(h.clone());
        }
        out
    }
}

impl Default for RandomConvPerceptual {
    fn default() -> Self {
        Self::new(0x5eed)
    }
}

impl PerceptualDistance for RandomConvPerceptual {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let fa = self.features(a);
        let fb = self.features(b);
        fa.iter().zip(&fb).map(|(x, y)| x.sub(y).square().mean()).reduce(|s, t| s.add(&t)).expect("at least one layer")
    }
}

/// Mean absolute error plus the perceptual distance.
pub fn reconstruction_loss(pred: &Tensor, gt: &Tensor, perceptual: &dyn PerceptualDistance) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    Ok(pred.sub(gt).abs().mean().add(&perceptual.distance(pred, gt)))
}

/// Strided convolutional classifier ending in one logit per image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}
impl_params!(Discriminator { convs, head });

impl Discriminator {
    /// One 3x3 convolution per entry of `widths`; the first keeps the
    /// resolution and the rest halve it.
    pub fn new(rng: &mut impl Rng, in_channels: usize, widths: &[usize]) -> Self {
        let mut cin = in_channels;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(rng, cin, w, 3, if i == 0 { 1 } else { 2 });
                cin = w;
                c
            })
            .collect();
        Discriminator { convs, head: Linear::new(rng, cin, 1) }
    }

    pub fn zero_head(mut self) -> Self {
        self.head = Linear::zeros(self.head.input_dim(), 1);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.convs.first().map(|c| c.in_channels()).unwrap_or(self.head.input_dim())
    }

    /// `[b, c, H, W]` to logits `[b, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.in_channels() {
            return Err(shape_err(format!("discriminator expects [b, {}, H, W], got {:?}", self.in_channels(), x.shape())));
        }
        let h = self.convs.iter().fold(x.clone(), |h, c| c.forward(&h).leaky_relu(LEAKY_SLOPE));
        let (b, c, hw) = (h.dim(0), h.dim(1), h.dim(2) * h.dim(3));
        let pooled = h.reshape(&[b, c, hw]).sum_to(&[b, c, 1]).mul_scalar(1.0 / hw as f64).reshape(&[b, c]);
        Ok(self.head.forward(&pooled))
    }
}

/// Non-saturating generator loss `softplus(-D(fake))`, batch mean.
pub fn generator_gan_loss(d: &Discriminator, fake: &Tensor) -> Result<Tensor> {
    Ok(d.forward(fake)?.neg().softplus().mean())
}

/// `(gamma / 2) * |grad_x D(x)|^2` at the real inputs, batch mean. The
/// penalty stays differentiable with respect to the discriminator.
pub fn r1_penalty(d: &Discriminator, real: &Tensor, gamma: f64) -> Result<Tensor> {
    let x = real.detach_requiring_grad();
    let logits = d.forward(&x)?;
    let g = grad(&logits.sum(), &[&x], true).remove(0);
    Ok(g.square().sum().mul_scalar(0.5 * gamma / real.dim(0) as f64))
}

/// Adversarial terms for one discriminator.
#[derive(Debug, Clone)]
pub struct GanLosses {
    pub g_loss: Tensor,
    pub d_loss: Tensor,
    pub r1: Tensor,
}

/// Generator loss, discriminator loss `softplus(D(fake)) + softplus(-D(real))`
/// and the R1 penalty on real inputs.
pub fn gan_losses(d: &Discriminator, real: &Tensor, fake: &Tensor, r1_gamma: f64) -> Result<GanLosses> {
    if real.shape()[1..] != fake.shape()[1..] {
        return Err(shape_err(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let fake_logits = d.forward(fake)?;
    let real_logits = d.forward(real)?;
    let g_loss = fake_logits.neg().softplus().mean();
    let d_loss = fake_logits.softplus().mean().add(&real_logits.neg().softplus().mean());
    let r1 = r1_penalty(d, real, r1_gamma)?;
    Ok(GanLosses { g_loss, d_loss, r1 })
}

/// Unweighted generator-side loss terms; `None` marks a disabled term.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub opa: Option<Tensor>,
    pub sky: Option<Tensor>,
    pub str: Option<Tensor>,
    pub sat: Option<Tensor>,
    pub d_str: Option<Tensor>,
    pub d_sat: Option<Tensor>,
}

/// Weighted terms, their sum, and the values for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// `(name, unweighted value, weighted value)` in a fixed order.
    pub terms: Vec<(&'static str, f64, f64)>,
}

impl LossBreakdown {
    pub fn weighted(&self, name: &str) -> f64 {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.2).unwrap_or(0.0)
    }

    pub fn raw(&self, name: &str) -> f64 {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1).unwrap_or(0.0)
    }
}

/// `lambda_sat L_sat + lambda_str L_str + lambda_sky L_sky + lambda_opa L_opa
/// + lambda_Dstr L_Dstr + lambda_Dsat L_Dsat`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("sat", &parts.sat, weights.sat),
        ("str", &parts.str, weights.str),
        ("sky", &parts.sky, weights.sky),
        ("opa", &parts.opa, weights.opa),
        ("d_str", &parts.d_str, weights.d_str),
        ("d_sat", &parts.d_sat, weights.d_sat),
    ];
    let mut total = Tensor::scalar(0.0);
    let mut terms = Vec::with_capacity(named.len());
    for (name, part, w) in named {
        let value = part.as_ref().map(|t| t.item()).unwrap_or(0.0);
        if !value.is_finite() {
            return Err(Error::NonFinite { term: name.to_string() });
        }
        if let Some(t) = part {
            if w != 0.0 {
                total = total.add(&t.reshape(&[]).mul_scalar(w));
            }
        }
        terms.push((name, value, w * value));
    }
    Ok(LossBreakdown { total, terms })
}
