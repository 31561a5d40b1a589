//! Per-point decoder from tri-plane features to density and appearance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::illumination::StyleVector;
use crate::nn::{impl_params, Linear, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::triplane::PointFeatures;

pub const APPEARANCE_DIM: usize = 32;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Separate density and color heads; only the color head sees the style.
    #[default]
    Adaptive,
    /// One joint head emitting density and color, blind to the style.
    Vanilla,
}

/// Decoder parameters. The adaptive variant keeps the style out of the
/// density path by construction.
#[derive(Debug, Clone)]
pub struct FieldDecoder {
    pub variant: DecoderVariant,
    pub hidden: Linear,
    /// Adaptive: `h -> 1`. Vanilla: `h -> 1 + 32`.
    pub density: Linear,
    /// Adaptive only: `(h + style_dim) -> 32`.
    pub color: Option<Linear>,
}
impl_params!(FieldDecoder { hidden, density, color });

/// Decoded samples for a batch of points.
#[derive(Debug, Clone)]
pub struct FieldSamples {
    /// `[n, 1]`, non-negative.
    pub sigma: Tensor,
    /// `[n, 32]`; columns 0..3 are the raw color.
    pub phi: Tensor,
}

impl FieldDecoder {
    pub fn new(rng: &mut impl Rng, variant: DecoderVariant, feature_dim: usize, hidden: usize, style_dim: usize) -> Self {
        let first = Linear::new(rng, feature_dim, hidden);
        match variant {
            DecoderVariant::Adaptive => FieldDecoder {
                variant,
                hidden: first,
                density: Linear::new(rng, hidden, 1),
                color: Some(Linear::new(rng, hidden + style_dim, APPEARANCE_DIM)),
            },
            DecoderVariant::Vanilla => FieldDecoder {
                variant,
                hidden: first,
                density: Linear::new(rng, hidden, 1 + APPEARANCE_DIM),
                color: None,
            },
        }
    }

    /// Same layout as [`FieldDecoder::new`] with every head weight and bias
    /// set to zero.
    pub fn zero_heads(mut self) -> Self {
        self.density = Linear::zeros(self.density.input_dim(), self.density.output_dim());
        if let Some(c) = &mut self.color {
            *c = Linear::zeros(c.input_dim(), c.output_dim());
        }
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    /// Style width accepted by the color head (0 for the vanilla variant).
    pub fn style_dim(&self) -> usize {
        self.color.as_ref().map(|c| c.input_dim() - self.hidden_dim()).unwrap_or(0)
    }

    fn check(&self, features: &Tensor, w: &StyleVector) -> Result<()> {
        if features.rank() != 2 || features.dim(1) != self.feature_dim() {
            return Err(shape_err(format!("decoder expects [n, {}] features, got {:?}", self.feature_dim(), features.shape())));
        }
        if self.variant == DecoderVariant::Adaptive && (w.w.shape() != [1, self.style_dim()]) {
            return Err(shape_err(format!("decoder expects a [1, {}] style, got {:?}", self.style_dim(), w.w.shape())));
        }
        Ok(())
    }

    /// Decodes rows of `features: [n, feature_dim]` under one style vector.
    pub fn decode_batch(&self, features: &Tensor, w: &StyleVector) -> Result<FieldSamples> {
        self.check(features, w)?;
        let h = self.hidden.forward(features).leaky_relu(LEAKY_SLOPE);
        match (&self.variant, &self.color) {
            (DecoderVariant::Adaptive, Some(color)) => {
                let hd = self.hidden_dim();
                let sigma = self.density.forward(&h).softplus();
                let from_hidden = h.matmul(&color.weight.narrow(0, 0, hd));
                let from_style = w.w.matmul(&color.weight.narrow(0, hd, self.style_dim())).add(&color.bias);
                Ok(FieldSamples { sigma, phi: from_hidden.add(&from_style) })
            }
            _ => {
                let out = self.density.forward(&h);
                Ok(FieldSamples { sigma: out.narrow(1, 0, 1).softplus(), phi: out.narrow(1, 1, APPEARANCE_DIM) })
            }
        }
    }

    /// Single-point form of [`FieldDecoder::decode_batch`].
    pub fn decode(&self, f_tri: &Tensor, w: &StyleVector) -> Result<FieldSamples> {
        if f_tri.rank() != 1 {
            return Err(shape_err(format!("decode expects a vector, got {:?}", f_tri.shape())));
        }
        self.decode_batch(&f_tri.reshape(&[1, f_tri.numel()]), w)
    }

    /// Decodes queried points, zeroing the density of points outside the
    /// scene cube.
    pub fn decode_points(&self, points: &PointFeatures, w: &StyleVector) -> Result<FieldSamples> {
        let mut s = self.decode_batch(&points.features, w)?;
        if points.outside.iter().any(|&o| o) {
            let keep: Vec<f64> = points.outside.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect();
            s.sigma = s.sigma.mul(&Tensor::from_vec(keep, &[points.outside.len(), 1]));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_gradient_error;
    use crate::illumination::{null_style, Provenance};
    use crate::nn::normal_vec;
    use crate::nn::Params;
    use crate::tensor::ops::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn style(rng: &mut ChaCha8Rng, dim: usize) -> StyleVector {
        StyleVector { w: Tensor::from_vec(normal_vec(rng, dim, 1.0), &[1, dim]), provenance: Provenance::Real }
    }

    #[test]
    fn density_ignores_style_and_color_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Adaptive, 96, 64, 512);
        let f = Tensor::from_vec(normal_vec(&mut rng, 5 * 96, 1.0), &[5, 96]);
        let (w1, w2) = (style(&mut rng, 512), style(&mut rng, 512));
        let a = dec.decode_batch(&f, &w1).unwrap();
        let b = dec.decode_batch(&f, &w2).unwrap();
        assert_eq!(a.sigma.data(), b.sigma.data());
        assert_ne!(a.phi.data(), b.phi.data());
        assert!(a.sigma.data().iter().all(|&s| s >= 0.0));
        let names: Vec<String> = dec.named_params().into_iter().map(|p| p.0).collect();
        assert!(names.contains(&"density.weight".to_string()));
        assert_eq!(dec.density.input_dim(), 64);
    }

    #[test]
    fn vanilla_ignores_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Vanilla, 96, 64, 512);
        let f = Tensor::from_vec(normal_vec(&mut rng, 3 * 96, 1.0), &[3, 96]);
        let a = dec.decode_batch(&f, &style(&mut rng, 512)).unwrap();
        let b = dec.decode_batch(&f, &null_style()).unwrap();
        assert_eq!(a.sigma.data(), b.sigma.data());
        assert_eq!(a.phi.data(), b.phi.data());
        assert_eq!(a.phi.shape(), &[3, 32]);
    }

    #[test]
    fn zero_heads_give_softplus_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for variant in [DecoderVariant::Adaptive, DecoderVariant::Vanilla] {
            let dec = FieldDecoder::new(&mut rng, variant, 96, 64, 512).zero_heads();
            let f = Tensor::from_vec(normal_vec(&mut rng, 96, 1.0), &[96]);
            let s = dec.decode(&f, &style(&mut rng, 512)).unwrap();
            assert_eq!(s.sigma.item(), softplus(0.0));
            assert!(s.phi.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Adaptive, 96, 64, 512);
        assert!(dec.decode_batch(&Tensor::zeros(&[2, 95]), &null_style()).is_err());
        assert!(dec.decode_batch(&Tensor::zeros(&[2, 96]), &style(&mut rng, 100)).is_err());
    }

    #[test]
    fn batch_matches_loop_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Adaptive, 96, 64, 512);
        let w = style(&mut rng, 512);
        let n = 1000;
        let data = normal_vec(&mut rng, n * 96, 1.0);
        let batch = dec.decode_batch(&Tensor::from_vec(data.clone(), &[n, 96]), &w).unwrap();
        for i in (0..n).step_by(37) {
            let one = dec.decode(&Tensor::from_vec(data[i * 96..(i + 1) * 96].to_vec(), &[96]), &w).unwrap();
            assert_eq!(one.sigma.item(), batch.sigma.data()[i]);
            assert_eq!(one.phi.data()[..], batch.phi.data()[i * 32..(i + 1) * 32]);
        }
        let mut swapped = data[96..192].to_vec();
        swapped.extend_from_slice(&data[..96]);
        let p = dec.decode_batch(&Tensor::from_vec(swapped, &[2, 96]), &w).unwrap();
        assert_eq!(p.sigma.data()[0], batch.sigma.data()[1]);
        assert_eq!(p.sigma.data()[1], batch.sigma.data()[0]);
    }

    #[test]
    fn feature_and_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Adaptive, 6, 5, 4);
        let w = style(&mut rng, 4);
        let f = Tensor::from_vec(normal_vec(&mut rng, 2 * 6, 1.0), &[2, 6]);
        let probe = Tensor::from_vec(normal_vec(&mut rng, 33, 1.0), &[1, 33]);
        let err = max_gradient_error(
            |t| {
                let s = dec.decode_batch(&t[0], &w).unwrap();
                Tensor::concat(&[s.sigma, s.phi], 1).mul(&probe).sum()
            },
            &[f],
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
        let params = [dec.hidden.weight.detach(), dec.color.as_ref().unwrap().weight.detach(), w.w.detach()];
        let f = Tensor::from_vec(normal_vec(&mut rng, 2 * 6, 1.0), &[2, 6]);
        let err = max_gradient_error(
            |t| {
                let mut d = dec.clone();
                d.hidden.weight = t[0].clone();
                d.color.as_mut().unwrap().weight = t[1].clone();
                let sw = StyleVector { w: t[2].clone(), provenance: Provenance::Real };
                let s = d.decode_batch(&f, &sw).unwrap();
                s.sigma.sum().add(&s.phi.square().sum())
            },
            &params,
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn outside_points_have_zero_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dec = FieldDecoder::new(&mut rng, DecoderVariant::Adaptive, 6, 5, 4);
        let pts = PointFeatures { features: Tensor::from_vec(normal_vec(&mut rng, 12, 1.0), &[2, 6]), outside: vec![false, true] };
        let s = dec.decode_points(&pts, &style(&mut rng, 4)).unwrap();
        assert!(s.sigma.data()[0] > 0.0);
        assert_eq!(s.sigma.data()[1], 0.0);
    }
}
