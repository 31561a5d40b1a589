//! Neural network building blocks on top of the tensor engine.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{SparseMap, SparsePair, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Visits named trainable tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Params`] by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor)) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// He-normal initialized trainable tensor.
pub fn he_param(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt();
    Tensor::param(normal_vec(rng, shape.iter().product(), std), shape)
}

/// Affine layer `x W + b` over rows of `x: [n, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}
impl_params!(Linear { weight, bias });

impl Linear {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Linear { weight: he_param(rng, &[input, output], input), bias: Tensor::param(vec![0.0; output], &[output]) }
    }

    pub fn with_bias_init(rng: &mut impl Rng, input: usize, output: usize, bias: f64) -> Self {
        let mut l = Self::new(rng, input, output);
        l.bias = Tensor::param(vec![bias; output], &[output]);
        l
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::param(vec![0.0; input * output], &[input, output]), bias: Tensor::param(vec![0.0; output], &[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add(&self.bias)
    }
}

/// 2D convolution with square kernels over `[batch, channels, h, w]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}
impl_params!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: he_param(rng, &[cout, cin, k, k], cin * k * k),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            weight: Tensor::param(vec![0.0; cout * cin * k * k], &[cout, cin, k, k]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

type MapKey = (&'static str, [usize; 6]);

fn cached_map(key: MapKey, build: impl FnOnce() -> SparseMap) -> SparsePair {
    static CACHE: OnceLock<Mutex<HashMap<MapKey, SparsePair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&key) {
        return p.clone();
    }
    let pair = SparsePair::new(build());
    cache.lock().unwrap().insert(key, pair.clone());
    pair
}

pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// im2col as a sparse map from `h*w` pixels to `k*k*ho*wo` column entries,
/// kernel-offset major.
fn im2col_map(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> SparsePair {
    cached_map(("im2col", [h, w, k, stride, pad, 0]), || {
        let ho = conv_output_size(h, k, stride, pad);
        let wo = conv_output_size(w, k, stride, pad);
        let rows = (0..k * k).flat_map(move |ki| {
            let (dy, dx) = (ki / k, ki % k);
            (0..ho * wo).map(move |o| {
                let (oy, ox) = (o / wo, o % wo);
                let iy = (oy * stride + dy) as isize - pad as isize;
                let ix = (ox * stride + dx) as isize - pad as isize;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                inside.then(|| (iy as usize * w + ix as usize, 1.0))
            })
        });
        SparseMap::from_rows(h * w, rows)
    })
}

/// Zero-padded 2D convolution: `x [b, ci, h, w]`, `weight [co, ci, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.rank(), 4, "conv2d input must be [b, c, h, w]");
    let (b, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, wci, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
    assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
    let ho = conv_output_size(h, k, stride, pad);
    let wo = conv_output_size(w, k, stride, pad);
    let map = im2col_map(h, w, k, stride, pad);
    let cols = x
        .reshape(&[b * ci, h * w])
        .sparse_apply(&map)
        .reshape(&[b, ci * k * k, ho * wo])
        .permute(&[1, 0, 2])
        .reshape(&[ci * k * k, b * ho * wo]);
    let out = weight.reshape(&[co, ci * k * k]).matmul(&cols).reshape(&[co, b, ho, wo]).permute(&[1, 0, 2, 3]);
    match bias {
        Some(bias) => out.add(&bias.reshape(&[1, co, 1, 1])),
        None => out,
    }
}

/// Linear interpolation taps for resampling `n` samples to `m` with
/// half-pixel centers and edge clamping.
fn linear_taps(n: usize, m: usize) -> Vec<[(usize, f64); 2]> {
    (0..m)
        .map(|j| {
            let src = ((j as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

fn resize_map(h: usize, w: usize, h2: usize, w2: usize) -> SparsePair {
    cached_map(("resize", [h, w, h2, w2, 0, 0]), || {
        let ty = linear_taps(h, h2);
        let tx = linear_taps(w, w2);
        let rows = (0..h2 * w2).map(|o| {
            let (y, x) = (o / w2, o % w2);
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(iy, wy) in &ty[y] {
                for &(ix, wx) in &tx[x] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = iy * w + ix;
                    match taps.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
            }
            taps
        });
        SparseMap::from_rows(h * w, rows)
    })
}

fn avg_pool_map(h: usize, w: usize, f: usize) -> SparsePair {
    cached_map(("avgpool", [h, w, f, 0, 0, 0]), || {
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let rows = (0..ho * wo).map(move |o| {
            let (oy, ox) = (o / wo, o % wo);
            (0..f * f).map(move |k| ((oy * f + k / f) * w + ox * f + k % f, inv))
        });
        SparseMap::from_rows(h * w, rows)
    })
}

/// Bilinear resize of `x [b, c, h, w]` to `[b, c, h2, w2]`.
pub fn resize_bilinear(x: &Tensor, h2: usize, w2: usize) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (h2, w2) {
        return x.clone();
    }
    x.reshape(&[b * c, h * w]).sparse_apply(&resize_map(h, w, h2, w2)).reshape(&[b, c, h2, w2])
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    resize_bilinear(x, x.dim(2) * 2, x.dim(3) * 2)
}

/// Box-filter downsampling by an integer factor.
pub fn avg_pool(x: &Tensor, f: usize) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
    if f == 1 {
        return x.clone();
    }
    x.reshape(&[b * c, h * w]).sparse_apply(&avg_pool_map(h, w, f)).reshape(&[b, c, h / f, w / f])
}

/// Style-modulated convolution: the kernel's input channels are scaled by an
/// affine projection of the style vector and, optionally, each output
/// channel is renormalized to unit norm.
#[derive(Debug, Clone)]
pub struct ModulatedConv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub affine: Linear,
    pub demodulate: bool,
}
impl_params!(ModulatedConv2d { weight, bias, affine });

impl ModulatedConv2d {
    pub fn new(rng: &mut impl Rng, style_dim: usize, cin: usize, cout: usize, k: usize, demodulate: bool) -> Self {
        let std = 1.0 / ((cin * k * k) as f64).sqrt();
        let affine = Linear {
            weight: Tensor::param(normal_vec(rng, style_dim * cin, 1.0 / (style_dim as f64).sqrt()), &[style_dim, cin]),
            bias: Tensor::param(vec![1.0; cin], &[cin]),
        };
        ModulatedConv2d {
            weight: Tensor::param(normal_vec(rng, cout * cin * k * k, std), &[cout, cin, k, k]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            affine,
            demodulate,
        }
    }

    /// `x [1, cin, h, w]`, `style [1, style_dim]`.
    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Tensor {
        let (co, ci, k) = (self.weight.dim(0), self.weight.dim(1), self.weight.dim(2));
        let s = self.affine.forward(style).reshape(&[1, ci, 1, 1]);
        let mut w = self.weight.mul(&s);
        if self.demodulate {
            let norm = w.square().sum_to(&[co, 1, 1, 1]).add_scalar(1e-8).sqrt();
            w = w.div(&norm);
        }
        conv2d(x, &w, Some(&self.bias), 1, k / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, k) = (w.dim(0), w.dim(2));
        let ho = conv_output_size(h, k, stride, pad);
        let wo = conv_output_size(wd, k, stride, pad);
        let mut out = vec![0.0; b * co * ho * wo];
        for n in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                        continue;
                                    }
                                    acc += x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + dy) * k + dx];
                                }
                            }
                        }
                        out[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 5 * 6, 1.0), &[2, 3, 5, 6]);
        let w = Tensor::from_vec(normal_vec(&mut rng, 4 * 3 * 3 * 3, 1.0), &[4, 3, 3, 3]);
        for stride in [1, 2] {
            let got = conv2d(&x, &w, None, stride, 1);
            let want = conv_reference(&x, &w, stride, 1);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 2 * 4 * 4, 1.0), &[2, 2, 4, 4]);
        let w = Tensor::from_vec(normal_vec(&mut rng, 3 * 2 * 9, 1.0), &[3, 2, 3, 3]);
        let b = Tensor::from_vec(normal_vec(&mut rng, 3, 1.0), &[3]);
        let err = max_gradient_error(|t| conv2d(&t[0], &t[1], Some(&t[2]), 2, 1).square().sum(), &[x, w, b], 1e-6);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn resize_preserves_constants_and_pool_averages() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.7);
        let up = upsample2x(&x);
        assert_eq!(up.shape(), &[1, 2, 6, 10]);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let y = Tensor::from_vec((0..16).map(f64::from).collect(), &[1, 1, 4, 4]);
        assert_eq!(avg_pool(&y, 2).data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn modulated_conv_gradient_wrt_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = ModulatedConv2d::new(&mut rng, 6, 2, 3, 3, true);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 16, 1.0), &[1, 2, 4, 4]);
        let s = Tensor::from_vec(normal_vec(&mut rng, 6, 1.0), &[1, 6]);
        let err = max_gradient_error(|t| layer.forward(&t[0], &t[1]).square().sum(), &[x, s], 1e-6);
        assert!(err < 1e-6, "{err}");
    }
}
