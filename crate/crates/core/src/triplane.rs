//! Tri-plane scene representation, the satellite-conditioned generator that
//! produces it, and bilinear point queries.
//!
//! Plane `F_AB` is sampled with its column coordinate taken from axis `A`
//! and its row coordinate from axis `B`, with row 0 at `B = +1`. For the XY
//! plane this makes row 0 north and column 0 west, the same layout as the
//! satellite image the generator reads.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::geometry::{world_to_normalized, RayBundle, Vec3, WorldFrame};
use crate::nn::{impl_params, upsample2x, Conv2d, LEAKY_SLOPE};
use crate::tensor::{SparseMap, SparsePair, Tensor};

/// Three feature planes, each `[channels, res, res]`.
#[derive(Debug, Clone)]
pub struct TriPlane {
    pub xy: Tensor,
    pub zy: Tensor,
    pub xz: Tensor,
}

impl TriPlane {
    pub fn channels(&self) -> usize {
        self.xy.dim(0)
    }

    pub fn resolution(&self) -> usize {
        self.xy.dim(1)
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.channels()
    }

    /// Planes in canonical order XY, ZY, XZ.
    pub fn planes(&self) -> [&Tensor; 3] {
        [&self.xy, &self.zy, &self.xz]
    }

    /// Constant-valued planes (mostly for tests and fixtures).
    pub fn constant(channels: usize, res: usize, value: f64) -> Self {
        let p = Tensor::full(&[channels, res, res], value);
        TriPlane { xy: p.clone(), zy: p.clone(), xz: p }
    }

    pub fn all_finite(&self) -> bool {
        self.planes().iter().all(|p| p.all_finite())
    }
}

/// Splits `[3C, R, R]` (or `[1, 3C, R, R]`) into planes: channels `[0, C)`
/// become XY, `[C, 2C)` ZY and `[2C, 3C)` XZ.
pub fn split_planes(features: &Tensor) -> Result<TriPlane> {
    let f = match features.rank() {
        3 => features.clone(),
        4 if features.dim(0) == 1 => features.reshape(&features.shape()[1..]),
        _ => return Err(shape_err(format!("expected [3C, R, R] features, got {:?}", features.shape()))),
    };
    let total = f.dim(0);
    if total == 0 || total % 3 != 0 {
        return Err(shape_err(format!("channel count {total} is not divisible by 3")));
    }
    if f.dim(1) != f.dim(2) {
        return Err(shape_err(format!("planes must be square, got {}x{}", f.dim(1), f.dim(2))));
    }
    let c = total / 3;
    Ok(TriPlane { xy: f.narrow(0, 0, c), zy: f.narrow(0, c, c), xz: f.narrow(0, 2 * c, c) })
}

/// Queried features for a batch of points.
#[derive(Debug, Clone)]
pub struct PointFeatures {
    /// `[n_points, 3C]`, plane order XY ‖ ZY ‖ XZ.
    pub features: Tensor,
    /// Whether each point fell outside `[-1, 1]^3`.
    pub outside: Vec<bool>,
}

/// Continuous pixel coordinate of normalized coordinate `a` on an axis with
/// `res` texels whose centers sit at `(2i + 1) / res - 1`; clamped to the
/// edge texel centers.
fn texel_coord(a: f64, res: usize) -> f64 {
    (((a + 1.0) * res as f64 - 1.0) / 2.0).clamp(0.0, (res - 1) as f64)
}

fn bilinear_taps(col: f64, row: f64, res: usize) -> Vec<(usize, f64)> {
    let (c0, r0) = (col.floor() as usize, row.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(res - 1), (r0 + 1).min(res - 1));
    let (fc, fr) = (col - c0 as f64, row - r0 as f64);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (r, wr) in [(r0, 1.0 - fr), (r1, fr)] {
        for (c, wc) in [(c0, 1.0 - fc), (c1, fc)] {
            let w = wr * wc;
            if w == 0.0 {
                continue;
            }
            let idx = r * res + c;
            match taps.iter_mut().find(|t| t.0 == idx) {
                Some(t) => t.1 += w,
                None => taps.push((idx, w)),
            }
        }
    }
    taps
}

/// Bilinear sampling map for one plane with axes `(col_axis, row_axis)`.
fn plane_sampling_map(points: &[Vec3], res: usize, col_axis: usize, row_axis: usize) -> SparsePair {
    let rows = points.iter().map(|p| {
        let col = texel_coord(p[col_axis], res);
        let row = texel_coord(-p[row_axis], res);
        bilinear_taps(col, row, res)
    });
    SparsePair::new(SparseMap::from_rows(res * res, rows))
}

/// Axis pairs `(column axis, row axis)` for XY, ZY and XZ.
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (2, 1), (0, 2)];

/// Bilinearly samples each plane at the point's projection and concatenates
/// the three features. Points outside the cube use edge-clamped
/// coordinates and are flagged.
pub fn query_points(planes: &TriPlane, points: &[Vec3]) -> PointFeatures {
    let (c, res) = (planes.channels(), planes.resolution());
    let parts: Vec<Tensor> = planes
        .planes()
        .iter()
        .zip(PLANE_AXES)
        .map(|(plane, (ca, ra))| plane.reshape(&[c, res * res]).sparse_apply(&plane_sampling_map(points, res, ca, ra)))
        .collect();
    let features = Tensor::concat(&parts, 0).t();
    let outside = points.iter().map(|p| p.iter().any(|v| v.abs() > 1.0)).collect();
    PointFeatures { features, outside }
}

/// Normalized sample positions of every ray sample, ray-major.
pub fn bundle_points(rays: &RayBundle, frame: &WorldFrame) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(rays.n_rays() * rays.n_samples);
    for r in 0..rays.n_rays() {
        for i in 0..rays.n_samples {
            pts.push(world_to_normalized(rays.point(r, i), frame).coords);
        }
    }
    pts
}

/// Architecture knobs of the tri-plane generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriPlaneNetSpec {
    pub input_size: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

/// U-Net style encoder-decoder from a `3 x S x S` satellite image to
/// `3C x R x R` tri-plane features, with a linear 1x1 output head.
#[derive(Debug, Clone)]
pub struct TriPlaneNet {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    pub head: Conv2d,
    spec: TriPlaneNetSpec,
}
impl_params!(TriPlaneNet { stem, down, up, head });

impl TriPlaneNet {
    pub fn new(rng: &mut impl Rng, spec: TriPlaneNetSpec) -> Result<Self> {
        let s = spec.input_size;
        if spec.depth == 0 || s % (1 << spec.depth) != 0 {
            return Err(invalid(format!("input size {s} must be divisible by 2^{}", spec.depth)));
        }
        if spec.plane_res == 0 || s % spec.plane_res != 0 || !(s / spec.plane_res).is_power_of_two() {
            return Err(invalid(format!("plane resolution {} must be input size {s} / 2^j", spec.plane_res)));
        }
        let skip_levels = (s / spec.plane_res).trailing_zeros() as usize;
        if skip_levels > spec.depth {
            return Err(invalid("plane resolution coarser than the encoder bottleneck"));
        }
        let ch = |level: usize| spec.base_channels * (1usize << level.min(2));
        let stem = Conv2d::new(rng, 3, ch(0), 3, 1);
        let down = (1..=spec.depth).map(|l| Conv2d::new(rng, ch(l - 1), ch(l), 3, 2)).collect();
        // Decoder goes from the bottleneck up to the plane resolution.
        let up = (skip_levels..spec.depth).rev().map(|l| Conv2d::new(rng, ch(l + 1) + ch(l), ch(l), 3, 1)).collect();
        let mut head = Conv2d::new(rng, ch(skip_levels), 3 * spec.plane_channels, 1, 1);
        head.weight = head.weight.mul_scalar(0.5).detach_requiring_grad();
        Ok(TriPlaneNet { stem, down, up, head, spec })
    }

    pub fn spec(&self) -> &TriPlaneNetSpec {
        &self.spec
    }

    /// `image [3, S, S]` in `[0, 1]` to `[3C, R, R]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.spec.input_size;
        if image.shape() != [3, s, s] {
            return Err(shape_err(format!("satellite image must be [3, {s}, {s}], got {:?}", image.shape())));
        }
        let x = image.reshape(&[1, 3, s, s]).mul_scalar(2.0).add_scalar(-1.0);
        let mut skips = vec![self.stem.forward(&x).leaky_relu(LEAKY_SLOPE)];
        for conv in &self.down {
            let next = conv.forward(skips.last().unwrap()).leaky_relu(LEAKY_SLOPE);
            skips.push(next);
        }
        let mut h = skips.pop().unwrap();
        for conv in &self.up {
            let skip = skips.pop().unwrap();
            h = conv.forward(&Tensor::concat(&[upsample2x(&h), skip], 1)).leaky_relu(LEAKY_SLOPE);
        }
        let out = self.head.forward(&h);
        let r = self.spec.plane_res;
        Ok(out.reshape(&[3 * self.spec.plane_channels, r, r]))
    }
}

/// Runs the generator and splits its output into planes.
pub fn generate_triplane(net: &TriPlaneNet, sat_image: &Tensor) -> Result<TriPlane> {
    split_planes(&net.forward(sat_image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_gradient_error, numeric_gradient, relative_error};
    use crate::nn::{normal_vec, Params};
    use crate::tensor::grad;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> TriPlaneNetSpec {
        TriPlaneNetSpec { input_size: 8, plane_res: 4, plane_channels: 2, base_channels: 2, depth: 2 }
    }

    #[test]
    fn split_order_and_shapes() {
        let data: Vec<f64> = (0..96).flat_map(|c| std::iter::repeat(c as f64).take(16)).collect();
        let t = split_planes(&Tensor::from_vec(data, &[96, 4, 4])).unwrap();
        assert_eq!(t.xy.shape(), &[32, 4, 4]);
        assert_eq!(t.zy.shape(), &[32, 4, 4]);
        assert_eq!(t.xz.shape(), &[32, 4, 4]);
        for c in 0..32 {
            assert!(t.xy.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == c as f64));
            assert!(t.xz.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == (64 + c) as f64));
        }
        assert!(split_planes(&Tensor::zeros(&[95, 4, 4])).is_err());
    }

    #[test]
    fn constant_planes_give_constant_features() {
        let planes = TriPlane::constant(4, 5, 0.37);
        let pts = vec![[0.1, -0.9, 0.3], [2.0, 0.0, -5.0], [-1.0, 1.0, 1.0]];
        let q = query_points(&planes, &pts);
        assert_eq!(q.features.shape(), &[3, 12]);
        assert!(q.features.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        assert_eq!(q.outside, vec![false, true, false]);
    }

    fn indexed_planes(c: usize, res: usize) -> TriPlane {
        let mk = |off: f64| {
            Tensor::from_vec((0..c * res * res).map(|i| off + (i as f64 * 0.37).sin()).collect(), &[c, res, res])
        };
        TriPlane { xy: mk(0.0), zy: mk(10.0), xz: mk(20.0) }
    }

    #[test]
    fn texel_center_returns_texel() {
        let res = 4;
        let planes = indexed_planes(2, res);
        // Texel (row 1, col 2) center on XY: x = (2*2+1)/4 - 1, y = -((2*1+1)/4 - 1).
        let x = 5.0 / 4.0 - 1.0;
        let y = -(3.0 / 4.0 - 1.0);
        let q = query_points(&planes, &[[x, y, 0.0]]);
        for ch in 0..2 {
            let want = planes.xy.data()[ch * 16 + res + 2];
            assert!((q.features.data()[ch] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn midpoint_is_mean_of_neighbours() {
        let res = 4;
        let planes = indexed_planes(1, res);
        // Halfway between texel columns 1 and 2 of row 0 on XY.
        let x = 0.0;
        let y = -(1.0 / 4.0 - 1.0);
        let q = query_points(&planes, &[[x, y, 0.0]]);
        let want = 0.5 * (planes.xy.data()[1] + planes.xy.data()[2]);
        assert!((q.features.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let planes = indexed_planes(2, 3);
        let pts = vec![[0.13, -0.41, 0.77], [-0.9, 0.2, 0.05], [1.3, 0.0, -0.2]];
        let weights = Tensor::from_vec((0..18).map(|i| (i as f64 * 0.9).cos()).collect(), &[3, 6]);
        let f = |t: &[Tensor]| {
            let tp = TriPlane { xy: t[0].clone(), zy: t[1].clone(), xz: t[2].clone() };
            query_points(&tp, &pts).features.mul(&weights).sum()
        };
        let err = max_gradient_error(f, &[planes.xy.clone(), planes.zy.clone(), planes.xz.clone()], 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn generator_shapes_determinism_and_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = TriPlaneNet::new(&mut rng, small_spec()).unwrap();
        let img = Tensor::from_vec(normal_vec(&mut rng, 3 * 64, 0.3).iter().map(|v| v.abs().min(1.0)).collect(), &[3, 8, 8]);
        let a = generate_triplane(&net, &img).unwrap();
        let b = generate_triplane(&net, &img).unwrap();
        assert_eq!(a.xy.shape(), &[2, 4, 4]);
        assert_eq!(a.xy.data(), b.xy.data());
        assert!(a.all_finite());
        assert!(net.forward(&Tensor::zeros(&[3, 4, 4])).is_err());
        net.head = Conv2d::zeros(net.head.in_channels(), net.head.out_channels(), 1);
        let z = generate_triplane(&net, &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(z.planes().iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        assert!(net.param_count() > 0);
    }

    #[test]
    fn generator_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = TriPlaneNet::new(&mut rng, small_spec()).unwrap();
        let img = Tensor::from_vec(normal_vec(&mut rng, 3 * 64, 0.3), &[3, 8, 8]);
        let leaf = img.detach_requiring_grad();
        let g = grad(&net.forward(&leaf).unwrap().sum(), &[&leaf], false).remove(0);
        let numeric = numeric_gradient(|t| net.forward(&t[0]).unwrap().sum().item(), &[img], 0, 1e-6);
        let err = relative_error(g.data(), &numeric);
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn queried_features_stay_within_plane_range(x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5) {
            let planes = indexed_planes(2, 4);
            let q = query_points(&planes, &[[x, y, z]]);
            let d = q.features.data();
            for (k, plane) in planes.planes().iter().enumerate() {
                let lo = plane.data().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = plane.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for ch in 0..2 {
                    let v = d[k * 2 + ch];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn interpolation_is_linear_within_a_cell(alpha in 0.0f64..1.0) {
            let planes = indexed_planes(1, 4);
            // Both endpoints in the cell between texel columns 1 and 2.
            let (x1, x2, y, z) = (-0.2, 0.2, 0.1, 0.0);
            let q = |x: f64| query_points(&planes, &[[x, y, z]]).features.data()[0];
            let mixed = q(alpha * x1 + (1.0 - alpha) * x2);
            prop_assert!((mixed - (alpha * q(x1) + (1.0 - alpha) * q(x2))).abs() < 1e-12);
        }
    }
}
