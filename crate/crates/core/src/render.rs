//! Volume rendering of the decoded field, the sky branch, alpha blending and
//! super-resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{FieldDecoder, APPEARANCE_DIM};
use crate::error::{invalid, shape_err, Result};
use crate::geometry::{
    panorama_rays, satellite_rays_window, CropWindow, PanoramaCamera, RayBundle, SatelliteOrthoCamera, WorldFrame,
};
use crate::illumination::{null_style_of, StyleVector};
use crate::nn::{impl_params, upsample2x, Conv2d, ModulatedConv2d, LEAKY_SLOPE};
use crate::tensor::{SparseMap, SparsePair, Tensor};
use crate::triplane::{bundle_points, query_points, TriPlane};

/// Rendered field maps, each with a leading batch axis of one.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[1, 32, H, W]`.
    pub feature: Tensor,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub opacity: Tensor,
    /// `[1, 1, H, W]` in meters along the ray.
    pub depth: Tensor,
}

impl RenderOutput {
    /// First three feature channels, `[1, 3, H, W]`.
    pub fn raw_color(&self) -> Tensor {
        self.feature.narrow(1, 0, 3)
    }

    pub fn height(&self) -> usize {
        self.feature.dim(2)
    }

    pub fn width(&self) -> usize {
        self.feature.dim(3)
    }
}

/// Per-sample compositing weights for `sigmas, deltas: [rays, n]`:
/// `tau_i = T_i (1 - exp(-sigma_i delta_i))` with `T_i` the transmittance
/// accumulated over the samples in front of `i`.
pub fn composite_weights(sigmas: &Tensor, deltas: &Tensor) -> Result<Tensor> {
    if sigmas.shape() != deltas.shape() {
        return Err(shape_err(format!("sigmas {:?} vs deltas {:?}", sigmas.shape(), deltas.shape())));
    }
    if sigmas.data().iter().any(|&s| s.is_nan() || s < 0.0) {
        return Err(invalid("negative density"));
    }
    if deltas.data().iter().any(|&d| d.is_nan() || d <= 0.0) {
        return Err(invalid("non-positive sample interval"));
    }
    let optical = sigmas.mul(deltas);
    let transmittance = optical.cumsum_exclusive().neg().exp();
    let alpha = optical.neg().exp().rsub_scalar(1.0);
    Ok(transmittance.mul(&alpha))
}

/// Integrated quantities per ray.
#[derive(Debug, Clone)]
pub struct RayIntegrals {
    /// `[rays, C]`.
    pub feature: Tensor,
    /// `[rays, 1]`.
    pub opacity: Tensor,
    /// `[rays, 1]`.
    pub depth: Tensor,
}

/// Weighted sums of `phis: [rays, n, C]` and `distances: [rays, n]` under
/// `weights: [rays, n]`.
pub fn integrate_ray(weights: &Tensor, phis: &Tensor, distances: &Tensor) -> Result<RayIntegrals> {
    if weights.rank() != 2 || phis.rank() != 3 || weights.shape() != distances.shape() || phis.shape()[..2] != weights.shape()[..] {
        return Err(shape_err(format!(
            "weights {:?}, phis {:?}, distances {:?} do not line up",
            weights.shape(),
            phis.shape(),
            distances.shape()
        )));
    }
    let (r, n, c) = (phis.dim(0), phis.dim(1), phis.dim(2));
    let feature = phis.mul(&weights.reshape(&[r, n, 1])).sum_to(&[r, 1, c]).reshape(&[r, c]);
    let opacity = weights.sum_axis(1);
    let depth = weights.mul(distances).sum_axis(1);
    Ok(RayIntegrals { feature, opacity, depth })
}

/// Arranges per-ray rows `[rays, C]` into a `[1, C, H, W]` image.
fn rays_to_image(values: &Tensor, rays: &RayBundle) -> Tensor {
    let c = values.dim(1);
    let (h, w) = (rays.height, rays.width);
    let planar = values.t();
    let planar = if rays.is_dense_row_major() {
        planar
    } else {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); h * w];
        for (k, &(r, col)) in rays.pixel_index.iter().enumerate() {
            rows[r * w + col] = vec![(k, 1.0)];
        }
        planar.sparse_apply(&SparsePair::new(SparseMap::from_rows(rays.n_rays(), rows)))
    };
    planar.reshape(&[1, c, h, w])
}

/// Queries, decodes, composites and integrates every ray of the bundle.
pub fn render_ground(
    planes: &TriPlane,
    decoder: &FieldDecoder,
    w: &StyleVector,
    rays: &RayBundle,
    frame: &WorldFrame,
) -> Result<RenderOutput> {
    let (nr, ns) = (rays.n_rays(), rays.n_samples);
    if nr == 0 {
        return Err(invalid("empty ray bundle"));
    }
    let points = query_points(planes, &bundle_points(rays, frame));
    let field = decoder.decode_points(&points, w)?;
    let sigmas = field.sigma.reshape(&[nr, ns]);
    let deltas = Tensor::from_vec(rays.deltas.clone(), &[nr, ns]);
    let weights = composite_weights(&sigmas, &deltas)?;
    let dist = Tensor::from_vec(rays.sample_t.clone(), &[nr, ns]);
    let phis = field.phi.reshape(&[nr, ns, APPEARANCE_DIM]);
    let integ = integrate_ray(&weights, &phis, &dist)?;
    Ok(RenderOutput {
        feature: rays_to_image(&integ.feature, rays),
        opacity: rays_to_image(&integ.opacity, rays),
        depth: rays_to_image(&integ.depth, rays),
    })
}

/// Size knobs of the sky generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkySpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub style_dim: usize,
}

/// Style-modulated synthesis network producing the sky feature image from a
/// learned constant.
#[derive(Debug, Clone)]
pub struct SkyGenerator {
    pub constant: Tensor,
    pub blocks: Vec<ModulatedConv2d>,
    pub output: ModulatedConv2d,
}
impl_params!(SkyGenerator { constant, blocks, output });

impl SkyGenerator {
    pub fn new(rng: &mut impl Rng, spec: SkySpec) -> Result<Self> {
        let f = 1usize << spec.blocks;
        if spec.height % f != 0 || spec.width % f != 0 || spec.height == 0 {
            return Err(invalid(format!("sky size {}x{} not divisible by {f}", spec.height, spec.width)));
        }
        let (h0, w0, c) = (spec.height / f, spec.width / f, spec.channels);
        let constant = Tensor::param(crate::nn::normal_vec(rng, c * h0 * w0, 1.0), &[1, c, h0, w0]);
        let blocks = (0..spec.blocks).map(|_| ModulatedConv2d::new(rng, spec.style_dim, c, c, 3, true)).collect();
        let output = ModulatedConv2d::new(rng, spec.style_dim, c, APPEARANCE_DIM, 1, false);
        Ok(SkyGenerator { constant, blocks, output })
    }

    /// Replaces the output convolution weights with zeros.
    pub fn zero_output(mut self) -> Self {
        self.output.weight = Tensor::param(vec![0.0; self.output.weight.numel()], self.output.weight.shape());
        self.output.bias = Tensor::param(vec![0.0; self.output.bias.numel()], self.output.bias.shape());
        self
    }

    pub fn output_size(&self) -> (usize, usize) {
        let f = 1 << self.blocks.len();
        (self.constant.dim(2) * f, self.constant.dim(3) * f)
    }
}

/// `[1, 32, H, W]` sky feature driven only by the style vector.
pub fn render_sky(gen: &SkyGenerator, w: &StyleVector) -> Tensor {
    let x = gen
        .blocks
        .iter()
        .fold(gen.constant.clone(), |x, block| block.forward(&upsample2x(&x), &w.w).leaky_relu(LEAKY_SLOPE));
    gen.output.forward(&x, &w.w)
}

/// Alpha-composites the ground feature over the sky feature using the ground
/// opacity.
pub fn blend(ground: &RenderOutput, sky_feature: &Tensor) -> Result<Tensor> {
    if ground.feature.shape() != sky_feature.shape() {
        return Err(shape_err(format!("ground {:?} vs sky {:?}", ground.feature.shape(), sky_feature.shape())));
    }
    let o = &ground.opacity;
    Ok(o.mul(&ground.feature).add(&o.rsub_scalar(1.0).mul(sky_feature)))
}

/// Convolutional 2x upsampler from the 32-channel feature to RGB. The raw
/// color channels, bilinearly upsampled, are added to the head output.
#[derive(Debug, Clone)]
pub struct SuperResolver {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Conv2d,
}
impl_params!(SuperResolver { conv1, conv2, head });

impl SuperResolver {
    pub fn new(rng: &mut impl Rng, hidden: usize) -> Self {
        let mut head = Conv2d::new(rng, hidden, 3, 1, 1);
        head.weight = head.weight.mul_scalar(0.1).detach_requiring_grad();
        SuperResolver {
            conv1: Conv2d::new(rng, APPEARANCE_DIM, hidden, 3, 1),
            conv2: Conv2d::new(rng, hidden, hidden, 3, 1),
            head,
        }
    }

    pub fn zero_head(mut self) -> Self {
        self.head = Conv2d::zeros(self.head.in_channels(), 3, 1);
        self
    }
}

/// `[1, 32, H, W]` feature to a `[1, 3, 2H, 2W]` image.
pub fn super_resolve(sr: &SuperResolver, blended: &Tensor) -> Result<Tensor> {
    if blended.rank() != 4 || blended.dim(1) != APPEARANCE_DIM {
        return Err(shape_err(format!("super-resolution expects [1, 32, H, W], got {:?}", blended.shape())));
    }
    let h = sr.conv1.forward(blended).leaky_relu(LEAKY_SLOPE);
    let h = sr.conv2.forward(&upsample2x(&h)).leaky_relu(LEAKY_SLOPE);
    Ok(sr.head.forward(&h).add(&upsample2x(&blended.narrow(1, 0, 3))))
}

/// Ray sampling along street rays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreetSampling {
    pub n_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
}

/// Everything the street objectives need from one rendered panorama.
#[derive(Debug, Clone)]
pub struct StreetRender {
    /// `[1, 3, 2H, 2W]`.
    pub hi_res: Tensor,
    /// `[1, 3, H, W]`.
    pub raw_blend: Tensor,
    /// `[1, 32, H, W]`.
    pub blended: Tensor,
    pub ground: RenderOutput,
    /// `[1, 32, H, W]`, or `None` when the sky branch is disabled.
    pub sky: Option<Tensor>,
}

/// Ground rendering, sky synthesis, blending and super-resolution. With no
/// sky generator the ground feature is composited over black.
#[allow(clippy::too_many_arguments)]
pub fn render_street(
    planes: &TriPlane,
    decoder: &FieldDecoder,
    w: &StyleVector,
    sky_gen: Option<&SkyGenerator>,
    sr: &SuperResolver,
    cam: &PanoramaCamera,
    frame: &WorldFrame,
    sampling: StreetSampling,
) -> Result<StreetRender> {
    let rays = panorama_rays(cam, frame, sampling.n_samples, sampling.t_near, sampling.t_far)?;
    let ground = render_ground(planes, decoder, w, &rays, frame)?;
    let (blended, sky) = match sky_gen {
        Some(gen) => {
            if gen.output_size() != (cam.height, cam.width) {
                return Err(shape_err(format!("sky generator size {:?} vs camera {}x{}", gen.output_size(), cam.height, cam.width)));
            }
            let sky = render_sky(gen, w);
            (blend(&ground, &sky)?, Some(sky))
        }
        None => (ground.opacity.mul(&ground.feature), None),
    };
    let hi_res = super_resolve(sr, &blended)?;
    Ok(StreetRender { hi_res, raw_blend: blended.narrow(1, 0, 3), blended, ground, sky })
}

/// Satellite-view rendering of the field under the null style. `crop`
/// restricts rendering to a pixel window of `cam`.
pub fn render_satellite(
    planes: &TriPlane,
    decoder: &FieldDecoder,
    cam: &SatelliteOrthoCamera,
    frame: &WorldFrame,
    n_samples: usize,
    crop: Option<CropWindow>,
) -> Result<RenderOutput> {
    let rays = satellite_rays_window(cam, frame, n_samples, crop)?;
    render_ground(planes, decoder, &null_style_of(decoder.style_dim()), &rays, frame)
}
