//! Initial features for the densifier: reconstruction renders and residuals,
//! per-Gaussian gradients, projected image features, ray-conditioned
//! modulation, the substitute multi-view encoder and the image pyramid.

use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{half, upsample_index, Conv3x3, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::pixel::{spawn_pixel_gaussians, ALPHA_INIT, SCALE_INIT};
use crate::raster::{render, render_backward, RasterOptions, RenderUpstream, SplatParams};
use crate::roi::RoiSplit;
use crate::types::{Camera, GaussianSet, Image, ImageView};

/// Î (3), D̂ (1), Â (1), E (3).
pub const RECON_CHANNELS: usize = 8;
/// Î (3), D̂ (1), Â (1).
pub const BG_CHANNELS: usize = 5;
pub const MV_CHANNELS: usize = 16;
pub const PARAM_DIMS: usize = 14;
pub const PYRAMID_WIDTHS: [usize; 3] = [64, 96, 128];

/// Renders of one view used as image features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconFeatures {
    pub recon: Image,
    pub recon_plus: Image,
    pub background: Image,
}

fn recon_channels(set: &GaussianSet, view: &ImageView, opts: &RasterOptions, with_residual: bool) -> Result<Image> {
    let out = render(SplatParams::from_set(set).refs(), &view.camera, opts, None, None)?;
    let n = view.camera.num_pixels();
    let c = if with_residual { RECON_CHANNELS } else { BG_CHANNELS };
    let mut data = Vec::with_capacity(n * c);
    for p in 0..n {
        let rgb = &out.rgb.data[3 * p..3 * p + 3];
        data.extend_from_slice(rgb);
        data.push(out.median_depth[p]);
        data.push(out.acc_opacity[p]);
        if with_residual {
            let gt = &view.rgb.data[3 * p..3 * p + 3];
            data.extend((0..3).map(|k| gt[k] - rgb[k]));
        }
    }
    Image::from_data(view.camera.width, view.camera.height, c, data)
}

/// `(Î, D̂, Â, E = I − Î)` for the full and augmented sets and `(Î, D̂, Â)`
/// for the background, per view.
pub fn render_recon_features(
    full: &GaussianSet,
    augmented: &GaussianSet,
    background: &GaussianSet,
    views: &[ImageView],
    opts: &RasterOptions,
) -> Result<Vec<ReconFeatures>> {
    views
        .iter()
        .map(|v| {
            Ok(ReconFeatures {
                recon: recon_channels(full, v, opts, true)?,
                recon_plus: recon_channels(augmented, v, opts, true)?,
                background: recon_channels(background, v, opts, false)?,
            })
        })
        .collect()
}

/// Gradient of `Σ_i ‖I_i − Î_i‖²` with respect to every Gaussian, in the
/// 14-value parameter order.
pub fn compute_gradient_features(set: &GaussianSet, views: &[ImageView], opts: &RasterOptions) -> Result<Vec<[f64; 14]>> {
    let params = SplatParams::from_set(set);
    let mut rows = vec![[0.0; 14]; set.len()];
    for v in views {
        let out = render(params.refs(), &v.camera, opts, None, None)?;
        let up = RenderUpstream {
            d_rgb: out.rgb.data.iter().zip(&v.rgb.data).map(|(p, g)| -2.0 * (g - p)).collect(),
            d_acc: None,
        };
        let adj = render_backward(params.refs(), &v.camera, opts, None, &up)?;
        for (j, r) in rows.iter_mut().enumerate() {
            for (a, b) in r.iter_mut().zip(adj.row(j)) {
                *a += b;
            }
        }
    }
    Ok(rows)
}

/// `sign(x)·ln(1 + |x|)`, compressing gradient magnitudes.
pub fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Plücker coordinates `(d, o × d)` of the ray through pixel `(x, y)`.
pub fn plucker(camera: &Camera, x: f64, y: f64) -> [f64; 6] {
    let d = camera.ray_direction(x, y);
    let m = camera.origin().cross(&d);
    [d.x, d.y, d.z, m.x, m.y, m.z]
}

/// Plücker coordinates of every pixel as `h·w` rows.
pub fn plucker_map(camera: &Camera) -> Tensor {
    let mut t = Tensor::zeros(camera.num_pixels(), 6);
    for y in 0..camera.height {
        for x in 0..camera.width {
            t.row_mut(y * camera.width + x).copy_from_slice(&plucker(camera, x as f64, y as f64));
        }
    }
    t
}

/// Camera of a map produced by `level` stride-2 convolutions: output pixel
/// `u` is centered on input pixel `2u + 1`.
pub fn level_camera(camera: &Camera, level: usize) -> Camera {
    let mut c = camera.clone();
    for _ in 0..level {
        c.fx /= 2.0;
        c.fy /= 2.0;
        c.cx = (c.cx - 1.0) / 2.0;
        c.cy = (c.cy - 1.0) / 2.0;
        c.width = half(c.width);
        c.height = half(c.height);
    }
    c
}

/// Pixel positions of `centers` in `camera` and whether each lands inside
/// the frame in front of the camera.
pub fn projection_positions(camera: &Camera, centers: &[Vector3<f64>]) -> (Tensor, Vec<bool>) {
    let mut pos = Tensor::zeros(centers.len(), 2);
    let mut valid = Vec::with_capacity(centers.len());
    let (wmax, hmax) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    for (i, c) in centers.iter().enumerate() {
        let p = camera.project(c);
        let ok = !p.behind && p.x >= 0.0 && p.x <= wmax && p.y >= 0.0 && p.y <= hmax;
        if ok {
            pos.row_mut(i).copy_from_slice(&[p.x, p.y]);
        }
        valid.push(ok);
    }
    (pos, valid)
}

/// Bilinearly sampled features of `map` at the projected centers plus a
/// trailing validity column; invalid projections give an all-zero row.
pub fn sample_projection_features(g: &mut Graph, map: Var, camera: &Camera, centers: &[Vector3<f64>]) -> Var {
    let (pos, valid) = projection_positions(camera, centers);
    let bit = Tensor::from_vec(centers.len(), 1, valid.iter().map(|v| *v as u8 as f64).collect());
    let pos = g.constant(pos);
    let s = g.bilinear_sample(map, pos, camera.height, camera.width, Rc::new(valid));
    let bit = g.constant(bit);
    g.concat_cols(&[s, bit])
}

/// Substitute multi-view encoder: three stride-2 convolutions whose outputs
/// are upsampled to full resolution, summed and projected.
#[derive(Debug, Clone, Copy)]
pub struct MvEncoder {
    pub convs: [Conv3x3; 3],
    pub proj: Linear,
}

impl MvEncoder {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        MvEncoder {
            convs: [
                Conv3x3::new(store, &format!("{name}.c0"), 3, MV_CHANNELS, 2, rng),
                Conv3x3::new(store, &format!("{name}.c1"), MV_CHANNELS, MV_CHANNELS, 2, rng),
                Conv3x3::new(store, &format!("{name}.c2"), MV_CHANNELS, MV_CHANNELS, 2, rng),
            ],
            proj: Linear::new(store, &format!("{name}.proj"), MV_CHANNELS, MV_CHANNELS, rng),
        }
    }

    /// `image` is `h·w`×3; returns `h·w`×16.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, h: usize, w: usize) -> Var {
        let mut x = image;
        let (mut ch, mut cw) = (h, w);
        let mut sum: Option<Var> = None;
        for (s, conv) in self.convs.iter().enumerate() {
            let (y, ho, wo) = conv.forward(g, store, x, ch, cw);
            let y = g.gelu(y);
            let up = g.gather_rows(y, upsample_index(ho, wo, h, w, 1 << (s + 1)));
            sum = Some(match sum {
                Some(a) => g.add(a, up),
                None => up,
            });
            x = y;
            ch = ho;
            cw = wo;
        }
        self.proj.forward(g, store, sum.expect("three stages"))
    }
}

/// Per-pixel adaptive layer norm conditioned on Plücker ray coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RayModulation {
    pub mlp: Mlp,
    pub width: usize,
}

impl RayModulation {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        RayModulation {
            mlp: Mlp::zero_out(store, name, 6, 32, 2 * width, rng),
            width,
        }
    }

    /// `γ ⊙ LN(x) + β` with `(γ − 1, β)` predicted per pixel from its ray.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, rays: Var) -> Var {
        let n = g.layer_norm(x);
        let gb = self.mlp.forward(g, store, rays);
        let gamma = g.slice_cols(gb, 0, self.width);
        let gamma = g.add_scalar(gamma, 1.0);
        let beta = g.slice_cols(gb, self.width, self.width);
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}

/// One pyramid level: features as `height·width` rows and the matching camera.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub map: Var,
    pub camera: Camera,
}

/// Full-resolution 1×1 projection followed by two stride-2 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct ImagePyramid {
    pub level0: Linear,
    pub down1: Conv3x3,
    pub down2: Conv3x3,
}

impl ImagePyramid {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, rng: &mut impl Rng) -> Self {
        let [w0, w1, w2] = PYRAMID_WIDTHS;
        ImagePyramid {
            level0: Linear::new(store, &format!("{name}.l0"), cin, w0, rng),
            down1: Conv3x3::new(store, &format!("{name}.l1"), w0, w1, 2, rng),
            down2: Conv3x3::new(store, &format!("{name}.l2"), w1, w2, 2, rng),
        }
    }

    /// Levels at scales 1, 1/2 and 1/4.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, camera: &Camera) -> [PyramidLevel; 3] {
        let (h, w) = (camera.height, camera.width);
        let l0 = self.level0.forward(g, store, x);
        let a0 = g.gelu(l0);
        let (l1, h1, w1) = self.down1.forward(g, store, a0, h, w);
        let a1 = g.gelu(l1);
        let (l2, h2, w2) = self.down2.forward(g, store, a1, h1, w1);
        let c1 = level_camera(camera, 1);
        let c2 = level_camera(camera, 2);
        debug_assert_eq!((c1.height, c1.width, c2.height, c2.width), (h1, w1, h2, w2));
        [
            PyramidLevel {
                map: l0,
                camera: camera.clone(),
            },
            PyramidLevel { map: l1, camera: c1 },
            PyramidLevel { map: l2, camera: c2 },
        ]
    }
}

/// Non-learned inputs of one context view.
#[derive(Debug, Clone)]
pub struct ContextInput {
    pub camera: Camera,
    pub image: Tensor,
    /// Reconstruction channels (`H^recon`, `H^recon+`, `H^bg_recon`), `h·w` rows.
    pub recon: Tensor,
    pub rays: Tensor,
}

/// Everything the densifier consumes for one RoI.
#[derive(Debug, Clone)]
pub struct DensifierInput {
    /// RoI Gaussians followed by pixel-spawned Gaussians.
    pub tokens: GaussianSet,
    pub num_roi: usize,
    pub background: GaussianSet,
    /// Per token: parameters, signed-log gradients and augmented gradients (42 columns).
    pub gaussian_fixed: Tensor,
    pub views: Vec<ContextInput>,
}

impl DensifierInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_pixel(&self, j: usize) -> bool {
        j >= self.num_roi
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.tokens.gaussians().iter().map(|g| g.mu).collect()
    }
}

fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(img.num_pixels(), img.channels, img.data.clone())
}

fn concat_channels(parts: &[&Image]) -> Tensor {
    let n = parts[0].num_pixels();
    let c: usize = parts.iter().map(|p| p.channels).sum();
    let mut t = Tensor::zeros(n, c);
    for p in 0..n {
        let row = t.row_mut(p);
        let mut o = 0;
        for img in parts {
            row[o..o + img.channels].copy_from_slice(&img.data[p * img.channels..(p + 1) * img.channels]);
            o += img.channels;
        }
    }
    t
}

/// Spawns pixel Gaussians in the masked pixels of `views` (high-res context
/// crops) and assembles every fixed feature. `split` partitions `g_input`.
pub fn prepare_input(
    g_input: &GaussianSet,
    split: &RoiSplit,
    views: &[ImageView],
    opts: &RasterOptions,
) -> Result<DensifierInput> {
    if views.is_empty() {
        return Err(Error::Config("densifier needs at least one context view".into()));
    }
    let params = SplatParams::from_set(g_input);
    let depths = views
        .iter()
        .map(|v| Ok(render(params.refs(), &v.camera, opts, None, None)?.median_depth))
        .collect::<Result<Vec<_>>>()?;
    let spawn = spawn_pixel_gaussians(views, &depths, ALPHA_INIT, SCALE_INIT)?;
    let augmented = GaussianSet::merge(g_input, &spawn.set);
    let recon = render_recon_features(g_input, &augmented, &split.bg, views, opts)?;
    let grad = compute_gradient_features(g_input, views, opts)?;
    let grad_plus = compute_gradient_features(&augmented, views, opts)?;

    let mut tokens = split.roi.clone();
    tokens.extend(&spawn.set);
    let num_roi = split.roi.len();
    let mut fixed = Tensor::zeros(tokens.len(), 3 * PARAM_DIMS);
    for j in 0..tokens.len() {
        let row = fixed.row_mut(j);
        row[..PARAM_DIMS].copy_from_slice(&tokens.gaussians()[j].to_params());
        let src = if j < num_roi { split.roi_indices[j] } else { g_input.len() + (j - num_roi) };
        if j < num_roi {
            for k in 0..PARAM_DIMS {
                row[PARAM_DIMS + k] = signed_log1p(grad[src][k]);
            }
        }
        for k in 0..PARAM_DIMS {
            row[2 * PARAM_DIMS + k] = signed_log1p(grad_plus[src][k]);
        }
    }
    let views = views
        .iter()
        .zip(&recon)
        .map(|(v, r)| ContextInput {
            camera: v.camera.clone(),
            image: image_tensor(&v.rgb),
            recon: concat_channels(&[&r.recon, &r.recon_plus, &r.background]),
            rays: plucker_map(&v.camera),
        })
        .collect();
    Ok(DensifierInput {
        tokens,
        num_roi,
        background: split.bg.clone(),
        gaussian_fixed: fixed,
        views,
    })
}
