//! Differentiable tile-based Gaussian splatting on the CPU.
//!
//! Splats are composited front to back in strictly increasing center depth
//! (ties by ascending Gaussian index). Each 16×16 tile composites the
//! splats whose 3σ box overlaps it. The backward pass recomputes the forward
//! state tile by tile and reduces per-tile partial gradients in tile order,
//! so results do not depend on the thread count.

mod preprocess;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Camera, GaussianSet, Image, Mask};
use preprocess::{project, project_backward, ParamGrad, Projected, SplatGrad};

pub const TILE_SIZE: usize = 16;
/// 2D dilation added to every projected covariance when anti-aliasing is on, in px².
pub const AA_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops before transmittance would drop below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub(crate) const SIGMA_EXTENT: f64 = 3.0;
const MAX_POWER: f64 = 0.5 * SIGMA_EXTENT * SIGMA_EXTENT;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    pub aa_enabled: bool,
    /// Median depth is taken where transmittance first drops below this.
    pub depth_threshold: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            aa_enabled: true,
            depth_threshold: 0.5,
        }
    }
}

/// Structure-of-arrays view of Gaussian parameters, in the canonical layout
/// (`mu` 3, `opacity_logit` 1, `log_scale` 3, `rotation` 4, `color` 3 per element).
#[derive(Debug, Clone, Copy)]
pub struct SplatRefs<'a> {
    pub mu: &'a [f64],
    pub opacity_logit: &'a [f64],
    pub log_scale: &'a [f64],
    pub rotation: &'a [f64],
    pub color: &'a [f64],
}

impl SplatRefs<'_> {
    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.mu.len() != 3 * n
            || self.log_scale.len() != 3 * n
            || self.rotation.len() != 4 * n
            || self.color.len() != 3 * n
        {
            return Err(Error::shape("inconsistent splat parameter lengths"));
        }
        for j in 0..n {
            let finite = self.mu[3 * j..3 * j + 3].iter().all(|v| v.is_finite())
                && self.opacity_logit[j].is_finite()
                && self.log_scale[3 * j..3 * j + 3].iter().all(|v| v.is_finite() && v.exp().is_finite())
                && self.rotation[4 * j..4 * j + 4].iter().all(|v| v.is_finite())
                && self.rotation[4 * j..4 * j + 4].iter().any(|v| *v != 0.0)
                && self.color[3 * j..3 * j + 3].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(j, "non-finite gaussian parameters"));
            }
        }
        Ok(())
    }
}

/// Owned parameter arrays; see [`SplatRefs`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatParams {
    pub mu: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub rotation: Vec<f64>,
    pub color: Vec<f64>,
}

impl SplatParams {
    pub fn from_set(set: &GaussianSet) -> Self {
        let n = set.len();
        let mut p = SplatParams {
            mu: Vec::with_capacity(3 * n),
            opacity_logit: Vec::with_capacity(n),
            log_scale: Vec::with_capacity(3 * n),
            rotation: Vec::with_capacity(4 * n),
            color: Vec::with_capacity(3 * n),
        };
        for g in set.gaussians() {
            p.mu.extend_from_slice(g.mu.as_slice());
            p.opacity_logit.push(g.opacity_logit);
            p.log_scale.extend_from_slice(g.log_scale.as_slice());
            p.rotation.extend_from_slice(&g.rotation);
            p.color.extend_from_slice(g.color.as_slice());
        }
        p
    }

    pub fn refs(&self) -> SplatRefs<'_> {
        SplatRefs {
            mu: &self.mu,
            opacity_logit: &self.opacity_logit,
            log_scale: &self.log_scale,
            rotation: &self.rotation,
            color: &self.color,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Row-major, 0 where transmittance never fell below the threshold.
    pub median_depth: Vec<f64>,
    pub acc_opacity: Vec<f64>,
    /// Σ over pixels (of the contribution region) of each Gaussian's blending weight.
    pub per_gaussian_contrib: Vec<f64>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn depth_image(&self) -> Image {
        Image::from_data(self.rgb.width, self.rgb.height, 1, self.median_depth.clone()).expect("depth shape")
    }

    pub fn acc_image(&self) -> Image {
        Image::from_data(self.rgb.width, self.rgb.height, 1, self.acc_opacity.clone()).expect("acc shape")
    }
}

/// Loss gradients with respect to the rendered channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderUpstream {
    /// `H·W·3`, interleaved like [`Image`].
    pub d_rgb: Vec<f64>,
    /// Optional `H·W`.
    pub d_acc: Option<Vec<f64>>,
}

impl RenderUpstream {
    pub fn zeros(camera: &Camera) -> Self {
        RenderUpstream {
            d_rgb: vec![0.0; camera.num_pixels() * 3],
            d_acc: None,
        }
    }
}

/// Per-Gaussian parameter gradients, laid out like [`SplatParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAdjoint {
    pub d_mu: Vec<f64>,
    pub d_opacity_logit: Vec<f64>,
    pub d_log_scale: Vec<f64>,
    pub d_rotation: Vec<f64>,
    pub d_color: Vec<f64>,
    /// Present for masked renders: sensitivity of the loss to each existence value.
    pub d_mask: Option<Vec<f64>>,
}

impl RenderAdjoint {
    fn zeros(n: usize, masked: bool) -> Self {
        RenderAdjoint {
            d_mu: vec![0.0; 3 * n],
            d_opacity_logit: vec![0.0; n],
            d_log_scale: vec![0.0; 3 * n],
            d_rotation: vec![0.0; 4 * n],
            d_color: vec![0.0; 3 * n],
            d_mask: masked.then(|| vec![0.0; n]),
        }
    }

    /// Gradient of element `j` in the canonical 14-value order.
    pub fn row(&self, j: usize) -> [f64; 14] {
        let mut r = [0.0; 14];
        r[0..3].copy_from_slice(&self.d_mu[3 * j..3 * j + 3]);
        r[3] = self.d_opacity_logit[j];
        r[4..7].copy_from_slice(&self.d_log_scale[3 * j..3 * j + 3]);
        r[7..11].copy_from_slice(&self.d_rotation[4 * j..4 * j + 4]);
        r[11..14].copy_from_slice(&self.d_color[3 * j..3 * j + 3]);
        r
    }
}

/// Applies the resolution-aware dilation `Σ' = Σ + δI` and rescales the
/// opacity by `sqrt(det Σ / det Σ')` so the splat's integrated mass is kept.
/// `cov2d` is `(a, b, c)` for `[[a, b], [b, c]]`.
pub fn apply_aa_dilation(cov2d: [f64; 3], opacity: f64, delta: f64) -> ([f64; 3], f64) {
    if delta == 0.0 {
        return (cov2d, opacity);
    }
    let [a, b, c] = cov2d;
    let det = a * c - b * b;
    let det_d = (a + delta) * (c + delta) - b * b;
    ([a + delta, b, c + delta], opacity * (det / det_d).max(0.0).sqrt())
}

struct Binned {
    splats: Vec<Option<Projected>>,
    /// Per tile: Gaussian indices in compositing order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn bin(p: &SplatRefs, cam: &Camera, aa: bool) -> Binned {
    let n = p.len();
    let splats: Vec<Option<Projected>> = (0..n)
        .into_par_iter()
        .map(|j| project(p, j, cam, aa).map(|s| s.splat))
        .collect();
    let mut order: Vec<u32> = (0..n as u32).filter(|&j| splats[j as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().unwrap().depth;
        let db = splats[b as usize].as_ref().unwrap().depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &j in &order {
        let s = splats[j as usize].as_ref().unwrap();
        let x0 = (s.mean[0] - s.radius).floor();
        let x1 = (s.mean[0] + s.radius).ceil();
        let y0 = (s.mean[1] - s.radius).floor();
        let y1 = (s.mean[1] + s.radius).ceil();
        if x1 < 0.0 || y1 < 0.0 || x0 > (cam.width - 1) as f64 || y0 > (cam.height - 1) as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0) as usize) / TILE_SIZE;
        let tx1 = (x1.min((cam.width - 1) as f64) as usize) / TILE_SIZE;
        let ty0 = (y0.max(0.0) as usize) / TILE_SIZE;
        let ty1 = (y1.min((cam.height - 1) as f64) as usize) / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(j);
            }
        }
    }
    Binned { splats, tiles, tiles_x }
}

#[derive(Clone, Copy)]
struct TileSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    depth: f64,
    color: [f64; 3],
    active: bool,
}

fn tile_splats(b: &Binned, t: usize, existence: Option<&[bool]>) -> Vec<TileSplat> {
    b.tiles[t]
        .iter()
        .map(|&j| {
            let s = b.splats[j as usize].as_ref().unwrap();
            TileSplat {
                mean: s.mean,
                conic: s.conic,
                opacity: s.opacity,
                depth: s.depth,
                color: s.color,
                active: existence.map_or(true, |e| e[j as usize]),
            }
        })
        .collect()
}

fn tile_bounds(t: usize, tiles_x: usize, cam: &Camera) -> (usize, usize, usize, usize) {
    let tx = t % tiles_x;
    let ty = t / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height))
}

#[inline]
fn splat_alpha(s: &TileSplat, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > 0.0 || power < -MAX_POWER {
        return None;
    }
    let g = power.exp();
    Some((s.opacity * g, g, dx, dy))
}

struct TileForward {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    acc: Vec<f64>,
    contrib: Vec<f64>,
}

/// Renders Gaussians given as parameter arrays.
///
/// `existence`, when present, disables Gaussians whose entry is false.
/// `contrib_region`, when present, restricts `per_gaussian_contrib` to the
/// set pixels.
pub fn render(
    params: SplatRefs,
    camera: &Camera,
    opts: &RasterOptions,
    existence: Option<&[bool]>,
    contrib_region: Option<&Mask>,
) -> Result<RenderOutput> {
    params.check()?;
    let n = params.len();
    if let Some(e) = existence {
        if e.len() != n {
            return Err(Error::shape(format!("existence has {} entries for {} gaussians", e.len(), n)));
        }
    }
    if let Some(m) = contrib_region {
        if m.width != camera.width || m.height != camera.height {
            return Err(Error::shape("contribution mask does not match camera resolution"));
        }
    }
    let binned = bin(&params, camera, opts.aa_enabled);
    let tiles: Vec<TileForward> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let splats = tile_splats(&binned, t, existence);
            let (x0, y0, x1, y1) = tile_bounds(t, binned.tiles_x, camera);
            let npx = (x1 - x0) * (y1 - y0);
            let mut out = TileForward {
                rgb: vec![0.0; npx * 3],
                depth: vec![0.0; npx],
                acc: vec![0.0; npx],
                contrib: vec![0.0; splats.len()],
            };
            let mut i = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let in_region = contrib_region.map_or(true, |m| m.get(x, y));
                    let mut tr = 1.0;
                    let mut c = [0.0; 3];
                    let mut depth = 0.0;
                    let mut depth_set = false;
                    for (k, s) in splats.iter().enumerate() {
                        if !s.active {
                            continue;
                        }
                        let Some((a, _, _, _)) = splat_alpha(s, x as f64, y as f64) else {
                            continue;
                        };
                        let a = a.min(ALPHA_MAX);
                        let next = tr * (1.0 - a);
                        if next < TRANSMITTANCE_MIN {
                            break;
                        }
                        let w = a * tr;
                        c[0] += s.color[0] * w;
                        c[1] += s.color[1] * w;
                        c[2] += s.color[2] * w;
                        if in_region {
                            out.contrib[k] += w;
                        }
                        if !depth_set && next < opts.depth_threshold {
                            depth = s.depth;
                            depth_set = true;
                        }
                        tr = next;
                    }
                    out.rgb[3 * i..3 * i + 3].copy_from_slice(&c);
                    out.depth[i] = depth;
                    out.acc[i] = 1.0 - tr;
                    i += 1;
                }
            }
            out
        })
        .collect();

    let mut rgb = Image::new(camera.width, camera.height, 3);
    let mut median_depth = vec![0.0; camera.num_pixels()];
    let mut acc_opacity = vec![0.0; camera.num_pixels()];
    let mut per_gaussian_contrib = vec![0.0; n];
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(t, binned.tiles_x, camera);
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * camera.width + x;
                rgb.data[3 * p..3 * p + 3].copy_from_slice(&tile.rgb[3 * i..3 * i + 3]);
                median_depth[p] = tile.depth[i];
                acc_opacity[p] = tile.acc[i];
                i += 1;
            }
        }
        for (k, &j) in binned.tiles[t].iter().enumerate() {
            per_gaussian_contrib[j as usize] += tile.contrib[k];
        }
    }
    Ok(RenderOutput {
        rgb,
        median_depth,
        acc_opacity,
        per_gaussian_contrib,
    })
}

struct TileBackward {
    grads: Vec<SplatGrad>,
    mask: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Visit {
    k: usize,
    a: f64,
    t: f64,
    g: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
    active: bool,
}

/// Analytic gradients of a loss through [`render`].
///
/// With `existence` present the adjoint also carries `d_mask`: for rendered
/// Gaussians the first-order removal sensitivity, for disabled ones the
/// first-order sensitivity of inserting them at their compositing slot.
pub fn render_backward(
    params: SplatRefs,
    camera: &Camera,
    opts: &RasterOptions,
    existence: Option<&[bool]>,
    upstream: &RenderUpstream,
) -> Result<RenderAdjoint> {
    params.check()?;
    let n = params.len();
    let npix = camera.num_pixels();
    if upstream.d_rgb.len() != npix * 3 {
        return Err(Error::shape(format!(
            "upstream rgb gradient has {} values, expected {}",
            upstream.d_rgb.len(),
            npix * 3
        )));
    }
    if let Some(d) = &upstream.d_acc {
        if d.len() != npix {
            return Err(Error::shape("upstream opacity gradient has wrong length"));
        }
    }
    if let Some(e) = existence {
        if e.len() != n {
            return Err(Error::shape(format!("existence has {} entries for {} gaussians", e.len(), n)));
        }
    }
    let masked = existence.is_some();
    let binned = bin(&params, camera, opts.aa_enabled);
    let tiles: Vec<TileBackward> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let splats = tile_splats(&binned, t, existence);
            let mut out = TileBackward {
                grads: vec![SplatGrad::default(); splats.len()],
                mask: vec![0.0; if masked { splats.len() } else { 0 }],
            };
            let (x0, y0, x1, y1) = tile_bounds(t, binned.tiles_x, camera);
            let mut visits: Vec<Visit> = Vec::with_capacity(splats.len());
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * camera.width + x;
                    let g_rgb = &upstream.d_rgb[3 * p..3 * p + 3];
                    let g_acc = upstream.d_acc.as_ref().map_or(0.0, |d| d[p]);
                    if g_rgb.iter().all(|v| *v == 0.0) && g_acc == 0.0 {
                        continue;
                    }
                    visits.clear();
                    let mut tr = 1.0;
                    for (k, s) in splats.iter().enumerate() {
                        let Some((a_raw, g, dx, dy)) = splat_alpha(s, x as f64, y as f64) else {
                            continue;
                        };
                        let clamped = a_raw > ALPHA_MAX;
                        let a = a_raw.min(ALPHA_MAX);
                        if !s.active {
                            if masked {
                                visits.push(Visit { k, a, t: tr, g, dx, dy, clamped, active: false });
                            }
                            continue;
                        }
                        let next = tr * (1.0 - a);
                        if next < TRANSMITTANCE_MIN {
                            break;
                        }
                        visits.push(Visit { k, a, t: tr, g, dx, dy, clamped, active: true });
                        tr = next;
                    }
                    let t_final = tr;
                    let mut behind = [0.0; 3];
                    for v in visits.iter().rev() {
                        let s = &splats[v.k];
                        let gc = g_rgb[0] * s.color[0] + g_rgb[1] * s.color[1] + g_rgb[2] * s.color[2];
                        let gb = g_rgb[0] * behind[0] + g_rgb[1] * behind[1] + g_rgb[2] * behind[2];
                        if !v.active {
                            out.mask[v.k] += v.a * (v.t * gc - gb) + g_acc * v.a * t_final;
                            continue;
                        }
                        let w = v.a * v.t;
                        let sg = &mut out.grads[v.k];
                        for ch in 0..3 {
                            sg.color[ch] += g_rgb[ch] * w;
                        }
                        let one_minus = 1.0 - v.a;
                        let d_a = v.t * gc - gb / one_minus + g_acc * t_final / one_minus;
                        if masked {
                            out.mask[v.k] += v.a * d_a;
                        }
                        for ch in 0..3 {
                            behind[ch] += s.color[ch] * w;
                        }
                        if v.clamped {
                            continue;
                        }
                        sg.opacity += d_a * v.g;
                        let d_power = d_a * v.a;
                        let [ca, cb, cc] = s.conic;
                        sg.mean[0] += d_power * (ca * v.dx + cb * v.dy);
                        sg.mean[1] += d_power * (cb * v.dx + cc * v.dy);
                        sg.conic[0] += d_power * (-0.5 * v.dx * v.dx);
                        sg.conic[1] += d_power * (-v.dx * v.dy);
                        sg.conic[2] += d_power * (-0.5 * v.dy * v.dy);
                    }
                }
            }
            out
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); n];
    let mut mask_grad = vec![0.0; if masked { n } else { 0 }];
    for (t, tile) in tiles.iter().enumerate() {
        for (k, &j) in binned.tiles[t].iter().enumerate() {
            let j = j as usize;
            let src = &tile.grads[k];
            let dst = &mut splat_grads[j];
            dst.mean[0] += src.mean[0];
            dst.mean[1] += src.mean[1];
            for c in 0..3 {
                dst.conic[c] += src.conic[c];
                dst.color[c] += src.color[c];
            }
            dst.opacity += src.opacity;
            if masked {
                mask_grad[j] += tile.mask[k];
            }
        }
    }

    let per_gaussian: Vec<ParamGrad> = (0..n)
        .into_par_iter()
        .map(|j| {
            if binned.splats[j].is_none() {
                return ParamGrad::default();
            }
            let st = project(&params, j, camera, opts.aa_enabled).expect("projection is deterministic");
            project_backward(&st, camera, opts.aa_enabled, &splat_grads[j])
        })
        .collect();

    let mut adj = RenderAdjoint::zeros(n, masked);
    for (j, g) in per_gaussian.iter().enumerate() {
        adj.d_mu[3 * j..3 * j + 3].copy_from_slice(&g.mu);
        adj.d_opacity_logit[j] = g.opacity_logit;
        adj.d_log_scale[3 * j..3 * j + 3].copy_from_slice(&g.log_scale);
        adj.d_rotation[4 * j..4 * j + 4].copy_from_slice(&g.rotation);
        adj.d_color[3 * j..3 * j + 3].copy_from_slice(&g.color);
    }
    if masked {
        adj.d_mask = Some(mask_grad);
    }
    Ok(adj)
}

pub fn rasterize(set: &GaussianSet, camera: &Camera, opts: &RasterOptions) -> Result<RenderOutput> {
    render(SplatParams::from_set(set).refs(), camera, opts, None, None)
}

/// Renders only the Gaussians whose existence entry is set.
pub fn rasterize_masked(set: &GaussianSet, existence: &[bool], camera: &Camera, opts: &RasterOptions) -> Result<RenderOutput> {
    render(SplatParams::from_set(set).refs(), camera, opts, Some(existence), None)
}

pub fn rasterize_backward(
    set: &GaussianSet,
    camera: &Camera,
    opts: &RasterOptions,
    upstream: &RenderUpstream,
) -> Result<RenderAdjoint> {
    render_backward(SplatParams::from_set(set).refs(), camera, opts, None, upstream)
}

pub fn rasterize_masked_backward(
    set: &GaussianSet,
    existence: &[bool],
    camera: &Camera,
    opts: &RasterOptions,
    upstream: &RenderUpstream,
) -> Result<RenderAdjoint> {
    render_backward(SplatParams::from_set(set).refs(), camera, opts, Some(existence), upstream)
}
