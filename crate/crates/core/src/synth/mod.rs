//! Synthetic multi-view scenes: procedural ground truth, low- and
//! high-resolution renders, a coarse Gaussian reconstruction fitted at low
//! resolution and a sampled region of interest.

mod content;

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use content::{render_content, Ellipsoid, Hit, Pattern, Quad, SceneContent, Texture, SKY};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::masked_psnr;
use crate::pixel::back_project;
use crate::raster::{render, render_backward, RasterOptions, RenderUpstream, SplatParams};
use crate::roi::{generate_roi, RoISpec, RoiParams};
use crate::types::{Camera, Gaussian3D, GaussianSet, Image, ImageView, Mask, SourceTag, IDENTITY_QUAT};

/// Views `0..NUM_CONTEXT` are context views, the rest are targets.
pub const NUM_CONTEXT: usize = 2;
pub const NUM_VIEWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    /// Low-res pixel stride of the initial back-projection.
    pub stride: usize,
    pub opacity_init: f64,
    /// Relative standard deviation of the depth perturbation.
    pub depth_noise: f64,
    pub lr_mu: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 300,
            stride: 6,
            opacity_init: 0.7,
            depth_noise: 0.02,
            lr_mu: 2e-3,
            lr_opacity: 0.05,
            lr_scale: 0.01,
            lr_rotation: 0.01,
            lr_color: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub high_res: usize,
    /// Low-res side is `high_res / downscale`.
    pub downscale: usize,
    pub focal: f64,
    pub supersample: usize,
    pub radius: f64,
    pub context_angle: f64,
    pub target_angle: f64,
    pub crop_fraction: f64,
    pub min_input_psnr: f64,
    pub max_retries: usize,
    pub fit: FitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            high_res: 256,
            downscale: 4,
            focal: 256.0,
            supersample: 2,
            radius: 3.5,
            context_angle: 0.14,
            target_angle: 0.07,
            crop_fraction: 0.25,
            min_input_psnr: 20.0,
            max_retries: 8,
            fit: FitConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn low_res(&self) -> usize {
        self.high_res / self.downscale
    }

    pub fn validate(&self) -> Result<()> {
        if self.downscale == 0 || self.high_res % self.downscale != 0 || self.low_res() < 8 {
            return Err(Error::Config("high_res must be a multiple of downscale with low_res ≥ 8".into()));
        }
        if self.supersample == 0 || self.fit.stride == 0 || !(self.focal > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config("supersample, stride, focal and radius must be positive".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config("crop_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn roi_params(&self) -> RoiParams {
        RoiParams {
            crop_fraction: self.crop_fraction,
            ..RoiParams::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub content: SceneContent,
    /// High-res cameras, context views first.
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub low_res_cameras: Vec<Camera>,
    pub low_res_images: Vec<Image>,
    pub g_input: GaussianSet,
    pub roi: RoISpec,
    /// PSNR of `g_input` over the low-res context views.
    pub input_psnr: f64,
}

/// Cameras on a horizontal arc around the origin: context views at
/// `±context_angle`, targets spread between them with a small jitter.
pub fn arc_cameras(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Camera> {
    let a = cfg.context_angle;
    let t = cfg.target_angle;
    let base = rng.gen_range(-0.3..0.3);
    let height = rng.gen_range(-0.4..0.4);
    let target = Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.2);
    let angles = [-a, a, -t, 0.0, t].map(|x| x + base + if x.abs() < a { rng.gen_range(-0.01..0.01) } else { 0.0 });
    let up = Vector3::new(0.0, -1.0, 0.0);
    angles
        .iter()
        .map(|th| {
            let eye = Vector3::new(cfg.radius * th.sin(), height, -cfg.radius * th.cos());
            Camera::look_at(eye, target, up, cfg.focal, cfg.focal, cfg.high_res, cfg.high_res)
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, t: i32) {
        let (b1, b2) = (0.9, 0.999);
        let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
        for k in 0..p.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            p[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-15);
        }
    }
}

fn params_to_set(p: &SplatParams, tag: SourceTag) -> GaussianSet {
    let gs = (0..p.len())
        .map(|j| {
            let mut row = [0.0; 14];
            row[0..3].copy_from_slice(&p.mu[3 * j..3 * j + 3]);
            row[3] = p.opacity_logit[j];
            row[4..7].copy_from_slice(&p.log_scale[3 * j..3 * j + 3]);
            row[7..11].copy_from_slice(&p.rotation[4 * j..4 * j + 4]);
            row[11..14].copy_from_slice(&p.color[3 * j..3 * j + 3]);
            Gaussian3D::from_params(&row)
        })
        .collect();
    GaussianSet::with_tag(gs, tag)
}

/// Mean PSNR of `set` rendered into each view.
pub fn views_psnr(set: &GaussianSet, cameras: &[Camera], images: &[Image], opts: &RasterOptions) -> Result<f64> {
    let params = SplatParams::from_set(set);
    let mut s = 0.0;
    for (cam, img) in cameras.iter().zip(images) {
        let out = render(params.refs(), cam, opts, None, None)?;
        s += masked_psnr(&out.rgb, img, &Mask::full(cam.width, cam.height))?;
    }
    Ok(s / cameras.len() as f64)
}

/// Fits a coarse Gaussian set to the given views: back-projects every
/// `stride`-th pixel at its (noisy) depth, then runs Adam on the mean squared
/// image error using the rasterizer's backward pass. The result is rounded
/// to f32 precision and tagged background.
pub fn fit_input(
    cameras: &[Camera],
    images: &[Image],
    depths: &[Vec<f64>],
    cfg: &FitConfig,
    rng: &mut impl Rng,
) -> Result<GaussianSet> {
    let noise = Normal::new(0.0, cfg.depth_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut init = GaussianSet::new();
    for ((cam, img), depth) in cameras.iter().zip(images).zip(depths) {
        let s = cfg.stride;
        for y in (s / 2..cam.height).step_by(s) {
            for x in (s / 2..cam.width).step_by(s) {
                let z = depth[y * cam.width + x];
                if !(z > 0.0) {
                    continue;
                }
                let z = z * (1.0 + noise.sample(rng));
                let mu = back_project(cam, x as f64, y as f64, z);
                let sigma = 0.5 * s as f64 * z / cam.fx;
                let c = img.pixel(x, y);
                init.push(
                    Gaussian3D::new(
                        mu,
                        cfg.opacity_init,
                        Vector3::repeat(sigma),
                        IDENTITY_QUAT,
                        Vector3::new(c[0], c[1], c[2]),
                    ),
                    SourceTag::Background,
                );
            }
        }
    }
    let opts = RasterOptions::default();
    let mut p = SplatParams::from_set(&init);
    let n = p.len();
    let mut adam = [Adam::new(3 * n), Adam::new(n), Adam::new(3 * n), Adam::new(4 * n), Adam::new(3 * n)];
    for step in 0..cfg.steps {
        let mut g = [vec![0.0; 3 * n], vec![0.0; n], vec![0.0; 3 * n], vec![0.0; 4 * n], vec![0.0; 3 * n]];
        for (cam, img) in cameras.iter().zip(images) {
            let out = render(p.refs(), cam, &opts, None, None)?;
            let scale = 2.0 / cam.num_pixels() as f64;
            let up = RenderUpstream {
                d_rgb: out.rgb.data.iter().zip(&img.data).map(|(a, b)| scale * (a - b)).collect(),
                d_acc: None,
            };
            let adj = render_backward(p.refs(), cam, &opts, None, &up)?;
            for (acc, d) in g.iter_mut().zip([&adj.d_mu, &adj.d_opacity_logit, &adj.d_log_scale, &adj.d_rotation, &adj.d_color]) {
                acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
        let t = step as i32 + 1;
        adam[0].step(&mut p.mu, &g[0], cfg.lr_mu, t);
        adam[1].step(&mut p.opacity_logit, &g[1], cfg.lr_opacity, t);
        adam[2].step(&mut p.log_scale, &g[2], cfg.lr_scale, t);
        adam[3].step(&mut p.rotation, &g[3], cfg.lr_rotation, t);
        adam[4].step(&mut p.color, &g[4], cfg.lr_color, t);
        for q in p.rotation.chunks_mut(4) {
            let nrm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= nrm);
        }
        p.log_scale.iter_mut().for_each(|v| *v = v.clamp(-9.0, 1.0));
        p.opacity_logit.iter_mut().for_each(|v| *v = v.clamp(-9.0, 9.0));
    }
    let mut set = io::quantize_to_f32(&params_to_set(&p, SourceTag::Background));
    set.normalize_rotations();
    set.validate()?;
    Ok(set)
}

/// Independent seed number `i` derived from `seed`.
pub fn sub_seed(seed: u64, i: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng.gen()
}

fn roi_ok(roi: &RoISpec, min_area: usize) -> bool {
    roi.masks[..NUM_CONTEXT].iter().all(|m| m.count() >= min_area)
        && roi.masks[NUM_CONTEXT..].iter().any(|m| m.count() >= min_area)
}

/// Generates one scene. Attempts whose coarse set misses the PSNR bar or
/// whose RoI leaves a context view (or every target view) empty are redrawn.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let lr = cfg.low_res();
    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt as u64));
        let content = SceneContent::random(&mut rng);
        let cameras = arc_cameras(cfg, &mut rng);
        let mut images = Vec::with_capacity(NUM_VIEWS);
        let mut low_res_cameras = Vec::with_capacity(NUM_VIEWS);
        let mut low_res_images = Vec::with_capacity(NUM_VIEWS);
        let mut low_res_depths = Vec::with_capacity(NUM_VIEWS);
        for cam in &cameras {
            let (hr, _) = render_content(&content, cam, cfg.supersample);
            let mut lo = hr.downsample(cfg.downscale);
            lo.quantize_u8();
            let mut hr = hr;
            hr.quantize_u8();
            let lcam = cam.rescaled(1.0 / cfg.downscale as f64, lr, lr);
            let (_, ld) = render_content(&content, &lcam, 1);
            images.push(hr);
            low_res_images.push(lo);
            low_res_cameras.push(lcam);
            low_res_depths.push(ld);
        }
        let g_input = fit_input(
            &low_res_cameras[..NUM_CONTEXT],
            &low_res_images[..NUM_CONTEXT],
            &low_res_depths[..NUM_CONTEXT],
            &cfg.fit,
            &mut rng,
        )?;
        let input_psnr = views_psnr(
            &g_input,
            &low_res_cameras[..NUM_CONTEXT],
            &low_res_images[..NUM_CONTEXT],
            &RasterOptions::default(),
        )?;
        if input_psnr < cfg.min_input_psnr {
            log::debug!("scene {seed} attempt {attempt}: input PSNR {input_psnr:.2} below bar");
            continue;
        }
        let params = cfg.roi_params();
        let roi = match generate_roi(&g_input, &cameras, &params, rng.gen()) {
            Ok(r) if roi_ok(&r, params.min_area) => r,
            Ok(_) | Err(Error::DegenerateRoi { .. }) => {
                log::debug!("scene {seed} attempt {attempt}: degenerate RoI");
                continue;
            }
            Err(e) => return Err(e),
        };
        return Ok(SyntheticScene {
            seed,
            content,
            cameras,
            images,
            low_res_cameras,
            low_res_images,
            g_input,
            roi,
            input_psnr,
        });
    }
    Err(Error::DegenerateRoi {
        attempts: cfg.max_retries,
    })
}

/// `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_synthetic_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<SyntheticScene>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_scene(sub_seed(seed, 1 << 32 | i as u64), cfg))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    input_psnr: f64,
    content: SceneContent,
    cameras: Vec<Camera>,
    low_res_cameras: Vec<Camera>,
}

impl SyntheticScene {
    pub fn context_cameras(&self) -> &[Camera] {
        &self.cameras[..NUM_CONTEXT]
    }

    /// High-res views with empty masks.
    pub fn high_res_views(&self) -> Result<Vec<ImageView>> {
        self.cameras
            .iter()
            .zip(&self.images)
            .map(|(c, i)| ImageView::new(i.clone(), Mask::new(c.width, c.height), *c))
            .collect()
    }

    /// Ray-traced depth of the scene content in each low-res view.
    pub fn low_res_depths(&self) -> Vec<Vec<f64>> {
        self.low_res_cameras.iter().map(|c| render_content(&self.content, c, 1).1).collect()
    }

    /// Fits a fresh coarse set to the low-res context views.
    pub fn refit_input(&self, cfg: &FitConfig, seed: u64) -> Result<GaussianSet> {
        let depths = self.low_res_depths();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fit_input(
            &self.low_res_cameras[..NUM_CONTEXT],
            &self.low_res_images[..NUM_CONTEXT],
            &depths[..NUM_CONTEXT],
            cfg,
            &mut rng,
        )
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        NUM_CONTEXT..self.cameras.len()
    }

    /// Writes `scene.json`, `hr_{i}.png`, `lr_{i}.png`, `input.gs` and the RoI under `roi/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let file = SceneFile {
            seed: self.seed,
            input_psnr: self.input_psnr,
            content: self.content.clone(),
            cameras: self.cameras.clone(),
            low_res_cameras: self.low_res_cameras.clone(),
        };
        std::fs::write(dir.join("scene.json"), serde_json::to_vec_pretty(&file)?)?;
        for (i, img) in self.images.iter().enumerate() {
            io::save_png(img, dir.join(format!("hr_{i}.png")))?;
        }
        for (i, img) in self.low_res_images.iter().enumerate() {
            io::save_png(img, dir.join(format!("lr_{i}.png")))?;
        }
        io::save_gaussian_set(&self.g_input, dir.join("input.gs"))?;
        self.roi.save(dir.join("roi"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file: SceneFile = serde_json::from_slice(&std::fs::read(dir.join("scene.json"))?)?;
        let images = (0..file.cameras.len())
            .map(|i| io::load_png(dir.join(format!("hr_{i}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let low_res_images = (0..file.low_res_cameras.len())
            .map(|i| io::load_png(dir.join(format!("lr_{i}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let roi = RoISpec::load(dir.join("roi"))?;
        roi.validate(&file.cameras)?;
        Ok(SyntheticScene {
            seed: file.seed,
            content: file.content,
            cameras: file.cameras,
            images,
            low_res_cameras: file.low_res_cameras,
            low_res_images,
            g_input: io::load_gaussian_set(dir.join("input.gs"))?,
            roi,
            input_psnr: file.input_psnr,
        })
    }
}

/// Saves scenes as `dir/scene_{i:04}`.
pub fn save_dataset(scenes: &[SyntheticScene], dir: impl AsRef<Path>) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        s.save(dir.as_ref().join(format!("scene_{i:04}")))?;
    }
    Ok(())
}

/// Loads every `scene_*` directory under `dir` in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SyntheticScene>> {
    let mut names: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    names.sort();
    names.iter().map(SyntheticScene::load).collect()
}
