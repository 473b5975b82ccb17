//! Operations shared by the CLI and the HTTP service.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splatlens::densifier::DensifierModel;
use splatlens::io;
use splatlens::metrics::{masked_psnr, masked_ssim};
use splatlens::pipeline::{densify_roi, prepare_roi, DensifyStatus};
use splatlens::raster::{render, RasterOptions, RenderOutput, SplatParams};
use splatlens::roi::{roi_from_rect, RoISpec, RoiParams};
use splatlens::synth::{SynthConfig, SyntheticScene, NUM_CONTEXT};
use splatlens::train::{evaluate_set, EvalMetrics};
use splatlens::{Camera, GaussianSet, Image, ImageView, Mask, Rect};

use crate::error::{ServiceError, ServiceResult};

/// A scene as the service sees it: high-res views, low-res cameras for
/// display, the coarse set and the RoI stored with the scene.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub views: Vec<ImageView>,
    pub low_res_cameras: Vec<Camera>,
    pub g_input: GaussianSet,
    pub roi: RoISpec,
}

impl LoadedScene {
    pub fn load(dir: &Path) -> ServiceResult<Self> {
        let scene = SyntheticScene::load(dir)?;
        let mut s = Self::from_synthetic(&scene)?;
        s.dir = Some(dir.to_path_buf());
        Ok(s)
    }

    pub fn from_synthetic(scene: &SyntheticScene) -> ServiceResult<Self> {
        Ok(LoadedScene {
            dir: None,
            seed: scene.seed,
            views: scene.high_res_views()?,
            low_res_cameras: scene.low_res_cameras.clone(),
            g_input: scene.g_input.clone(),
            roi: scene.roi.clone(),
        })
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera).collect()
    }

    /// High-res over low-res side length.
    pub fn downscale(&self) -> usize {
        match (self.views.first(), self.low_res_cameras.first()) {
            (Some(v), Some(l)) if l.width > 0 => (v.camera.width / l.width).max(1),
            _ => 1,
        }
    }
}

pub fn render_image(set: &GaussianSet, camera: &Camera) -> ServiceResult<Image> {
    Ok(render_output(set, camera)?.rgb)
}

pub fn render_output(set: &GaussianSet, camera: &Camera) -> ServiceResult<RenderOutput> {
    let p = SplatParams::from_set(set);
    Ok(render(p.refs(), camera, &RasterOptions::default(), None, None)?)
}

/// RGB, median depth and accumulated opacity as five float planes.
pub fn output_planes(out: &RenderOutput) -> Image {
    let n = out.rgb.num_pixels();
    let mut data = Vec::with_capacity(n * 5);
    for i in 0..n {
        data.extend_from_slice(&out.rgb.data[3 * i..3 * i + 3]);
        data.push(out.median_depth[i]);
        data.push(out.acc_opacity[i]);
    }
    Image::from_data(out.width(), out.height(), 5, data).expect("plane shape")
}

/// Builds per-view masks from `rect`, given in low-res pixels of view `view_id`.
/// The crops of the other views are drawn from `seed`.
pub fn build_roi(scene: &LoadedScene, view_id: usize, rect: Rect, seed: u64) -> ServiceResult<RoISpec> {
    let low = scene
        .low_res_cameras
        .get(view_id)
        .ok_or_else(|| ServiceError::invalid(format!("view {view_id} does not exist; the scene has {} views", scene.low_res_cameras.len())))?;
    let inside = rect.w > 0
        && rect.h > 0
        && rect.x0.checked_add(rect.w).is_some_and(|x| x <= low.width)
        && rect.y0.checked_add(rect.h).is_some_and(|y| y <= low.height);
    if !inside {
        return Err(ServiceError::invalid(format!(
            "rectangle (x0 {}, y0 {}, w {}, h {}) is empty or outside the {}x{} view",
            rect.x0, rect.y0, rect.w, rect.h, low.width, low.height
        )));
    }
    let s = scene.downscale();
    let hr = Rect {
        x0: rect.x0 * s,
        y0: rect.y0 * s,
        w: rect.w * s,
        h: rect.h * s,
    };
    let params = RoiParams {
        crop_fraction: SynthConfig::default().crop_fraction,
        ..RoiParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = roi_from_rect(&scene.g_input, &scene.cameras(), view_id, hr, &params, Some(&mut rng))?;
    spec.seed = seed;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub input: usize,
    pub background: usize,
    pub roi: usize,
    pub pixel: usize,
    pub densified: usize,
    #[serde(rename = "final")]
    pub final_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when every target mask is empty.
    pub input: Option<EvalMetrics>,
    pub densified: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub status: DensifyStatus,
    pub counts: Counts,
    /// The background prefix of the output is an in-order, unchanged
    /// subsequence of the input.
    pub background_identical: bool,
    pub metrics: Metrics,
}

/// `a` is an in-order subsequence of `b`, compared element and tag exactly.
pub fn is_subsequence(a: &GaussianSet, b: &GaussianSet) -> bool {
    let mut it = b.iter();
    a.iter().all(|x| it.any(|y| y == x))
}

/// Runs the densifier on `roi` and measures the input and the result on
/// the target views. The returned set is rounded to f32, as it is on disk.
pub fn densify(scene: &LoadedScene, roi: &RoISpec, model: &DensifierModel) -> ServiceResult<(GaussianSet, DensifyReport)> {
    let out = densify_roi(&scene.g_input, &scene.views, roi, model)?;
    let final_set = io::quantize_to_f32(&out.final_set);
    let nb = out.num_background;
    let bg = final_set.select(&(0..nb).collect::<Vec<_>>());
    let background_identical = is_subsequence(&bg, &scene.g_input);
    if !background_identical {
        log::error!("background changed during densification");
    }
    let nctx = model.config.num_views;
    let metrics = Metrics {
        input: evaluate_set(&scene.g_input, &scene.views, roi, nctx)?,
        densified: evaluate_set(&final_set, &scene.views, roi, nctx)?,
    };
    let report = DensifyReport {
        status: out.status,
        counts: Counts {
            input: scene.g_input.len(),
            background: nb,
            roi: out.num_roi,
            pixel: out.num_pixel,
            densified: out.num_densified,
            final_: final_set.len(),
        },
        background_identical,
        metrics,
    };
    Ok((final_set, report))
}

/// The pixel-spawned Gaussians the densifier would receive for `roi`.
pub fn pixel_gaussians(scene: &LoadedScene, roi: &RoISpec, num_context: usize) -> ServiceResult<GaussianSet> {
    let prep = prepare_roi(&scene.g_input, &scene.views, roi, num_context, &RasterOptions::default())?;
    Ok(match prep {
        Some(p) => p.input.tokens.select(&(p.input.num_roi..p.input.len()).collect::<Vec<_>>()),
        None => GaussianSet::new(),
    })
}

/// Metrics of `set` on the non-context views of `scene` under `roi`.
pub fn eval_scene(scene: &LoadedScene, set: &GaussianSet, roi: &RoISpec, num_context: usize) -> ServiceResult<Option<EvalMetrics>> {
    Ok(evaluate_set(set, &scene.views, roi, num_context)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub masked_psnr: f64,
    pub masked_ssim: f64,
}

pub fn eval_images(pred: &Image, gt: &Image, mask: Option<&Mask>) -> ServiceResult<ImageMetrics> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(ServiceError::invalid(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let full = Mask::full(gt.width, gt.height);
    let mask = mask.unwrap_or(&full);
    Ok(ImageMetrics {
        masked_psnr: masked_psnr(pred, gt, mask)?,
        masked_ssim: masked_ssim(pred, gt, mask)?,
    })
}

pub const DEFAULT_NUM_CONTEXT: usize = NUM_CONTEXT;
