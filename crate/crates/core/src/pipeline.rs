//! The end-to-end workflow: split the coarse set by the RoI, spawn pixel
//! Gaussians, run the densifier and merge the result with the background.

use serde::{Deserialize, Serialize};

use crate::densifier::DensifierModel;
use crate::error::{Error, Result};
use crate::features::{prepare_input, DensifierInput};
use crate::raster::{render, RasterOptions, SplatParams};
use crate::roi::{select_roi_gaussians, RoISpec, RoiSplit, DEFAULT_MIN_VIEWS, DEFAULT_TAU};
use crate::types::{Camera, GaussianSet, Image, ImageView, Mask, Rect};

/// Crop of the `index`-th view, with the RoI mask cut to it.
#[derive(Debug, Clone)]
pub struct CroppedView {
    pub index: usize,
    pub rect: Rect,
    pub view: ImageView,
}

/// The rectangle a view is processed in: the RoI crop when there is one,
/// else the mask's bounding box. `None` for an empty, uncropped mask.
pub fn working_rect(roi: &RoISpec, view: usize) -> Option<Rect> {
    roi.crops[view].or_else(|| roi.masks[view].bounding_rect())
}

pub fn crop_view(view: &ImageView, mask: &Mask, rect: Rect) -> Result<ImageView> {
    ImageView::new(
        view.rgb.crop(rect.x0, rect.y0, rect.w, rect.h),
        mask.crop(rect.x0, rect.y0, rect.w, rect.h),
        view.camera.crop(rect.x0, rect.y0, rect.w, rect.h),
    )
}

/// Everything derived from one scene and RoI before the network runs.
#[derive(Debug, Clone)]
pub struct PreparedRoi {
    pub split: RoiSplit,
    pub input: DensifierInput,
    pub context: Vec<CroppedView>,
    /// Views other than the context views that have a nonempty mask.
    pub targets: Vec<CroppedView>,
}

impl PreparedRoi {
    pub fn background_params(&self) -> SplatParams {
        SplatParams::from_set(&self.split.bg)
    }

    pub fn target_masks(&self) -> Vec<Mask> {
        self.targets.iter().map(|t| t.view.mask.clone()).collect()
    }

    pub fn target_images(&self) -> Vec<Image> {
        self.targets.iter().map(|t| t.view.rgb.clone()).collect()
    }
}

/// Splits `g_input` by `roi` and assembles the densifier input. The first
/// `num_context` views are the context views. Returns `None` when nothing
/// would be densified: no RoI Gaussian and no masked context pixel.
pub fn prepare_roi(
    g_input: &GaussianSet,
    views: &[ImageView],
    roi: &RoISpec,
    num_context: usize,
    opts: &RasterOptions,
) -> Result<Option<PreparedRoi>> {
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera).collect();
    roi.validate(&cameras)?;
    if num_context > views.len() {
        return Err(Error::Config(format!("{num_context} context views requested, scene has {}", views.len())));
    }
    let selection: Vec<(Camera, Mask)> = cameras.iter().copied().zip(roi.masks.iter().cloned()).collect();
    let split = select_roi_gaussians(g_input, &selection, DEFAULT_TAU, DEFAULT_MIN_VIEWS, opts)?;
    let context_pixels: usize = roi.masks[..num_context].iter().map(|m| m.count()).sum();
    if split.roi.is_empty() && context_pixels == 0 {
        return Ok(None);
    }
    let mut context = Vec::with_capacity(num_context);
    for (i, v) in views[..num_context].iter().enumerate() {
        let rect = working_rect(roi, i).unwrap_or(Rect {
            x0: 0,
            y0: 0,
            w: v.camera.width,
            h: v.camera.height,
        });
        context.push(CroppedView {
            index: i,
            rect,
            view: crop_view(v, &roi.masks[i], rect)?,
        });
    }
    let mut targets = Vec::new();
    for (i, v) in views.iter().enumerate().skip(num_context) {
        if roi.masks[i].is_empty() {
            continue;
        }
        let rect = working_rect(roi, i).expect("nonempty mask has a bounding box");
        targets.push(CroppedView {
            index: i,
            rect,
            view: crop_view(v, &roi.masks[i], rect)?,
        });
    }
    let ctx_views: Vec<ImageView> = context.iter().map(|c| c.view.clone()).collect();
    let input = prepare_input(g_input, &split, &ctx_views, opts)?;
    Ok(Some(PreparedRoi {
        split,
        input,
        context,
        targets,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensifyStatus {
    Densified,
    /// Nothing to densify; the input is returned unchanged.
    PassThrough,
}

#[derive(Debug, Clone)]
pub struct DensifyResult {
    pub final_set: GaussianSet,
    pub status: DensifyStatus,
    pub num_background: usize,
    pub num_roi: usize,
    pub num_pixel: usize,
    pub num_densified: usize,
}

/// `𝒢^final = 𝒢^bg ∪ 𝒢^den`: background elements first, in input order and
/// unchanged, followed by the densified Gaussians.
pub fn merge_final(background: &GaussianSet, densified: &GaussianSet) -> GaussianSet {
    GaussianSet::merge(background, densified)
}

/// Densifies the RoI of a scene. `views` are the full high-res views, the
/// first ones being the model's context views.
pub fn densify_roi(g_input: &GaussianSet, views: &[ImageView], roi: &RoISpec, model: &DensifierModel) -> Result<DensifyResult> {
    let opts = RasterOptions::default();
    let Some(prep) = prepare_roi(g_input, views, roi, model.config.num_views, &opts)? else {
        log::warn!("empty region of interest; returning the input unchanged");
        return Ok(DensifyResult {
            final_set: g_input.clone(),
            status: DensifyStatus::PassThrough,
            num_background: g_input.len(),
            num_roi: 0,
            num_pixel: 0,
            num_densified: 0,
        });
    };
    let den = model.densify(&prep.input)?;
    Ok(DensifyResult {
        status: DensifyStatus::Densified,
        num_background: prep.split.bg.len(),
        num_roi: prep.input.num_roi,
        num_pixel: prep.input.len() - prep.input.num_roi,
        num_densified: den.len(),
        final_set: merge_final(&prep.split.bg, &den),
    })
}

/// Renders `set` into each view (`RGB` only).
pub fn render_views(set: &GaussianSet, cameras: &[Camera], opts: &RasterOptions) -> Result<Vec<Image>> {
    let p = SplatParams::from_set(set);
    cameras.iter().map(|c| Ok(render(p.refs(), c, opts, None, None)?.rgb)).collect()
}
