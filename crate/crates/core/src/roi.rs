//! Regions of interest: per-view masks, Gaussian selection and RoI sampling.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_mask_png, save_mask_png};
use crate::raster::{render, RasterOptions, SplatParams};
use crate::types::{Camera, GaussianSet, Mask, Rect, SourceTag};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_MIN_VIEWS: usize = 2;

/// Per-view RoI masks with the crop rectangles they were cut to.
#[derive(Debug, Clone, PartialEq)]
pub struct RoISpec {
    pub masks: Vec<Mask>,
    pub crops: Vec<Option<Rect>>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RoiFileView {
    mask: String,
    width: usize,
    height: usize,
    crop: Option<Rect>,
}

#[derive(Serialize, Deserialize)]
struct RoiFile {
    seed: u64,
    views: Vec<RoiFileView>,
}

impl RoISpec {
    pub fn empty(cameras: &[Camera]) -> Self {
        RoISpec {
            masks: cameras.iter().map(|c| Mask::new(c.width, c.height)).collect(),
            crops: vec![None; cameras.len()],
            seed: 0,
        }
    }

    pub fn num_nonempty(&self) -> usize {
        self.masks.iter().filter(|m| !m.is_empty()).count()
    }

    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        if self.masks.len() != cameras.len() || self.crops.len() != cameras.len() {
            return Err(Error::shape("RoI has a different number of views than the scene"));
        }
        for (i, (m, c)) in self.masks.iter().zip(cameras).enumerate() {
            if m.width != c.width || m.height != c.height {
                return Err(Error::shape(format!("RoI mask {i} does not match its view")));
            }
            if let Some(r) = self.crops[i] {
                if !r.fits(c.width, c.height) {
                    return Err(Error::shape(format!("RoI crop {i} does not fit its view")));
                }
            }
        }
        Ok(())
    }

    /// Writes `roi.json` and one `mask_{i}.png` per view into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut views = Vec::new();
        for (i, m) in self.masks.iter().enumerate() {
            let name = format!("mask_{i}.png");
            save_mask_png(m, dir.join(&name))?;
            views.push(RoiFileView {
                mask: name,
                width: m.width,
                height: m.height,
                crop: self.crops[i],
            });
        }
        let file = RoiFile { seed: self.seed, views };
        fs::write(dir.join("roi.json"), serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file: RoiFile = serde_json::from_slice(&fs::read(dir.join("roi.json"))?)?;
        let mut masks = Vec::new();
        let mut crops = Vec::new();
        for v in file.views {
            let m = load_mask_png(dir.join(&v.mask))?;
            if m.width != v.width || m.height != v.height {
                return Err(Error::Format(format!("mask {} has unexpected size", v.mask)));
            }
            masks.push(m);
            crops.push(v.crop);
        }
        Ok(RoISpec {
            masks,
            crops,
            seed: file.seed,
        })
    }
}

/// Each Gaussian's share of the accumulated opacity inside `mask`.
/// An empty mask (or one the set does not reach) gives all zeros.
pub fn gaussian_contributions(set: &GaussianSet, camera: &Camera, mask: &Mask, opts: &RasterOptions) -> Result<Vec<f64>> {
    if mask.width != camera.width || mask.height != camera.height {
        return Err(Error::shape("mask does not match camera resolution"));
    }
    if mask.is_empty() || set.is_empty() {
        return Ok(vec![0.0; set.len()]);
    }
    let params = SplatParams::from_set(set);
    let out = render(params.refs(), camera, opts, None, Some(mask))?;
    let total: f64 = out
        .acc_opacity
        .iter()
        .zip(&mask.data)
        .filter(|(_, m)| **m)
        .map(|(a, _)| *a)
        .sum();
    if total <= 0.0 {
        return Ok(vec![0.0; set.len()]);
    }
    Ok(out.per_gaussian_contrib.iter().map(|c| c / total).collect())
}

/// Result of splitting a set into the RoI part and the background.
#[derive(Debug, Clone)]
pub struct RoiSplit {
    /// Selected elements, tagged [`SourceTag::RoiInput`].
    pub roi: GaussianSet,
    /// Everything else, unchanged.
    pub bg: GaussianSet,
    pub roi_indices: Vec<usize>,
}

/// Returns, for every Gaussian, the number of views where its contribution exceeds `tau`.
pub fn visibility_counts(set: &GaussianSet, views: &[(Camera, Mask)], tau: f64, opts: &RasterOptions) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; set.len()];
    for (cam, mask) in views {
        let contrib = gaussian_contributions(set, cam, mask, opts)?;
        for (c, v) in counts.iter_mut().zip(contrib) {
            if v > tau {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Selects the Gaussians whose contribution exceeds `tau` in at least `min_views` views.
pub fn select_roi_gaussians(
    set: &GaussianSet,
    views: &[(Camera, Mask)],
    tau: f64,
    min_views: usize,
    opts: &RasterOptions,
) -> Result<RoiSplit> {
    let counts = visibility_counts(set, views, tau, opts)?;
    let roi_indices: Vec<usize> = (0..set.len()).filter(|&j| counts[j] >= min_views).collect();
    let (mut roi, bg) = set.partition(|j, _| counts[j] >= min_views);
    roi.retag(SourceTag::RoiInput);
    Ok(RoiSplit { roi, bg, roi_indices })
}

/// Binary mask of pixels whose accumulated opacity exceeds `threshold`.
pub fn opacity_mask(set: &GaussianSet, camera: &Camera, threshold: f64, opts: &RasterOptions) -> Result<Mask> {
    let out = render(SplatParams::from_set(set).refs(), camera, opts, None, None)?;
    Ok(Mask {
        width: camera.width,
        height: camera.height,
        data: out.acc_opacity.iter().map(|a| *a > threshold).collect(),
    })
}

/// Number of set pixels inside every `w`×`h` window, indexed by top-left
/// corner over the `(W−w+1)×(H−h+1)` valid positions.
pub fn window_mass(mask: &Mask, w: usize, h: usize) -> Vec<u64> {
    let (mw, mh) = (mask.width, mask.height);
    if w > mw || h > mh {
        return Vec::new();
    }
    let stride = mw + 1;
    let mut integral = vec![0u64; stride * (mh + 1)];
    for y in 0..mh {
        let mut row = 0u64;
        for x in 0..mw {
            row += mask.get(x, y) as u64;
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let (nx, ny) = (mw - w + 1, mh - h + 1);
    let mut out = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let s = integral[(y + h) * stride + x + w] + integral[y * stride + x]
                - integral[y * stride + x + w]
                - integral[(y + h) * stride + x];
            out.push(s);
        }
    }
    out
}

/// Samples a `w`×`h` crop with probability proportional to the mask mass it
/// encloses. Returns `None` when no window touches the mask.
pub fn sample_crop(mask: &Mask, w: usize, h: usize, rng: &mut impl rand::Rng) -> Option<Rect> {
    let weights = window_mass(mask, w, h);
    let dist = WeightedIndex::new(&weights).ok()?;
    let k = dist.sample(rng);
    let nx = mask.width - w + 1;
    Some(Rect {
        x0: k % nx,
        y0: k / nx,
        w,
        h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiParams {
    /// Crop side as a fraction of the image side.
    pub crop_fraction: f64,
    pub tau: f64,
    pub min_views: usize,
    /// Accumulated-opacity threshold when rendering masks.
    pub mask_threshold: f64,
    pub min_area: usize,
    pub max_attempts: usize,
    pub raster: RasterOptions,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams {
            crop_fraction: 0.5,
            tau: DEFAULT_TAU,
            min_views: DEFAULT_MIN_VIEWS,
            mask_threshold: 0.5,
            min_area: 64,
            max_attempts: 16,
            raster: RasterOptions::default(),
        }
    }
}

fn crop_size(cam: &Camera, fraction: f64) -> (usize, usize) {
    let w = ((cam.width as f64 * fraction).round() as usize).clamp(1, cam.width);
    let h = ((cam.height as f64 * fraction).round() as usize).clamp(1, cam.height);
    (w, h)
}

fn is_degenerate(spec: &RoISpec, min_area: usize) -> bool {
    spec.num_nonempty() < 2 || spec.masks.iter().all(|m| m.count() < min_area)
}

/// Builds per-view masks from a rectangle drawn on view `view`.
///
/// Gaussians of `proxy` contributing more than `tau` inside the rectangle are
/// rendered into every view; when `rng` is given, each other view's mask is
/// cut to a crop sampled in proportion to mask mass. The Gaussians visible in
/// at least `min_views` of the cut masks are rendered again for the final
/// masks, which are intersected with the crops.
pub fn roi_from_rect(
    proxy: &GaussianSet,
    cameras: &[Camera],
    view: usize,
    rect: Rect,
    params: &RoiParams,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RoISpec> {
    let cam0 = cameras.get(view).ok_or_else(|| Error::Config(format!("no view {view}")))?;
    if !rect.fits(cam0.width, cam0.height) {
        return Err(Error::Config(format!(
            "rectangle {rect:?} does not fit the {}x{} view",
            cam0.width, cam0.height
        )));
    }
    let opts = &params.raster;
    let region = Mask::from_rect(cam0.width, cam0.height, rect);
    let contrib = gaussian_contributions(proxy, cam0, &region, opts)?;
    let seeds: Vec<usize> = (0..proxy.len()).filter(|&j| contrib[j] > params.tau).collect();
    let seed_set = proxy.select(&seeds);

    let mut crops = vec![None; cameras.len()];
    let mut cut = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let m = opacity_mask(&seed_set, cam, params.mask_threshold, opts)?;
        let crop = if i == view {
            Some(rect)
        } else if let Some(r) = rng.as_deref_mut() {
            let (w, h) = crop_size(cam, params.crop_fraction);
            sample_crop(&m, w, h, r)
        } else {
            None
        };
        crops[i] = crop;
        cut.push(match crop {
            Some(r) => m.intersect(&Mask::from_rect(cam.width, cam.height, r)),
            None => m,
        });
    }

    let views: Vec<(Camera, Mask)> = cameras.iter().cloned().zip(cut).collect();
    let split = select_roi_gaussians(&seed_set, &views, params.tau, params.min_views, opts)?;
    let mut masks = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let m = opacity_mask(&split.roi, cam, params.mask_threshold, opts)?;
        masks.push(match crops[i] {
            Some(r) => m.intersect(&Mask::from_rect(cam.width, cam.height, r)),
            None => m,
        });
    }
    Ok(RoISpec { masks, crops, seed: 0 })
}

/// Samples a random RoI: a crop of side `crop_fraction` on view 0, chosen in
/// proportion to the proxy's rendered coverage, expanded to all views by
/// [`roi_from_rect`]. Degenerate results are resampled.
pub fn generate_roi(proxy: &GaussianSet, cameras: &[Camera], params: &RoiParams, seed: u64) -> Result<RoISpec> {
    if cameras.len() < 2 {
        return Err(Error::Config("RoI generation needs at least two views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam0 = &cameras[0];
    let coverage = opacity_mask(proxy, cam0, params.mask_threshold, &params.raster)?;
    let (w, h) = crop_size(cam0, params.crop_fraction);
    for _ in 0..params.max_attempts {
        let Some(rect) = sample_crop(&coverage, w, h, &mut rng) else {
            break;
        };
        let mut spec = roi_from_rect(proxy, cameras, 0, rect, params, Some(&mut rng))?;
        if !is_degenerate(&spec, params.min_area) {
            spec.seed = seed;
            return Ok(spec);
        }
    }
    Err(Error::DegenerateRoi {
        attempts: params.max_attempts,
    })
}
