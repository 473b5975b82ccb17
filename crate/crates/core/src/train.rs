//! Losses, the training loop and masked evaluation.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densifier::{render_op, DensifierModel, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_masked_metrics, ViewMetrics};
use crate::nn::{cosine_lr, AdamW, Graph, Tensor, Var};
use crate::pipeline::{merge_final, prepare_roi, render_views, PreparedRoi};
use crate::raster::RasterOptions;
use crate::synth::{generate_synthetic_dataset, sub_seed, SynthConfig, SyntheticScene};
use crate::roi::RoISpec;
use crate::types::{GaussianSet, Image, ImageView, Mask};

/// `Σ_i sum(M_i·‖pred_i − gt_i‖²) / Σ_i sum(M_i)`, squared error summed over channels.
/// `preds` are `H·W`×3.
pub fn masked_mse(g: &mut Graph, preds: &[Var], gts: &[Image], masks: &[Mask]) -> Result<Var> {
    if preds.len() != gts.len() || preds.len() != masks.len() || preds.is_empty() {
        return Err(Error::shape("masked_mse needs one image and mask per prediction"));
    }
    let total: usize = masks.iter().map(|m| m.count()).sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let mut acc: Option<Var> = None;
    for ((p, gt), m) in preds.iter().zip(gts).zip(masks) {
        let (rows, cols) = g.shape(*p);
        if rows != gt.num_pixels() || cols != 3 || gt.channels != 3 || m.width != gt.width || m.height != gt.height {
            return Err(Error::shape("prediction, image and mask sizes differ"));
        }
        if m.is_empty() {
            continue;
        }
        let t = g.constant(Tensor::from_vec(rows, 3, gt.data.clone()));
        let d = g.sub(*p, t);
        let sq = g.mul(d, d);
        let mut w = Tensor::zeros(rows, 3);
        for (i, on) in m.data.iter().enumerate() {
            if *on {
                w.row_mut(i).fill(1.0 / total as f64);
            }
        }
        let s = g.weighted_sum(sq, Rc::new(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    Ok(acc.expect("some mask is nonempty"))
}

/// `(mean_b Σ M_b)²` over the existence values of each batch item.
pub fn mask_reg_loss(g: &mut Graph, existence: &[Var]) -> Var {
    if existence.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let sums: Vec<Var> = existence.iter().map(|e| g.sum_all(*e)).collect();
    let mut total = sums[0];
    for s in &sums[1..] {
        total = g.add(total, *s);
    }
    let mean = g.scale(total, 1.0 / existence.len() as f64);
    g.mul(mean, mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub masked_psnr: f64,
    pub masked_ssim: f64,
    pub num_gaussians: usize,
}

/// Masked metrics averaged over views with nonempty masks. `None` when every mask is empty.
pub fn eval_metrics(preds: &[Image], gts: &[Image], masks: &[Mask], final_set: &GaussianSet) -> Result<Option<EvalMetrics>> {
    Ok(mean_masked_metrics(preds, gts, masks)?.map(|ViewMetrics { psnr, ssim }| EvalMetrics {
        masked_psnr: psnr,
        masked_ssim: ssim,
        num_gaussians: final_set.len(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            train_scenes: 200,
            eval_scenes: 20,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    /// Seed of the held-out scenes, disjoint from the training stream.
    pub fn eval_seed(&self) -> u64 {
        sub_seed(self.seed, 0x00e7_a100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub grad_clip: f64,
    pub w_mask: f64,
    /// Held-out evaluation interval in steps, 0 to disable.
    pub eval_every: usize,
    /// Held-out scenes used by periodic evaluation.
    pub eval_subset: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 3000,
            batch: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup: 100,
            lr_floor: 0.05,
            grad_clip: 1.0,
            w_mask: 0.0,
            eval_every: 500,
            eval_subset: 20,
            checkpoint_every: 500,
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.batch == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 || self.w_mask < 0.0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("batch, lr and grad_clip must be positive; weight_decay and w_mask non-negative".into()));
        }
        if self.w_mask > 0.0 && !self.model.use_existence_masks {
            return Err(Error::Config("w_mask > 0 needs use_existence_masks".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the metrics log, measured on the step's training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub masked_psnr: f64,
    pub masked_ssim: f64,
    pub num_gaussians: usize,
}

/// Held-out evaluation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub masked_psnr: f64,
    pub masked_ssim: f64,
    pub num_gaussians: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

/// Metrics of the input and the densified set on one scene's target views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub input: EvalMetrics,
    pub densified: EvalMetrics,
}

pub fn scene_from_synthetic(scene: &SyntheticScene, num_context: usize) -> Result<Option<PreparedRoi>> {
    let prep = prepare_roi(&scene.g_input, &scene.high_res_views()?, &scene.roi, num_context, &RasterOptions::default())?;
    Ok(prep.filter(|p| !p.targets.is_empty()))
}

/// Prepares scenes in parallel, dropping those with nothing to densify.
pub fn prepare_scenes(scenes: &[SyntheticScene], num_context: usize) -> Result<Vec<PreparedRoi>> {
    let out: Vec<Option<PreparedRoi>> = scenes
        .par_iter()
        .map(|s| scene_from_synthetic(s, num_context))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

pub fn evaluate_scene(model: &DensifierModel, prep: &PreparedRoi) -> Result<SceneEval> {
    let opts = RasterOptions::default();
    let cams: Vec<_> = prep.targets.iter().map(|t| t.view.camera).collect();
    let gts = prep.target_images();
    let masks = prep.target_masks();
    let input_set = GaussianSet::merge(&prep.split.bg, &prep.split.roi);
    let before = render_views(&input_set, &cams, &opts)?;
    let den = model.densify(&prep.input)?;
    let final_set = merge_final(&prep.split.bg, &den);
    let after = render_views(&final_set, &cams, &opts)?;
    let input = eval_metrics(&before, &gts, &masks, &input_set)?.ok_or(Error::EmptyMask)?;
    let densified = eval_metrics(&after, &gts, &masks, &final_set)?.ok_or(Error::EmptyMask)?;
    Ok(SceneEval { input, densified })
}

/// Metrics of `set` rendered into the non-context views of `views` under the
/// RoI masks. `None` when those masks are all empty.
pub fn evaluate_set(set: &GaussianSet, views: &[ImageView], roi: &RoISpec, num_context: usize) -> Result<Option<EvalMetrics>> {
    let idx: Vec<usize> = (num_context..views.len()).filter(|&i| !roi.masks[i].is_empty()).collect();
    let cams: Vec<_> = idx.iter().map(|&i| views[i].camera).collect();
    let preds = render_views(set, &cams, &RasterOptions::default())?;
    let gts: Vec<Image> = idx.iter().map(|&i| views[i].rgb.clone()).collect();
    let masks: Vec<Mask> = idx.iter().map(|&i| roi.masks[i].clone()).collect();
    eval_metrics(&preds, &gts, &masks, set)
}

pub fn evaluate(model: &DensifierModel, scenes: &[PreparedRoi]) -> Result<Vec<SceneEval>> {
    scenes.iter().map(|p| evaluate_scene(model, p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub input_gaussians: f64,
    pub num_gaussians: f64,
}

pub fn summarize(evals: &[SceneEval]) -> EvalSummary {
    let n = evals.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SceneEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    EvalSummary {
        scenes: evals.len(),
        input_psnr: mean(&|e| e.input.masked_psnr),
        input_ssim: mean(&|e| e.input.masked_ssim),
        psnr: mean(&|e| e.densified.masked_psnr),
        ssim: mean(&|e| e.densified.masked_ssim),
        input_gaussians: mean(&|e| e.input.num_gaussians as f64),
        num_gaussians: mean(&|e| e.densified.num_gaussians as f64),
    }
}

struct StepStats {
    loss: f64,
    psnr: f64,
    ssim: f64,
    num_gaussians: usize,
}

/// Forward and backward of one batch; parameter gradients are left in the store.
fn train_step(model: &mut DensifierModel, batch: &[&PreparedRoi], w_mask: f64, seed: u64, step: usize) -> Result<StepStats> {
    let opts = RasterOptions::default();
    let mut g = Graph::new();
    let mut losses = Vec::new();
    let mut existence = Vec::new();
    let mut images = Vec::new();
    let mut counts = 0;
    for (b, prep) in batch.iter().enumerate() {
        let mode = Mode::Train {
            seed: sub_seed(seed, ((step as u64) << 8) | b as u64),
        };
        let out = model.forward(&mut g, &prep.input, mode)?;
        if !g.value(out.params).data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let bg = Rc::new(prep.background_params());
        let mut preds = Vec::with_capacity(prep.targets.len());
        for t in &prep.targets {
            preds.push(render_op(&mut g, bg.clone(), out.params, out.existence, &t.view.camera, &opts)?);
        }
        let gts = prep.target_images();
        let masks = prep.target_masks();
        losses.push(masked_mse(&mut g, &preds, &gts, &masks)?);
        if let Some(e) = out.existence {
            existence.push(e);
        }
        let kept = out.keep.as_ref().map_or(g.shape(out.params).0, |k| k.iter().filter(|v| **v).count());
        counts += prep.split.bg.len() + kept;
        for ((p, gt), m) in preds.iter().zip(gts).zip(masks) {
            let v = g.value(*p);
            images.push((Image::from_data(gt.width, gt.height, 3, v.data.clone())?, gt, m));
        }
    }
    let mut loss = losses[0];
    for l in &losses[1..] {
        loss = g.add(loss, *l);
    }
    loss = g.scale(loss, 1.0 / batch.len() as f64);
    if w_mask > 0.0 && !existence.is_empty() {
        let reg = mask_reg_loss(&mut g, &existence);
        let reg = g.scale(reg, w_mask);
        loss = g.add(loss, reg);
    }
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = g.backward(loss);
    model.store.zero_grads();
    grads.accumulate_params(&mut model.store);
    let (preds, rest): (Vec<Image>, Vec<(Image, Mask)>) = images.into_iter().map(|(p, gt, m)| (p, (gt, m))).unzip();
    let (gts, masks): (Vec<Image>, Vec<Mask>) = rest.into_iter().unzip();
    let m = mean_masked_metrics(&preds, &gts, &masks)?.ok_or(Error::EmptyMask)?;
    Ok(StepStats {
        loss: value,
        psnr: m.psnr,
        ssim: m.ssim,
        num_gaussians: counts / batch.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DensifierModel,
    pub log: Vec<LogRow>,
    pub eval: Vec<EvalRow>,
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn eval_row(model: &DensifierModel, held_out: &[PreparedRoi], step: usize) -> Result<EvalRow> {
    let s = summarize(&evaluate(model, held_out)?);
    Ok(EvalRow {
        step,
        masked_psnr: s.psnr,
        masked_ssim: s.ssim,
        num_gaussians: s.num_gaussians,
        input_psnr: s.input_psnr,
        input_ssim: s.input_ssim,
    })
}

/// Trains a fresh model. With `out_dir`, writes `train_config.json`,
/// `metrics.csv`, `eval.csv` and the model checkpoint (`model.json`,
/// `model.ckpt`) every `checkpoint_every` steps and at the end. A non-finite
/// loss aborts with the previous checkpoint left in place.
pub fn train(cfg: &TrainConfig, scenes: &[PreparedRoi], held_out: &[PreparedRoi], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut model = DensifierModel::new(cfg.model.clone())?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_config.json"), serde_json::to_vec_pretty(cfg)?)?;
    }
    let held = &held_out[..cfg.eval_subset.min(held_out.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let save = |model: &DensifierModel, log: &[LogRow], evals: &[EvalRow]| -> Result<()> {
        if let Some(dir) = out_dir {
            model.save(dir)?;
            write_csv(log, &dir.join("metrics.csv"))?;
            write_csv(evals, &dir.join("eval.csv"))?;
        }
        Ok(())
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&scenes[order.pop().expect("refilled")]);
        }
        let stats = train_step(&mut model, &batch, cfg.w_mask, cfg.seed, step)?;
        let norm = model.store.clip_grad_norm(cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut model.store, cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.lr_floor));
        if !model.store.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.push(LogRow {
            step,
            loss: stats.loss,
            masked_psnr: stats.psnr,
            masked_ssim: stats.ssim,
            num_gaussians: stats.num_gaussians,
        });
        if step % 50 == 0 {
            log::info!("step {step}: loss {:.5} psnr {:.2}", stats.loss, stats.psnr);
        }
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !held.is_empty() {
            let row = eval_row(&model, held, done)?;
            log::info!("step {done}: held-out psnr {:.3} (input {:.3})", row.masked_psnr, row.input_psnr);
            evals.push(row);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            save(&model, &log, &evals)?;
        }
    }
    model.store.quantize_f32();
    save(&model, &log, &evals)?;
    Ok(TrainOutcome { model, log, eval: evals })
}

/// Generates the configured training and held-out scenes.
pub fn generate_data(cfg: &DataConfig) -> Result<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    let train = generate_synthetic_dataset(cfg.seed, cfg.train_scenes, &cfg.synth)?;
    let held = generate_synthetic_dataset(cfg.eval_seed(), cfg.eval_scenes, &cfg.synth)?;
    Ok((train, held))
}

#[cfg(test)]
mod tests;
