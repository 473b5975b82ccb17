use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use splatlens::densifier::DensifierModel;
use splatlens::io;
use splatlens::roi::RoISpec;
use splatlens::synth::{save_dataset, load_dataset, views_psnr, SyntheticScene};
use splatlens::raster::RasterOptions;
use splatlens::train::{evaluate, generate_data, prepare_scenes, summarize, train, TrainConfig};

use crate::config::SplatlensConfig;
use crate::error::{ServiceError, ServiceResult};
use crate::ops::{self, LoadedScene, DEFAULT_NUM_CONTEXT};

#[derive(Parser, Debug)]
#[command(name = "splatlens", version, about = "Localized high-resolution densification of Gaussian splats")]
pub struct Cli {
    /// JSON config file; falls back to $SPLATLENS_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic training and held-out scenes.
    GenData(GenDataArgs),
    /// Refit the coarse input set of a scene.
    FitInput(FitInputArgs),
    Train(TrainArgs),
    /// Densify the RoI of a scene with a trained model.
    Densify(DensifyArgs),
    /// Render a Gaussian set into one camera.
    Render(RenderArgs),
    /// Masked metrics of a Gaussian set or of a pair of images.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    #[arg(long)]
    pub high_res: Option<usize>,
    #[arg(long)]
    pub downscale: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitInputArgs {
    /// Scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output file; defaults to the scene's `input.gs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with `train/` and `eval/` scene sets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub w_mask: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Gaussians predicted per token.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub existence_masks: bool,
    /// Drop the reconstruction-residual image features.
    #[arg(long)]
    pub no_recon: bool,
    /// Drop the projection cross-attention.
    #[arg(long)]
    pub no_attn: bool,
    /// Use only the first N training scenes.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DensifyArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// RoI directory; defaults to the scene's `roi/`.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// Also write the pixel-spawned Gaussians here.
    #[arg(long)]
    pub dump_pixel: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Gaussian set file.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump RGB, depth and opacity as raw float planes.
    #[arg(long)]
    pub planes: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scene directory, paired with `--gaussians`.
    #[arg(long, requires = "gaussians", conflicts_with_all = ["pred", "gt"])]
    pub scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    pub gaussians: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    pub roi: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NUM_CONTEXT)]
    pub num_context: usize,
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
}

/// What a successful run prints: JSON on stdout, or help text.
#[derive(Debug)]
pub enum Output {
    Json(Value),
    Text(String),
}

fn require(path: &Path) -> ServiceResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ServiceError::usage(format!("{} does not exist", path.display())))
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> ServiceResult<Output>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return Ok(Output::Text(e.to_string()))
        }
        Err(e) => return Err(ServiceError::usage(e.to_string().trim_end())),
    };
    if let Some(p) = &cli.config {
        require(p)?;
    }
    let explicit = cli.config.is_some() || std::env::var_os(crate::config::CONFIG_ENV).is_some_and(|v| !v.is_empty());
    let cfg = SplatlensConfig::resolve(cli.config.as_deref())?;
    let value = match cli.command {
        Command::GenData(a) => gen_data(&cfg, a)?,
        Command::FitInput(a) => fit_input(&cfg, a)?,
        Command::Train(a) => train_cmd(&cfg, a)?,
        Command::Densify(a) => densify_cmd(&cfg, explicit, a)?,
        Command::Render(a) => render_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Serve(a) => serve_cmd(&cfg, explicit, a)?,
    };
    Ok(Output::Json(value))
}

fn gen_data(cfg: &SplatlensConfig, a: GenDataArgs) -> ServiceResult<Value> {
    let mut data = cfg.train.data.clone();
    if let Some(v) = a.seed {
        data.seed = v;
    }
    if let Some(v) = a.train_scenes {
        data.train_scenes = v;
    }
    if let Some(v) = a.eval_scenes {
        data.eval_scenes = v;
    }
    if let Some(v) = a.high_res {
        data.synth.high_res = v;
        data.synth.focal = v as f64;
    }
    if let Some(v) = a.downscale {
        data.synth.downscale = v;
    }
    data.synth.validate()?;
    let (tr, ev) = generate_data(&data)?;
    save_dataset(&tr, a.out.join("train"))?;
    save_dataset(&ev, a.out.join("eval"))?;
    std::fs::write(a.out.join("data.json"), serde_json::to_vec_pretty(&data)?)?;
    Ok(json!({
        "out": a.out,
        "train_scenes": tr.len(),
        "eval_scenes": ev.len(),
    }))
}

fn fit_input(cfg: &SplatlensConfig, a: FitInputArgs) -> ServiceResult<Value> {
    require(&a.scene)?;
    let scene = SyntheticScene::load(&a.scene)?;
    let mut fit = cfg.train.data.synth.fit.clone();
    if let Some(v) = a.steps {
        fit.steps = v;
    }
    if let Some(v) = a.stride {
        if v == 0 {
            return Err(ServiceError::usage("--stride must be positive"));
        }
        fit.stride = v;
    }
    let set = scene.refit_input(&fit, a.seed)?;
    let ctx = scene.context_cameras().len();
    let psnr = views_psnr(
        &set,
        &scene.low_res_cameras[..ctx],
        &scene.low_res_images[..ctx],
        &RasterOptions::default(),
    )?;
    let out = a.out.unwrap_or_else(|| a.scene.join("input.gs"));
    io::save_gaussian_set(&set, &out)?;
    Ok(json!({ "out": out, "num_gaussians": set.len(), "input_psnr": psnr }))
}

/// `cfg` with the command-line overrides applied.
pub fn train_config(cfg: &TrainConfig, a: &TrainArgs) -> TrainConfig {
    let mut c = cfg.clone();
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    over!(seed, steps, batch, lr, weight_decay, warmup, grad_clip, w_mask, eval_every, eval_subset, checkpoint_every);
    if let Some(k) = a.k {
        c.model.k = k;
    }
    if a.existence_masks {
        c.model.use_existence_masks = true;
    }
    if a.no_recon {
        c.model.use_recon_features = false;
    }
    if a.no_attn {
        c.model.use_cross_attention = false;
    }
    c
}

fn train_cmd(cfg: &SplatlensConfig, a: TrainArgs) -> ServiceResult<Value> {
    require(&a.data.join("train"))?;
    require(&a.data.join("eval"))?;
    let tc = train_config(&cfg.train, &a);
    tc.validate()?;
    let mut tr = load_dataset(a.data.join("train"))?;
    if let Some(n) = a.limit {
        tr.truncate(n);
    }
    let ev = load_dataset(a.data.join("eval"))?;
    let nctx = tc.model.num_views;
    let train_set = prepare_scenes(&tr, nctx)?;
    let held = prepare_scenes(&ev, nctx)?;
    if train_set.is_empty() {
        return Err(ServiceError::new("config", "no usable training scenes"));
    }
    std::fs::create_dir_all(&a.out)?;
    let outcome = train(&tc, &train_set, &held, Some(&a.out))?;
    let summary = summarize(&evaluate(&outcome.model, &held)?);
    std::fs::write(a.out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(json!({
        "out": a.out,
        "steps": outcome.log.len(),
        "final_loss": outcome.log.last().map(|r| r.loss),
        "held_out": summary,
    }))
}

fn load_model(cfg: &SplatlensConfig, explicit: bool, dir: &Path) -> ServiceResult<DensifierModel> {
    require(dir)?;
    Ok(if explicit {
        DensifierModel::load_expecting(dir, &cfg.train.model)?
    } else {
        DensifierModel::load(dir)?
    })
}

fn load_roi(scene_dir: &Path, roi: Option<&Path>) -> ServiceResult<RoISpec> {
    let dir = roi.map(Path::to_path_buf).unwrap_or_else(|| scene_dir.join("roi"));
    require(&dir)?;
    Ok(RoISpec::load(dir)?)
}

fn densify_cmd(cfg: &SplatlensConfig, explicit: bool, a: DensifyArgs) -> ServiceResult<Value> {
    require(&a.scene)?;
    let scene = LoadedScene::load(&a.scene)?;
    let model = load_model(cfg, explicit, &a.model)?;
    let roi = load_roi(&a.scene, a.roi.as_deref())?;
    let (set, report) = ops::densify(&scene, &roi, &model)?;
    io::save_gaussian_set(&set, &a.out)?;
    if let Some(p) = &a.dump_pixel {
        io::save_gaussian_set(&ops::pixel_gaussians(&scene, &roi, model.config.num_views)?, p)?;
    }
    Ok(serde_json::to_value(report)?)
}

fn render_cmd(a: RenderArgs) -> ServiceResult<Value> {
    require(&a.scene)?;
    require(&a.camera)?;
    let set = io::load_gaussian_set(&a.scene)?;
    let camera = io::load_camera(&a.camera)?;
    let out = ops::render_output(&set, &camera)?;
    io::save_png(&out.rgb, &a.out)?;
    if let Some(p) = &a.planes {
        io::write_planes(&ops::output_planes(&out), std::fs::File::create(p)?)?;
    }
    Ok(json!({ "out": a.out, "width": camera.width, "height": camera.height, "num_gaussians": set.len() }))
}

fn eval_cmd(a: EvalArgs) -> ServiceResult<Value> {
    if let (Some(scene_dir), Some(gs)) = (&a.scene, &a.gaussians) {
        require(scene_dir)?;
        require(gs)?;
        let scene = LoadedScene::load(scene_dir)?;
        let set = io::load_gaussian_set(gs)?;
        let roi = load_roi(scene_dir, a.roi.as_deref())?;
        let m = ops::eval_scene(&scene, &set, &roi, a.num_context)?.ok_or(splatlens::Error::EmptyMask)?;
        return Ok(serde_json::to_value(m)?);
    }
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        require(pred)?;
        require(gt)?;
        let mask = match &a.mask {
            Some(m) => {
                require(m)?;
                Some(io::load_mask_png(m)?)
            }
            None => None,
        };
        let m = ops::eval_images(&io::load_png(pred)?, &io::load_png(gt)?, mask.as_ref())?;
        return Ok(serde_json::to_value(m)?);
    }
    Err(ServiceError::usage("eval needs --scene with --gaussians, or --pred with --gt"))
}

fn serve_cmd(cfg: &SplatlensConfig, explicit: bool, a: ServeArgs) -> ServiceResult<Value> {
    let scene_dir = a
        .scene
        .or_else(|| cfg.serve.scene.clone())
        .ok_or_else(|| ServiceError::usage("serve needs --scene or serve.scene in the config"))?;
    let model_dir = a
        .model
        .or_else(|| cfg.serve.model.clone())
        .ok_or_else(|| ServiceError::usage("serve needs --model or serve.model in the config"))?;
    let addr = a.addr.unwrap_or_else(|| cfg.serve.addr.clone());
    require(&scene_dir)?;
    let scene = LoadedScene::load(&scene_dir)?;
    let model = load_model(cfg, explicit, &model_dir)?;
    let state = crate::http::AppState::new(scene, model)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::http::serve(&addr, state))?;
    Ok(json!({ "stopped": addr }))
}
