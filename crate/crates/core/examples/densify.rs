//! Densify the RoI of a synthetic scene and compare masked metrics.
//!
//!     cargo run --release --example densify -- [model_dir]
//!
//! Without a model directory an untrained model is used; its output equals
//! the coarse RoI plus the pixel-spawned defaults.

use splatlens::densifier::{DensifierModel, ModelConfig};
use splatlens::pipeline::densify_roi;
use splatlens::synth::{generate_scene, SynthConfig};
use splatlens::train::evaluate_set;

fn main() -> splatlens::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(dir) => DensifierModel::load(dir)?,
        None => DensifierModel::new(ModelConfig::default())?,
    };
    let scene = generate_scene(11, &SynthConfig::default())?;
    let views = scene.high_res_views()?;
    let out = densify_roi(&scene.g_input, &views, &scene.roi, &model)?;
    println!(
        "{:?}: {} background, {} RoI + {} pixel tokens -> {} densified",
        out.status, out.num_background, out.num_roi, out.num_pixel, out.num_densified
    );
    let nctx = model.config.num_views;
    if let (Some(a), Some(b)) = (
        evaluate_set(&scene.g_input, &views, &scene.roi, nctx)?,
        evaluate_set(&out.final_set, &views, &scene.roi, nctx)?,
    ) {
        println!("masked PSNR {:.2} -> {:.2} dB", a.masked_psnr, b.masked_psnr);
        println!("masked SSIM {:.4} -> {:.4}", a.masked_ssim, b.masked_ssim);
    }
    Ok(())
}
