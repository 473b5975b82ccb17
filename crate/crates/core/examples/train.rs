//! Train a small densifier on a handful of synthetic scenes.
//!
//!     cargo run --release --example train -- out_dir [steps]

use splatlens::synth::{generate_synthetic_dataset, SynthConfig};
use splatlens::train::{evaluate, prepare_scenes, summarize, train, TrainConfig};

fn main() -> splatlens::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "train_out".into());
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let synth = SynthConfig::default();
    let scenes = generate_synthetic_dataset(1, 8, &synth)?;
    let (tr, held) = scenes.split_at(6);
    let cfg = TrainConfig {
        steps,
        eval_every: 50,
        checkpoint_every: 50,
        warmup: 10,
        ..TrainConfig::default()
    };
    let train_set = prepare_scenes(tr, cfg.model.num_views)?;
    let held_set = prepare_scenes(held, cfg.model.num_views)?;
    let outcome = train(&cfg, &train_set, &held_set, Some(std::path::Path::new(&out)))?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("loss {:.5} -> {:.5}", first.loss, last.loss);
    }
    let s = summarize(&evaluate(&outcome.model, &held_set)?);
    println!("held out: {:.2} dB (input {:.2} dB), {} scenes", s.psnr, s.input_psnr, s.scenes);
    Ok(())
}
