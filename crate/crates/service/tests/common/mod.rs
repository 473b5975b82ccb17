#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use splatlens::densifier::{DensifierModel, ModelConfig};
use splatlens::synth::{generate_scene, FitConfig, SynthConfig};

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub scene: PathBuf,
    pub model: PathBuf,
    pub root: PathBuf,
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        enc_widths: vec![16, 16, 32, 32, 32],
        dec_widths: vec![32, 32, 32, 32],
        seed: 5,
        ..ModelConfig::default()
    }
}

/// One small synthetic scene and an untrained model, saved once per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            high_res: 128,
            focal: 128.0,
            fit: FitConfig {
                steps: 120,
                ..FitConfig::default()
            },
            ..SynthConfig::default()
        };
        let scene = generate_scene(21, &cfg).unwrap();
        let scene_dir = dir.path().join("scene");
        scene.save(&scene_dir).unwrap();
        let model_dir = dir.path().join("model");
        let mut model = DensifierModel::new(small_model()).unwrap();
        model.store.quantize_f32();
        model.save(&model_dir).unwrap();
        Fixture {
            root: dir.path().to_path_buf(),
            scene: scene_dir,
            model: model_dir,
            _dir: dir,
        }
    })
}

pub fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs the CLI in-process and returns its JSON output.
pub fn cli(args: &[&str]) -> serde_json::Value {
    let mut full = vec!["splatlens"];
    full.extend_from_slice(args);
    match splatlens_service::cli::run(full).unwrap() {
        splatlens_service::cli::Output::Json(v) => v,
        other => panic!("unexpected output {other:?}"),
    }
}
