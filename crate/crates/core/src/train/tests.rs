use super::*;
use crate::synth::{generate_scene, FitConfig};
use crate::testing::{central_difference, rel_err};
use rand::Rng;

fn image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn as_var(g: &mut Graph, img: &Image) -> Var {
    g.input(Tensor::from_vec(img.num_pixels(), 3, img.data.clone()))
}

#[test]
fn masked_mse_identical_is_zero() {
    let a = image(6, 5, 1);
    let mut g = Graph::new();
    let p = as_var(&mut g, &a);
    let l = masked_mse(&mut g, &[p], &[a], &[Mask::full(6, 5)]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn masked_mse_full_mask_matches_direct_sum() {
    let (a, b) = (image(7, 4, 2), image(7, 4, 3));
    let mut g = Graph::new();
    let p = as_var(&mut g, &a);
    let l = masked_mse(&mut g, &[p], &[b.clone()], &[Mask::full(7, 4)]).unwrap();
    let direct: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 28.0;
    assert!((g.value(l).item() - direct).abs() < 1e-14);
}

#[test]
fn masked_mse_constant_error_is_three_e_squared() {
    let e = 0.07;
    let gt = image(8, 8, 4);
    let mut pred = gt.clone();
    pred.data.iter_mut().for_each(|v| *v += e);
    for cover in [1, 13, 32, 64] {
        let mut m = Mask::new(8, 8);
        for i in 0..cover {
            m.set(i % 8, i / 8, true);
        }
        let mut g = Graph::new();
        let p = as_var(&mut g, &pred);
        let l = masked_mse(&mut g, &[p], &[gt.clone()], &[m]).unwrap();
        assert!((g.value(l).item() - 3.0 * e * e).abs() < 1e-14, "{cover}");
    }
}

#[test]
fn masked_mse_normalizes_over_all_views() {
    let (a, b, c, d) = (image(4, 4, 5), image(4, 4, 6), image(4, 4, 7), image(4, 4, 8));
    let mut m1 = Mask::new(4, 4);
    m1.set(1, 1, true);
    let m2 = Mask::full(4, 4);
    let mut g = Graph::new();
    let (p1, p2) = (as_var(&mut g, &a), as_var(&mut g, &c));
    let l = masked_mse(&mut g, &[p1, p2], &[b.clone(), d.clone()], &[m1, m2]).unwrap();
    let s1: f64 = (0..3).map(|k| (a.pixel(1, 1)[k] - b.pixel(1, 1)[k]).powi(2)).sum();
    let s2: f64 = c.data.iter().zip(&d.data).map(|(x, y)| (x - y) * (x - y)).sum();
    assert!((g.value(l).item() - (s1 + s2) / 17.0).abs() < 1e-14);
}

#[test]
fn masked_mse_rejects_empty_masks() {
    let a = image(3, 3, 9);
    let mut g = Graph::new();
    let p = as_var(&mut g, &a);
    assert!(matches!(masked_mse(&mut g, &[p], &[a], &[Mask::new(3, 3)]), Err(Error::EmptyMask)));
}

#[test]
fn masked_mse_gradient_matches_finite_differences() {
    let (a, b) = (image(5, 5, 10), image(5, 5, 11));
    let mut m = Mask::new(5, 5);
    for i in 0..12 {
        m.set(i % 5, i / 5, true);
    }
    let eval = |data: &[f64]| {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(25, 3, data.to_vec()));
        let l = masked_mse(&mut g, &[p], &[b.clone()], &[m.clone()]).unwrap();
        let grad = g.backward(l).get(p).unwrap().clone();
        (g.value(l).item(), grad)
    };
    let (_, grad) = eval(&a.data);
    for idx in [0, 4, 17, 35, 50, 74] {
        let fd = central_difference(
            |v| {
                let mut d = a.data.clone();
                d[idx] = v;
                eval(&d).0
            },
            a.data[idx],
            1e-4,
        );
        if grad.data[idx] == 0.0 {
            assert!(fd.abs() < 1e-12);
        } else {
            assert!(rel_err(grad.data[idx], fd) < 1e-6, "{idx}");
        }
    }
}

#[test]
fn mask_reg_values_and_gradient() {
    let mut g = Graph::new();
    let zeros = g.input(Tensor::zeros(40, 1));
    let l0 = mask_reg_loss(&mut g, &[zeros]);
    assert_eq!(g.value(l0).item(), 0.0);

    let mut v = vec![0.0; 300];
    v[..170].iter_mut().for_each(|x| *x = 1.0);
    let e = g.input(Tensor::from_vec(300, 1, v));
    let l = mask_reg_loss(&mut g, &[e]);
    assert_eq!(g.value(l).item(), 28900.0);
    let grad = g.backward(l);
    assert!(grad.get(e).unwrap().data.iter().all(|d| *d == 340.0));

    let a = g.input(Tensor::filled(100, 1, 1.0));
    let b = g.input(Tensor::filled(200, 1, 1.0));
    let l2 = mask_reg_loss(&mut g, &[a, b]);
    assert_eq!(g.value(l2).item(), 150.0 * 150.0);
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        high_res: 128,
        focal: 128.0,
        fit: FitConfig {
            steps: 120,
            ..FitConfig::default()
        },
        ..SynthConfig::default()
    }
}

fn tiny_scenes(n: usize) -> Vec<PreparedRoi> {
    let scenes: Vec<_> = (0..n as u64).map(|s| generate_scene(100 + s, &tiny_synth()).unwrap()).collect();
    prepare_scenes(&scenes, 2).unwrap()
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        eval_every: 2,
        eval_subset: 1,
        checkpoint_every: 1,
        model: ModelConfig {
            enc_widths: vec![16, 16, 32, 32, 32],
            dec_widths: vec![32, 32, 32, 32],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let scenes = tiny_scenes(1);
    let cfg = tiny_config(0);
    let out = train(&cfg, &scenes, &scenes, None).unwrap();
    assert!(out.log.is_empty());
    let fresh = DensifierModel::new(cfg.model.clone()).unwrap();
    let a = evaluate(&out.model, &scenes).unwrap();
    let b = evaluate(&fresh, &scenes).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic_and_writes_logs() {
    let scenes = tiny_scenes(2);
    let cfg = tiny_config(4);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&cfg, &scenes, &scenes, Some(d1.path())).unwrap();
    let b = train(&cfg, &scenes, &scenes, Some(d2.path())).unwrap();
    assert_eq!(a.log, b.log);
    let csv1 = std::fs::read(d1.path().join("metrics.csv")).unwrap();
    assert_eq!(csv1, std::fs::read(d2.path().join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv1).unwrap();
    assert!(text.starts_with("step,loss,masked_psnr,masked_ssim,num_gaussians\n"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(a.eval.len(), 2);
    let back = DensifierModel::load(d1.path()).unwrap();
    assert_eq!(evaluate(&back, &scenes).unwrap(), evaluate(&a.model, &scenes).unwrap());
    let cfg_back = TrainConfig::load(d1.path().join("train_config.json")).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn training_reduces_loss_on_one_scene() {
    let scenes = tiny_scenes(1);
    let cfg = TrainConfig {
        eval_every: 0,
        checkpoint_every: 0,
        warmup: 5,
        ..tiny_config(60)
    };
    let out = train(&cfg, &scenes, &scenes, None).unwrap();
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_keeps_last_checkpoint() {
    let scenes = tiny_scenes(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(2);
    train(&cfg, &scenes, &scenes, Some(dir.path())).unwrap();
    let ckpt = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    let mut bad = scenes[0].clone();
    bad.input.gaussian_fixed.data[0] = f64::NAN;
    let err = train(&cfg, &[bad], &[], Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
    assert_eq!(std::fs::read(dir.path().join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn config_checks() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        w_mask: 1e-4,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7, "model": {"k": 2}}"#).unwrap();
    assert_eq!((partial.steps, partial.model.k, partial.model.window), (7, 2, 16));
}
