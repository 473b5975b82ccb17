mod oracles;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatlens::pixel::{spawn_pixel_gaussians, ALPHA_INIT, SCALE_INIT};
use splatlens::SourceTag;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spawn_laws(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (views, depths) = oracles::pixel_fixture(&mut rng);
        let out = spawn_pixel_gaussians(&views, &depths, ALPHA_INIT, SCALE_INIT).unwrap();
        let expect: usize = views.iter().zip(&depths).map(|(v, d)| {
            (0..d.len()).filter(|&i| v.mask.data[i] && d[i] > 0.0).count()
        }).sum();
        let masked: usize = views.iter().map(|v| v.mask.count()).sum();
        prop_assert_eq!(out.set.len(), expect);
        prop_assert_eq!(out.skipped, masked - expect);
        for ((g, tag), &(v, x, y)) in out.set.iter().zip(&out.sources) {
            let cam = &views[v].camera;
            prop_assert_eq!(tag, SourceTag::PixelSpawned);
            prop_assert!(oracles::ray_distance(&cam.origin(), &cam.ray_direction(x as f64, y as f64), &g.mu) < 1e-9);
            let pr = cam.project(&g.mu);
            prop_assert!((pr.x - x as f64).abs() < 0.5 && (pr.y - y as f64).abs() < 0.5);
            let z = cam.to_camera_frame(&g.mu).z;
            prop_assert!((z - depths[v][y * cam.width + x]).abs() < 1e-9 * z.max(1.0));
            let c = views[v].rgb.pixel(x, y);
            prop_assert_eq!([g.color.x, g.color.y, g.color.z], [c[0], c[1], c[2]]);
            prop_assert!((g.opacity() - ALPHA_INIT).abs() < 1e-15);
            prop_assert!(g.scale().iter().all(|s| (s - SCALE_INIT).abs() < 1e-15));
        }
    }
}
