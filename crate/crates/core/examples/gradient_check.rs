//! Compare the rasterizer's analytic gradients with central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatlens::raster::RasterOptions;
use splatlens::testing::{canonical_camera, random_visible_gaussians, rel_err, render_gradient_pairs};

fn main() {
    let mut worst: f64 = 0.0;
    let (mut checked, mut bad) = (0, 0);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = canonical_camera(24);
        let set = random_visible_gaussians(&mut rng, 8, &cam);
        for (a, n) in render_gradient_pairs(&mut rng, &set, &cam, &RasterOptions::default(), 1e-5) {
            if a.abs().max(n.abs()) <= 1e-8 {
                continue;
            }
            checked += 1;
            let e = rel_err(a, n);
            worst = worst.max(e);
            if e >= 1e-3 {
                bad += 1;
            }
        }
    }
    println!("{checked} coordinates, {bad} with relative error >= 1e-3, worst {worst:.2e}");
}
