//! Fixture generators and numeric oracles shared by unit, integration and
//! acceptance tests.

use nalgebra::{Matrix4, Vector3};
use rand::Rng;

use crate::types::{Camera, Gaussian3D, GaussianSet, SourceTag};

/// Camera at the origin looking down +z with a square image.
pub fn canonical_camera(size: usize) -> Camera {
    let f = size as f64;
    Camera::new(Matrix4::identity(), f, f, size as f64 / 2.0, size as f64 / 2.0, size, size)
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 {
            return q.map(|v| v / n);
        }
    }
}

/// `n` Gaussians inside the view frustum of `camera`, projecting to splats
/// of roughly 1.5–6 px standard deviation.
pub fn random_visible_gaussians(rng: &mut impl Rng, n: usize, camera: &Camera) -> GaussianSet {
    let mut set = GaussianSet::new();
    let origin = camera.origin();
    for _ in 0..n {
        let x = rng.gen_range(0.1..0.9) * camera.width as f64;
        let y = rng.gen_range(0.1..0.9) * camera.height as f64;
        let depth = rng.gen_range(1.5..4.0);
        let dir = camera.ray_direction(x, y);
        let z_per_unit = (camera.rotation() * dir).z;
        let mu = origin + dir * (depth / z_per_unit);
        let px_sigma: f64 = rng.gen_range(1.5..6.0);
        let base = px_sigma * depth / camera.fx;
        let scale = Vector3::new(
            base * rng.gen_range(0.5..1.5),
            base * rng.gen_range(0.5..1.5),
            base * rng.gen_range(0.5..1.5),
        );
        let color = Vector3::new(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        let g = Gaussian3D::new(mu, rng.gen_range(0.2..0.9), scale, random_unit_quat(rng), color);
        set.push(g, SourceTag::RoiInput);
    }
    set
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`; 0 when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

/// Compares [`crate::raster::render_backward`] with central differences of a
/// random linear functional of the rendered RGB and opacity, for every
/// parameter coordinate. Returns `(analytic, numeric)` pairs.
pub fn render_gradient_pairs(
    rng: &mut impl Rng,
    set: &GaussianSet,
    camera: &Camera,
    opts: &crate::raster::RasterOptions,
    h: f64,
) -> Vec<(f64, f64)> {
    use crate::raster::{render, render_backward, RenderUpstream, SplatParams};
    let npix = camera.num_pixels();
    let w_rgb: Vec<f64> = (0..npix * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w_acc: Vec<f64> = (0..npix).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |p: &SplatParams| -> f64 {
        let out = render(p.refs(), camera, opts, None, None).expect("render");
        let a: f64 = out.rgb.data.iter().zip(&w_rgb).map(|(x, w)| x * w).sum();
        let b: f64 = out.acc_opacity.iter().zip(&w_acc).map(|(x, w)| x * w).sum();
        a + b
    };
    let base = SplatParams::from_set(set);
    let up = RenderUpstream {
        d_rgb: w_rgb.clone(),
        d_acc: Some(w_acc.clone()),
    };
    let adj = render_backward(base.refs(), camera, opts, None, &up).expect("backward");
    let mut pairs = Vec::new();
    let groups: [(fn(&mut SplatParams) -> &mut Vec<f64>, &Vec<f64>); 5] = [
        (|p| &mut p.mu, &adj.d_mu),
        (|p| &mut p.opacity_logit, &adj.d_opacity_logit),
        (|p| &mut p.log_scale, &adj.d_log_scale),
        (|p| &mut p.rotation, &adj.d_rotation),
        (|p| &mut p.color, &adj.d_color),
    ];
    for (field, grad) in groups {
        let len = grad.len();
        for i in 0..len {
            let mut p = base.clone();
            let x0 = field(&mut p)[i];
            let numeric = central_difference(
                |x| {
                    field(&mut p)[i] = x;
                    loss(&p)
                },
                x0,
                h,
            );
            pairs.push((grad[i], numeric));
        }
    }
    pairs
}
