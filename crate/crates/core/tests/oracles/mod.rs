//! Scalar reference implementations, written without the rasterizer's
//! tiling, sorting or caching. Shared by integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use splatlens::{Camera, GaussianSet, Mask};

pub const DILATION: f64 = 0.3;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const T_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct Splat {
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse 2D covariance.
    pub inv: Matrix2<f64>,
    pub opacity: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

fn rotation(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// EWA projection of every Gaussian in front of the camera.
pub fn project_all(set: &GaussianSet, cam: &Camera, aa: bool) -> Vec<Splat> {
    let w = cam.rotation();
    let mut out = Vec::new();
    for (j, (g, _)) in set.iter().enumerate() {
        let t = w * g.mu + cam.translation();
        if t.z <= 1e-4 {
            continue;
        }
        let r = rotation(g.rotation);
        let s2 = Matrix3::from_diagonal(&g.log_scale.map(|v| (2.0 * v).exp()));
        let sigma = r * s2 * r.transpose();
        let jac = Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov: Matrix2<f64> = jac * w * sigma * w.transpose() * jac.transpose();
        let mut opacity = sigmoid(g.opacity_logit);
        let mut cov_d = cov;
        if aa {
            cov_d[(0, 0)] += DILATION;
            cov_d[(1, 1)] += DILATION;
            let det = cov.determinant();
            if !(det > 0.0) {
                continue;
            }
            opacity *= (det / cov_d.determinant()).sqrt();
        }
        let Some(inv) = cov_d.try_inverse() else { continue };
        if !(cov_d.determinant() > 0.0) {
            continue;
        }
        out.push(Splat {
            index: j,
            mean: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
            inv,
            opacity,
            depth: t.z,
            color: [g.color.x, g.color.y, g.color.z].map(|c| c.clamp(0.0, 1.0)),
        });
    }
    out
}

/// Alpha of `s` at pixel `(x, y)`; zero beyond three standard deviations.
pub fn alpha_at(s: &Splat, x: f64, y: f64) -> f64 {
    let d = nalgebra::Vector2::new(x - s.mean[0], y - s.mean[1]);
    let m = (d.transpose() * s.inv * d)[(0, 0)];
    if m > 9.0 {
        0.0
    } else {
        (s.opacity * (-0.5 * m).exp()).min(ALPHA_CLAMP)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RayResult {
    pub rgb: [f64; 3],
    pub acc: f64,
    pub depth: f64,
    /// `(gaussian index, blending weight)` in compositing order.
    pub weights: Vec<(usize, f64)>,
}

/// Front-to-back compositing of `(index, alpha, depth, color)` samples
/// already sorted near to far.
pub fn composite(samples: &[(usize, f64, f64, [f64; 3])], depth_threshold: f64) -> RayResult {
    let mut r = RayResult::default();
    let mut t = 1.0;
    let mut have_depth = false;
    for &(j, a, z, c) in samples {
        if a == 0.0 {
            continue;
        }
        let next = t * (1.0 - a);
        if next < T_MIN {
            break;
        }
        let w = a * t;
        for k in 0..3 {
            r.rgb[k] += w * c[k];
        }
        r.weights.push((j, w));
        if !have_depth && next < depth_threshold {
            r.depth = z;
            have_depth = true;
        }
        t = next;
    }
    r.acc = 1.0 - t;
    r
}

pub fn render_pixel(splats: &[Splat], x: usize, y: usize, depth_threshold: f64) -> RayResult {
    let mut samples: Vec<(usize, f64, f64, [f64; 3])> = splats
        .iter()
        .map(|s| (s.index, alpha_at(s, x as f64, y as f64), s.depth, s.color))
        .collect();
    samples.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    composite(&samples, depth_threshold)
}

pub struct Rendered {
    pub rgb: Vec<f64>,
    pub acc: Vec<f64>,
    pub depth: Vec<f64>,
}

pub fn render(set: &GaussianSet, cam: &Camera, aa: bool) -> Rendered {
    let splats = project_all(set, cam, aa);
    let n = cam.num_pixels();
    let mut out = Rendered {
        rgb: vec![0.0; 3 * n],
        acc: vec![0.0; n],
        depth: vec![0.0; n],
    };
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            let r = render_pixel(&splats, x, y, 0.5);
            out.rgb[3 * p..3 * p + 3].copy_from_slice(&r.rgb);
            out.acc[p] = r.acc;
            out.depth[p] = r.depth;
        }
    }
    out
}

/// Each Gaussian's summed blending weight inside `mask`, divided by the
/// summed accumulated opacity there.
pub fn contributions(set: &GaussianSet, cam: &Camera, mask: &Mask, aa: bool) -> Vec<f64> {
    let splats = project_all(set, cam, aa);
    let mut weight = vec![0.0; set.len()];
    let mut total = 0.0;
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !mask.get(x, y) {
                continue;
            }
            let r = render_pixel(&splats, x, y, 0.5);
            total += r.acc;
            for (j, w) in r.weights {
                weight[j] += w;
            }
        }
    }
    if total <= 0.0 {
        return vec![0.0; set.len()];
    }
    weight.iter().map(|w| w / total).collect()
}

/// Indices whose contribution exceeds `tau` in at least `min_views` views,
/// plus the per-view contributions used to decide.
pub fn select(set: &GaussianSet, views: &[(Camera, Mask)], tau: f64, min_views: usize, aa: bool) -> (Vec<usize>, Vec<Vec<f64>>) {
    let contrib: Vec<Vec<f64>> = views.iter().map(|(c, m)| contributions(set, c, m, aa)).collect();
    let chosen = (0..set.len())
        .filter(|&j| contrib.iter().filter(|c| c[j] > tau).count() >= min_views)
        .collect();
    (chosen, contrib)
}

/// Distance from `p` to the ray from `origin` along `dir`.
pub fn ray_distance(origin: &Vector3<f64>, dir: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let d = dir.normalize();
    let v = p - origin;
    (v - d * v.dot(&d)).norm()
}

/// A camera looking at the origin from a random direction, `size` pixels square.
pub fn random_camera(rng: &mut impl rand::Rng, size: usize) -> Camera {
    let theta: f64 = rng.gen_range(-0.6..0.6);
    let phi: f64 = rng.gen_range(-0.3..0.3);
    let r: f64 = rng.gen_range(3.0..5.0);
    let eye = Vector3::new(r * theta.sin() * phi.cos(), r * phi.sin(), -r * theta.cos() * phi.cos());
    let f = size as f64 * rng.gen_range(0.8..1.4);
    Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), f, f, size, size)
}

/// Splats on the optical axis of a canonical camera, centred on pixel
/// `(size/2, size/2)` where their falloff is exactly 1.
pub fn axis_splats(depths_opacities: &[(f64, f64)]) -> GaussianSet {
    use splatlens::{Gaussian3D, SourceTag, types::IDENTITY_QUAT};
    GaussianSet::with_tag(
        depths_opacities
            .iter()
            .map(|&(z, o)| Gaussian3D::new(Vector3::new(0.0, 0.0, z), o, Vector3::repeat(0.3 * z), IDENTITY_QUAT, Vector3::new(0.5, 0.5, 0.5)))
            .collect(),
        SourceTag::RoiInput,
    )
}

/// Random views with random masks and depth maps, some depths missing.
pub fn pixel_fixture(rng: &mut impl rand::Rng) -> (Vec<splatlens::ImageView>, Vec<Vec<f64>>) {
    let nv = rng.gen_range(1..4);
    let mut views = Vec::new();
    let mut depths = Vec::new();
    for _ in 0..nv {
        let size = rng.gen_range(4..20);
        let cam = random_camera(rng, size);
        let rgb = splatlens::Image::from_data(size, size, 3, (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut mask = Mask::new(size, size);
        let p = rng.gen_range(0.0..1.0);
        for y in 0..size {
            for x in 0..size {
                mask.set(x, y, rng.gen_bool(p));
            }
        }
        let d = (0..size * size).map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.5..8.0) }).collect();
        views.push(splatlens::ImageView::new(rgb, mask, cam).unwrap());
        depths.push(d);
    }
    (views, depths)
}


/// A random set seen by three nearby cameras, each with a random rectangle mask.
pub fn roi_fixture(rng: &mut impl rand::Rng, n: usize) -> (GaussianSet, Vec<(Camera, Mask)>) {
    let base = splatlens::testing::canonical_camera(32);
    let set = splatlens::testing::random_visible_gaussians(rng, n, &base);
    let views = (0..3)
        .map(|i| {
            let cam = if i == 0 {
                base
            } else {
                let eye = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
                Camera::look_at(eye, Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, -1.0, 0.0), 32.0, 32.0, 32, 32)
            };
            let (w, h) = (rng.gen_range(6..24), rng.gen_range(6..24));
            let rect = splatlens::Rect {
                x0: rng.gen_range(0..32 - w),
                y0: rng.gen_range(0..32 - h),
                w,
                h,
            };
            (cam, Mask::from_rect(32, 32, rect))
        })
        .collect();
    (set, views)
}
