//! Procedural ground-truth scenes rendered by ray casting.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::{Camera, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Checker,
    Stripes,
    Rings,
    Noise,
}

/// Two-color procedural texture over surface coordinates in scene units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub pattern: Pattern,
    pub period: f64,
    pub angle: f64,
    pub base: [f64; 3],
    pub alt: [f64; 3],
    pub seed: u64,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn hash2(seed: u64, i: i64, j: i64) -> f64 {
    let mut h = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (i, j) = (x0 as i64, y0 as i64);
    let a = hash2(seed, i, j) * (1.0 - sx) + hash2(seed, i + 1, j) * sx;
    let b = hash2(seed, i, j + 1) * (1.0 - sx) + hash2(seed, i + 1, j + 1) * sx;
    a * (1.0 - sy) + b * sy
}

impl Texture {
    pub fn random(rng: &mut impl Rng, min_period: f64, max_period: f64) -> Self {
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Checker,
            1 => Pattern::Stripes,
            2 => Pattern::Rings,
            _ => Pattern::Noise,
        };
        Texture {
            pattern,
            period: rng.gen_range(min_period..max_period),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            base: random_color(rng),
            alt: random_color(rng),
            seed: rng.gen(),
        }
    }

    /// Color at surface coordinates `(a, b)`.
    pub fn eval(&self, a: f64, b: f64) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = ((c * a + s * b) / self.period, (-s * a + c * b) / self.period);
        let t = match self.pattern {
            Pattern::Checker => ((u.floor() + v.floor()).rem_euclid(2.0) == 0.0) as u8 as f64,
            Pattern::Stripes => (0.5 + 0.5 * (2.0 * std::f64::consts::PI * u).sin()).powi(2),
            Pattern::Rings => 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (u * u + v * v).sqrt()).cos(),
            Pattern::Noise => value_noise(self.seed, u, v) * 0.65 + value_noise(self.seed ^ 1, 2.0 * u, 2.0 * v) * 0.35,
        };
        [0, 1, 2].map(|k| self.base[k] * (1.0 - t) + self.alt[k] * t)
    }
}

/// Textured parallelogram `center + a·u + b·v`, `|a|, |b| ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub center: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub texture: Texture,
}

/// Lit solid ellipsoid with a banded surface pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Rows map world offsets into the ellipsoid frame.
    pub frame: [[f64; 3]; 3],
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContent {
    pub quads: Vec<Quad>,
    pub ellipsoids: Vec<Ellipsoid>,
}

/// A ray hit: distance along the unit ray and shaded color.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.35, -0.75, -0.55).normalize()
}

impl Quad {
    /// A rectangle with half extents `(hu, hv)` whose normal is `-z` rotated by yaw, pitch and roll.
    pub fn oriented(center: Vector3<f64>, hu: f64, hv: f64, yaw: f64, pitch: f64, roll: f64, texture: Texture) -> Self {
        let r = Rotation3::from_euler_angles(pitch, yaw, roll);
        let u = r * Vector3::new(hu, 0.0, 0.0);
        let v = r * Vector3::new(0.0, hv, 0.0);
        Quad {
            center: center.into(),
            u: u.into(),
            v: v.into(),
            texture,
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (c, u, v) = (v3(self.center), v3(self.u), v3(self.v));
        let n = u.cross(&v);
        let denom = d.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (c - o).dot(&n) / denom;
        if t <= 1e-6 {
            return None;
        }
        let p = o + d * t - c;
        let (uu, vv) = (u.norm_squared(), v.norm_squared());
        let a = p.dot(&u) / uu;
        let b = p.dot(&v) / vv;
        if a.abs() > 1.0 || b.abs() > 1.0 {
            return None;
        }
        Some(Hit {
            t,
            color: self.texture.eval(a * uu.sqrt(), b * vv.sqrt()),
        })
    }
}

impl Ellipsoid {
    fn frame(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[v3(self.frame[0]).transpose(), v3(self.frame[1]).transpose(), v3(self.frame[2]).transpose()])
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let f = self.frame();
        let r = v3(self.radii);
        let p = (f * (o - v3(self.center))).component_div(&r);
        let q = (f * d).component_div(&r);
        let a = q.norm_squared();
        let b = p.dot(&q);
        let c = p.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > 1e-6)?;
        let local = p + q * t;
        let n = (f.transpose() * local.component_div(&r)).normalize();
        let shade = 0.35 + 0.65 * n.dot(&light_dir()).max(0.0);
        let lat = local.y * r.y;
        let lon = local.z.atan2(local.x) * r.x.max(r.z);
        let tex = self.texture.eval(lon, lat);
        Some(Hit {
            t,
            color: tex.map(|v| v * shade),
        })
    }
}

impl SceneContent {
    /// Random layout in front of cameras looking down +z at the origin: a
    /// large backdrop, a few tilted textured panels and ellipsoid clusters.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut backdrop = Texture::random(rng, 0.2, 0.6);
        backdrop.alt = [0, 1, 2].map(|k| 0.6 * backdrop.base[k] + 0.4 * backdrop.alt[k]);
        let mut quads = vec![Quad::oriented(
            Vector3::new(0.0, 0.0, 1.6),
            5.0,
            5.0,
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
            rng.gen_range(0.0..1.0),
            backdrop,
        )];
        for _ in 0..rng.gen_range(3..=5) {
            let center = Vector3::new(rng.gen_range(-1.3..1.3), rng.gen_range(-1.2..1.2), rng.gen_range(-0.6..0.9));
            quads.push(Quad::oriented(
                center,
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.3..0.8),
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(0.0..std::f64::consts::PI),
                Texture::random(rng, 0.04, 0.14),
            ));
        }
        let mut ellipsoids = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            let cc = Vector3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.1..1.1), rng.gen_range(-0.8..0.6));
            let color_tex = Texture::random(rng, 0.03, 0.1);
            for _ in 0..rng.gen_range(3..=5) {
                let off = Vector3::new(rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35));
                let rot = Rotation3::from_euler_angles(
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                );
                let m = rot.matrix().transpose();
                let mut texture = color_tex.clone();
                texture.base = random_color(rng);
                texture.seed = rng.gen();
                ellipsoids.push(Ellipsoid {
                    center: (cc + off).into(),
                    radii: [rng.gen_range(0.08..0.28), rng.gen_range(0.08..0.28), rng.gen_range(0.08..0.28)],
                    frame: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
                    texture,
                });
            }
        }
        SceneContent { quads, ellipsoids }
    }

    /// Nearest hit along the ray `o + t·d` (`d` unit length).
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let quads = self.quads.iter().filter_map(|q| q.intersect(o, d));
        let ells = self.ellipsoids.iter().filter_map(|e| e.intersect(o, d));
        quads.chain(ells).min_by(|a, b| a.t.total_cmp(&b.t))
    }
}

pub const SKY: [f64; 3] = [0.55, 0.65, 0.8];

/// Renders `camera` with `ss`×`ss` supersampling per pixel. Also returns the
/// camera-frame depth of the pixel-center ray (0 where it misses).
pub fn render_content(content: &SceneContent, camera: &Camera, ss: usize) -> (Image, Vec<f64>) {
    use rayon::prelude::*;
    let (w, h) = (camera.width, camera.height);
    let o = camera.origin();
    let rot = camera.rotation();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = camera.ray_direction(px, py);
                        let c = content.trace(&o, &d).map_or(SKY, |hit| hit.color);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                rgb.extend(acc.iter().map(|v| (v / (ss * ss) as f64).clamp(0.0, 1.0)));
                let d = camera.ray_direction(x as f64, y as f64);
                depth.push(content.trace(&o, &d).map_or(0.0, |hit| hit.t * (rot * d).z));
            }
            (rgb, depth)
        })
        .collect();
    let mut img = Vec::with_capacity(w * h * 3);
    let mut dep = Vec::with_capacity(w * h);
    for (r, d) in rows {
        img.extend(r);
        dep.extend(d);
    }
    (Image::from_data(w, h, 3, img).expect("render shape"), dep)
}
