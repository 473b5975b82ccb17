//! Per-Gaussian projection to a screen-space splat and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{SplatRefs, AA_DILATION, SIGMA_EXTENT};
use crate::types::{logistic, quat_to_rotation, Camera, NEAR_PLANE};

/// Screen-space splat plus everything the adjoint needs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Projected {
    pub mean: [f64; 2],
    /// Inverse of the (dilated) 2D covariance, as `(A, B, C)` with
    /// quadratic form `A dx² + 2B dx dy + C dy²`.
    pub conic: [f64; 3],
    /// Opacity after dilation compensation.
    pub opacity: f64,
    pub depth: f64,
    pub color: [f64; 3],
    pub radius: f64,
}

/// Intermediate values of the projection, recomputed for the backward pass.
pub(crate) struct ProjectionState {
    pub splat: Projected,
    qhat: [f64; 4],
    qnorm: f64,
    rq: Matrix3<f64>,
    scale: Vector3<f64>,
    cov3: Matrix3<f64>,
    t_cam: Vector3<f64>,
    jw: Matrix2x3<f64>,
    cov2: Matrix2<f64>,
    kappa: f64,
    alpha: f64,
    raw_color: [f64; 3],
}

pub(crate) fn project(p: &SplatRefs, j: usize, cam: &Camera, aa: bool) -> Option<ProjectionState> {
    let mu = Vector3::new(p.mu[3 * j], p.mu[3 * j + 1], p.mu[3 * j + 2]);
    let w = cam.rotation();
    let t_cam = w * mu + cam.translation();
    let z = t_cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let q = [p.rotation[4 * j], p.rotation[4 * j + 1], p.rotation[4 * j + 2], p.rotation[4 * j + 3]];
    let qnorm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let qhat = crate::types::quat_normalize(q);
    let rq = quat_to_rotation(qhat);
    let scale = Vector3::new(
        p.log_scale[3 * j].exp(),
        p.log_scale[3 * j + 1].exp(),
        p.log_scale[3 * j + 2].exp(),
    );
    let m = rq * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let jac = Matrix2x3::new(fx / z, 0.0, -fx * t_cam.x / (z * z), 0.0, fy / z, -fy * t_cam.y / (z * z));
    let jw = jac * w;
    let cov2 = jw * cov3 * jw.transpose();
    let (a, b, c) = (cov2[(0, 0)], cov2[(0, 1)], cov2[(1, 1)]);

    let delta = if aa { AA_DILATION } else { 0.0 };
    let (ad, cd) = (a + delta, c + delta);
    let det = a * c - b * b;
    let det_d = ad * cd - b * b;
    if !(det_d > 0.0) || (aa && !(det > 0.0)) {
        return None;
    }
    let kappa = if aa { (det / det_d).sqrt() } else { 1.0 };
    let alpha = logistic(p.opacity_logit[j]);

    let mid = 0.5 * (ad + cd);
    let lambda_max = mid + (mid * mid - det_d).max(0.0).sqrt();
    let radius = SIGMA_EXTENT * lambda_max.sqrt();
    let mean = [fx * t_cam.x / z + cam.cx, fy * t_cam.y / z + cam.cy];
    let raw_color = [p.color[3 * j], p.color[3 * j + 1], p.color[3 * j + 2]];
    let splat = Projected {
        mean,
        conic: [cd / det_d, -b / det_d, ad / det_d],
        opacity: alpha * kappa,
        depth: z,
        color: raw_color.map(|v| v.clamp(0.0, 1.0)),
        radius,
    };
    if !splat.mean.iter().all(|v| v.is_finite()) || !radius.is_finite() {
        return None;
    }
    Some(ProjectionState {
        splat,
        qhat,
        qnorm,
        rq,
        scale,
        cov3,
        t_cam,
        jw,
        cov2,
        kappa,
        alpha,
        raw_color,
    })
}

/// Screen-space gradients of one splat.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Gradients of one Gaussian's parameters.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ParamGrad {
    pub mu: [f64; 3],
    pub opacity_logit: f64,
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub color: [f64; 3],
}

pub(crate) fn project_backward(st: &ProjectionState, cam: &Camera, aa: bool, g: &SplatGrad) -> ParamGrad {
    let mut out = ParamGrad::default();
    for ch in 0..3 {
        let c = st.raw_color[ch];
        if (0.0..=1.0).contains(&c) {
            out.color[ch] = g.color[ch];
        }
    }

    let alpha = st.alpha;
    out.opacity_logit = g.opacity * st.kappa * alpha * (1.0 - alpha);
    let d_kappa = g.opacity * alpha;

    let [qa, qb, qc] = st.splat.conic;
    let conic = Matrix2::new(qa, qb, qb, qc);
    let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let mut g_cov2 = -(conic * g_conic * conic);
    if aa {
        if let Some(inv) = st.cov2.try_inverse() {
            g_cov2 += (inv - conic) * (0.5 * st.kappa * d_kappa);
        }
    }

    let g_cov3 = st.jw.transpose() * g_cov2 * st.jw;
    let g_jw = 2.0 * g_cov2 * st.jw * st.cov3;
    let w = cam.rotation();
    let g_jac = g_jw * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let t = st.t_cam;
    let z = t.z;
    let z2 = z * z;
    let z3 = z2 * z;
    let mut gt = Vector3::new(g.mean[0] * fx / z, g.mean[1] * fy / z, -g.mean[0] * fx * t.x / z2 - g.mean[1] * fy * t.y / z2);
    gt.x += g_jac[(0, 2)] * (-fx / z2);
    gt.y += g_jac[(1, 2)] * (-fy / z2);
    gt.z += g_jac[(0, 0)] * (-fx / z2)
        + g_jac[(1, 1)] * (-fy / z2)
        + g_jac[(0, 2)] * (2.0 * fx * t.x / z3)
        + g_jac[(1, 2)] * (2.0 * fy * t.y / z3);
    let gmu = w.transpose() * gt;
    out.mu = [gmu.x, gmu.y, gmu.z];

    let m = st.rq * Matrix3::from_diagonal(&st.scale);
    let g_m = 2.0 * g_cov3 * m;
    let mut g_rq = Matrix3::zeros();
    for i in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += g_m[(r, i)] * st.rq[(r, i)];
            g_rq[(r, i)] = g_m[(r, i)] * st.scale[i];
        }
        out.log_scale[i] = ds * st.scale[i];
    }

    let [qw, qx, qy, qz] = st.qhat;
    let dr = |m: [[f64; 3]; 3]| -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += g_rq[(r, c)] * m[r][c];
            }
        }
        s
    };
    let gq = [
        dr([[0.0, -2.0 * qz, 2.0 * qy], [2.0 * qz, 0.0, -2.0 * qx], [-2.0 * qy, 2.0 * qx, 0.0]]),
        dr([[0.0, 2.0 * qy, 2.0 * qz], [2.0 * qy, -4.0 * qx, -2.0 * qw], [2.0 * qz, 2.0 * qw, -4.0 * qx]]),
        dr([[-4.0 * qy, 2.0 * qx, 2.0 * qw], [2.0 * qx, 0.0, 2.0 * qz], [-2.0 * qw, 2.0 * qz, -4.0 * qy]]),
        dr([[-4.0 * qz, -2.0 * qw, 2.0 * qx], [2.0 * qw, -4.0 * qz, 2.0 * qy], [2.0 * qx, 2.0 * qy, 0.0]]),
    ];
    let dot = gq[0] * qw + gq[1] * qx + gq[2] * qy + gq[3] * qz;
    for (k, qk) in st.qhat.iter().enumerate() {
        out.rotation[k] = (gq[k] - qk * dot) / st.qnorm;
    }
    out
}
