use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::Result;
use crate::features::{projection_positions, PyramidLevel};
use crate::nn::{Graph, LayerNorm, Linear, Mlp, ParamStore, Tensor, Var};
use crate::raster::{render, render_backward, RasterOptions, RenderUpstream, SplatParams};
use crate::types::Camera;

/// Pre-norm transformer block with windowed self-attention over serialized tokens.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    pub(crate) wo: Linear,
    ln2: LayerNorm,
    pub(crate) ff: Mlp,
    width: usize,
    pub(crate) heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            wo: Linear::new(store, &format!("{name}.wo"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff: Mlp::new(store, &format!("{name}.ff"), width, 2 * width, width, rng),
            width,
            heads: width / head_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, window: usize) -> Var {
        let c = self.width;
        let h = self.ln1.forward(g, st, x);
        let qkv = self.qkv.forward(g, st, h);
        let q = g.slice_cols(qkv, 0, c);
        let k = g.slice_cols(qkv, c, c);
        let v = g.slice_cols(qkv, 2 * c, c);
        let a = g.window_attention(q, k, v, self.heads, window);
        let a = self.wo.forward(g, st, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, st, x);
        let f = self.ff.forward(g, st, h);
        g.add(x, f)
    }
}

/// Cross-attention from 3D tokens to the pyramid features found at their
/// projections in every context view. Tokens visible in no view pass through unchanged.
#[derive(Debug, Clone, Copy)]
pub struct ProjCrossAttn {
    pub(crate) ln_q: LayerNorm,
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) wo: Linear,
    pub(crate) ln_ff: LayerNorm,
    pub(crate) ff: Mlp,
    pub(crate) heads: usize,
}

impl ProjCrossAttn {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, feat: usize, heads: usize, rng: &mut impl Rng) -> Self {
        ProjCrossAttn {
            ln_q: LayerNorm::new(store, &format!("{name}.lnq"), width),
            wq: Linear::new(store, &format!("{name}.wq"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.wk"), feat, width, rng),
            wv: Linear::new(store, &format!("{name}.wv"), feat, width, rng),
            wo: Linear::new(store, &format!("{name}.wo"), width, width, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.lnff"), width),
            ff: Mlp::new(store, &format!("{name}.ff"), width, 2 * width, width, rng),
            heads,
        }
    }

    /// `points` is `n`×3; gradients flow into it through the projections.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, points: Var, levels: &[PyramidLevel]) -> Var {
        let n = g.shape(x).0;
        let nv = levels.len();
        let mut samples = Vec::with_capacity(nv);
        let mut valid_by_view = Vec::with_capacity(nv);
        for lvl in levels {
            let (pos, valid) = project_points(g, points, &lvl.camera);
            let s = g.bilinear_sample(lvl.map, pos, lvl.camera.height, lvl.camera.width, valid.clone());
            samples.push(s);
            valid_by_view.push(valid);
        }
        let stacked = g.concat_rows(&samples);
        let order: Vec<usize> = (0..n * nv).map(|r| (r % nv) * n + r / nv).collect();
        let keys_in = g.gather_rows(stacked, Rc::new(order));
        let valid: Vec<bool> = (0..n * nv).map(|r| valid_by_view[r % nv][r / nv]).collect();
        let any = Tensor::from_vec(n, 1, (0..n).map(|j| (0..nv).any(|i| valid[j * nv + i]) as u8 as f64).collect());
        let any = g.constant(any);

        let k = self.wk.forward(g, st, keys_in);
        let v = self.wv.forward(g, st, keys_in);
        let h = self.ln_q.forward(g, st, x);
        let q = self.wq.forward(g, st, h);
        let a = g.cross_attention(q, k, v, Rc::new(valid), self.heads);
        let a = self.wo.forward(g, st, a);
        let a = g.mul_col(a, any);
        let x1 = g.add(x, a);
        let h = self.ln_ff.forward(g, st, x1);
        let f = self.ff.forward(g, st, h);
        let f = g.mul_col(f, any);
        g.add(x1, f)
    }
}

/// Pixel positions (`n`×2) of world points (`n`×3) and their in-frame
/// validity. Off-frame rows are zero and receive no gradient.
pub fn project_points(g: &mut Graph, points: Var, camera: &Camera) -> (Var, Rc<Vec<bool>>) {
    let p = g.value(points);
    let centers: Vec<Vector3<f64>> = (0..p.rows).map(|r| Vector3::from_column_slice(p.row(r))).collect();
    let (pos, valid) = projection_positions(camera, &centers);
    let valid = Rc::new(valid);
    let cam = *camera;
    let vb = valid.clone();
    let var = g.custom(
        &[points],
        pos,
        Box::new(move |ctx| {
            let pts = ctx.parents[0];
            let r = cam.rotation();
            let mut out = Tensor::zeros(pts.rows, 3);
            for i in 0..pts.rows {
                if !vb[i] {
                    continue;
                }
                let c = cam.to_camera_frame(&Vector3::from_column_slice(pts.row(i)));
                let (gx, gy) = (ctx.grad.at(i, 0), ctx.grad.at(i, 1));
                let dc = Vector3::new(
                    gx * cam.fx / c.z,
                    gy * cam.fy / c.z,
                    -(gx * cam.fx * c.x + gy * cam.fy * c.y) / (c.z * c.z),
                );
                let dp = r.transpose() * dc;
                out.row_mut(i).copy_from_slice(dp.as_slice());
            }
            vec![Some(out)]
        }),
    );
    (var, valid)
}

/// Value of the hard decisions with the gradient of `soft`.
pub fn straight_through(g: &mut Graph, soft: Var, hard: &[bool]) -> Var {
    let (rows, cols) = g.shape(soft);
    assert_eq!(rows * cols, hard.len(), "straight-through length");
    let v = Tensor::from_vec(rows, cols, hard.iter().map(|h| *h as u8 as f64).collect());
    g.custom(&[soft], v, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
}

fn splat_params_from_rows(t: &Tensor) -> SplatParams {
    let mut p = SplatParams::default();
    for r in 0..t.rows {
        let row = t.row(r);
        p.mu.extend_from_slice(&row[0..3]);
        p.opacity_logit.push(row[3]);
        p.log_scale.extend_from_slice(&row[4..7]);
        p.rotation.extend_from_slice(&row[7..11]);
        p.color.extend_from_slice(&row[11..14]);
    }
    p
}

fn append(a: &mut SplatParams, b: &SplatParams) {
    a.mu.extend_from_slice(&b.mu);
    a.opacity_logit.extend_from_slice(&b.opacity_logit);
    a.log_scale.extend_from_slice(&b.log_scale);
    a.rotation.extend_from_slice(&b.rotation);
    a.color.extend_from_slice(&b.color);
}

/// Differentiable render of `params` (`M`×14) over a constant `background`.
/// `existence` (`M`×1, values 0 or 1) drops rows whose value is 0 and
/// receives the render's sensitivity to each value. Returns `H·W`×3.
pub fn render_op(
    g: &mut Graph,
    background: Rc<SplatParams>,
    params: Var,
    existence: Option<Var>,
    camera: &Camera,
    opts: &RasterOptions,
) -> Result<Var> {
    let m = g.shape(params).0;
    let mut all = splat_params_from_rows(g.value(params));
    append(&mut all, &background);
    let total = all.len();
    let keep: Option<Vec<bool>> = existence.map(|e| {
        let v = g.value(e);
        (0..total).map(|r| r >= m || v.data[r] > 0.5).collect()
    });
    let out = render(all.refs(), camera, opts, keep.as_deref(), None)?;
    let value = Tensor::from_vec(camera.num_pixels(), 3, out.rgb.data);
    let cam = *camera;
    let opts = opts.clone();
    let mut parents = vec![params];
    parents.extend(existence);
    let all = Rc::new(all);
    Ok(g.custom(
        &parents,
        value,
        Box::new(move |ctx| {
            let up = RenderUpstream {
                d_rgb: ctx.grad.data.clone(),
                d_acc: None,
            };
            let adj = render_backward(all.refs(), &cam, &opts, keep.as_deref(), &up)
                .expect("backward of a successful render");
            let mut dp = Tensor::zeros(m, 14);
            for j in 0..m {
                dp.row_mut(j).copy_from_slice(&adj.row(j));
            }
            let mut grads = vec![Some(dp)];
            if ctx.parents.len() > 1 {
                let dm = adj.d_mask.as_ref().map(|d| d[..m].to_vec()).unwrap_or_else(|| vec![0.0; m]);
                grads.push(Some(Tensor::from_vec(m, 1, dm)));
            }
            grads
        }),
    ))
}
