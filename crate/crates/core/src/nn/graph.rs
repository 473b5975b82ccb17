//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its value and a closure that maps the
//! output gradient to parent gradients. Nodes that cannot reach a parameter
//! or a gradient-tracked input carry no closure and are skipped.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Inputs to a backward closure.
pub struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub parents: Vec<&'a Tensor>,
    pub value: &'a Tensor,
    /// Whether each parent needs a gradient.
    pub needs: Vec<bool>,
}

pub type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackFn>,
    param: Option<ParamId>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into `out` (indexed by parameter id).
    pub fn accumulate_params(&self, store: &mut ParamStore) {
        for (pid, node) in &self.params {
            if let Some(g) = &self.grads[*node] {
                store.grad_mut(*pid).add_assign(g);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.values[v.0];
        (t.rows, t.cols)
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>, param: Option<ParamId>, tracked: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            parents,
            backward,
            param,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// An untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None, None, false)
    }

    /// A tracked leaf whose gradient can be read back after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None, None, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.value(id).clone();
        self.push(t, Vec::new(), None, Some(id), true)
    }

    /// Adds an op node. `backward` is dropped when no parent is tracked.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackFn) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let ids = parents.iter().map(|p| p.0).collect();
        self.push(value, ids, tracked.then_some(backward), None, tracked)
    }

    /// Reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let rv = &self.values[root.0];
        assert_eq!(rv.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(Tensor::filled(rv.rows, rv.cols, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bf) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &g,
                parents: node.parents.iter().map(|p| &self.values[*p]).collect(),
                value: &self.values[i],
                needs: node.parents.iter().map(|p| self.nodes[*p].tracked).collect(),
            };
            let pg = bf(&ctx);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[*p].tracked {
                    continue;
                }
                debug_assert_eq!((gp.rows, gp.cols), (self.values[*p].rows, self.values[*p].cols), "grad shape at node {p}");
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }

    // ---- elementwise and shape ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), false);
        self.custom(
            &[a, b],
            v,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| gemm(c.grad, false, c.parents[1], true)),
                    c.needs[1].then(|| gemm(c.parents[0], true, c.grad, false)),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shapes");
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect());
        self.custom(&[a, b], v, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "sub shapes");
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect());
        self.custom(&[a, b], v, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "mul shapes");
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect());
        self.custom(
            &[a, b],
            v,
            Box::new(|c| {
                let g = c.grad;
                let mk = |o: &Tensor| Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&o.data).map(|(p, q)| p * q).collect());
                vec![c.needs[0].then(|| mk(c.parents[1])), c.needs[1].then(|| mk(c.parents[0]))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.custom(&[a], v, Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.custom(&[a], v, Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// `a + b` with `b` (1×cols) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows, y.cols), (1, x.cols), "add_row shapes");
        let mut v = x.clone();
        for r in 0..v.rows {
            for (p, q) in v.row_mut(r).iter_mut().zip(&y.data) {
                *p += q;
            }
        }
        self.custom(
            &[a, b],
            v,
            Box::new(|c| {
                let g = c.grad;
                let gb = c.needs[1].then(|| {
                    let mut s = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (p, q) in s.data.iter_mut().zip(g.row(r)) {
                            *p += q;
                        }
                    }
                    s
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `a ⊙ b` with `b` (1×cols) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows, y.cols), (1, x.cols), "mul_row shapes");
        let mut v = x.clone();
        for r in 0..v.rows {
            for (p, q) in v.row_mut(r).iter_mut().zip(&y.data) {
                *p *= q;
            }
        }
        self.custom(
            &[a, b],
            v,
            Box::new(|c| {
                let (g, x, y) = (c.grad, c.parents[0], c.parents[1]);
                let ga = c.needs[0].then(|| {
                    let mut t = g.clone();
                    for r in 0..t.rows {
                        for (p, q) in t.row_mut(r).iter_mut().zip(&y.data) {
                            *p *= q;
                        }
                    }
                    t
                });
                let gb = c.needs[1].then(|| {
                    let mut s = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((p, q), w) in s.data.iter_mut().zip(g.row(r)).zip(x.row(r)) {
                            *p += q * w;
                        }
                    }
                    s
                });
                vec![ga, gb]
            }),
        )
    }

    /// `a ⊙ b` with `b` (rows×1) broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows, y.cols), (x.rows, 1), "mul_col shapes");
        let mut v = x.clone();
        for r in 0..v.rows {
            let s = y.data[r];
            v.row_mut(r).iter_mut().for_each(|p| *p *= s);
        }
        self.custom(
            &[a, b],
            v,
            Box::new(|c| {
                let (g, x, y) = (c.grad, c.parents[0], c.parents[1]);
                let ga = c.needs[0].then(|| {
                    let mut t = g.clone();
                    for r in 0..t.rows {
                        let s = y.data[r];
                        t.row_mut(r).iter_mut().for_each(|p| *p *= s);
                    }
                    t
                });
                let gb = c.needs[1].then(|| {
                    Tensor::from_vec(
                        g.rows,
                        1,
                        (0..g.rows).map(|r| g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum()).collect(),
                    )
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.custom(
            &[a],
            v,
            Box::new(|c| {
                let x = c.parents[0];
                vec![Some(Tensor::from_vec(
                    x.rows,
                    x.cols,
                    x.data.iter().zip(&c.grad.data).map(|(x, g)| g * gelu_grad(*x)).collect(),
                ))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::types::logistic);
        self.custom(
            &[a],
            v,
            Box::new(|c| {
                let y = c.value;
                vec![Some(Tensor::from_vec(
                    y.rows,
                    y.cols,
                    y.data.iter().zip(&c.grad.data).map(|(y, g)| g * y * (1.0 - y)).collect(),
                ))]
            }),
        )
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let n = x.cols as f64;
        let mut v = Tensor::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, p) in v.row_mut(r).iter_mut().zip(row) {
                *o = (p - mean) * is;
            }
            inv_std.push(is);
        }
        self.custom(
            &[a],
            v,
            Box::new(move |c| {
                let (g, y) = (c.grad, c.value);
                let mut out = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, gi), yi) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols).collect();
        let cols: usize = widths.iter().sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row counts");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.custom(
            parts,
            v,
            Box::new(move |c| {
                let g = c.grad;
                let mut off = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (k, w) in widths.iter().enumerate() {
                    if c.needs[k] {
                        let mut t = Tensor::zeros(g.rows, *w);
                        for r in 0..g.rows {
                            t.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        out.push(Some(t));
                    } else {
                        out.push(None);
                    }
                    off += w;
                }
                out
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols range");
        let mut v = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let cols = x.cols;
        self.custom(
            &[a],
            v,
            Box::new(move |c| {
                let g = c.grad;
                let mut t = Tensor::zeros(g.rows, cols);
                for r in 0..g.rows {
                    t.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![Some(t)]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let heights: Vec<usize> = parts.iter().map(|p| self.value(*p).rows).collect();
        let mut data = Vec::with_capacity(heights.iter().sum::<usize>() * cols);
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows column counts");
            data.extend_from_slice(&t.data);
        }
        let v = Tensor::from_vec(data.len() / cols.max(1), cols, data);
        let v = if cols == 0 { Tensor::zeros(heights.iter().sum(), 0) } else { v };
        self.custom(
            parts,
            v,
            Box::new(move |c| {
                let mut off = 0;
                heights
                    .iter()
                    .enumerate()
                    .map(|(k, h)| {
                        let t = c.needs[k].then(|| Tensor::from_vec(*h, cols, c.grad.data[off * cols..(off + h) * cols].to_vec()));
                        off += h;
                        t
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows range");
        let cols = x.cols;
        let v = Tensor::from_vec(len, cols, x.data[start * cols..(start + len) * cols].to_vec());
        let rows = x.rows;
        self.custom(
            &[a],
            v,
            Box::new(move |c| {
                let mut t = Tensor::zeros(rows, cols);
                t.data[start * cols..(start + len) * cols].copy_from_slice(&c.grad.data);
                vec![Some(t)]
            }),
        )
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size");
        let (r0, c0) = (x.rows, x.cols);
        let v = Tensor::from_vec(rows, cols, x.data.clone());
        self.custom(&[a], v, Box::new(move |c| vec![Some(Tensor::from_vec(r0, c0, c.grad.data.clone()))]))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let cols = x.cols;
        let mut v = Tensor::zeros(idx.len(), cols);
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(x.row(j));
        }
        let rows = x.rows;
        self.custom(
            &[a],
            v,
            Box::new(move |c| {
                let mut t = Tensor::zeros(rows, cols);
                for (i, &j) in idx.iter().enumerate() {
                    for (p, q) in t.row_mut(j).iter_mut().zip(c.grad.row(i)) {
                        *p += q;
                    }
                }
                vec![Some(t)]
            }),
        )
    }

    /// Mean over consecutive row groups; group `g` spans rows
    /// `starts[g]..starts[g+1]` (the last one runs to the end).
    pub fn segment_mean(&mut self, a: Var, starts: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows, x.cols);
        let bounds = |g: usize| (starts[g], if g + 1 < starts.len() { starts[g + 1] } else { rows });
        let mut v = Tensor::zeros(starts.len(), cols);
        for g in 0..starts.len() {
            let (s, e) = bounds(g);
            let inv = 1.0 / (e - s) as f64;
            for r in s..e {
                for (p, q) in v.row_mut(g).iter_mut().zip(x.row(r)) {
                    *p += q * inv;
                }
            }
        }
        self.custom(
            &[a],
            v,
            Box::new(move |c| {
                let mut t = Tensor::zeros(rows, cols);
                for g in 0..starts.len() {
                    let (s, e) = (starts[g], if g + 1 < starts.len() { starts[g + 1] } else { rows });
                    let inv = 1.0 / (e - s) as f64;
                    for r in s..e {
                        for (p, q) in t.row_mut(r).iter_mut().zip(c.grad.row(g)) {
                            *p = q * inv;
                        }
                    }
                }
                vec![Some(t)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows, x.cols);
        let v = Tensor::scalar(x.data.iter().sum());
        self.custom(&[a], v, Box::new(move |c| vec![Some(Tensor::filled(rows, cols, c.grad.item()))]))
    }

    /// Σ w ⊙ a for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, w: Rc<Tensor>) -> Var {
        let x = self.value(a);
        assert_eq!((x.rows, x.cols), (w.rows, w.cols), "weighted_sum shapes");
        let v = Tensor::scalar(x.data.iter().zip(&w.data).map(|(p, q)| p * q).sum());
        self.custom(&[a], v, Box::new(move |c| vec![Some(w.map(|q| q * c.grad.item()))]))
    }

    // ---- attention ----

    /// Multi-head self-attention within consecutive windows of `window` rows.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Var {
        let (n, c) = self.shape(q);
        assert!(c % heads == 0, "width {c} not divisible by {heads} heads");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(n, c);
        let mut probs = Vec::new();
        let mut s0 = 0;
        while s0 < n {
            let w = window.min(n - s0);
            for h in 0..heads {
                let o = h * dh;
                let mut p = vec![0.0; w * w];
                for i in 0..w {
                    let qi = &qv.row(s0 + i)[o..o + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..w {
                        let kj = &kv.row(s0 + j)[o..o + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[i * w + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..w {
                        let e = (p[i * w + j] - mx).exp();
                        p[i * w + j] = e;
                        z += e;
                    }
                    for j in 0..w {
                        p[i * w + j] /= z;
                    }
                    let orow = &mut out.data[(s0 + i) * c + o..(s0 + i) * c + o + dh];
                    for j in 0..w {
                        let pij = p[i * w + j];
                        for (x, y) in orow.iter_mut().zip(&vv.row(s0 + j)[o..o + dh]) {
                            *x += pij * y;
                        }
                    }
                }
                probs.push(p);
            }
            s0 += w;
        }
        self.custom(
            &[q, k, v],
            out,
            Box::new(move |ctx| {
                let (qv, kv, vv, g) = (ctx.parents[0], ctx.parents[1], ctx.parents[2], ctx.grad);
                let mut gq = Tensor::zeros(n, c);
                let mut gk = Tensor::zeros(n, c);
                let mut gv = Tensor::zeros(n, c);
                let mut s0 = 0;
                let mut pi = 0;
                while s0 < n {
                    let w = window.min(n - s0);
                    for h in 0..heads {
                        let o = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        for i in 0..w {
                            let gi = &g.row(s0 + i)[o..o + dh];
                            let mut dp = vec![0.0; w];
                            for j in 0..w {
                                let vj = &vv.row(s0 + j)[o..o + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let pij = p[i * w + j];
                                for (x, y) in gv.data[(s0 + j) * c + o..(s0 + j) * c + o + dh].iter_mut().zip(gi) {
                                    *x += pij * y;
                                }
                            }
                            let dot: f64 = (0..w).map(|j| dp[j] * p[i * w + j]).sum();
                            for j in 0..w {
                                let ds = p[i * w + j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for d in 0..dh {
                                    gq.data[(s0 + i) * c + o + d] += ds * kv.data[(s0 + j) * c + o + d];
                                    gk.data[(s0 + j) * c + o + d] += ds * qv.data[(s0 + i) * c + o + d];
                                }
                            }
                        }
                    }
                    s0 += w;
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        )
    }

    /// Each query row `i` attends over its `views` key/value rows
    /// `i*views .. (i+1)*views`, skipping those with `valid == false`.
    /// Queries without any valid token produce zeros.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, valid: Rc<Vec<bool>>, heads: usize) -> Var {
        let (n, c) = self.shape(q);
        let views = self.shape(k).0 / n.max(1);
        assert_eq!(self.shape(k), (n * views, c), "cross_attention key shape");
        assert_eq!(valid.len(), n * views, "cross_attention validity length");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(n, c);
        let mut probs = vec![0.0; n * heads * views];
        for i in 0..n {
            for h in 0..heads {
                let o = h * dh;
                let qi = &qv.row(i)[o..o + dh];
                let p = &mut probs[(i * heads + h) * views..(i * heads + h + 1) * views];
                let mut mx = f64::NEG_INFINITY;
                for t in 0..views {
                    if valid[i * views + t] {
                        let s = qi.iter().zip(&kv.row(i * views + t)[o..o + dh]).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[t] = s;
                        mx = mx.max(s);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for t in 0..views {
                    if valid[i * views + t] {
                        p[t] = (p[t] - mx).exp();
                        z += p[t];
                    } else {
                        p[t] = 0.0;
                    }
                }
                for t in 0..views {
                    p[t] /= z;
                    if p[t] != 0.0 {
                        for (x, y) in out.data[i * c + o..i * c + o + dh].iter_mut().zip(&vv.row(i * views + t)[o..o + dh]) {
                            *x += p[t] * y;
                        }
                    }
                }
            }
        }
        self.custom(
            &[q, k, v],
            out,
            Box::new(move |ctx| {
                let (qv, kv, vv, g) = (ctx.parents[0], ctx.parents[1], ctx.parents[2], ctx.grad);
                let mut gq = Tensor::zeros(n, c);
                let mut gk = Tensor::zeros(n * views, c);
                let mut gv = Tensor::zeros(n * views, c);
                for i in 0..n {
                    for h in 0..heads {
                        let o = h * dh;
                        let p = &probs[(i * heads + h) * views..(i * heads + h + 1) * views];
                        let gi = &g.row(i)[o..o + dh];
                        let mut dp = vec![0.0; views];
                        for t in 0..views {
                            if p[t] == 0.0 {
                                continue;
                            }
                            let r = i * views + t;
                            dp[t] = gi.iter().zip(&vv.row(r)[o..o + dh]).map(|(a, b)| a * b).sum();
                            for (x, y) in gv.data[r * c + o..r * c + o + dh].iter_mut().zip(gi) {
                                *x += p[t] * y;
                            }
                        }
                        let dot: f64 = (0..views).map(|t| dp[t] * p[t]).sum();
                        for t in 0..views {
                            let ds = p[t] * (dp[t] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let r = i * views + t;
                            for d in 0..dh {
                                gq.data[i * c + o + d] += ds * kv.data[r * c + o + d];
                                gk.data[r * c + o + d] += ds * qv.data[i * c + o + d];
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        )
    }

    // ---- sampling ----

    /// Bilinear lookup of an `h`×`w` map stored as `h·w` rows of features at
    /// continuous pixel positions `pos` (`n`×2, `(x, y)`). Rows whose
    /// `valid` entry is false, or that fall outside `[0, w−1]×[0, h−1]`,
    /// return zeros and no gradient.
    pub fn bilinear_sample(&mut self, map: Var, pos: Var, h: usize, w: usize, valid: Rc<Vec<bool>>) -> Var {
        let m = self.value(map);
        let p = self.value(pos);
        assert_eq!(m.rows, h * w, "feature map rows");
        assert_eq!(p.cols, 2, "positions must be n×2");
        let n = p.rows;
        let c = m.cols;
        let taps = Rc::new(bilinear_taps(p, h, w, &valid));
        let mut out = Tensor::zeros(n, c);
        for (i, t) in taps.iter().enumerate() {
            let Some(t) = t else { continue };
            let orow = out.row_mut(i);
            for (idx, wt) in t.idx.iter().zip(t.wt) {
                if wt != 0.0 {
                    for (o, v) in orow.iter_mut().zip(m.row(*idx)) {
                        *o += wt * v;
                    }
                }
            }
        }
        self.custom(
            &[map, pos],
            out,
            Box::new(move |ctx| {
                let (m, g) = (ctx.parents[0], ctx.grad);
                let gm = ctx.needs[0].then(|| {
                    let mut gm = Tensor::zeros(h * w, c);
                    for (i, t) in taps.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for (idx, wt) in t.idx.iter().zip(t.wt) {
                            if wt != 0.0 {
                                for (o, v) in gm.row_mut(*idx).iter_mut().zip(g.row(i)) {
                                    *o += wt * v;
                                }
                            }
                        }
                    }
                    gm
                });
                let gp = ctx.needs[1].then(|| {
                    let mut gp = Tensor::zeros(n, 2);
                    for (i, t) in taps.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let gi = g.row(i);
                        let dot = |k: usize| -> f64 { gi.iter().zip(m.row(t.idx[k])).map(|(a, b)| a * b).sum() };
                        let (v00, v10, v01, v11) = (dot(0), dot(1), dot(2), dot(3));
                        gp.data[2 * i] = (1.0 - t.fy) * (v10 - v00) + t.fy * (v11 - v01);
                        gp.data[2 * i + 1] = (1.0 - t.fx) * (v01 - v00) + t.fx * (v11 - v10);
                    }
                    gp
                });
                vec![gm, gp]
            }),
        )
    }
}

struct Taps {
    /// (x0,y0), (x1,y0), (x0,y1), (x1,y1)
    idx: [usize; 4],
    wt: [f64; 4],
    fx: f64,
    fy: f64,
}

fn bilinear_taps(p: &Tensor, h: usize, w: usize, valid: &[bool]) -> Vec<Option<Taps>> {
    (0..p.rows)
        .map(|i| {
            let (x, y) = (p.data[2 * i], p.data[2 * i + 1]);
            if !valid[i] || !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return None;
            }
            let x0 = (x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(h.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            Some(Taps {
                idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
                fx,
                fy,
            })
        })
        .collect()
}
