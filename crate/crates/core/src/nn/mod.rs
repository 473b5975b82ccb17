//! Small neural-network toolkit: tensors, a reverse-mode tape, layers and AdamW.

mod graph;
mod params;
mod tensor;

use std::rc::Rc;

use rand::Rng;

pub use graph::{BackCtx, BackFn, Gradients, Graph, Var};
pub use params::{cosine_lr, init_weight, AdamW, ParamId, ParamStore};
pub use tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), init_weight(fan_in, fan_out, 1.0, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), false),
        }
    }

    /// A layer whose output starts at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::filled(1, width, 1.0), false),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, width), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let a = g.param(store, self.gain);
        let b = g.param(store, self.bias);
        let y = g.mul_row(n, a);
        g.add_row(y, b)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng),
        }
    }

    /// Output layer initialized to zero.
    pub fn zero_out(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, rng),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Spatial size after a stride-2 convolution.
pub fn half(n: usize) -> usize {
    (n / 2).max(1)
}

/// Row indices of the 3×3 neighbourhood of every output pixel, with edge
/// replication. Stride 1 centers taps on the pixel; stride 2 output pixel `u`
/// reads input pixels `2u ..= 2u+2`.
pub fn conv_taps(h: usize, w: usize, stride: usize) -> (Rc<Vec<usize>>, usize, usize) {
    let (ho, wo) = if stride == 1 { (h, w) } else { (half(h), half(w)) };
    let mut idx = Vec::with_capacity(ho * wo * 9);
    for u in 0..ho {
        for v in 0..wo {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (y, x) = if stride == 1 {
                        ((u + dy) as isize - 1, (v + dx) as isize - 1)
                    } else {
                        ((2 * u + dy) as isize, (2 * v + dx) as isize)
                    };
                    let y = y.clamp(0, h as isize - 1) as usize;
                    let x = x.clamp(0, w as isize - 1) as usize;
                    idx.push(y * w + x);
                }
            }
        }
    }
    (Rc::new(idx), ho, wo)
}

/// Nearest-neighbour upsampling indices from an `h`×`w` map to `ht`×`wt` by `factor`.
pub fn upsample_index(h: usize, w: usize, ht: usize, wt: usize, factor: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(ht * wt);
    for y in 0..ht {
        for x in 0..wt {
            idx.push((y / factor).min(h - 1) * w + (x / factor).min(w - 1));
        }
    }
    Rc::new(idx)
}

/// 3×3 convolution over a map stored as `h·w` rows of channels.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub stride: usize,
    pub cin: usize,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Conv3x3 {
            lin: Linear::new(store, name, 9 * cin, cout, rng),
            stride,
            cin,
        }
    }

    /// Returns the output and its spatial size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (taps, ho, wo) = conv_taps(h, w, self.stride);
        let cols = g.gather_rows(x, taps);
        let cols = g.reshape(cols, ho * wo, 9 * self.cin);
        (self.lin.forward(g, store, cols), ho, wo)
    }
}
