//! Parameterized layers built on the autograd graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

fn init_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// Gaussian init with variance `1/fan_in`.
pub fn lecun(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    init_matrix(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    init_matrix(rows, cols, std, rng)
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), lecun(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Two-layer perceptron `in → hidden → out` with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(g, store, x);
        let h = g.gelu(h);
        self.second.forward(g, store, h)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Multi-head self-attention over `[batch·len, dim]` rows, attending within
/// each consecutive block of `len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub heads: Vec<[Linear; 3]>,
    pub output: Linear,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(n_heads >= 1 && dim % n_heads == 0, "dim {dim} not divisible by {n_heads} heads");
        let head_dim = dim / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                [
                    Linear::new(store, &format!("{name}.h{h}.query"), dim, head_dim, rng),
                    Linear::new(store, &format!("{name}.h{h}.key"), dim, head_dim, rng),
                    Linear::new(store, &format!("{name}.h{h}.value"), dim, head_dim, rng),
                ]
            })
            .collect();
        let output = Linear::new(store, &format!("{name}.output"), dim, dim, rng);
        Self { heads, output, head_dim }
    }

    /// `mask`, when given, is an additive `[batch, len, len]` constant
    /// (0 where attention is allowed, a large negative number elsewhere).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize, mask: Option<Var>) -> Var {
        let rows = g.shape(x)[0];
        assert_eq!(rows % len, 0, "rows {rows} not a multiple of sequence length {len}");
        let batch = rows / len;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut merged: Option<Var> = None;
        for [wq, wk, wv] in &self.heads {
            let q = wq.forward(g, store, x);
            let k = wk.forward(g, store, x);
            let v = wv.forward(g, store, x);
            let q = g.reshape(q, &[batch, len, self.head_dim]);
            let k = g.reshape(k, &[batch, len, self.head_dim]);
            let v = g.reshape(v, &[batch, len, self.head_dim]);
            let scores = g.batch_matmul_nt(q, k);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            let ctx = g.batch_matmul(attn, v);
            let ctx = g.reshape(ctx, &[rows, self.head_dim]);
            merged = Some(match merged {
                None => ctx,
                Some(prev) => g.concat_cols(prev, ctx),
            });
        }
        self.output.forward(g, store, merged.expect("at least one head"))
    }
}

/// Additive causal mask: position `t` may attend to positions `≤ t`.
pub fn causal_mask(batch: usize, len: usize) -> Tensor {
    const BLOCKED: f64 = -1e9;
    let mut data = Vec::with_capacity(batch * len * len);
    for _ in 0..batch {
        for i in 0..len {
            for j in 0..len {
                data.push(if j <= i { 0.0 } else { BLOCKED });
            }
        }
    }
    Tensor::new(vec![batch, len, len], data).expect("finite mask")
}

/// Pre-norm transformer layer: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, n_heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), [dim, ffn_hidden, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize, mask: Option<Var>) -> Var {
        let n = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, n, len, mask);
        let h = g.add(x, a);
        let n = self.norm_ffn.forward(g, store, h);
        let f = self.ffn.forward(g, store, n);
        g.add(h, f)
    }
}
