use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::GradError;
use crate::tensor::{kernels, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `a[.., n] + b[n]`, `b` broadcast over every row of `a`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[.., n] ⊙ b[n]` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    BatchMatMul(Var, Var),
    /// Per batch `a_b · b_bᵀ`.
    BatchMatMulNt(Var, Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Sum(Var),
    Mean(Var),
    /// `[n·g, d] -> [n, d]`, averaging consecutive groups of `g` rows.
    MeanGroups(Var, usize),
    /// `[r, d] -> [t·r, d]`
    TileRows(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    StopGradient(Var),
    /// Forward value of `.0`, gradient routed to `.1` only.
    StraightThrough(Var, Var),
    /// Summed softmax cross-entropy of `[n, K]` logits against class ids.
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::BatchMatMul(a, b)
            | Op::BatchMatMulNt(a, b)
            | Op::ConcatCols(a, b)
            | Op::StraightThrough(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Ln(a)
            | Op::Clamp(a, ..)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanGroups(a, _)
            | Op::TileRows(a, _)
            | Op::GatherRows(a, _)
            | Op::StopGradient(a)
            | Op::SoftmaxCrossEntropy(a, _) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::BatchMatMulNt(..) => "batch_matmul_nt",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanGroups(..) => "mean_groups",
            Op::TileRows(..) => "tile_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::StopGradient(..) => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    param: Option<ParamId>,
    label: Option<&'static str>,
}

/// Gradients of a scalar seed with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

/// Define-by-run computation graph. Every op is evaluated eagerly when it is
/// recorded, so node order is a valid topological order.
///
/// Shape mismatches are programming errors and panic. Non-finite values are
/// recorded and surface as [`GradError::NumericFailure`] from
/// [`Graph::backward`] or [`Graph::check_finite`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    first_non_finite: Option<usize>,
    tape: Tape,
}

/// Everything a forward pass decides without differentiating: stop-gradient
/// values, straight-through offsets, hard masks and code indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions(Vec<Decision>);

#[derive(Clone, Debug, PartialEq)]
enum Decision {
    Value(Tensor),
    Indices(Vec<usize>),
}

#[derive(Default)]
enum Tape {
    #[default]
    Off,
    Record(Vec<Decision>),
    Replay(std::vec::IntoIter<Decision>),
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn row_broadcast_ok(a: &Tensor, b: &Tensor, op: &str) {
    let ok = b.len() == a.cols() && (b.shape().len() == 1 || (b.shape().len() == 2 && b.shape()[0] == 1));
    assert!(ok, "{op}: {:?} is not a row vector for {:?}", b.shape(), a.shape());
}

fn as_matrix(t: &Tensor, op: &str) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "{op}: expected a matrix, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

fn as_batch(t: &Tensor, op: &str) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "{op}: expected rank 3, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Operands of `v`, in argument order; empty for leaves.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attaches a name used in numeric-failure diagnostics.
    pub fn label(&mut self, v: Var, name: &'static str) -> Var {
        self.nodes[v.0].label = Some(name);
        v
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            param: None,
            label: None,
        });
        Var(idx)
    }

    fn numeric_failure(&self, idx: usize) -> GradError {
        let n = &self.nodes[idx];
        GradError::NumericFailure {
            node: idx,
            op: n.op.name(),
            label: n.label.map(str::to_owned),
        }
    }

    /// Errors if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), GradError> {
        match self.first_non_finite {
            Some(i) => Err(self.numeric_failure(i)),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Starts recording the pass's [`Decisions`].
    pub fn record_decisions(&mut self) {
        self.tape = Tape::Record(Vec::new());
    }

    /// Takes what was recorded since [`Graph::record_decisions`].
    pub fn take_decisions(&mut self) -> Decisions {
        match std::mem::take(&mut self.tape) {
            Tape::Record(d) => Decisions(d),
            _ => Decisions::default(),
        }
    }

    /// Makes this pass reuse `decisions` from a base pass instead of deciding
    /// afresh, so that the pass computes the smooth surrogate the backward
    /// pass differentiates. Central differences through a replaying graph
    /// therefore check straight-through gradients too.
    ///
    /// The pass must issue the same sequence of decisions as the recording.
    pub fn replay_decisions(&mut self, decisions: Decisions) {
        self.tape = Tape::Replay(decisions.0.into_iter());
    }

    fn replayed(&mut self) -> Option<Decision> {
        match &mut self.tape {
            Tape::Replay(it) => Some(it.next().expect("replay ran past the recorded decisions")),
            _ => None,
        }
    }

    fn recorded(&mut self, d: impl FnOnce() -> Decision) {
        if let Tape::Record(v) = &mut self.tape {
            v.push(d());
        }
    }

    /// Routes an index decision (a top-k, an argmin) through the tape.
    pub fn decide_indices(&mut self, decide: impl FnOnce(&Self) -> Vec<usize>) -> Vec<usize> {
        if let Some(d) = self.replayed() {
            let Decision::Indices(ix) = d else {
                panic!("replay: expected an index decision");
            };
            return ix;
        }
        let ix = decide(self);
        self.recorded(|| Decision::Indices(ix.clone()));
        ix
    }

    /// Routes a non-differentiable tensor (for example a hard mask) through
    /// the tape.
    pub fn decide_tensor(&mut self, decide: impl FnOnce(&Self) -> Tensor) -> Tensor {
        if let Some(d) = self.replayed() {
            let Decision::Value(t) = d else {
                panic!("replay: expected a tensor decision");
            };
            return t;
        }
        let t = decide(self);
        self.recorded(|| Decision::Value(t.clone()));
        t
    }

    /// Binds `id` to the existing leaf `v`: later [`Graph::param`] calls for
    /// `id` return `v`, so a gradient check can perturb one parameter.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
    }

    /// A trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared storage accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        self.nodes[v.0].label = Some("param");
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::Add(a, b), t)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        row_broadcast_ok(x, r, "add_row");
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, p)| p + r.data()[i % c])
            .collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::AddRow(a, row), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::Mul(a, b), t)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        row_broadcast_ok(x, r, "mul_row");
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, p)| p * r.data()[i % c])
            .collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(Op::AddScalar(a), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = as_matrix(self.value(a), "matmul");
        let (k2, n) = as_matrix(self.value(b), "matmul");
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], data))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = as_matrix(self.value(a), "matmul_nt");
        let (n, k2) = as_matrix(self.value(b), "matmul_nt");
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        self.push(Op::MatMulNt(a, b), Tensor::from_parts(vec![m, n], data))
    }

    /// `[B,m,k] · [B,k,n] -> [B,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (bs, m, k) = as_batch(self.value(a), "batch_matmul");
        let (bs2, k2, n) = as_batch(self.value(b), "batch_matmul");
        assert_eq!((bs, k), (bs2, k2), "batch_matmul: shape mismatch");
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &x[i * m * k..(i + 1) * m * k],
                &y[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Op::BatchMatMul(a, b), Tensor::from_parts(vec![bs, m, n], data))
    }

    /// `[B,m,k] · [B,n,k]ᵀ -> [B,m,n]`
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (bs, m, k) = as_batch(self.value(a), "batch_matmul_nt");
        let (bs2, n, k2) = as_batch(self.value(b), "batch_matmul_nt");
        assert_eq!((bs, k), (bs2, k2), "batch_matmul_nt: shape mismatch");
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::matmul_nt_acc(
                &x[i * m * k..(i + 1) * m * k],
                &y[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Op::BatchMatMulNt(a, b), Tensor::from_parts(vec![bs, m, n], data))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).reshape(shape);
        self.push(Op::Reshape(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(Op::Gelu(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), t)
    }

    /// Elementwise clamp; gradient passes only where the input is inside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), t)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::SoftmaxRows(a), t)
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(Op::LayerNormRows(a, eps), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Sum of squared entries.
    pub fn sq_sum(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    pub fn mean_groups(&mut self, a: Var, group: usize) -> Var {
        let (rows, d) = as_matrix(self.value(a), "mean_groups");
        assert!(group > 0 && rows % group == 0, "mean_groups: {rows} rows not divisible by {group}");
        let n = rows / group;
        let x = self.value(a).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let out = &mut data[i * d..(i + 1) * d];
            for r in 0..group {
                let src = &x[(i * group + r) * d..(i * group + r + 1) * d];
                for (o, v) in out.iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= group as f64;
            }
        }
        self.push(Op::MeanGroups(a, group), Tensor::from_parts(vec![n, d], data))
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, d) = as_matrix(self.value(a), "tile_rows");
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(times * r * d);
        for _ in 0..times {
            data.extend_from_slice(x);
        }
        self.push(Op::TileRows(a, times), Tensor::from_parts(vec![times * r, d], data))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = as_matrix(self.value(a), "concat_cols");
        let (m2, q) = as_matrix(self.value(b), "concat_cols");
        assert_eq!(m, m2, "concat_cols: row mismatch");
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&x[i * p..(i + 1) * p]);
            data.extend_from_slice(&y[i * q..(i + 1) * q]);
        }
        self.push(Op::ConcatCols(a, b), Tensor::from_parts(vec![m, p + q], data))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let rows = x.rows();
        assert!(idx.iter().all(|&i| i < rows), "gather_rows: index out of range");
        let t = x.select_rows(idx);
        self.push(Op::GatherRows(a, idx.to_vec()), t)
    }

    /// Identity in the forward pass; blocks all gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = match self.replayed() {
            Some(Decision::Value(t)) => {
                same_shape(&t, self.value(a), "stop_gradient replay");
                t
            }
            Some(_) => panic!("replay: expected a stop-gradient value"),
            None => {
                let t = self.value(a).clone();
                self.recorded(|| Decision::Value(t.clone()));
                t
            }
        };
        self.push(Op::StopGradient(a), t)
    }

    /// Takes its forward value from `value` and sends its entire gradient to
    /// `grad`. Equivalent to `grad + stop_gradient(value - grad)` but with
    /// the forward value reproduced bit for bit.
    pub fn straight_through(&mut self, value: Var, grad: Var) -> Var {
        same_shape(self.value(value), self.value(grad), "straight_through");
        let t = match self.replayed() {
            // grad + frozen (value − grad)
            Some(Decision::Value(offset)) => self.value(grad).zip_map(&offset, |g, o| g + o),
            Some(_) => panic!("replay: expected a straight-through offset"),
            None => {
                if matches!(self.tape, Tape::Record(_)) {
                    let offset = self.value(value).zip_map(self.value(grad), |v, g| v - g);
                    self.recorded(|| Decision::Value(offset));
                }
                self.value(value).clone()
            }
        };
        self.push(Op::StraightThrough(value, grad), t)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, k) = as_matrix(self.value(logits), "softmax_cross_entropy");
        assert_eq!(n, targets.len(), "softmax_cross_entropy: target count");
        assert!(targets.iter().all(|&t| t < k), "softmax_cross_entropy: class out of range");
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        self.push(Op::SoftmaxCrossEntropy(logits, targets.to_vec()), Tensor::scalar(total))
    }

    /// Reverse pass from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients, GradError> {
        let seed_shape = self.shape(seed);
        if self.value(seed).len() != 1 {
            return Err(GradError::NonScalarSeed {
                shape: seed_shape.to_vec(),
            });
        }
        if let Some(i) = self.first_non_finite.filter(|&i| i <= seed.0) {
            return Err(self.numeric_failure(i));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.trainable {
                // Re-park the leaf gradient; leaves have no inputs.
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if !node.trainable {
                continue;
            }
            let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(self.numeric_failure(i));
            }
            let t = Tensor::from_parts(node.value.shape().to_vec(), data);
            if let Some(p) = node.param {
                out.by_param.insert(p, t.clone());
            }
            out.by_var.insert(Var(i), t);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g, self);
                accumulate(grads, *b, g, self);
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g, self);
                let c = out.cols();
                let mut gr = vec![0.0; c];
                for row in g.chunks(c) {
                    for (s, v) in gr.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, *r, &gr, self);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, self);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg, self);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g.iter().zip(y).map(|(p, q)| p * q).collect();
                let gb: Vec<f64> = g.iter().zip(x).map(|(p, q)| p * q).collect();
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::MulRow(a, r) => {
                let (x, rv) = (self.value(*a).data(), self.value(*r).data());
                let c = out.cols();
                let ga: Vec<f64> = g.iter().enumerate().map(|(j, p)| p * rv[j % c]).collect();
                let mut gr = vec![0.0; c];
                for (j, (p, q)) in g.iter().zip(x).enumerate() {
                    gr[j % c] += p * q;
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *r, &gr, self);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g, self),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, self.value(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc(self.value(*a).data(), g, m, k, n, &mut gb);
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                // out = a bᵀ: da = g b, db = gᵀ a
                let mut ga = vec![0.0; m * k];
                kernels::matmul_acc(g, self.value(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; n * k];
                kernels::matmul_tn_acc(g, self.value(*a).data(), m, n, k, &mut gb);
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = as_batch(self.value(*a), "batch_matmul");
                let n = self.shape(*b)[2];
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    kernels::matmul_nt_acc(gi, &y[i * k * n..(i + 1) * k * n], m, n, k, &mut ga[i * m * k..(i + 1) * m * k]);
                    kernels::matmul_tn_acc(&x[i * m * k..(i + 1) * m * k], gi, m, k, n, &mut gb[i * k * n..(i + 1) * k * n]);
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::BatchMatMulNt(a, b) => {
                let (bs, m, k) = as_batch(self.value(*a), "batch_matmul_nt");
                let n = self.shape(*b)[1];
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * n * k];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    kernels::matmul_acc(gi, &y[i * n * k..(i + 1) * n * k], m, n, k, &mut ga[i * m * k..(i + 1) * m * k]);
                    kernels::matmul_tn_acc(gi, &x[i * m * k..(i + 1) * m * k], m, n, k, &mut gb[i * n * k..(i + 1) * n * k]);
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(p, y)| p * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(p, y)| p * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(p, v)| p * gelu_grad(*v)).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(p, v)| p / v).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(p, v)| if *v >= *lo && *v <= *hi { *p } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((d, p), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (p - dot);
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::LayerNormRows(a, eps) => {
                let c = out.cols();
                let x = self.value(*a).data();
                let mut ga = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let xr = &x[r * c..(r + 1) * c];
                    let yr = &out.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[r * c + j] = inv * (gr[j] - gmean - yr[j] * gy);
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &ga, self);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &ga, self);
            }
            Op::MeanGroups(a, group) => {
                let d = out.cols();
                let rows = self.shape(*a)[0];
                let mut ga = vec![0.0; rows * d];
                for r in 0..rows {
                    let src = &g[(r / group) * d..(r / group + 1) * d];
                    for (dst, v) in ga[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *dst = v / *group as f64;
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::TileRows(a, times) => {
                let n = self.value(*a).len();
                let mut ga = vec![0.0; n];
                for t in 0..*times {
                    for (dst, v) in ga.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *dst += v;
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                let m = self.shape(*a)[0];
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for i in 0..m {
                    let row = &g[i * (p + q)..(i + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::GatherRows(a, idx) => {
                let d = out.cols();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (dst, v) in ga[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += v;
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::StraightThrough(_, b) => accumulate(grads, *b, g, self),
            Op::SoftmaxCrossEntropy(a, targets) => {
                let x = self.value(*a).data();
                let k = self.shape(*a)[1];
                let mut ga = vec![0.0; x.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &x[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / z;
                        ga[i * k + j] = g[0] * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], graph: &Graph) {
    debug_assert_eq!(g.len(), graph.value(v).len());
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn stop_gradient_product() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let s = g.stop_gradient(x);
        let y = g.mul(s, x);
        assert_eq!(g.value(y).item(), 4.0);
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 2.0);

        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(-1.7));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 0.0);
    }

    #[test]
    fn commitment_term_gradients() {
        // ‖x − sg[c]‖² at x = 1, c = 0
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        let c = g.variable(Tensor::scalar(0.0));
        let cs = g.stop_gradient(c);
        let diff = g.sub(x, cs);
        let loss = g.sq_sum(diff);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
        assert_eq!(grads.wrt(c).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarSeed { .. })));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(-1.0));
        let y = g.ln(x);
        let y = g.label(y, "log_of_negative");
        let z = g.sum(y);
        match g.backward(z) {
            Err(GradError::NumericFailure { op, label, .. }) => {
                assert_eq!(op, "ln");
                assert_eq!(label.as_deref(), Some("log_of_negative"));
            }
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn straight_through_value_and_route() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::row_vector(&[0.1, 0.2]));
        let b = g.variable(Tensor::row_vector(&[5.0, -3.0]));
        let st = g.straight_through(b, a);
        assert_eq!(g.value(st), g.value(b));
        let s = g.sum(st);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_param_accumulates_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(id).unwrap().item(), 6.0);
    }

    #[test]
    fn inputs_precede_their_nodes() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let w = g.constant(Tensor::eye(2));
        let h = g.matmul(x, w);
        let h = g.softmax_rows(h);
        let s = g.stop_gradient(h);
        let y = g.straight_through(s, h);
        let y = g.sum(y);
        assert_eq!(g.op_name(y), "sum");
        for i in 0..g.len() {
            for input in g.inputs(Var(i)) {
                assert!(input.0 < i);
            }
        }
    }
}
