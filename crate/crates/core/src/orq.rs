//! Orthogonal residual quantization.
//!
//! Each layer of an [`OrqStack`]:
//!
//! 1. rotates its input with a learned matrix kept near-orthogonal by
//!    [`orth_penalty`];
//! 2. scores every dimension with a small perceptron on the unrotated input
//!    and keeps the top-k rotated coordinates as the primary feature, the
//!    rest as the secondary feature;
//! 3. replaces the primary feature with its nearest code and passes
//!    `secondary + residual` on to the next layer.
//!
//! Everything runs on `[rows, d]` matrices, one row per sequence position,
//! each quantized independently. Rows use the `x · Wᵀ` convention.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::baselines::kmeans::{kmeans, KMeansParams};
use crate::linalg;
use crate::nn::Mlp;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoMap {
    pub weight: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimScorer {
    pub mlp: Mlp,
}

/// A `K × d` code table. Towers that share a codebook hold the same
/// `vectors` id and therefore the same storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    pub vectors: ParamId,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrqLayer {
    pub ortho: OrthoMap,
    pub scorer: DimScorer,
    pub codebook: Codebook,
    /// Number of primary dimensions.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub codebook_size: usize,
    pub k: usize,
    pub scorer_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrqStack {
    pub layers: Vec<OrqLayer>,
    pub dim: usize,
}

impl OrqStack {
    /// Creates a stack with fresh rotations and scorers. Codebooks are either
    /// newly allocated or, with `shared`, reused from another stack.
    ///
    /// Rotations start as random orthogonal matrices; codebooks start as small
    /// Gaussian noise.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        specs: &[LayerSpec],
        shared: Option<&[Codebook]>,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!specs.is_empty(), "an ORQ stack needs at least one layer");
        if let Some(s) = shared {
            assert_eq!(s.len(), specs.len(), "shared codebook count");
        }
        let layers = specs
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                assert!(spec.k >= 1 && spec.k <= dim, "k = {} outside 1..={dim}", spec.k);
                assert!(spec.codebook_size >= 1, "empty codebook");
                let weight = store.add(format!("{name}.l{l}.orth"), linalg::random_orthogonal(dim, rng));
                let scorer = DimScorer {
                    mlp: Mlp::new(store, &format!("{name}.l{l}.scorer"), [dim, spec.scorer_hidden, dim], rng),
                };
                let codebook = match shared {
                    Some(s) => {
                        assert_eq!(s[l].size, spec.codebook_size, "shared codebook size");
                        s[l].clone()
                    }
                    None => Codebook {
                        vectors: store.add(
                            format!("{name}.l{l}.codebook"),
                            crate::nn::gaussian(spec.codebook_size, dim, 0.1, rng),
                        ),
                        size: spec.codebook_size,
                    },
                };
                OrqLayer {
                    ortho: OrthoMap { weight },
                    scorer,
                    codebook,
                    k: spec.k,
                }
            })
            .collect();
        Self { layers, dim }
    }

    pub fn codebooks(&self) -> Vec<Codebook> {
        self.layers.iter().map(|l| l.codebook.clone()).collect()
    }
}

/// `x · Wᵀ`, row by row.
pub fn rotate(g: &mut Graph, store: &ParamStore, layer: &OrqLayer, x: Var) -> Var {
    let w = g.param(store, layer.ortho.weight);
    assert_eq!(g.shape(x)[1], g.shape(w)[1], "rotate: input width does not match W");
    g.matmul_nt(x, w)
}

/// `‖W·Wᵀ − I‖²_F`
pub fn orth_penalty(g: &mut Graph, store: &ParamStore, layer: &OrqLayer) -> Var {
    let w = g.param(store, layer.ortho.weight);
    let n = g.shape(w)[0];
    let wwt = g.matmul_nt(w, w);
    let eye = g.constant(Tensor::eye(n));
    let diff = g.sub(wwt, eye);
    g.sq_sum(diff)
}

/// Row-wise top-k indicator: 1 at the `k` largest scores of each row, ties
/// going to the lower index.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Tensor {
    let d = scores.cols();
    assert!(k <= d, "k = {k} exceeds width {d}");
    let mut data = vec![0.0; scores.len()];
    let mut order: Vec<usize> = (0..d).collect();
    for (r, out) in data.chunks_mut(d).enumerate() {
        let row = scores.row(r);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            out[j] = 1.0;
        }
    }
    Tensor::from_parts(scores.shape().to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub scores: Var,
    pub mask: Tensor,
    pub x_pri: Var,
    pub x_sec: Var,
}

/// Splits `x_orth` by the top-k of `scores`.
///
/// The primary part carries a straight-through term
/// `(scores − sg[scores]) ⊙ x_orth` that is exactly zero in value but lets
/// the scorer receive gradient through the hard mask.
pub fn split_by_scores(g: &mut Graph, scores: Var, x_orth: Var, k: usize) -> Selection {
    let mask = g.decide_tensor(|g| top_k_mask(g.value(scores), k));
    let complement = mask.map(|m| 1.0 - m);
    let m = g.constant(mask.clone());
    let hard = g.mul(m, x_orth);
    let frozen = g.stop_gradient(scores);
    let gate = g.sub(scores, frozen);
    let surrogate = g.mul(gate, x_orth);
    let x_pri = g.add(hard, surrogate);
    let c = g.constant(complement);
    let x_sec = g.mul(c, x_orth);
    Selection {
        scores,
        mask,
        x_pri,
        x_sec,
    }
}

/// Scores dimensions from the layer input `x` and splits the rotated
/// `x_orth` into primary and secondary parts.
pub fn select_primary(g: &mut Graph, store: &ParamStore, layer: &OrqLayer, x: Var, x_orth: Var) -> Selection {
    let logits = layer.scorer.mlp.forward(g, store, x);
    let scores = g.sigmoid(logits);
    split_by_scores(g, scores, x_orth, layer.k)
}

/// Index of the nearest row of `codebook` for each row of `x` under squared
/// Euclidean distance; ties go to the lowest index.
pub fn nearest_codes(x: &Tensor, codebook: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mut best = (0, f64::INFINITY);
            for c in 0..codebook.rows() {
                let dist = kernels::sq_dist(row, codebook.row(c));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Quantized {
    pub codes: Vec<usize>,
    /// Full-width chosen code vectors `C_i`.
    pub code_vecs: Var,
    /// `mask ⊙ C_i`.
    pub masked_code: Var,
    /// Value of `masked_code`, gradient straight through to `x_pri`.
    pub quantized: Var,
    /// `x_pri − mask ⊙ C_i`.
    pub x_resi: Var,
}

/// Nearest-code quantization of the primary feature. The residual is taken
/// on the primary support only, so `x_sec + x_resi` keeps disjoint supports.
pub fn quantize_layer(g: &mut Graph, store: &ParamStore, layer: &OrqLayer, x_pri: Var, mask: &Tensor) -> Quantized {
    let cb = g.param(store, layer.codebook.vectors);
    let codes = g.decide_indices(|g| nearest_codes(g.value(x_pri), g.value(cb)));
    let code_vecs = g.gather_rows(cb, &codes);
    let m = g.constant(mask.clone());
    let masked_code = g.mul(m, code_vecs);
    let quantized = g.straight_through(masked_code, x_pri);
    let x_resi = g.sub(x_pri, masked_code);
    Quantized {
        codes,
        code_vecs,
        masked_code,
        quantized,
        x_resi,
    }
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub x_in: Var,
    pub scores: Var,
    pub mask: Tensor,
    pub x_orth: Var,
    pub x_pri: Var,
    pub x_sec: Var,
    pub codes: Vec<usize>,
    pub code_vecs: Var,
    pub masked_code: Var,
    pub quantized: Var,
    pub x_resi: Var,
}

/// All intermediates of one pass through a stack. Variables refer to the
/// graph the pass was recorded in.
#[derive(Clone, Debug)]
pub struct QuantTrace {
    pub layers: Vec<LayerTrace>,
    /// `x_sec + x_resi` of the last layer.
    pub leftover: Var,
}

impl QuantTrace {
    /// Code indices of one row, coarse to fine.
    pub fn sid(&self, row: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l.codes[row]).collect()
    }
}

pub fn orq_forward(g: &mut Graph, store: &ParamStore, stack: &OrqStack, x: Var) -> QuantTrace {
    assert_eq!(g.shape(x)[1], stack.dim, "orq_forward: input width");
    let mut input = x;
    let mut layers = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let x_orth = rotate(g, store, layer, input);
        let sel = select_primary(g, store, layer, input, x_orth);
        let q = quantize_layer(g, store, layer, sel.x_pri, &sel.mask);
        let next = g.add(sel.x_sec, q.x_resi);
        layers.push(LayerTrace {
            x_in: input,
            scores: sel.scores,
            mask: sel.mask,
            x_orth,
            x_pri: sel.x_pri,
            x_sec: sel.x_sec,
            codes: q.codes,
            code_vecs: q.code_vecs,
            masked_code: q.masked_code,
            quantized: q.quantized,
            x_resi: q.x_resi,
        });
        input = next;
    }
    QuantTrace { layers, leftover: input }
}

/// Decoder-free reconstruction: with the final leftover set to zero, undo
/// each layer from the last, `ê_l = (mask_l ⊙ C_l + ê_{l+1}) · W_l`, using
/// `Wᵀ` as the inverse of the rotation.
pub fn decoder_free_reconstruct(g: &mut Graph, store: &ParamStore, stack: &OrqStack, trace: &QuantTrace) -> Var {
    let shape = g.shape(trace.layers[0].x_in).to_vec();
    let mut recon = g.constant(Tensor::zeros(&shape));
    for (layer, lt) in stack.layers.iter().zip(&trace.layers).rev() {
        let w = g.param(store, layer.ortho.weight);
        let s = g.add(lt.masked_code, recon);
        recon = g.matmul(s, w);
    }
    recon
}

/// `Σ_l ‖sg[x_pri] − C‖² + β‖x_pri − sg[C]‖²`, summed over rows.
pub fn vq_loss(g: &mut Graph, trace: &QuantTrace, beta: f64) -> Var {
    assert!(beta >= 0.0, "beta must be non-negative");
    let mut total: Option<Var> = None;
    for lt in &trace.layers {
        let pri_frozen = g.stop_gradient(lt.x_pri);
        let d = g.sub(pri_frozen, lt.code_vecs);
        let codebook_term = g.sq_sum(d);
        let code_frozen = g.stop_gradient(lt.code_vecs);
        let d = g.sub(lt.x_pri, code_frozen);
        let commit = g.sq_sum(d);
        let commit = g.scale(commit, beta);
        let layer_loss = g.add(codebook_term, commit);
        total = Some(match total {
            None => layer_loss,
            Some(t) => g.add(t, layer_loss),
        });
    }
    total.expect("non-empty stack")
}

/// Fits each layer's codebook by k-means on that layer's primary features,
/// layer by layer, with current rotations and scorers.
pub fn init_codebooks_kmeans(
    store: &mut ParamStore,
    stack: &OrqStack,
    x: &Tensor,
    params: &KMeansParams,
    rng: &mut impl Rng,
) {
    for l in 0..stack.layers.len() {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let prefix = OrqStack {
            layers: stack.layers[..=l].to_vec(),
            dim: stack.dim,
        };
        let trace = orq_forward(&mut g, store, &prefix, input);
        let pri = g.value(trace.layers[l].x_pri).clone();
        let layer = &stack.layers[l];
        let k = layer.codebook.size.min(pri.rows());
        let fit = kmeans(&pri, k, params, rng);
        let mut centroids = fit.centroids.into_data();
        // Pad when there are fewer rows than codes.
        let current = store.get(layer.codebook.vectors).data()[k * stack.dim..].to_vec();
        centroids.extend(current);
        store.set(
            layer.codebook.vectors,
            Tensor::new(vec![layer.codebook.size, stack.dim], centroids).expect("finite centroids"),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn one_layer(store: &mut ParamStore, dim: usize, k: usize, codes: &[&[f64]]) -> OrqStack {
        let mut rng = rng::stream(0, Stream::Init);
        let stack = OrqStack::new(
            store,
            "t",
            dim,
            &[LayerSpec {
                codebook_size: codes.len(),
                k,
                scorer_hidden: dim,
            }],
            None,
            &mut rng,
        );
        store.set(stack.layers[0].codebook.vectors, Tensor::from_rows(codes));
        store.set(stack.layers[0].ortho.weight, Tensor::eye(dim));
        stack
    }

    #[test]
    fn identity_and_quarter_turn_rotation() {
        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 2, 1, &[&[0.0, 0.0]]);
        let layer = &stack.layers[0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.5, -2.0]]));
        let y = rotate(&mut g, &store, layer, x);
        assert_eq!(g.value(y).data(), &[1.5, -2.0]);

        store.set(layer.ortho.weight, Tensor::from_rows(&[[0.0, -1.0], [1.0, 0.0]]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let y = rotate(&mut g, &store, layer, x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn orth_penalty_values() {
        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 2, 1, &[&[0.0, 0.0]]);
        let layer = &stack.layers[0];
        let penalty = |store: &ParamStore| {
            let mut g = Graph::new();
            let p = orth_penalty(&mut g, store, layer);
            g.value(p).item()
        };
        assert_eq!(penalty(&store), 0.0);
        store.set(layer.ortho.weight, Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(penalty(&store), 0.0);
        // W·Wᵀ − I = [[1,1],[1,0]]
        store.set(layer.ortho.weight, Tensor::from_rows(&[[1.0, 1.0], [0.0, 1.0]]));
        assert_eq!(penalty(&store), 3.0);
    }

    #[test]
    fn split_example() {
        let mut g = Graph::new();
        let x_orth = g.constant(Tensor::from_rows(&[[3.0, 1.0, 2.0]]));
        let scores = g.constant(Tensor::from_rows(&[[0.9, 0.1, 0.5]]));
        let sel = split_by_scores(&mut g, scores, x_orth, 2);
        assert_eq!(sel.mask.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.value(sel.x_pri).data(), &[3.0, 0.0, 2.0]);
        assert_eq!(g.value(sel.x_sec).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_selection_and_ties() {
        let mut g = Graph::new();
        let x_orth = g.constant(Tensor::from_rows(&[[3.0, -1.0, 2.0]]));
        let scores = g.constant(Tensor::from_rows(&[[0.2, 0.7, 0.4]]));
        let sel = split_by_scores(&mut g, scores, x_orth, 3);
        assert_eq!(g.value(sel.x_pri), g.value(x_orth));
        assert!(g.value(sel.x_sec).data().iter().all(|v| *v == 0.0));

        let tied = Tensor::from_rows(&[[0.5, 0.5, 0.5, 0.1]]);
        assert_eq!(top_k_mask(&tied, 2).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scorer_receives_gradient_through_mask() {
        let mut g = Graph::new();
        let x_orth = g.constant(Tensor::from_rows(&[[3.0, 1.0, 2.0]]));
        let scores = g.variable(Tensor::from_rows(&[[0.9, 0.1, 0.5]]));
        let sel = split_by_scores(&mut g, scores, x_orth, 2);
        let loss = g.sum(sel.x_pri);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(scores).unwrap().data(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn quantize_examples() {
        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 2, 2, &[&[0.0, 0.0], &[1.0, 1.0]]);
        let layer = &stack.layers[0];
        let mut g = Graph::new();
        let x_pri = g.constant(Tensor::from_rows(&[[0.9, 0.8], [1.0, 1.0]]));
        let q = quantize_layer(&mut g, &store, layer, x_pri, &Tensor::full(&[2, 2], 1.0));
        assert_eq!(q.codes, vec![1, 1]);
        let r = g.value(q.x_resi).data();
        assert!((r[0] + 0.1).abs() < 1e-12 && (r[1] + 0.2).abs() < 1e-12);
        assert_eq!(&r[2..], &[0.0, 0.0]);

        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 2, 2, &[&[5.0, 5.0]]);
        let mut g = Graph::new();
        let x_pri = g.constant(Tensor::from_rows(&[[0.9, 0.8], [-3.0, 1.0]]));
        let q = quantize_layer(&mut g, &store, &stack.layers[0], x_pri, &Tensor::full(&[2, 2], 1.0));
        assert_eq!(q.codes, vec![0, 0]);
    }

    #[test]
    fn reconstruct_hand_trace() {
        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 3, 2, &[&[3.0, 0.0, 2.0]]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 1.0, 2.0]]));
        // Force the mask (1,0,1) by scoring directly.
        let layer = &stack.layers[0];
        let x_orth = rotate(&mut g, &store, layer, x);
        let scores = g.constant(Tensor::from_rows(&[[0.9, 0.1, 0.5]]));
        let sel = split_by_scores(&mut g, scores, x_orth, 2);
        let q = quantize_layer(&mut g, &store, layer, sel.x_pri, &sel.mask);
        let leftover = g.add(sel.x_sec, q.x_resi);
        let trace = QuantTrace {
            layers: vec![LayerTrace {
                x_in: x,
                scores,
                mask: sel.mask,
                x_orth,
                x_pri: sel.x_pri,
                x_sec: sel.x_sec,
                codes: q.codes,
                code_vecs: q.code_vecs,
                masked_code: q.masked_code,
                quantized: q.quantized,
                x_resi: q.x_resi,
            }],
            leftover,
        };
        assert_eq!(g.value(leftover).data(), &[0.0, 1.0, 0.0]);
        let recon = decoder_free_reconstruct(&mut g, &store, &stack, &trace);
        assert_eq!(g.value(recon).data(), &[3.0, 0.0, 2.0]);
        let diff = g.sub(x, recon);
        let l = g.sq_sum(diff);
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn vq_loss_example_and_stop_gradients() {
        let mut store = ParamStore::new();
        let stack = one_layer(&mut store, 2, 2, &[&[0.0, 0.0]]);
        let mut g = Graph::new();
        let x_pri = g.variable(Tensor::from_rows(&[[1.0, 0.0]]));
        let q = quantize_layer(&mut g, &store, &stack.layers[0], x_pri, &Tensor::full(&[1, 2], 1.0));
        let leftover = q.x_resi;
        let trace = QuantTrace {
            layers: vec![LayerTrace {
                x_in: x_pri,
                scores: x_pri,
                mask: Tensor::full(&[1, 2], 1.0),
                x_orth: x_pri,
                x_pri,
                x_sec: x_pri,
                codes: q.codes,
                code_vecs: q.code_vecs,
                masked_code: q.masked_code,
                quantized: q.quantized,
                x_resi: q.x_resi,
            }],
            leftover,
        };
        let loss = vq_loss(&mut g, &trace, 0.25);
        assert_eq!(g.value(loss).item(), 1.25);
        let grads = g.backward(loss).unwrap();
        // Codebook side: d/dC ‖sg[x] − C‖² = 2(C − x) = (−2, 0).
        assert_eq!(grads.param(stack.layers[0].codebook.vectors).unwrap().data(), &[-2.0, 0.0]);
        // Encoder side: β · 2(x − C) = (0.5, 0).
        assert_eq!(grads.wrt(x_pri).unwrap().data(), &[0.5, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_exact_code_leaves_secondary() {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(4, Stream::Init);
        let stack = OrqStack::new(
            &mut store,
            "s",
            4,
            &[LayerSpec {
                codebook_size: 1,
                k: 2,
                scorer_hidden: 4,
            }],
            None,
            &mut rng,
        );
        let x = Tensor::from_rows(&[[0.3, -0.1, 0.8, 0.2]]);
        // Put the primary feature exactly into the codebook.
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = orq_forward(&mut g, &store, &stack, xv);
        let pri = g.value(t.layers[0].x_pri).clone();
        store.set(stack.layers[0].codebook.vectors, pri);

        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let t = orq_forward(&mut g, store, &stack, xv);
            (g.value(t.leftover).clone(), g.value(t.layers[0].x_sec).clone(), t.sid(0))
        };
        let (leftover, sec, sid) = run(&store);
        assert_eq!(leftover, sec);
        assert_eq!(run(&store), (leftover, sec, sid));
    }
}
