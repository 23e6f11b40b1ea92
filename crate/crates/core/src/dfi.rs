//! The dual-tower model: per-tower encoder and ORQ stack (codebooks shared
//! between towers unless ablated), aggregation, prediction head, and losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::baselines::kmeans::KMeansParams;
use crate::embeddings::{IndexedSample, SemanticEmbeddingTable};
use crate::nn::{self, Linear, Mlp, TransformerLayer};
use crate::orq::{self, LayerSpec, OrqStack, QuantTrace};
use crate::sid::SemanticId;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    /// Length `S` of user click sequences.
    pub seq_len: usize,
    /// Number of copies of the target embedding fed to the item tower.
    pub item_seq_len: usize,
    pub levels: usize,
    pub codebook_size: usize,
    /// Primary dimensions per layer.
    pub k: usize,
    pub scorer_hidden: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub mlp_encoder: bool,
    pub shared_codebook: bool,
    pub with_decoder: bool,
    /// Restrict the mutual-information loss to the first layer.
    pub mutual_first_layer_only: bool,
}

impl ModelConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        (0..self.levels)
            .map(|_| LayerSpec {
                codebook_size: self.codebook_size,
                k: self.k,
                scorer_hidden: self.scorer_hidden,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// One pre-norm transformer layer, optionally with learned positions.
    Transformer {
        positions: Option<ParamId>,
        layer: TransformerLayer,
    },
    /// Per-position two-layer perceptron.
    Mlp(Mlp),
}

impl Encoder {
    /// Encodes `[batch·len, d]` rows, attending within each block of `len`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize) -> Var {
        match self {
            Encoder::Transformer { positions, layer } => {
                let mut h = x;
                if let Some(pos) = positions {
                    let table = store.get(*pos);
                    assert!(len <= table.rows(), "sequence length {len} exceeds positional table {}", table.rows());
                    let rows = g.shape(x)[0];
                    let p = g.param(store, *pos);
                    let p = if len < table.rows() {
                        g.gather_rows(p, &(0..len).collect::<Vec<_>>())
                    } else {
                        p
                    };
                    let tiled = g.tile_rows(p, rows / len);
                    h = g.add(h, tiled);
                }
                layer.forward(g, store, h, len, None)
            }
            Encoder::Mlp(mlp) => mlp.forward(g, store, x),
        }
    }
}

/// Encoder, ORQ stack and per-tower heads of one tower.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub encoder: Encoder,
    pub stack: OrqStack,
    /// Final linear map of the aggregation.
    pub aggregate: Linear,
    /// One linear label classifier per layer for the mutual-information term.
    pub mi_heads: Vec<Linear>,
    /// Only for the learned-decoder ablation.
    pub decoder: Option<Mlp>,
}

impl Tower {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        positional: bool,
        shared: Option<&[orq::Codebook]>,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim;
        let encoder = if cfg.mlp_encoder {
            Encoder::Mlp(Mlp::new(store, &format!("{name}.encoder"), [d, cfg.ffn_hidden, d], rng))
        } else {
            let positions = positional.then(|| {
                store.add(format!("{name}.encoder.positions"), nn::gaussian(cfg.seq_len, d, 0.02, rng))
            });
            let layer = TransformerLayer::new(store, &format!("{name}.encoder"), d, cfg.n_heads, cfg.ffn_hidden, rng);
            Encoder::Transformer { positions, layer }
        };
        let stack = OrqStack::new(store, &format!("{name}.orq"), d, &cfg.layer_specs(), shared, rng);
        let aggregate = Linear::new(store, &format!("{name}.aggregate"), d, d, rng);
        let mi_heads = (0..cfg.levels)
            .map(|l| Linear::new(store, &format!("{name}.mi{l}"), d, 1, rng))
            .collect();
        let decoder = cfg
            .with_decoder
            .then(|| Mlp::new(store, &format!("{name}.decoder"), [d, cfg.ffn_hidden, d], rng));
        Self {
            encoder,
            stack,
            aggregate,
            mi_heads,
            decoder,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DfiModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub user: Tower,
    pub item: Tower,
    /// `2d → hidden → 1`, sigmoid applied in [`predict`].
    pub head: Mlp,
}

/// Everything one tower computed for a batch.
#[derive(Clone, Debug)]
pub struct TowerPass {
    /// Encoder output `[batch·len, d]`.
    pub encoded: Var,
    pub trace: QuantTrace,
    /// Aggregated tower embedding `[batch, d]`.
    pub embedding: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub user: TowerPass,
    pub item: TowerPass,
    /// Click probabilities `[batch, 1]`.
    pub prob: Var,
}

/// Loss values of one batch. `total = bce + α(orth + mutual) + recon + vq`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub orth: f64,
    pub mutual: f64,
    pub recon: f64,
    pub vq: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, alpha: f64) -> f64 {
        self.bce + alpha * (self.orth + self.mutual) + self.recon + self.vq
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("bce", self.bce),
            ("orth", self.orth),
            ("mutual", self.mutual),
            ("recon", self.recon),
            ("vq", self.vq),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn add_assign(&mut self, other: &LossBreakdown) {
        self.bce += other.bce;
        self.orth += other.orth;
        self.mutual += other.mutual;
        self.recon += other.recon;
        self.vq += other.vq;
        self.total += other.total;
    }
}

/// Graph nodes of the five loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub bce: Var,
    pub orth: Var,
    pub mutual: Var,
    pub recon: Var,
    pub vq: Var,
}

/// Loss graph nodes plus their values.
#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub nodes: LossNodes,
    pub parts: LossBreakdown,
}

impl DfiModel {
    /// Builds a model with fresh parameters drawn from `rng`.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        assert!(config.levels >= 1 && config.codebook_size >= 1);
        assert!(config.item_seq_len >= 1 && config.seq_len >= 1);
        let mut store = ParamStore::new();
        let item = Tower::new(&mut store, "item", &config, false, None, rng);
        let shared = config.shared_codebook.then(|| item.stack.codebooks());
        let user = Tower::new(&mut store, "user", &config, true, shared.as_deref(), rng);
        let head = Mlp::new(&mut store, "head", [2 * config.dim, config.head_hidden, 1], rng);
        Self {
            config,
            store,
            user,
            item,
            head,
        }
    }

    fn tower_pass(&self, g: &mut Graph, tower: &Tower, rows: Var, len: usize) -> TowerPass {
        let encoded = self.encoder_output(g, tower, rows, len);
        let trace = orq::orq_forward(g, &self.store, &tower.stack, encoded);
        let embedding = aggregate(g, &self.store, tower, &trace, len);
        TowerPass {
            encoded,
            trace,
            embedding,
            len,
        }
    }

    fn encoder_output(&self, g: &mut Graph, tower: &Tower, rows: Var, len: usize) -> Var {
        tower.encoder.forward(g, &self.store, rows, len)
    }

    /// Input rows of the user tower: the click sequences, flattened.
    pub fn user_rows(&self, table: &Tensor, seqs: &[&[usize]]) -> Tensor {
        let idx: Vec<usize> = seqs
            .iter()
            .flat_map(|s| {
                assert_eq!(s.len(), self.config.seq_len, "sequence length");
                s.iter().copied()
            })
            .collect();
        table.select_rows(&idx)
    }

    /// Input rows of the item tower: each target repeated `item_seq_len` times.
    pub fn item_rows(&self, table: &Tensor, targets: &[usize]) -> Tensor {
        let idx: Vec<usize> = targets
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, self.config.item_seq_len))
            .collect();
        table.select_rows(&idx)
    }

    pub fn forward(&self, g: &mut Graph, table: &Tensor, seqs: &[&[usize]], targets: &[usize]) -> ForwardPass {
        assert_eq!(seqs.len(), targets.len(), "batch size");
        let u = g.constant(self.user_rows(table, seqs));
        let i = g.constant(self.item_rows(table, targets));
        let user = self.tower_pass(g, &self.user, u, self.config.seq_len);
        let item = self.tower_pass(g, &self.item, i, self.config.item_seq_len);
        let prob = predict(g, &self.store, &self.head, user.embedding, item.embedding);
        ForwardPass { user, item, prob }
    }

    pub fn forward_samples(&self, g: &mut Graph, table: &Tensor, batch: &[&IndexedSample]) -> ForwardPass {
        let seqs: Vec<&[usize]> = batch.iter().map(|s| s.seq.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
        self.forward(g, table, &seqs, &targets)
    }

    /// `L_BCE + α(L_Orth + L_Mutual) + L_Recon + L_VQ` for a recorded pass.
    ///
    /// BCE-type terms are summed over samples; reconstruction and VQ terms
    /// are summed over samples and averaged over sequence positions.
    pub fn total_loss(&self, g: &mut Graph, pass: &ForwardPass, labels: &[f64], alpha: f64, beta: f64) -> Loss {
        assert!(alpha >= 0.0 && beta >= 0.0, "loss weights must be non-negative");
        let bce_v = bce(g, pass.prob, labels);
        let mut orth = Vec::new();
        let mut mutual = Vec::new();
        let mut recon = Vec::new();
        let mut vq = Vec::new();
        for (tower, tp) in [(&self.user, &pass.user), (&self.item, &pass.item)] {
            for layer in &tower.stack.layers {
                orth.push(orq::orth_penalty(g, &self.store, layer));
            }
            mutual.push(mutual_loss(
                g,
                &self.store,
                &tower.mi_heads,
                &tp.trace,
                tp.len,
                labels,
                self.config.mutual_first_layer_only,
            ));
            let per_position = 1.0 / tp.len as f64;
            let r = self.reconstruction_loss(g, tower, tp);
            recon.push(g.scale(r, per_position));
            let v = orq::vq_loss(g, &tp.trace, beta);
            vq.push(g.scale(v, per_position));
        }
        let orth_v = sum_vars(g, &orth);
        let mutual_v = sum_vars(g, &mutual);
        let recon_v = sum_vars(g, &recon);
        let vq_v = sum_vars(g, &vq);
        let bce_v = g.label(bce_v, "bce");
        let orth_v = g.label(orth_v, "orth");
        let mutual_v = g.label(mutual_v, "mutual");
        let recon_v = g.label(recon_v, "recon");
        let vq_v = g.label(vq_v, "vq");

        let reg = g.add(orth_v, mutual_v);
        let reg = g.scale(reg, alpha);
        let total = g.add(bce_v, reg);
        let total = g.add(total, recon_v);
        let total = g.add(total, vq_v);
        let total = g.label(total, "total");
        let value = |g: &Graph, v: Var| g.value(v).item();
        Loss {
            total,
            nodes: LossNodes {
                bce: bce_v,
                orth: orth_v,
                mutual: mutual_v,
                recon: recon_v,
                vq: vq_v,
            },
            parts: LossBreakdown {
                bce: value(g, bce_v),
                orth: value(g, orth_v),
                mutual: value(g, mutual_v),
                recon: value(g, recon_v),
                vq: value(g, vq_v),
                total: value(g, total),
            },
        }
    }

    /// `‖E − Ê‖²` with `E` the encoder output and `Ê` either the decoder-free
    /// inversion or, in the decoder ablation, a perceptron on the summed
    /// quantized vectors.
    fn reconstruction_loss(&self, g: &mut Graph, tower: &Tower, tp: &TowerPass) -> Var {
        let recon = match &tower.decoder {
            None => orq::decoder_free_reconstruct(g, &self.store, &tower.stack, &tp.trace),
            Some(dec) => {
                let q = quantized_sum(g, &tp.trace);
                dec.forward(g, &self.store, q)
            }
        };
        let diff = g.sub(tp.encoded, recon);
        g.sq_sum(diff)
    }

    /// Click probabilities for samples, evaluated in chunks.
    pub fn predict_samples(&self, table: &Tensor, samples: &[&IndexedSample], chunk: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(samples.len());
        for batch in samples.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let pass = self.forward_samples(&mut g, table, batch);
            out.extend_from_slice(g.value(pass.prob).data());
        }
        out
    }

    /// Item-tower encoder output for each item at position 0.
    pub fn item_features(&self, table: &Tensor, items: &[usize]) -> Tensor {
        let len = self.config.item_seq_len;
        let mut g = Graph::new();
        let rows = g.constant(self.item_rows(table, items));
        let enc = self.encoder_output(&mut g, &self.item, rows, len);
        let first: Vec<usize> = (0..items.len()).map(|i| i * len).collect();
        g.value(enc).select_rows(&first)
    }

    /// User-tower encoder output, every position of every sequence.
    pub fn user_features(&self, table: &Tensor, seqs: &[&[usize]]) -> Tensor {
        let mut g = Graph::new();
        let rows = g.constant(self.user_rows(table, seqs));
        let enc = self.encoder_output(&mut g, &self.user, rows, self.config.seq_len);
        g.value(enc).clone()
    }

    /// Fits codebooks by residual k-means on current encoder outputs: item
    /// features for the item (or shared) codebooks, user features for
    /// unshared user codebooks.
    pub fn init_codebooks(&mut self, table: &Tensor, user_seqs: &[&[usize]], rng: &mut impl Rng) {
        let params = KMeansParams::default();
        let items: Vec<usize> = (0..table.rows()).collect();
        let item_x = self.item_features(table, &items);
        orq::init_codebooks_kmeans(&mut self.store, &self.item.stack, &item_x, &params, rng);
        if !self.config.shared_codebook && !user_seqs.is_empty() {
            let user_x = self.user_features(table, user_seqs);
            orq::init_codebooks_kmeans(&mut self.store, &self.user.stack, &user_x, &params, rng);
        }
    }
}

/// `Σ_l quantized_l`, each the masked code with straight-through gradient.
pub fn quantized_sum(g: &mut Graph, trace: &QuantTrace) -> Var {
    let parts: Vec<Var> = trace.layers.iter().map(|l| l.quantized).collect();
    sum_vars(g, &parts)
}

/// Sum over layers of the quantized vectors, mean over the `len` positions
/// of each sample, then the tower's linear map: `[batch·len, d] → [batch, d]`.
pub fn aggregate(g: &mut Graph, store: &ParamStore, tower: &Tower, trace: &QuantTrace, len: usize) -> Var {
    let q = quantized_sum(g, trace);
    let pooled = g.mean_groups(q, len);
    tower.aggregate.forward(g, store, pooled)
}

/// `sigmoid(MLP([E_user, E_item]))`, shape `[batch, 1]`.
pub fn predict(g: &mut Graph, store: &ParamStore, head: &Mlp, user: Var, item: Var) -> Var {
    let joint = g.concat_cols(user, item);
    let logit = head.forward(g, store, joint);
    g.sigmoid(logit)
}

/// Summed binary cross-entropy of probabilities `[batch, 1]` against 0/1
/// labels.
///
/// # Panics
///
/// On labels outside `{0, 1}` or a batch-size mismatch.
pub fn bce(g: &mut Graph, prob: Var, labels: &[f64]) -> Var {
    assert_eq!(g.value(prob).len(), labels.len(), "bce: batch size");
    assert!(!labels.is_empty(), "bce: empty batch");
    assert!(labels.iter().all(|&y| y == 0.0 || y == 1.0), "bce: labels must be 0 or 1");
    let shape = g.shape(prob).to_vec();
    let p = g.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let y = g.constant(Tensor::new(shape.clone(), labels.to_vec()).expect("finite labels"));
    let not_y = g.constant(Tensor::new(shape, labels.iter().map(|y| 1.0 - y).collect()).expect("finite labels"));
    let log_p = g.ln(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.ln(q);
    let a = g.mul(y, log_p);
    let b = g.mul(not_y, log_q);
    let s = g.add(a, b);
    let s = g.sum(s);
    g.neg(s)
}

/// Summed label cross-entropy of a per-layer linear classifier on the
/// position-pooled primary feature, summed over layers (or layer 1 only).
/// Minimizing it maximizes a variational lower bound on `I(X_pri; Y)`.
pub fn mutual_loss(
    g: &mut Graph,
    store: &ParamStore,
    heads: &[Linear],
    trace: &QuantTrace,
    len: usize,
    labels: &[f64],
    first_layer_only: bool,
) -> Var {
    let n_layers = if first_layer_only { 1 } else { trace.layers.len() };
    let mut parts = Vec::with_capacity(n_layers);
    for (head, lt) in heads.iter().zip(&trace.layers).take(n_layers) {
        let pooled = g.mean_groups(lt.x_pri, len);
        let logit = head.forward(g, store, pooled);
        let p = g.sigmoid(logit);
        parts.push(bce(g, p, labels));
    }
    sum_vars(g, &parts)
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Var {
    let (first, rest) = parts.split_first().expect("at least one term");
    rest.iter().fold(*first, |acc, &v| g.add(acc, v))
}

/// SID of every item: the item-tower code indices at position 0.
pub fn export_item_sids(model: &DfiModel, table: &SemanticEmbeddingTable) -> Vec<(String, SemanticId)> {
    const CHUNK: usize = 256;
    let len = model.config.item_seq_len;
    let mut out = Vec::with_capacity(table.n_items());
    let items: Vec<usize> = (0..table.n_items()).collect();
    for chunk in items.chunks(CHUNK) {
        let mut g = Graph::new();
        let rows = g.constant(model.item_rows(table.vectors(), chunk));
        let tp = model.tower_pass(&mut g, &model.item, rows, len);
        for (n, &i) in chunk.iter().enumerate() {
            out.push((table.ids()[i].clone(), SemanticId(tp.trace.sid(n * len))));
        }
    }
    out
}
