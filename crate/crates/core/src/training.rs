//! Training: configuration, data splits, the Adam loop with early stopping on
//! validation AUC, dead-code reset, checkpoints and the metrics log.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Adam, AdamState, GradError, Graph, ParamId, ParamStore};
use crate::dfi::{DfiModel, LossBreakdown, ModelConfig};
use crate::embeddings::IndexedSample;
use crate::eval;
use crate::orq::Codebook;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite {component}")]
    Diverged {
        epoch: usize,
        component: String,
        /// State at the end of the last finite epoch, when there was one.
        last_good: Option<Box<Checkpoint>>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl TrainError {
    pub(crate) fn diverged(epoch: usize, err: GradError) -> Self {
        Self::Diverged {
            epoch,
            component: failed_component(err),
            last_good: None,
        }
    }
}

/// The labelled node (or, failing that, the operation) that went
/// non-finite.
fn failed_component(err: GradError) -> String {
    match err {
        GradError::NumericFailure { op, label, .. } => label.unwrap_or_else(|| op.to_string()),
        other => other.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

/// Run configuration. Field names double as the JSON config schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    /// Primary dimensions per layer; `dim / 2` when unset.
    pub k: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub seq_len: usize,
    /// Copies of the target fed to the item tower; `seq_len` when unset.
    pub item_seq_len: Option<usize>,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub scorer_hidden: usize,
    pub head_hidden: usize,
    pub mlp_encoder: bool,
    pub unshared_codebook: bool,
    pub with_decoder: bool,
    pub mutual_first_layer_only: bool,
    /// Fit initial codebooks by residual k-means on encoder outputs.
    pub kmeans_init: bool,
    pub dead_code_reset: bool,
    /// Std of the noise added to re-seeded codes.
    pub reset_noise: f64,
    pub table_path: Option<PathBuf>,
    pub samples_path: Option<PathBuf>,
    pub hierarchy_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.25,
            dim: 32,
            levels: 3,
            codebook_size: 64,
            k: None,
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            seq_len: 10,
            item_seq_len: None,
            n_heads: 1,
            ffn_hidden: 64,
            scorer_hidden: 32,
            head_hidden: 64,
            mlp_encoder: false,
            unshared_codebook: false,
            with_decoder: false,
            mutual_first_layer_only: false,
            kmeans_init: true,
            dead_code_reset: true,
            reset_noise: 0.01,
            table_path: None,
            samples_path: None,
            hierarchy_path: None,
        }
    }

    /// Full-size settings: 1024-wide embeddings and codebooks.
    pub fn production() -> Self {
        Self {
            dim: 1024,
            codebook_size: 1024,
            batch_size: 1024,
            ffn_hidden: 2048,
            scorer_hidden: 1024,
            head_hidden: 1024,
            ..Self::desk()
        }
    }

    /// Desk model, few epochs: for smoke runs on the tiny corpus.
    pub fn tiny() -> Self {
        Self {
            max_epochs: 3,
            patience: 2,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "production" => Some(Self::production()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.patience < 1 || self.max_epochs < 1 {
            return bad("patience and max_epochs must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lr >= 0.0 && self.reset_noise >= 0.0) {
            return bad("alpha, beta, lr and reset_noise must be non-negative");
        }
        if self.dim == 0 || self.levels == 0 || self.codebook_size == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("dim, levels, codebook_size, batch_size and seq_len must be >= 1");
        }
        let k = self.primary_dims();
        if k == 0 || k > self.dim {
            return bad("k must lie in 1..=dim");
        }
        if self.dim % self.n_heads.max(1) != 0 || self.n_heads == 0 {
            return bad("dim must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn primary_dims(&self) -> usize {
        self.k.unwrap_or(self.dim / 2)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            seq_len: self.seq_len,
            item_seq_len: self.item_seq_len.unwrap_or(self.seq_len),
            levels: self.levels,
            codebook_size: self.codebook_size,
            k: self.primary_dims(),
            scorer_hidden: self.scorer_hidden,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            mlp_encoder: self.mlp_encoder,
            shared_codebook: !self.unshared_codebook,
            with_decoder: self.with_decoder,
            mutual_first_layer_only: self.mutual_first_layer_only,
        }
    }
}

/// Sample indices of the train / validation / test splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 8:1:1 split of `n` samples.
pub fn split_811(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    /// Consecutive epochs without strict improvement.
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be >= 1");
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the metric of `epoch` (1-based). Returns whether it is a new
    /// best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// Epoch at which a run over `curve` stops, and the best epoch (both
/// 1-based).
pub fn stopping_epoch(curve: &[f64], patience: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    for (i, &m) in curve.iter().enumerate() {
        es.observe(i + 1, m);
        if es.should_stop() {
            return (i + 1, es.best_epoch);
        }
    }
    (curve.len(), es.best_epoch)
}

/// Per-code selection counts of one codebook since the last reset.
#[derive(Clone, Debug, Default)]
pub struct CodeUsage {
    counts: HashMap<ParamId, Vec<u64>>,
    /// Primary features of the last batch that reached each codebook.
    last_batch: HashMap<ParamId, Tensor>,
}

impl CodeUsage {
    pub fn record(&mut self, codebook: &Codebook, codes: &[usize], x_pri: &Tensor) {
        let c = self.counts.entry(codebook.vectors).or_insert_with(|| vec![0; codebook.size]);
        for &i in codes {
            c[i] += 1;
        }
        self.last_batch.insert(codebook.vectors, x_pri.clone());
    }

    pub fn counts(&self, codebook: &Codebook) -> Option<&[u64]> {
        self.counts.get(&codebook.vectors).map(Vec::as_slice)
    }

    /// Re-seeds dead codes of every tracked codebook and clears the counters.
    /// Returns the number of codes reset.
    pub fn reset_dead(&mut self, store: &mut ParamStore, codebooks: &[Codebook], noise: f64, rng: &mut impl Rng) -> usize {
        let mut total = 0;
        for cb in codebooks {
            if let (Some(counts), Some(pool)) = (self.counts.get_mut(&cb.vectors), self.last_batch.get(&cb.vectors)) {
                total += dead_code_reset(store, cb, counts, pool, noise, rng);
            }
        }
        self.last_batch.clear();
        total
    }
}

/// Re-seeds every code with zero usage to a random row of `pool` plus
/// Gaussian noise, then zeroes the counters. Returns the number of resets.
pub fn dead_code_reset(
    store: &mut ParamStore,
    codebook: &Codebook,
    usage: &mut [u64],
    pool: &Tensor,
    noise: f64,
    rng: &mut impl Rng,
) -> usize {
    assert_eq!(usage.len(), codebook.size, "usage length");
    let dead: Vec<usize> = (0..usage.len()).filter(|&i| usage[i] == 0).collect();
    if !dead.is_empty() && pool.rows() > 0 {
        let normal = Normal::new(0.0, noise).expect("valid noise");
        let mut table = store.get(codebook.vectors).clone();
        let d = table.cols();
        for &c in &dead {
            let src = pool.row(rng.random_range(0..pool.rows())).to_vec();
            for (dst, s) in table.data_mut()[c * d..(c + 1) * d].iter_mut().zip(src) {
                *dst = s + normal.sample(rng);
            }
        }
        store.set(codebook.vectors, table);
    }
    usage.iter_mut().for_each(|u| *u = 0);
    if pool.rows() > 0 {
        dead.len()
    } else {
        0
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss per training sample.
    pub train_loss: f64,
    /// Component sums over the epoch divided by the number of samples.
    pub components: LossBreakdown,
    pub val_auc: f64,
    pub val_f1: f64,
    pub codes_reset: usize,
}

/// Parameters, optimizer state and run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// 1-based epoch whose parameters are stored.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl Checkpoint {
    /// Rebuilds the model. Structure comes from the stored config, values
    /// from the stored parameters.
    pub fn model(&self) -> Result<DfiModel, CheckpointError> {
        let mut model = DfiModel::new(self.config.model_config(), &mut rng::stream(0, Stream::Init));
        if model.store.len() != self.params.len() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "config builds {} parameters, checkpoint holds {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for ((id, name, t), (_, sname, st)) in model.store.clone().iter().zip(self.params.iter()) {
            if name != sname || t.shape() != st.shape() {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "parameter {name} {:?} vs stored {sname} {:?}",
                    t.shape(),
                    st.shape()
                )));
            }
            model.store.set(id, st.clone());
        }
        Ok(model)
    }

    /// Fails when `expected` disagrees with the stored config on anything
    /// that changes the parameter layout.
    pub fn check_config(&self, expected: &TrainConfig) -> Result<(), CheckpointError> {
        let a = self.config.model_config();
        let b = expected.model_config();
        let mut diffs = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if a.$f != b.$f {
                    diffs.push(format!("{} = {:?} in checkpoint, {:?} requested", stringify!($f), a.$f, b.$f));
                }
            )*};
        }
        cmp!(dim, seq_len, item_seq_len, levels, codebook_size, k, scorer_hidden, n_heads, ffn_hidden, head_hidden, mlp_encoder, shared_codebook, with_decoder);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch(diffs.join("; ")))
        }
    }
}

const MAGIC: &[u8; 8] = b"DOSCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    params: Vec<(String, Vec<usize>)>,
    adam_step: u64,
}

/// Layout: magic, `u32` version, `u64` metadata length, JSON metadata, then
/// little-endian `f64` parameter values followed by the Adam moments `m`
/// and `v`, all in parameter order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let meta = Meta {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        params: ckpt.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        adam_step: ckpt.optimizer.step,
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(json.len() + 20 + 24 * ckpt.params.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |vals: &[f64]| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, _, t) in ckpt.params.iter() {
        put(t.data());
    }
    let zeros: Vec<Vec<f64>> = ckpt.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    let moments = |m: &Vec<Vec<f64>>| if m.is_empty() { zeros.clone() } else { m.clone() };
    for v in moments(&ckpt.optimizer.m).iter().chain(moments(&ckpt.optimizer.v).iter()) {
        put(v);
    }
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |message: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 20 {
        return Err(corrupt("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(meta_len)).ok_or_else(|| corrupt("truncated metadata".into()))?;
    let meta: Meta = serde_json::from_slice(body).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let numel: usize = meta.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let data = &bytes[20 + meta_len..];
    let expected = 3 * numel * 8;
    if data.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes of tensor data, found {}", data.len())));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamStore::new();
    for (name, shape) in &meta.params {
        let n = shape.iter().product();
        let t = Tensor::new(shape.clone(), values.by_ref().take(n).collect())
            .map_err(|e| corrupt(format!("parameter {name}: {e}")))?;
        params.add(name.clone(), t);
    }
    let mut moments = |_: ()| -> Vec<Vec<f64>> {
        meta.params
            .iter()
            .map(|(_, s)| values.by_ref().take(s.iter().product()).collect())
            .collect()
    };
    let m = moments(());
    let v = moments(());
    Ok(Checkpoint {
        config: meta.config,
        epoch: meta.epoch,
        history: meta.history,
        params,
        optimizer: AdamState {
            step: meta.adam_step,
            m,
            v,
        },
    })
}

pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_loss,bce,orth,mutual,recon,vq,total,val_auc,val_f1,codes_reset\n");
    for r in history {
        let c = &r.components;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, c.bce, c.orth, c.mutual, c.recon, c.vq, c.total, r.val_auc, r.val_f1, r.codes_reset
        ));
    }
    fs::write(path, out)
}

/// Result of [`train`]: the best-epoch model and the full history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DfiModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Whether early stopping ended the run before `max_epochs`.
    pub stopped_early: bool,
}

/// Validation AUC and F1 of `model` on `samples`.
pub fn evaluate(model: &DfiModel, table: &Tensor, samples: &[&IndexedSample]) -> (f64, f64) {
    let probs = model.predict_samples(table, samples, 512);
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let auc = eval::auc(&probs, &labels).unwrap_or(0.5);
    let f1 = eval::f1(&probs, &labels, 0.5).unwrap_or(0.0);
    (auc, f1)
}

/// Trains a fresh model on `splits.train`, early-stopping on validation AUC.
pub fn train(
    cfg: &TrainConfig,
    table: &Tensor,
    samples: &[IndexedSample],
    splits: &Splits,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if table.cols() != cfg.dim {
        return Err(TrainError::Config(format!("table dim {} but config dim {}", table.cols(), cfg.dim)));
    }
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(TrainError::Data("train and validation splits must be non-empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.seq.len() != cfg.seq_len) {
        return Err(TrainError::Data(format!("sample with {} history items, seq_len is {}", s.seq.len(), cfg.seq_len)));
    }
    let mut init = rng::stream(cfg.seed, Stream::Init);
    let mut model = DfiModel::new(cfg.model_config(), &mut init);
    if cfg.kmeans_init {
        let user_seqs: Vec<&[usize]> = splits.train.iter().take(256).map(|&i| samples[i].seq.as_slice()).collect();
        model.init_codebooks(table, &user_seqs, &mut init);
    }
    let mut opt = Adam::new(cfg.lr, &model.store);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut reset_rng = rng::stream(cfg.seed, Stream::Reset);
    let val: Vec<&IndexedSample> = splits.val.iter().map(|&i| &samples[i]).collect();
    let mut order = splits.train.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let mut usage = CodeUsage::default();
    let codebooks: Vec<Codebook> = {
        let mut cbs = model.item.stack.codebooks();
        if !model.config.shared_codebook {
            cbs.extend(model.user.stack.codebooks());
        }
        cbs
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&IndexedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let pass = model.forward_samples(&mut g, table, &batch);
            let loss = model.total_loss(&mut g, &pass, &labels, cfg.alpha, cfg.beta);
            if let Some(component) = loss.parts.non_finite() {
                return Err(diverged(epoch, component, last));
            }
            let grads = match g.backward(loss.total) {
                Ok(gr) => gr,
                Err(e) => return Err(diverged(epoch, &failed_component(e), last)),
            };
            for (tower, tp) in [(&model.user, &pass.user), (&model.item, &pass.item)] {
                for (layer, lt) in tower.stack.layers.iter().zip(&tp.trace.layers) {
                    usage.record(&layer.codebook, &lt.codes, g.value(lt.x_pri));
                }
            }
            opt.step(&mut model.store, &grads);
            sums.add_assign(&loss.parts);
        }
        let resets = if cfg.dead_code_reset {
            usage.reset_dead(&mut model.store, &codebooks, cfg.reset_noise, &mut reset_rng)
        } else {
            0
        };
        if let Some((id, _, _)) = model.store.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(diverged(epoch, model.store.name(id), last));
        }
        let (val_auc, val_f1) = evaluate(&model, table, &val);
        let n = order.len() as f64;
        let scaled = LossBreakdown {
            bce: sums.bce / n,
            orth: sums.orth / n,
            mutual: sums.mutual / n,
            recon: sums.recon / n,
            vq: sums.vq / n,
            total: sums.total / n,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: scaled.total,
            components: scaled,
            val_auc,
            val_f1,
            codes_reset: resets,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} (bce {:.4}, vq {:.4}, recon {:.4}) val auc {val_auc:.4} f1 {val_f1:.4} resets {resets}",
            scaled.total,
            scaled.bce,
            scaled.vq,
            scaled.recon
        );
        let snapshot = Checkpoint {
            config: cfg.clone(),
            epoch,
            history: Vec::new(),
            params: model.store.clone(),
            optimizer: opt.state.clone(),
        };
        if stopper.observe(epoch, val_auc) {
            best = Some(snapshot.clone());
        }
        last = Some(snapshot);
        if stopper.should_stop() {
            break;
        }
    }
    let stopped_early = stopper.should_stop();
    let mut checkpoint = best.expect("at least one epoch when max_epochs >= 1");
    checkpoint.history = history.clone();
    let model = checkpoint.model().expect("checkpoint built from this config");
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        stopped_early,
    })
}

fn diverged(epoch: usize, component: &str, last: Option<Checkpoint>) -> TrainError {
    TrainError::Diverged {
        epoch,
        component: component.to_string(),
        last_good: last.map(Box::new),
    }
}
