//! A small causal next-SID predictor used to compare SID schemes.
//!
//! Histories become token streams `[c₁¹, c₂¹, c₃¹, c₁², …]` where level `l`
//! code `c` is token `c + l·K`. A two-layer causal decoder is trained with
//! teacher forcing; the next item's SID is decoded level by level with beam
//! search, and a hit is scored when the target's SID is among the top beams.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, ParamId, ParamStore, Var};
use crate::embeddings::IndexedSample;
use crate::nn::{self, causal_mask, LayerNorm, Linear, TransformerLayer};
use crate::rng::{self, Stream};
use crate::sid::SemanticId;
use crate::training::TrainError;

/// One history with the SID of the item that followed it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    /// Level-offset tokens of the history, `levels` per item.
    pub tokens: Vec<usize>,
    pub target: SemanticId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SidSequenceDataset {
    pub levels: usize,
    pub codebook_size: usize,
    pub examples: Vec<ProbeExample>,
}

impl SidSequenceDataset {
    /// Token id of code `code` at level `level` (0-based).
    pub fn token(&self, level: usize, code: usize) -> usize {
        level * self.codebook_size + code
    }

    pub fn vocab(&self) -> usize {
        self.levels * self.codebook_size
    }

    /// Builds examples from positive interactions: the history items' SIDs
    /// are flattened into tokens and the target's SID is the label.
    /// `item_sids` is indexed by table row.
    pub fn build(item_sids: &[SemanticId], codebook_size: usize, samples: &[&IndexedSample]) -> Self {
        let levels = item_sids.first().map_or(0, SemanticId::levels);
        assert!(levels >= 1, "SIDs need at least one level");
        let examples = samples
            .iter()
            .filter(|s| s.label == 1.0)
            .map(|s| {
                let tokens = s
                    .seq
                    .iter()
                    .flat_map(|&i| {
                        let sid = &item_sids[i];
                        assert_eq!(sid.levels(), levels, "mixed SID depths");
                        sid.codes().iter().enumerate().map(move |(l, &c)| {
                            assert!(c < codebook_size, "code {c} outside codebook of {codebook_size}");
                            l * codebook_size + c
                        })
                    })
                    .collect();
                ProbeExample {
                    tokens,
                    target: item_sids[s.target].clone(),
                }
            })
            .collect();
        Self {
            levels,
            codebook_size,
            examples,
        }
    }

    /// History tokens followed by the target's tokens.
    fn full_stream(&self, ex: &ProbeExample) -> Vec<usize> {
        let mut t = ex.tokens.clone();
        t.extend(ex.target.codes().iter().enumerate().map(|(l, &c)| self.token(l, c)));
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 1,
            ffn_hidden: 64,
            lr: 3e-3,
            epochs: 10,
            batch_size: 64,
            beam: 10,
            k: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub store: ParamStore,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    /// One classifier over the `K` codes per level.
    pub heads: Vec<Linear>,
    pub levels: usize,
    pub codebook_size: usize,
}

impl ProbeModel {
    pub fn new(cfg: &ProbeConfig, levels: usize, codebook_size: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let tokens = store.add("probe.tokens", nn::gaussian(levels * codebook_size, d, 0.1, rng));
        let positions = store.add("probe.positions", nn::gaussian(max_len, d, 0.02, rng));
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("probe.layer{i}"), d, cfg.n_heads, cfg.ffn_hidden, rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "probe.norm", d);
        let heads = (0..levels)
            .map(|l| Linear::new(&mut store, &format!("probe.head{l}"), d, codebook_size, rng))
            .collect();
        Self {
            store,
            tokens,
            positions,
            layers,
            norm,
            heads,
            levels,
            codebook_size,
        }
    }

    pub fn max_len(&self) -> usize {
        self.store.get(self.positions).rows()
    }

    /// Hidden states `[batch·len, d]` for equal-length token streams.
    pub fn hidden(&self, g: &mut Graph, streams: &[Vec<usize>]) -> Var {
        let len = streams[0].len();
        assert!(streams.iter().all(|s| s.len() == len), "streams must share a length");
        assert!(len >= 1 && len <= self.max_len(), "stream length {len} outside 1..={}", self.max_len());
        let flat: Vec<usize> = streams.iter().flatten().copied().collect();
        let table = g.param(&self.store, self.tokens);
        let x = g.gather_rows(table, &flat);
        let pos = g.param(&self.store, self.positions);
        let pos = g.gather_rows(pos, &(0..len).collect::<Vec<_>>());
        let pos = g.tile_rows(pos, streams.len());
        let mut h = g.add(x, pos);
        let mask = g.constant(causal_mask(streams.len(), len));
        for layer in &self.layers {
            h = layer.forward(g, &self.store, h, len, Some(mask));
        }
        self.norm.forward(g, &self.store, h)
    }

    /// Mean next-token cross-entropy over all predicted positions. Position
    /// `t` predicts the token at `t + 1` with the head of that token's level.
    pub fn loss(&self, g: &mut Graph, streams: &[Vec<usize>]) -> Var {
        let len = streams[0].len() - 1;
        let inputs: Vec<Vec<usize>> = streams.iter().map(|s| s[..len].to_vec()).collect();
        let h = self.hidden(g, &inputs);
        let mut total: Option<Var> = None;
        let mut count = 0;
        for level in 0..self.levels {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, s) in streams.iter().enumerate() {
                for t in 0..len {
                    if (t + 1) % self.levels == level {
                        rows.push(b * len + t);
                        targets.push(s[t + 1] - level * self.codebook_size);
                    }
                }
            }
            if rows.is_empty() {
                continue;
            }
            count += rows.len();
            let hl = g.gather_rows(h, &rows);
            let logits = self.heads[level].forward(g, &self.store, hl);
            let ce = g.softmax_cross_entropy(logits, &targets);
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce),
            });
        }
        let total = total.expect("streams longer than one token");
        g.scale(total, 1.0 / count as f64)
    }

    /// Log-probabilities over codes of `level` after each (equal-length)
    /// prefix stream.
    pub fn next_code_log_probs(&self, streams: &[Vec<usize>], level: usize) -> Vec<Vec<f64>> {
        let len = streams[0].len();
        let mut g = Graph::new();
        let h = self.hidden(&mut g, streams);
        let last: Vec<usize> = (0..streams.len()).map(|b| b * len + len - 1).collect();
        let hl = g.gather_rows(h, &last);
        let logits = self.heads[level].forward(&mut g, &self.store, hl);
        let logits = g.value(logits);
        (0..streams.len()).map(|r| log_softmax(logits.row(r))).collect()
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Level-wise beam search over `levels` steps. `scorer` receives the current
/// prefixes (all of one length) and returns, for each, log-probabilities of
/// every next code. Returns up to `beam` completed sequences with their
/// scores, best first; ties order lexicographically.
pub fn beam_search<F>(levels: usize, beam: usize, mut scorer: F) -> Vec<(Vec<usize>, f64)>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
{
    assert!(beam >= 1, "beam width must be >= 1");
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..levels {
        let prefixes: Vec<Vec<usize>> = beams.iter().map(|(p, _)| p.clone()).collect();
        let scores = scorer(&prefixes);
        let mut expanded: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((prefix, base), next) in beams.iter().zip(scores) {
            for (c, lp) in next.into_iter().enumerate() {
                let mut p = prefix.clone();
                p.push(c);
                expanded.push((p, base + lp));
            }
        }
        expanded.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        expanded.truncate(beam);
        beams = expanded;
    }
    beams
}

/// Top `cfg.beam` SIDs the model predicts after `history` tokens.
pub fn decode(model: &ProbeModel, history: &[usize], beam: usize) -> Vec<(SemanticId, f64)> {
    let k = model.codebook_size;
    beam_search(model.levels, beam, |prefixes| {
        let level = prefixes[0].len();
        let streams: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| {
                let mut s = history.to_vec();
                s.extend(p.iter().enumerate().map(|(l, &c)| l * k + c));
                s
            })
            .collect();
        model.next_code_log_probs(&streams, level)
    })
    .into_iter()
    .map(|(codes, s)| (SemanticId(codes), s))
    .collect()
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHistory {
    pub train_loss: Vec<f64>,
    /// Validation loss before training and after each epoch.
    pub val_loss: Vec<f64>,
}

/// Mean next-token loss over a dataset, evaluated in chunks.
pub fn probe_loss(model: &ProbeModel, data: &SidSequenceDataset) -> f64 {
    let streams: Vec<Vec<usize>> = data.examples.iter().map(|e| data.full_stream(e)).collect();
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in group_by_len(&streams).iter().flat_map(|g| g.chunks(256)) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| streams[i].clone()).collect();
        let mut g = Graph::new();
        let l = model.loss(&mut g, &batch);
        total += g.value(l).item() * batch.len() as f64;
        n += batch.len() as f64;
    }
    if n == 0.0 {
        0.0
    } else {
        total / n
    }
}

/// Indices grouped by stream length so every batch is rectangular.
fn group_by_len(streams: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in streams.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Trains a fresh probe with teacher forcing. `val` only feeds the history.
pub fn probe_train(
    train: &SidSequenceDataset,
    val: &SidSequenceDataset,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, ProbeHistory), TrainError> {
    let streams: Vec<Vec<usize>> = train.examples.iter().map(|e| train.full_stream(e)).collect();
    if streams.is_empty() {
        return Err(TrainError::Data("probe training set has no positive examples".into()));
    }
    let max_len = streams
        .iter()
        .map(Vec::len)
        .chain(val.examples.iter().map(|e| e.tokens.len() + val.levels))
        .max()
        .expect("non-empty");
    let mut init = rng::stream(cfg.seed, Stream::Probe);
    let mut model = ProbeModel::new(cfg, train.levels, train.codebook_size, max_len, &mut init);
    let mut opt = Adam::new(cfg.lr, &model.store);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut history = ProbeHistory {
        train_loss: Vec::new(),
        val_loss: vec![probe_loss(&model, val)],
    };
    let groups = group_by_len(&streams);
    for epoch in 1..=cfg.epochs {
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for group in &groups {
            let mut g = group.clone();
            g.shuffle(&mut shuffle);
            batches.extend(g.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut shuffle);
        let mut total = 0.0;
        for idx in &batches {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| streams[i].clone()).collect();
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &batch);
            let grads = g.backward(loss).map_err(|e| TrainError::diverged(epoch, e))?;
            total += g.value(loss).item() * batch.len() as f64;
            opt.step(&mut model.store, &grads);
        }
        history.train_loss.push(total / streams.len() as f64);
        history.val_loss.push(probe_loss(&model, val));
        log::debug!("probe epoch {epoch}: train {:.4} val {:.4}", history.train_loss.last().unwrap(), history.val_loss.last().unwrap());
    }
    Ok((model, history))
}

/// Fraction of examples whose target SID is among the top-`k` of a
/// `beam`-wide beam search.
pub fn probe_eval(model: &ProbeModel, data: &SidSequenceDataset, beam: usize, k: usize) -> f64 {
    if data.examples.is_empty() {
        return 0.0;
    }
    let hits: usize = data
        .examples
        .iter()
        .map(|ex| {
            let ranked: Vec<SemanticId> = decode(model, &ex.tokens, beam).into_iter().map(|(s, _)| s).collect();
            crate::eval::hit_at_k(&ranked, &ex.target, k) as usize
        })
        .sum();
    hits as f64 / data.examples.len() as f64
}

/// Uniformly random SIDs, one per item.
pub fn random_sids(n_items: usize, levels: usize, codebook_size: usize, seed: u64) -> Vec<SemanticId> {
    let mut rng = rng::stream(seed, Stream::Baseline);
    (0..n_items)
        .map(|_| SemanticId((0..levels).map(|_| rng.random_range(0..codebook_size)).collect()))
        .collect()
}

/// `{scheme: hit@k}`, keys sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbeReport(pub BTreeMap<String, f64>);

impl ProbeReport {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("report serializes") + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

/// Trains a probe on one SID scheme and reports test Hit@k.
pub fn run_probe(
    item_sids: &[SemanticId],
    codebook_size: usize,
    train: &[&IndexedSample],
    test: &[&IndexedSample],
    cfg: &ProbeConfig,
) -> Result<f64, TrainError> {
    let train_set = SidSequenceDataset::build(item_sids, codebook_size, train);
    let test_set = SidSequenceDataset::build(item_sids, codebook_size, test);
    let (model, _) = probe_train(&train_set, &test_set, cfg)?;
    Ok(probe_eval(&model, &test_set, cfg.beam, cfg.k))
}
