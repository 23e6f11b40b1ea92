//! Brute-force oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dos_sid::autograd::{ParamStore, Graph};
use dos_sid::orq::{LayerSpec, OrqStack};
use dos_sid::rng::{self, Stream};
use dos_sid::Tensor;
use rand::Rng;

/// AUC by enumerating every positive–negative pair; ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1.0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0.0 {
                continue;
            }
            pairs += 1;
            twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_wins as f64 / 2.0 / pairs as f64
}

/// F1 from an explicit confusion matrix.
pub fn f1_confusion(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let mut m = [[0usize; 2]; 2]; // [predicted][actual]
    for (&s, &l) in scores.iter().zip(labels) {
        m[(s >= threshold) as usize][l as usize] += 1;
    }
    let (tp, fp, fneg) = (m[1][1], m[1][0], m[0][1]);
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
    }
}

pub fn hit_scan(ranked: &[usize], target: usize, k: usize) -> u8 {
    for (pos, &c) in ranked.iter().enumerate() {
        if c == target {
            return (pos < k) as u8;
        }
    }
    0
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h += -p * p.ln();
        }
    }
    h
}

/// `(perplexity, utilization)` from a code histogram.
pub fn usage_histogram(assign: &[usize], k: usize) -> (f64, f64) {
    let mut counts = vec![0usize; k];
    for &a in assign {
        counts[a] += 1;
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    (entropy(&counts, assign.len() as f64).exp(), used as f64 / k as f64)
}

/// NMI from a dense contingency table over the sorted distinct labels.
pub fn nmi_contingency(a: &[usize], b: &[usize]) -> f64 {
    let ra: BTreeMap<usize, usize> = a.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().enumerate().map(|(i, v)| (v, i)).collect();
    let rb: BTreeMap<usize, usize> = b.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().enumerate().map(|(i, v)| (v, i)).collect();
    let mut table = vec![vec![0usize; rb.len()]; ra.len()];
    for (x, y) in a.iter().zip(b) {
        table[ra[x]][rb[y]] += 1;
    }
    let n = a.len() as f64;
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..rb.len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pxy = c as f64 / n;
                let px = rows[i] as f64 / n;
                let py = cols[j] as f64 / n;
                mi += pxy * (pxy / (px * py)).ln();
            }
        }
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A single- or multi-layer ORQ stack with fresh parameters.
pub fn stack(store: &mut ParamStore, dim: usize, k: usize, codebook_size: usize, levels: usize, seed: u64) -> OrqStack {
    let mut rng = rng::stream(seed, Stream::Init);
    let specs = vec![
        LayerSpec {
            codebook_size,
            k,
            scorer_hidden: 8,
        };
        levels
    ];
    OrqStack::new(store, "s", dim, &specs, None, &mut rng)
}

/// Runs gradient descent on the orthogonality penalty of every layer until
/// all fall below `target`. Returns the final largest penalty.
pub fn train_orthogonal(store: &mut ParamStore, stack: &OrqStack, target: f64) -> f64 {
    let mut worst = f64::INFINITY;
    for _ in 0..10_000 {
        worst = 0.0;
        for layer in &stack.layers {
            let mut g = Graph::new();
            let p = dos_sid::orq::orth_penalty(&mut g, store, layer);
            let value = g.value(p).item();
            worst = f64::max(worst, value);
            let grads = g.backward(p).unwrap();
            let gw = grads.param(layer.ortho.weight).unwrap();
            let w = store.get(layer.ortho.weight).zip_map(gw, |w, d| w - 0.05 * d);
            store.set(layer.ortho.weight, w);
        }
        if worst < target {
            break;
        }
    }
    worst
}

/// One randomized single-layer ORQ instance.
#[derive(Clone, Debug)]
pub struct OrqCase {
    pub rows: usize,
    pub dim: usize,
    pub k: usize,
    pub x: Vec<f64>,
    pub codebook: Vec<f64>,
    pub codebook_size: usize,
    pub seed: u64,
}

pub fn orq_case() -> impl proptest::strategy::Strategy<Value = OrqCase> {
    use proptest::prelude::*;
    (1usize..6, 2usize..9, 1usize..7, any::<u64>())
        .prop_flat_map(|(rows, dim, codebook_size, seed)| {
            (
                Just(rows),
                Just(dim),
                1..=dim,
                proptest::collection::vec(-2.0f64..2.0, rows * dim),
                proptest::collection::vec(-2.0f64..2.0, codebook_size * dim),
                Just(codebook_size),
                Just(seed),
            )
        })
        .prop_map(|(rows, dim, k, x, codebook, codebook_size, seed)| OrqCase {
            rows,
            dim,
            k,
            x,
            codebook,
            codebook_size,
            seed,
        })
}

fn naive_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mask complementarity, nearest-code optimality, straight-through value
/// identity and isometry of an orthogonal rotation on one case.
pub fn check_orq_case(c: &OrqCase) -> Result<(), String> {
    use dos_sid::orq;
    let mut store = ParamStore::new();
    let st = stack(&mut store, c.dim, c.k, c.codebook_size, 1, c.seed);
    let layer = &st.layers[0];
    store.set(layer.codebook.vectors, Tensor::new(vec![c.codebook_size, c.dim], c.codebook.clone()).unwrap());
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![c.rows, c.dim], c.x.clone()).unwrap());
    let trace = orq::orq_forward(&mut g, &store, &st, x);
    let lt = &trace.layers[0];
    let (orth, pri, sec) = (g.value(lt.x_orth), g.value(lt.x_pri), g.value(lt.x_sec));
    let mask = &lt.mask;

    for r in 0..c.rows {
        let ones = mask.row(r).iter().filter(|&&m| m == 1.0).count();
        if ones != c.k || mask.row(r).iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(format!("row {r}: mask {:?} is not 0/1 with {} ones", mask.row(r), c.k));
        }
    }
    for i in 0..orth.len() {
        let (o, p, s) = (orth.data()[i], pri.data()[i], sec.data()[i]);
        if p + s != o {
            return Err(format!("x_pri + x_sec != x_orth at {i}: {p} + {s} vs {o}"));
        }
        if p * s != 0.0 {
            return Err(format!("x_pri ⊙ x_sec != 0 at {i}"));
        }
    }

    let cb = store.get(layer.codebook.vectors);
    for r in 0..c.rows {
        let chosen = naive_sq_dist(pri.row(r), cb.row(lt.codes[r]));
        let best = (0..c.codebook_size).map(|j| naive_sq_dist(pri.row(r), cb.row(j))).fold(f64::INFINITY, f64::min);
        if chosen > best + 1e-12 * (1.0 + best) {
            return Err(format!("row {r}: chosen code at {chosen}, brute force finds {best}"));
        }
    }

    // The straight-through output must equal the plain masked code exactly.
    let plain: Vec<f64> = (0..c.rows)
        .flat_map(|r| mask.row(r).iter().zip(cb.row(lt.codes[r])).map(|(m, v)| m * v).collect::<Vec<_>>())
        .collect();
    if g.value(lt.quantized).data() != plain.as_slice() {
        return Err("straight-through forward value differs from mask ⊙ code".into());
    }

    let penalty = {
        let mut h = Graph::new();
        let p = orq::orth_penalty(&mut h, &store, layer);
        h.value(p).item()
    };
    if penalty < 1e-8 {
        let xin = g.value(x);
        for r in 0..c.rows {
            let (a, b) = (xin.row(r).iter().map(|v| v * v).sum::<f64>().sqrt(), orth.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
            if (a - b).abs() > 1e-4 * a.max(1e-12) {
                return Err(format!("row {r}: norm {a} became {b} under a rotation with penalty {penalty:e}"));
            }
        }
    } else {
        return Err(format!("fresh rotation has penalty {penalty:e}"));
    }
    Ok(())
}

/// One randomized small metric instance.
#[derive(Clone, Debug)]
pub struct MetricCase {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub assign: Vec<usize>,
    pub other: Vec<usize>,
    pub codebook_size: usize,
    pub ranking: Vec<usize>,
    pub target: usize,
    pub k: usize,
}

pub fn metric_case() -> impl proptest::strategy::Strategy<Value = MetricCase> {
    use proptest::prelude::*;
    (2usize..40, 1usize..9).prop_flat_map(|(n, codebook_size)| {
        (
            // a coarse grid forces ties
            proptest::collection::vec((0u8..9).prop_map(|v| f64::from(v) / 8.0), n),
            proptest::collection::vec(0u8..2, n),
            0..n,
            proptest::collection::vec(0..codebook_size, n),
            proptest::collection::vec(0usize..5, n),
            Just(codebook_size),
            Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
            0usize..25,
            0usize..22,
        )
            .prop_map(|(scores, raw, flip, assign, other, codebook_size, ranking, target, k)| {
                let mut labels: Vec<f64> = raw.iter().map(|&l| f64::from(l)).collect();
                // both classes present
                labels[flip] = 1.0;
                let n = labels.len();
                labels[(flip + 1) % n] = 0.0;
                MetricCase {
                    scores,
                    labels,
                    assign,
                    other,
                    codebook_size,
                    ranking,
                    target,
                    k,
                }
            })
    })
}

/// Every metric against its brute-force oracle, compared bit for bit.
pub fn check_metric_case(c: &MetricCase) -> Result<(), String> {
    use dos_sid::eval;
    let same = |name: &str, a: f64, b: f64| {
        if a.to_bits() == b.to_bits() {
            Ok(())
        } else {
            Err(format!("{name}: {a} vs oracle {b}"))
        }
    };
    same("auc", eval::auc(&c.scores, &c.labels).unwrap(), auc_pairs(&c.scores, &c.labels))?;
    same("f1", eval::f1(&c.scores, &c.labels, 0.5).unwrap(), f1_confusion(&c.scores, &c.labels, 0.5))?;
    let hit = eval::hit_at_k(&c.ranking, &c.target, c.k);
    if hit != hit_scan(&c.ranking, c.target, c.k) {
        return Err(format!("hit@{}: {hit}", c.k));
    }
    let stats = eval::codebook_stats(&c.assign, c.codebook_size).unwrap();
    let (ppl, util) = usage_histogram(&c.assign, c.codebook_size);
    same("perplexity", stats.perplexity, ppl)?;
    same("utilization", stats.utilization, util)?;
    same("nmi", eval::nmi(&c.assign, &c.other).unwrap(), nmi_contingency(&c.assign, &c.other))?;
    Ok(())
}

/// One gradient-check target: a parameter, a loss component and the model
/// variant it lives in.
pub struct GradTarget {
    pub path: &'static str,
    pub param: &'static str,
    pub loss: &'static str,
    pub variant: &'static str,
}

pub const GRAD_TARGETS: &[GradTarget] = &[
    GradTarget { path: "encoder", param: "user.encoder.attn.h0.query.weight", loss: "total", variant: "transformer" },
    GradTarget { path: "encoder", param: "user.encoder.positions", loss: "total", variant: "transformer" },
    GradTarget { path: "encoder", param: "item.encoder.ffn.1.weight", loss: "total", variant: "transformer" },
    GradTarget { path: "encoder", param: "user.encoder.0.weight", loss: "total", variant: "mlp" },
    GradTarget { path: "scorer straight-through", param: "user.orq.l0.scorer.0.weight", loss: "bce", variant: "transformer" },
    GradTarget { path: "scorer straight-through", param: "item.orq.l1.scorer.1.bias", loss: "total", variant: "transformer" },
    GradTarget { path: "quantizer straight-through", param: "item.orq.l0.orth", loss: "bce", variant: "transformer" },
    GradTarget { path: "quantizer straight-through", param: "user.orq.l1.orth", loss: "bce", variant: "transformer" },
    GradTarget { path: "mutual-information heads", param: "user.mi0.weight", loss: "mutual", variant: "transformer" },
    GradTarget { path: "mutual-information heads", param: "item.mi1.bias", loss: "mutual", variant: "transformer" },
    GradTarget { path: "prediction head", param: "head.0.weight", loss: "bce", variant: "transformer" },
    GradTarget { path: "prediction head", param: "head.1.bias", loss: "bce", variant: "transformer" },
    GradTarget { path: "loss: bce", param: "user.aggregate.weight", loss: "bce", variant: "transformer" },
    GradTarget { path: "loss: orth", param: "user.orq.l1.orth", loss: "orth", variant: "transformer" },
    GradTarget { path: "loss: mutual", param: "user.orq.l0.orth", loss: "mutual", variant: "transformer" },
    GradTarget { path: "loss: recon", param: "item.orq.l0.codebook", loss: "recon", variant: "transformer" },
    GradTarget { path: "loss: recon", param: "user.orq.l1.orth", loss: "recon", variant: "transformer" },
    GradTarget { path: "loss: recon", param: "item.decoder.0.weight", loss: "recon", variant: "decoder" },
    GradTarget { path: "loss: vq", param: "item.orq.l1.codebook", loss: "vq", variant: "transformer" },
    GradTarget { path: "loss: vq", param: "user.encoder.ffn.0.weight", loss: "vq", variant: "transformer" },
];

pub fn grad_model_config(variant: &str) -> dos_sid::dfi::ModelConfig {
    dos_sid::dfi::ModelConfig {
        dim: 6,
        seq_len: 3,
        item_seq_len: 2,
        levels: 2,
        codebook_size: 4,
        k: 3,
        scorer_hidden: 5,
        n_heads: 1,
        ffn_hidden: 7,
        head_hidden: 5,
        mlp_encoder: variant == "mlp",
        shared_codebook: true,
        with_decoder: variant == "decoder",
        mutual_first_layer_only: false,
    }
}

/// Largest relative error of one target over `points` random models and
/// batches.
pub fn check_gradient_target(t: &GradTarget, points: u64) -> Result<f64, String> {
    use dos_sid::autograd::gradient_check;
    use dos_sid::dfi::DfiModel;
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut rng = rng::stream(p, Stream::Init);
        let model = DfiModel::new(grad_model_config(t.variant), &mut rng);
        let id = model.store.find(t.param).ok_or_else(|| format!("no parameter {:?}", t.param))?;
        let mut data = rng::stream(p, Stream::Data);
        let table = uniform(&[9, 6], -1.5, 1.5, &mut data);
        let seqs: Vec<Vec<usize>> = (0..4).map(|_| (0..3).map(|_| data.random_range(0..9)).collect()).collect();
        let seq_refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let targets: Vec<usize> = (0..4).map(|_| data.random_range(0..9)).collect();
        let labels = [1.0, 0.0, 1.0, 0.0];
        // a random point: the initial value plus noise
        let point = model.store.get(id).zip_map(&uniform(model.store.get(id).shape(), -0.3, 0.3, &mut data), |a, b| a + b);
        let check = gradient_check(
            |g, x| {
                g.bind_param(id, x);
                let pass = model.forward(g, &table, &seq_refs, &targets);
                let loss = model.total_loss(g, &pass, &labels, 0.1, 0.25);
                match t.loss {
                    "bce" => loss.nodes.bce,
                    "orth" => loss.nodes.orth,
                    "mutual" => loss.nodes.mutual,
                    "recon" => loss.nodes.recon,
                    "vq" => loss.nodes.vq,
                    _ => loss.total,
                }
            },
            &point,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        if check.analytic.sq_norm() == 0.0 {
            return Err(format!("{} has zero gradient from {} at point {p}", t.param, t.loss));
        }
        worst = worst.max(check.max_rel_err);
    }
    Ok(worst)
}

/// `levels`-deep tree of clusters with `branch` children per node; one item
/// per leaf plus small noise. Returns `[branch^levels, dim]`.
pub fn tree_points(dim: usize, branch: usize, levels: usize, scale_decay: f64, noise: f64, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, Stream::Data);
    let mut centers = vec![vec![0.0; dim]];
    let mut scale = 1.0;
    for _ in 0..levels {
        let mut next = Vec::new();
        for c in &centers {
            for _ in 0..branch {
                next.push(c.iter().map(|v| v + rng.random_range(-scale..scale)).collect::<Vec<f64>>());
            }
        }
        centers = next;
        scale *= scale_decay;
    }
    let data = centers.iter().flat_map(|c| c.iter().map(|v| v + rng.random_range(-noise..noise)).collect::<Vec<_>>()).collect();
    Tensor::new(vec![centers.len(), dim], data).unwrap()
}
