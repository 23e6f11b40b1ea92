use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingError, HierarchyLabel, InteractionSample, SemanticEmbeddingTable};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub dim: usize,
    /// Cluster counts per level, coarse to fine. Each mid cluster nests in
    /// one coarse cluster and each fine cluster in one mid cluster.
    pub clusters: [usize; 3],
    /// Standard deviation of the per-level centroid offsets.
    pub level_scales: [f64; 3],
    pub noise_sigma: f64,
    pub n_users: usize,
    pub seq_len: usize,
    pub n_samples: usize,
    pub positive_ratio: f64,
    /// Chance that a history item (and a positive target) comes from the
    /// user's preferred coarse cluster rather than the whole catalog.
    pub p_coherent: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SyntheticConfig {
    pub fn desk() -> Self {
        Self {
            n_items: 2000,
            dim: 32,
            clusters: [8, 4, 2],
            level_scales: [1.0, 0.5, 0.25],
            noise_sigma: 0.05,
            n_users: 500,
            seq_len: 10,
            n_samples: 20_000,
            positive_ratio: 0.5,
            p_coherent: 0.9,
        }
    }

    /// A small corpus for smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            n_items: 256,
            n_users: 64,
            n_samples: 2_000,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        let fine: usize = self.clusters.iter().product();
        let bad = |m: String| Err(EmbeddingError::Config(m));
        if self.clusters.contains(&0) {
            return bad(format!("cluster counts must be >= 1, got {:?}", self.clusters));
        }
        if self.n_items < fine {
            return bad(format!("n_items {} is smaller than the {fine} fine clusters", self.n_items));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if self.dim == 0 || self.n_users == 0 {
            return bad("dim and n_users must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.positive_ratio) || !(0.0..=1.0).contains(&self.p_coherent) {
            return bad("positive_ratio and p_coherent must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) || self.level_scales.iter().any(|s| !(*s >= 0.0)) {
            return bad("scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Planted cluster structure of a synthetic catalog. Labels are global ids
/// per level.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticHierarchy {
    pub labels: Vec<[usize; 3]>,
    /// Centroids per level (`coarse`, `coarse + mid`, `coarse + mid + fine`),
    /// each `[clusters at level, dim]`.
    pub centroids: [Tensor; 3],
    pub noise_sigma: f64,
}

impl SyntheticHierarchy {
    pub fn level(&self, l: usize) -> Vec<usize> {
        self.labels.iter().map(|x| x[l]).collect()
    }

    pub fn to_records(&self, ids: &[String]) -> Vec<HierarchyLabel> {
        ids.iter()
            .zip(&self.labels)
            .map(|(id, l)| HierarchyLabel {
                item_id: id.clone(),
                l1: l[0],
                l2: l[1],
                l3: l[2],
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub table: SemanticEmbeddingTable,
    pub hierarchy: SyntheticHierarchy,
    pub samples: Vec<InteractionSample>,
}

fn gaussian_rows(rows: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, std.max(0.0)).expect("valid std");
    (0..rows).map(|_| (0..dim).map(|_| normal.sample(rng)).collect()).collect()
}

/// Generates a hierarchical item catalog and interaction samples.
///
/// Item `i` sits in fine cluster `i mod F`; its vector is the coarse centroid
/// plus the mid and fine offsets plus isotropic Gaussian noise. Each user
/// prefers one coarse cluster.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus, EmbeddingError> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Data);
    let [c1, c2, c3] = cfg.clusters;
    let d = cfg.dim;
    let coarse = gaussian_rows(c1, d, cfg.level_scales[0], &mut rng);
    let mid_off = gaussian_rows(c1 * c2, d, cfg.level_scales[1], &mut rng);
    let fine_off = gaussian_rows(c1 * c2 * c3, d, cfg.level_scales[2], &mut rng);
    let mid: Vec<Vec<f64>> = (0..c1 * c2)
        .map(|m| coarse[m / c2].iter().zip(&mid_off[m]).map(|(a, b)| a + b).collect())
        .collect();
    let fine: Vec<Vec<f64>> = (0..c1 * c2 * c3)
        .map(|f| mid[f / c3].iter().zip(&fine_off[f]).map(|(a, b)| a + b).collect())
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let n_fine = c1 * c2 * c3;
    let mut labels = Vec::with_capacity(cfg.n_items);
    let mut data = Vec::with_capacity(cfg.n_items * d);
    for i in 0..cfg.n_items {
        let f = i % n_fine;
        labels.push([f / (c2 * c3), f / c3, f]);
        data.extend(fine[f].iter().map(|c| c + noise.sample(&mut rng)));
    }
    let ids: Vec<String> = (0..cfg.n_items).map(|i| format!("itm{i}")).collect();
    let table = SemanticEmbeddingTable::new(ids.clone(), Tensor::new(vec![cfg.n_items, d], data).expect("finite"))?;

    let mut by_coarse: Vec<Vec<usize>> = vec![Vec::new(); c1];
    for (i, l) in labels.iter().enumerate() {
        by_coarse[l[0]].push(i);
    }
    let preferred: Vec<usize> = (0..cfg.n_users).map(|_| rng.random_range(0..c1)).collect();
    let draw = |rng: &mut rng::Rng, home: usize, coherent: bool| -> usize {
        if coherent && rng.random_bool(cfg.p_coherent) {
            *by_coarse[home].choose(rng).expect("every coarse cluster has items")
        } else {
            rng.random_range(0..cfg.n_items)
        }
    };
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let user = rng.random_range(0..cfg.n_users);
        let home = preferred[user];
        let seq: Vec<usize> = (0..cfg.seq_len).map(|_| draw(&mut rng, home, true)).collect();
        let positive = rng.random_bool(cfg.positive_ratio);
        let target = draw(&mut rng, home, positive);
        samples.push(InteractionSample {
            seq: seq.iter().map(|&i| ids[i].clone()).collect(),
            target: ids[target].clone(),
            label: positive as u8,
        });
    }

    let to_tensor = |rows: &[Vec<f64>]| Tensor::from_rows(rows);
    Ok(SyntheticCorpus {
        table,
        hierarchy: SyntheticHierarchy {
            labels,
            centroids: [to_tensor(&coarse), to_tensor(&mid), to_tensor(&fine)],
            noise_sigma: cfg.noise_sigma,
        },
        samples,
    })
}
