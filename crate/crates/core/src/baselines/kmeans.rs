//! Lloyd's k-means with k-means++ seeding and farthest-point repair of
//! empty clusters.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::tensor::{kernels::sq_dist, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective: Vec<f64>,
}

impl KMeansFit {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("at least one assignment step")
    }
}

/// k-means++ seeding. When fewer than `k` distinct points exist the surplus
/// centroids duplicate existing points.
pub fn plus_plus_init(data: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = data.rows();
    assert!(k >= 1 && k <= n, "k = {k} with {n} points");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // All remaining mass is zero: every point coincides with a centroid.
            Err(_) => rng.random_range(0..n),
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

/// Nearest centroid and its squared distance, lowest index on ties.
fn assign(data: &Tensor, centroids: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(data.rows());
    let mut dist = Vec::with_capacity(data.rows());
    for i in 0..data.rows() {
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = sq_dist(data.row(i), centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        idx.push(best.0);
        dist.push(best.1);
    }
    (idx, dist)
}

pub fn kmeans(data: &Tensor, k: usize, params: &KMeansParams, rng: &mut impl Rng) -> KMeansFit {
    let (n, d) = (data.rows(), data.cols());
    let mut centroids = plus_plus_init(data, k, rng).into_data();
    let mut objective = Vec::new();
    let mut assignments;
    loop {
        let ct = Tensor::from_parts(vec![k, d], centroids.clone());
        let (idx, mut dist) = assign(data, &ct);
        let j: f64 = dist.iter().sum();
        assignments = idx;
        let converged = objective
            .last()
            .is_some_and(|&prev: &f64| (prev - j).abs() <= params.tol * prev.abs().max(f64::MIN_POSITIVE));
        objective.push(j);
        if converged || objective.len() > params.max_iters {
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        // Empty clusters move to the currently worst-served point.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).expect("n > 0");
            centroids[c * d..(c + 1) * d].copy_from_slice(data.row(far));
            dist[far] = 0.0;
        }
    }
    KMeansFit {
        centroids: Tensor::from_parts(vec![k, d], centroids),
        assignments,
        objective,
    }
}
