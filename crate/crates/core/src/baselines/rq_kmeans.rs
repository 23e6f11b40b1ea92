use crate::embeddings::SemanticEmbeddingTable;
use crate::orq::nearest_codes;
use crate::rng::{self, Stream};
use crate::sid::SemanticId;
use crate::tensor::Tensor;

use super::kmeans::{kmeans, KMeansParams};

/// Residual k-means: level 1 clusters the raw vectors, each further level
/// clusters what the previous levels left over.
#[derive(Clone, Debug, PartialEq)]
pub struct RqKMeansModel {
    /// One `[K, d]` centroid table per level.
    pub codebooks: Vec<Tensor>,
}

impl RqKMeansModel {
    /// Codes per row and the final residual.
    pub fn encode(&self, x: &Tensor) -> (Vec<SemanticId>, Tensor) {
        let mut residual = x.clone();
        let mut codes = vec![Vec::with_capacity(self.codebooks.len()); x.rows()];
        for cb in &self.codebooks {
            let idx = nearest_codes(&residual, cb);
            residual = subtract_codes(&residual, cb, &idx);
            for (c, i) in codes.iter_mut().zip(&idx) {
                c.push(*i);
            }
        }
        (codes.into_iter().map(SemanticId).collect(), residual)
    }

    /// Sum of the selected centroids per row.
    pub fn decode(&self, sids: &[SemanticId]) -> Tensor {
        let d = self.codebooks[0].cols();
        let mut out = vec![0.0; sids.len() * d];
        for (r, sid) in sids.iter().enumerate() {
            for (cb, &c) in self.codebooks.iter().zip(sid.codes()) {
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(cb.row(c)) {
                    *o += v;
                }
            }
        }
        Tensor::from_parts(vec![sids.len(), d], out)
    }

    /// Mean over rows of the squared norm of the final residual.
    pub fn mse(&self, x: &Tensor) -> f64 {
        let (_, residual) = self.encode(x);
        residual.sq_norm() / x.rows() as f64
    }
}

fn subtract_codes(x: &Tensor, cb: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for (r, &c) in idx.iter().enumerate() {
        for (o, v) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(cb.row(c)) {
            *o -= v;
        }
    }
    out
}

/// Fits `levels` codebooks of `k` centroids each and returns the SID of
/// every item in table order.
pub fn rq_kmeans_fit(
    table: &SemanticEmbeddingTable,
    levels: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> (RqKMeansModel, Vec<SemanticId>) {
    assert!(levels >= 1, "at least one level");
    assert!(k >= 1 && k <= table.n_items(), "K = {k} with {} items", table.n_items());
    let params = KMeansParams {
        max_iters,
        ..KMeansParams::default()
    };
    let mut rng = rng::stream(seed, Stream::Baseline);
    let mut residual = table.vectors().clone();
    let mut codebooks = Vec::with_capacity(levels);
    let mut codes = vec![Vec::with_capacity(levels); table.n_items()];
    for _ in 0..levels {
        let fit = kmeans(&residual, k, &params, &mut rng);
        residual = subtract_codes(&residual, &fit.centroids, &fit.assignments);
        for (c, a) in codes.iter_mut().zip(&fit.assignments) {
            c.push(*a);
        }
        codebooks.push(fit.centroids);
    }
    (RqKMeansModel { codebooks }, codes.into_iter().map(SemanticId).collect())
}
