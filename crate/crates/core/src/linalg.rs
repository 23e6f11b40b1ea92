//! Small dense linear-algebra helpers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Q factor of a thin QR decomposition by modified Gram–Schmidt, with the
/// sign convention `R_ii > 0`. Columns of the input must be independent.
pub fn qr_q(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    assert!(m >= n, "qr_q needs rows >= cols");
    // Work column-major.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    for j in 0..n {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let q = &done[p];
            let c = &mut rest[0];
            let r: f64 = q.iter().zip(c.iter()).map(|(x, y)| x * y).sum();
            for (ci, qi) in c.iter_mut().zip(q) {
                *ci -= r * qi;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "qr_q: rank-deficient input");
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; m * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    Tensor::new(vec![m, n], data).expect("finite")
}

/// A random orthogonal `n × n` matrix: the Q factor of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    qr_q(&Tensor::new(vec![n, n], data).expect("finite"))
}

/// `‖A·Aᵀ − I‖²_F`
pub fn orthogonality_defect(a: &Tensor) -> f64 {
    let n = a.shape()[0];
    let aat = a.matmul(&a.transpose());
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = aat.at(i, j) - target;
            s += d * d;
        }
    }
    s
}
