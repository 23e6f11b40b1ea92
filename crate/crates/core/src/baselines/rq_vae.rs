use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, ParamId, ParamStore, Var};
use crate::baselines::kmeans::{kmeans, KMeansParams};
use crate::embeddings::SemanticEmbeddingTable;
use crate::nn::{self, Mlp};
use crate::orq::nearest_codes;
use crate::rng::{self, Stream};
use crate::sid::SemanticId;
use crate::tensor::Tensor;
use crate::training::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 64,
            hidden: 64,
            beta: 0.25,
            lr: 1e-3,
            epochs: 50,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Perceptron encoder, residual codebooks in latent space, perceptron
/// decoder. Trained on reconstruction and VQ losses only.
#[derive(Clone, Debug)]
pub struct RqVaeLiteModel {
    pub store: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<ParamId>,
    pub beta: f64,
}

struct Pass {
    codes: Vec<Vec<usize>>,
    recon: Var,
    recon_loss: Var,
    vq_loss: Var,
}

impl RqVaeLiteModel {
    fn pass(&self, g: &mut Graph, x: &Tensor) -> Pass {
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(g, &self.store, xv);
        let mut residual = z;
        let mut codes = Vec::with_capacity(self.codebooks.len());
        let mut quantized: Option<Var> = None;
        let mut vq: Option<Var> = None;
        for &cb_id in &self.codebooks {
            let cb = g.param(&self.store, cb_id);
            let idx = g.decide_indices(|g| nearest_codes(g.value(residual), g.value(cb)));
            let c = g.gather_rows(cb, &idx);
            let frozen_r = g.stop_gradient(residual);
            let d = g.sub(frozen_r, c);
            let codebook_term = g.sq_sum(d);
            let frozen_c = g.stop_gradient(c);
            let d = g.sub(residual, frozen_c);
            let commit = g.sq_sum(d);
            let commit = g.scale(commit, self.beta);
            let level = g.add(codebook_term, commit);
            vq = Some(match vq {
                None => level,
                Some(v) => g.add(v, level),
            });
            quantized = Some(match quantized {
                None => c,
                Some(q) => g.add(q, c),
            });
            residual = g.sub(residual, frozen_c);
            codes.push(idx);
        }
        let zq = g.straight_through(quantized.expect("levels >= 1"), z);
        let recon = self.decoder.forward(g, &self.store, zq);
        let diff = g.sub(recon, xv);
        let recon_loss = g.sq_sum(diff);
        Pass {
            codes,
            recon,
            recon_loss,
            vq_loss: vq.expect("levels >= 1"),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Vec<SemanticId> {
        let mut g = Graph::new();
        let p = self.pass(&mut g, x);
        transpose_codes(&p.codes, x.rows())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = self.pass(&mut g, x);
        g.value(p.recon).clone()
    }

    /// Mean squared reconstruction error per row.
    pub fn mse(&self, x: &Tensor) -> f64 {
        let r = self.reconstruct(x);
        r.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.rows() as f64
    }
}

fn transpose_codes(per_level: &[Vec<usize>], rows: usize) -> Vec<SemanticId> {
    (0..rows).map(|r| SemanticId(per_level.iter().map(|l| l[r]).collect())).collect()
}

/// Trains the lite RQ-VAE on the table's vectors and returns it with the SID
/// of every item in table order.
///
/// Codebooks start from residual k-means on the untrained encoder's output.
pub fn rq_vae_lite_train(
    table: &SemanticEmbeddingTable,
    cfg: &RqVaeConfig,
) -> Result<(RqVaeLiteModel, Vec<SemanticId>), TrainError> {
    assert!(cfg.levels >= 1 && cfg.codebook_size >= 1 && cfg.batch_size >= 1);
    let x = table.vectors();
    let d = table.dim();
    let mut init = rng::stream(cfg.seed, Stream::Init);
    let mut store = ParamStore::new();
    let encoder = Mlp::new(&mut store, "rqvae.encoder", [d, cfg.hidden, d], &mut init);
    let decoder = Mlp::new(&mut store, "rqvae.decoder", [d, cfg.hidden, d], &mut init);
    let codebooks = (0..cfg.levels)
        .map(|l| store.add(format!("rqvae.codebook{l}"), nn::gaussian(cfg.codebook_size, d, 0.1, &mut init)))
        .collect();
    let mut model = RqVaeLiteModel {
        store,
        encoder,
        decoder,
        codebooks,
        beta: cfg.beta,
    };
    init_codebooks(&mut model, x, cfg, &mut init);

    let mut opt = Adam::new(cfg.lr, &model.store);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = x.select_rows(chunk);
            let mut g = Graph::new();
            let p = model.pass(&mut g, &batch);
            let total = g.add(p.recon_loss, p.vq_loss);
            let total = g.scale(total, 1.0 / chunk.len() as f64);
            let grads = g.backward(total).map_err(|e| TrainError::diverged(epoch, e))?;
            opt.step(&mut model.store, &grads);
        }
    }
    let sids = model.encode(x);
    Ok((model, sids))
}

fn init_codebooks(model: &mut RqVaeLiteModel, x: &Tensor, cfg: &RqVaeConfig, rng: &mut rng::Rng) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = model.encoder.forward(&mut g, &model.store, xv);
    let mut residual = g.value(z).clone();
    let k = cfg.codebook_size.min(x.rows());
    for &cb in &model.codebooks {
        let fit = kmeans(&residual, k, &KMeansParams::default(), rng);
        let mut data = fit.centroids.data().to_vec();
        data.extend_from_slice(&model.store.get(cb).data()[k * x.cols()..]);
        for (r, &c) in fit.assignments.iter().enumerate() {
            for (v, m) in residual.data_mut()[r * x.cols()..(r + 1) * x.cols()].iter_mut().zip(fit.centroids.row(c)) {
                *v -= m;
            }
        }
        model.store.set(cb, Tensor::new(vec![cfg.codebook_size, x.cols()], data).expect("finite centroids"));
    }
}
