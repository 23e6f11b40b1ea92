//! Reference quantizers: residual k-means and a small RQ-VAE.

pub mod kmeans;
mod rq_kmeans;
mod rq_vae;

pub use rq_kmeans::{rq_kmeans_fit, RqKMeansModel};
pub use rq_vae::{rq_vae_lite_train, RqVaeConfig, RqVaeLiteModel};
