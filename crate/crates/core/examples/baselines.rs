//! Fits the two baseline quantizers on the tiny synthetic catalog and reports
//! reconstruction error, level-1 NMI and collisions for each.
//!
//! ```text
//! cargo run --release --example baselines
//! ```

use dos_sid::baselines::{rq_kmeans_fit, rq_vae_lite_train, RqVaeConfig};
use dos_sid::embeddings::{gen_synthetic, SyntheticConfig};
use dos_sid::eval;
use dos_sid::sid::SemanticId;

fn summary(name: &str, mse: f64, sids: &[SemanticId], coarse: &[usize]) {
    let level1: Vec<usize> = sids.iter().map(|s| s.codes()[0]).collect();
    println!(
        "{name:>10}: mse {mse:.4}  level-1 nmi {:.3}  collisions {:.3}",
        eval::nmi(&level1, coarse).unwrap(),
        eval::collision_rate(sids)
    );
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let corpus = gen_synthetic(&SyntheticConfig::tiny(), seed).expect("valid config");
    let x = corpus.table.vectors();
    let coarse = corpus.hierarchy.level(0);

    let (km, km_sids) = rq_kmeans_fit(&corpus.table, 3, 16, 50, seed);
    summary("rq-kmeans", km.mse(x), &km_sids, &coarse);

    let cfg = RqVaeConfig {
        codebook_size: 16,
        epochs: 30,
        seed,
        ..RqVaeConfig::default()
    };
    let (vae, vae_sids) = rq_vae_lite_train(&corpus.table, &cfg).expect("training succeeds");
    summary("rq-vae", vae.mse(x), &vae_sids, &coarse);
}
