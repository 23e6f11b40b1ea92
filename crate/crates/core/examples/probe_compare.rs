//! Compares SID schemes under the same next-SID probe: DOS, RQ-KMeans and
//! uniformly random codes, on one synthetic corpus.
//!
//! ```text
//! cargo run --release --example probe_compare -- [seed]
//! ```

use std::time::Instant;

use dos_sid::baselines::rq_kmeans_fit;
use dos_sid::dfi::export_item_sids;
use dos_sid::embeddings::{gen_synthetic, IndexedSample, SyntheticConfig};
use dos_sid::eval;
use dos_sid::probe::{random_sids, run_probe, ProbeConfig, ProbeReport};
use dos_sid::sid::SemanticId;
use dos_sid::training::{self, split_811, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let corpus = gen_synthetic(&SyntheticConfig::desk(), seed).expect("valid config");
    let samples: Vec<IndexedSample> = corpus.samples.iter().map(|s| s.resolve(&corpus.table).unwrap()).collect();
    let splits = split_811(samples.len(), seed);
    let cfg = TrainConfig { seed, ..TrainConfig::desk() };

    let t = Instant::now();
    let dos = training::train(&cfg, corpus.table.vectors(), &samples, &splits).expect("training succeeds");
    println!("dos trained in {:.1?}", t.elapsed());
    let dos_sids: Vec<SemanticId> = export_item_sids(&dos.model, &corpus.table).into_iter().map(|(_, s)| s).collect();
    let (_, km_sids) = rq_kmeans_fit(&corpus.table, cfg.levels, cfg.codebook_size, 50, seed);
    let rand_sids = random_sids(corpus.table.n_items(), cfg.levels, cfg.codebook_size, seed);

    let train: Vec<&IndexedSample> = splits.train.iter().map(|&i| &samples[i]).collect();
    let test: Vec<&IndexedSample> = splits.test.iter().map(|&i| &samples[i]).collect();
    let probe_cfg = ProbeConfig { seed, ..ProbeConfig::default() };
    let mut report = ProbeReport::default();
    for (name, sids) in [("dos", &dos_sids), ("rq-kmeans", &km_sids), ("random", &rand_sids)] {
        let t = Instant::now();
        let hit = run_probe(sids, cfg.codebook_size, &train, &test, &probe_cfg).expect("probe trains");
        let level1: Vec<usize> = sids.iter().map(|s| s.codes()[0]).collect();
        println!(
            "{name:>10}: hit@10 {hit:.4}  level-1 nmi {:.3}  collisions {:.3}  ({:.1?})",
            eval::nmi(&level1, &corpus.hierarchy.level(0)).unwrap(),
            eval::collision_rate(sids),
            t.elapsed()
        );
        report.0.insert(name.to_string(), hit);
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
