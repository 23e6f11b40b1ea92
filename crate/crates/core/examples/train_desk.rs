//! Trains the dual-tower model on the desk-scale synthetic corpus and prints
//! the per-epoch validation curve, test metrics and SID quality.
//!
//! ```text
//! cargo run --release --example train_desk -- [seed]
//! ```

use std::time::Instant;

use dos_sid::dfi::export_item_sids;
use dos_sid::embeddings::{gen_synthetic, IndexedSample, SyntheticConfig};
use dos_sid::eval;
use dos_sid::training::{self, split_811, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus = gen_synthetic(&SyntheticConfig::desk(), seed).expect("valid desk config");
    let samples: Vec<IndexedSample> = corpus
        .samples
        .iter()
        .map(|s| s.resolve(&corpus.table).expect("ids come from the table"))
        .collect();
    let splits = split_811(samples.len(), seed);
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };

    let start = Instant::now();
    let out = training::train(&cfg, corpus.table.vectors(), &samples, &splits).expect("training succeeds");
    println!("trained {} epochs in {:.1?}", out.history.len(), start.elapsed());
    for r in &out.history {
        println!("  epoch {:>2}  loss {:>9.4}  val auc {:.4}  f1 {:.4}", r.epoch, r.train_loss, r.val_auc, r.val_f1);
    }

    let test: Vec<&IndexedSample> = splits.test.iter().map(|&i| &samples[i]).collect();
    let (auc, f1) = training::evaluate(&out.model, corpus.table.vectors(), &test);
    println!("best epoch {}: test auc {auc:.4}, f1 {f1:.4}", out.checkpoint.epoch);

    let sids = export_item_sids(&out.model, &corpus.table);
    let level = |l: usize| sids.iter().map(|(_, s)| s.codes()[l]).collect::<Vec<_>>();
    for l in 0..cfg.levels {
        let stats = eval::codebook_stats(&level(l), cfg.codebook_size).expect("non-empty");
        let nmi = eval::nmi(&level(l), &corpus.hierarchy.level(l)).expect("equal lengths");
        println!(
            "  level {}: nmi {nmi:.3}, perplexity {:.1}, utilization {:.2}",
            l + 1,
            stats.perplexity,
            stats.utilization
        );
    }
    let full: Vec<_> = sids.iter().map(|(_, s)| s.clone()).collect();
    println!("collision rate {:.4}", eval::collision_rate(&full));
}
