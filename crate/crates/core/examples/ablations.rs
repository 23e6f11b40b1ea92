//! Trains the full model and its ablations on the tiny corpus and prints test
//! AUC and SID statistics side by side.
//!
//! ```text
//! cargo run --release --example ablations -- [seed]
//! ```

use dos_sid::dfi::export_item_sids;
use dos_sid::embeddings::{gen_synthetic, SyntheticConfig};
use dos_sid::eval;
use dos_sid::pipeline::Dataset;
use dos_sid::sid::SemanticId;
use dos_sid::training::{self, split_811, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = Dataset::from_corpus(&gen_synthetic(&SyntheticConfig::tiny(), seed).expect("valid config"));
    let splits = split_811(data.samples.len(), seed);
    let test = data.subset(&splits.test);
    let coarse = data.labels_at(0).unwrap();
    let base = TrainConfig {
        seed,
        max_epochs: 8,
        ..TrainConfig::tiny()
    };

    let variants = [
        ("full", base.clone()),
        ("unshared codebooks", TrainConfig { unshared_codebook: true, ..base.clone() }),
        ("mlp encoder", TrainConfig { mlp_encoder: true, ..base.clone() }),
        ("with decoder", TrainConfig { with_decoder: true, ..base.clone() }),
        ("mi on level 1 only", TrainConfig { mutual_first_layer_only: true, ..base.clone() }),
    ];
    for (name, cfg) in variants {
        let out = training::train(&cfg, data.table.vectors(), &data.samples, &splits).expect("training succeeds");
        let (auc, f1) = training::evaluate(&out.model, data.table.vectors(), &test);
        let sids: Vec<SemanticId> = export_item_sids(&out.model, &data.table).into_iter().map(|(_, s)| s).collect();
        let level1: Vec<usize> = sids.iter().map(|s| s.codes()[0]).collect();
        println!(
            "{name:>20}: auc {auc:.4}  f1 {f1:.4}  level-1 nmi {:.3}  collisions {:.3}",
            eval::nmi(&level1, &coarse).unwrap(),
            eval::collision_rate(&sids)
        );
    }
}
