//! Walks three items through a freshly initialized ORQ stack and prints what
//! each level does: kept dimensions, chosen code, leftover norm.
//!
//! ```text
//! cargo run --example orq_trace
//! ```

use dos_sid::autograd::{Graph, ParamStore};
use dos_sid::baselines::kmeans::KMeansParams;
use dos_sid::embeddings::{gen_synthetic, SyntheticConfig};
use dos_sid::orq::{self, LayerSpec, OrqStack};
use dos_sid::rng::{self, Stream};

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn main() {
    let corpus = gen_synthetic(&SyntheticConfig::tiny(), 1).expect("valid config");
    let x = corpus.table.vectors();
    let dim = x.cols();
    let spec = LayerSpec {
        codebook_size: 16,
        k: dim / 2,
        scorer_hidden: 32,
    };
    let mut store = ParamStore::new();
    let stack = OrqStack::new(&mut store, "trace", dim, &vec![spec; 3], None, &mut rng::stream(1, Stream::Init));
    orq::init_codebooks_kmeans(&mut store, &stack, x, &KMeansParams::default(), &mut rng::stream(1, Stream::Baseline));

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let trace = orq::orq_forward(&mut g, &store, &stack, xv);
    let recon = orq::decoder_free_reconstruct(&mut g, &store, &stack, &trace);

    for item in 0..3 {
        println!("{} (labels {:?})", corpus.table.ids()[item], corpus.hierarchy.labels[item]);
        for (l, layer) in trace.layers.iter().enumerate() {
            let kept: Vec<usize> = (0..dim).filter(|&j| layer.mask.row(item)[j] == 1.0).take(6).collect();
            println!(
                "  level {}: code {:>2}, first kept dims {kept:?}, |x_pri| {:.3}, |x_resi| {:.3}",
                l + 1,
                layer.codes[item],
                norm(g.value(layer.x_pri).row(item)),
                norm(g.value(layer.x_resi).row(item)),
            );
        }
        let err: Vec<f64> = x.row(item).iter().zip(g.value(recon).row(item)).map(|(a, b)| a - b).collect();
        println!("  SID {:?}, reconstruction error {:.3} of {:.3}", trace.sid(item), norm(&err), norm(x.row(item)));
    }
}
