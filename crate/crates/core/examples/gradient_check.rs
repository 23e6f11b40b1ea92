//! Central-difference check of a full ORQ stack: rotation, top-k selection,
//! straight-through quantization and the decoder-free reconstruction loss.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use dos_sid::autograd::{gradient_check, ParamStore};
use dos_sid::orq::{self, LayerSpec, OrqStack};
use dos_sid::rng::{self, Stream};
use dos_sid::Tensor;
use rand::Rng;

fn main() {
    let (rows, dim) = (5, 6);
    let mut init = rng::stream(3, Stream::Init);
    let mut store = ParamStore::new();
    let spec = LayerSpec {
        codebook_size: 4,
        k: 3,
        scorer_hidden: 8,
    };
    let stack = OrqStack::new(&mut store, "demo", dim, &[spec.clone(), spec], None, &mut init);
    let data: Vec<f64> = (0..rows * dim).map(|_| init.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![rows, dim], data).expect("rows × dim values");

    let check = gradient_check(
        |g, x| {
            let trace = orq::orq_forward(g, &store, &stack, x);
            let recon = orq::decoder_free_reconstruct(g, &store, &stack, &trace);
            let diff = g.sub(x, recon);
            let recon_loss = g.sq_sum(diff);
            let vq = orq::vq_loss(g, &trace, 0.25);
            g.add(recon_loss, vq)
        },
        &x,
        1e-6,
    )
    .expect("finite losses");

    println!("max relative error {:.2e}", check.max_rel_err);
    for (a, n) in check.analytic.data().iter().zip(check.numeric.data()).take(8) {
        println!("  analytic {a:>+.6}  numeric {n:>+.6}");
    }
}
