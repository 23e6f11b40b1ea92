//! Renders the embedding prompt for a couple of catalog entries, including
//! one without dishes and one that fails validation.
//!
//! ```text
//! cargo run --example render_prompt
//! ```

use dos_sid::embeddings::{render_prompt, ItemMeta};

fn main() {
    let noodles = ItemMeta {
        item_id: "shop-0017".into(),
        name: "Lanzhou Hand-Pulled Noodles".into(),
        second_category: "Chinese".into(),
        third_category: "Noodles".into(),
        accepts_reservations: false,
        min_price: 18.0,
        min_shipping_fee: 3.5,
        dishes: vec!["beef noodle soup".into(), "cold cucumber salad".into()],
    };
    let bakery = ItemMeta {
        item_id: "shop-0042".into(),
        name: "Morning Crust".into(),
        second_category: "Bakery".into(),
        third_category: "Bread".into(),
        accepts_reservations: true,
        min_price: 0.0,
        min_shipping_fee: 0.0,
        dishes: vec![],
    };
    let broken = ItemMeta {
        min_price: -1.0,
        ..bakery.clone()
    };

    for meta in [&noodles, &bakery, &broken] {
        match render_prompt(meta) {
            Ok(text) => println!("{}:\n  {text}\n", meta.item_id),
            Err(e) => println!("{}: rejected ({e})\n", meta.item_id),
        }
    }
}
