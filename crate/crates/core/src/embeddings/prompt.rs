use serde::{Deserialize, Serialize};

use super::EmbeddingError;

/// Catalog fields that go into an item's embedding prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub name: String,
    pub second_category: String,
    pub third_category: String,
    pub accepts_reservations: bool,
    /// Yuan.
    pub min_price: f64,
    /// Yuan.
    pub min_shipping_fee: f64,
    pub dishes: Vec<String>,
}

impl ItemMeta {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.item_id.is_empty() {
            return Err(EmbeddingError::InvalidMeta("empty item_id".into()));
        }
        for (field, v) in [("min_price", self.min_price), ("min_shipping_fee", self.min_shipping_fee)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EmbeddingError::InvalidMeta(format!("{field} must be a non-negative amount, got {v}")));
            }
        }
        Ok(())
    }
}

/// Renders the text that is sent to the embedding model for one item.
///
/// An empty dish list drops the closing "Featured dishes include ..." sentence.
pub fn render_prompt(meta: &ItemMeta) -> Result<String, EmbeddingError> {
    meta.validate()?;
    let reservations = if meta.accepts_reservations {
        "Reservations are accepted."
    } else {
        "Reservations are not accepted."
    };
    let mut text = format!(
        "{} is a {} restaurant specializing in {}. {} The minimum order amount is {} yuan, and the minimum delivery fee is {} yuan.",
        meta.name, meta.second_category, meta.third_category, reservations, meta.min_price, meta.min_shipping_fee,
    );
    if !meta.dishes.is_empty() {
        text.push_str(" Featured dishes include ");
        text.push_str(&meta.dishes.join(", "));
        text.push('.');
    }
    Ok(text)
}
