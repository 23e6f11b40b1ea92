//! Item embeddings: prompt rendering, the on-disk embedding table, and a
//! synthetic corpus with planted hierarchy for desk-scale experiments.

mod prompt;
mod synthetic;
mod table;

pub use prompt::{render_prompt, ItemMeta};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticCorpus, SyntheticHierarchy};
pub use table::{
    load_hierarchy, load_samples, load_table, manifest_path, save_hierarchy, save_samples, save_table,
    HierarchyLabel, IndexedSample, InteractionSample, SemanticEmbeddingTable,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid item metadata: {0}")]
    InvalidMeta(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown item id {0:?}")]
    UnknownItem(String),
}

impl EmbeddingError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
