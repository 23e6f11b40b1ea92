//! File-level plumbing shared by the command line, the examples and the
//! integration tests: corpus directories, SID alignment, metric reports.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::embeddings::{
    load_hierarchy, load_samples, load_table, save_hierarchy, save_samples, save_table, EmbeddingError,
    IndexedSample, SemanticEmbeddingTable, SyntheticConfig, SyntheticCorpus,
};
use crate::eval::{self, EvalError, MetricReport};
use crate::sid::{SemanticId, SidError};
use crate::training::{CheckpointError, TrainError};

pub const TABLE_FILE: &str = "table.bin";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const HIERARCHY_FILE: &str = "hierarchy.jsonl";
pub const CORPUS_CONFIG_FILE: &str = "corpus.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Mismatch(String),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a corpus directory: embedding table (+ manifest), samples,
/// hierarchy labels and the generating config.
pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus, cfg: &SyntheticConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    save_table(&corpus.table, &dir.join(TABLE_FILE))?;
    save_samples(&dir.join(SAMPLES_FILE), &corpus.samples)?;
    save_hierarchy(&dir.join(HIERARCHY_FILE), &corpus.hierarchy.to_records(corpus.table.ids()))?;
    write_json(&dir.join(CORPUS_CONFIG_FILE), cfg)
}

/// A catalog with resolved interactions and, when known, planted labels in
/// catalog order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: SemanticEmbeddingTable,
    pub samples: Vec<IndexedSample>,
    pub hierarchy: Option<Vec<[usize; 3]>>,
}

impl Dataset {
    pub fn from_corpus(corpus: &SyntheticCorpus) -> Self {
        let samples = corpus
            .samples
            .iter()
            .map(|s| s.resolve(&corpus.table).expect("generated ids come from the table"))
            .collect();
        Self {
            table: corpus.table.clone(),
            samples,
            hierarchy: Some(corpus.hierarchy.labels.clone()),
        }
    }

    pub fn load(table: &Path, samples: &Path, hierarchy: Option<&Path>) -> Result<Self, PipelineError> {
        let table = load_table(table)?;
        let samples = load_samples(samples)?
            .iter()
            .map(|s| s.resolve(&table))
            .collect::<Result<Vec<_>, _>>()?;
        let hierarchy = match hierarchy {
            None => None,
            Some(path) => {
                let mut by_id: HashMap<String, [usize; 3]> = load_hierarchy(path)?
                    .into_iter()
                    .map(|r| (r.item_id, [r.l1, r.l2, r.l3]))
                    .collect();
                let labels = table
                    .ids()
                    .iter()
                    .map(|id| {
                        by_id.remove(id).ok_or_else(|| {
                            PipelineError::Mismatch(format!("{}: no label for item {id:?}", path.display()))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(labels)
            }
        };
        Ok(Self {
            table,
            samples,
            hierarchy,
        })
    }

    /// Loads a directory written by [`write_corpus`]; labels are optional.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let hierarchy = dir.join(HIERARCHY_FILE);
        let hierarchy = hierarchy.exists().then_some(hierarchy);
        Self::load(&dir.join(TABLE_FILE), &dir.join(SAMPLES_FILE), hierarchy.as_deref())
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&IndexedSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn labels_at(&self, level: usize) -> Option<Vec<usize>> {
        self.hierarchy.as_ref().map(|h| h.iter().map(|l| l[level]).collect())
    }
}

/// Reorders exported SIDs into catalog order, failing on missing items or
/// codes outside the codebook.
pub fn align_sids(
    table: &SemanticEmbeddingTable,
    sids: &[(String, SemanticId)],
    codebook_size: usize,
) -> Result<Vec<SemanticId>, PipelineError> {
    let mut by_id: HashMap<&str, &SemanticId> = HashMap::with_capacity(sids.len());
    for (id, sid) in sids {
        if let Some(&c) = sid.codes().iter().find(|&&c| c >= codebook_size) {
            return Err(PipelineError::Mismatch(format!(
                "item {id:?} has code {c}, outside a codebook of size {codebook_size}"
            )));
        }
        by_id.insert(id, sid);
    }
    table
        .ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| PipelineError::Mismatch(format!("no SID for item {id:?}")))
        })
        .collect()
}

/// Codebook usage, hierarchy NMI and collisions of one SID assignment
/// (`sids` in catalog order).
pub fn sid_report(
    scheme: &str,
    sids: &[SemanticId],
    codebook_size: usize,
    data: &Dataset,
) -> Result<MetricReport, PipelineError> {
    let levels = sids.first().map_or(0, SemanticId::levels);
    let mut report = MetricReport {
        scheme: scheme.to_string(),
        collision_rate: eval::collision_rate(sids),
        ..MetricReport::default()
    };
    for l in 0..levels {
        let codes: Vec<usize> = sids.iter().map(|s| s.codes()[l]).collect();
        report.codebook.push(eval::codebook_stats(&codes, codebook_size)?);
        if let Some(labels) = data.labels_at(l.min(2)) {
            report.nmi.push(eval::nmi(&codes, &labels)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::gen_synthetic;

    #[test]
    fn corpus_round_trips_through_a_directory() {
        let dir = std::env::temp_dir().join(format!("dos-pipeline-{}", std::process::id()));
        let cfg = SyntheticConfig {
            n_items: 64,
            n_users: 8,
            n_samples: 100,
            ..SyntheticConfig::desk()
        };
        let corpus = gen_synthetic(&cfg, 3).unwrap();
        write_corpus(&dir, &corpus, &cfg).unwrap();
        let loaded = Dataset::load_dir(&dir).unwrap();
        let direct = Dataset::from_corpus(&corpus);
        assert_eq!(loaded.samples, direct.samples);
        assert_eq!(loaded.hierarchy, direct.hierarchy);
        assert_eq!(loaded.table.ids(), direct.table.ids());
        let back: SyntheticConfig = read_json(&dir.join(CORPUS_CONFIG_FILE)).unwrap();
        assert_eq!(back, cfg);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn align_rejects_missing_and_out_of_range() {
        let table = SemanticEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            crate::Tensor::zeros(&[2, 1]),
        )
        .unwrap();
        let sids = vec![("b".to_string(), SemanticId(vec![1])), ("a".to_string(), SemanticId(vec![0]))];
        assert_eq!(align_sids(&table, &sids, 2).unwrap(), vec![SemanticId(vec![0]), SemanticId(vec![1])]);
        assert!(align_sids(&table, &sids, 1).is_err());
        assert!(align_sids(&table, &sids[..1], 2).is_err());
    }
}
