use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EmbeddingError;
use crate::tensor::Tensor;

/// The item embedding table `N × d`.
///
/// Values are held at `f32` precision (the on-disk width), so a save/load
/// round trip is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddingTable {
    ids: Vec<String>,
    vectors: Tensor,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n: usize,
    d: usize,
    ids: Vec<String>,
}

impl SemanticEmbeddingTable {
    /// Builds a table, rounding every value to `f32` precision.
    pub fn new(ids: Vec<String>, vectors: Tensor) -> Result<Self, EmbeddingError> {
        if vectors.shape().len() != 2 || vectors.shape()[0] != ids.len() {
            return Err(EmbeddingError::Config(format!(
                "{} ids for vectors of shape {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        let index = build_index(&ids).map_err(EmbeddingError::Config)?;
        let vectors = vectors.map(|v| v as f32 as f64);
        if !vectors.is_finite() {
            return Err(EmbeddingError::Config("embedding overflows f32".into()));
        }
        Ok(Self { ids, vectors, index })
    }

    pub fn n_items(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

fn build_index(ids: &[String]) -> Result<HashMap<String, usize>, String> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(format!("empty item id at row {i}"));
        }
        if index.insert(id.clone(), i).is_some() {
            return Err(format!("duplicate item id {id:?}"));
        }
    }
    Ok(index)
}

/// Sidecar manifest path for a binary table file: `table.bin` → `table.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes little-endian `f32` rows to `path` and the `{"n","d","ids"}`
/// manifest next to it.
pub fn save_table(table: &SemanticEmbeddingTable, path: &Path) -> Result<(), EmbeddingError> {
    let mut bytes = Vec::with_capacity(table.vectors.len() * 4);
    for v in table.vectors.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| EmbeddingError::io(path, e))?;
    let manifest = Manifest {
        n: table.n_items(),
        d: table.dim(),
        ids: table.ids.clone(),
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| EmbeddingError::io(&mpath, e))
}

pub fn load_table(path: &Path) -> Result<SemanticEmbeddingTable, EmbeddingError> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| EmbeddingError::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| EmbeddingError::format(&mpath, e.to_string()))?;
    if manifest.ids.len() != manifest.n {
        return Err(EmbeddingError::format(
            &mpath,
            format!("manifest lists {} ids but n = {}", manifest.ids.len(), manifest.n),
        ));
    }
    let bytes = fs::read(path).map_err(|e| EmbeddingError::io(path, e))?;
    let expected = manifest.n * manifest.d * 4;
    if bytes.len() != expected {
        return Err(EmbeddingError::format(
            path,
            format!(
                "expected {expected} bytes for n={} d={} f32 rows, found {}",
                manifest.n,
                manifest.d,
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(manifest.n * manifest.d);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(EmbeddingError::format(path, format!("non-finite value at float {}", data.len())));
        }
        data.push(v as f64);
    }
    build_index(&manifest.ids).map_err(|m| EmbeddingError::format(&mpath, m))?;
    let vectors = Tensor::new(vec![manifest.n, manifest.d], data).expect("checked length and finiteness");
    SemanticEmbeddingTable::new(manifest.ids, vectors)
}

/// One interaction record as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub seq: Vec<String>,
    pub target: String,
    pub label: u8,
}

/// An interaction with item ids resolved to table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedSample {
    pub seq: Vec<usize>,
    pub target: usize,
    pub label: f64,
}

impl InteractionSample {
    pub fn resolve(&self, table: &SemanticEmbeddingTable) -> Result<IndexedSample, EmbeddingError> {
        let lookup = |id: &String| table.position(id).ok_or_else(|| EmbeddingError::UnknownItem(id.clone()));
        Ok(IndexedSample {
            seq: self.seq.iter().map(lookup).collect::<Result<_, _>>()?,
            target: lookup(&self.target)?,
            label: f64::from(self.label),
        })
    }
}

/// Ground-truth cluster ids of one item at the three planted levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyLabel {
    pub item_id: String,
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EmbeddingError> {
    let file = fs::File::create(path).map_err(|e| EmbeddingError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("row serializes");
        w.write_all(b"\n").map_err(|e| EmbeddingError::io(path, e))?;
    }
    w.flush().map_err(|e| EmbeddingError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EmbeddingError> {
    let file = fs::File::open(path).map_err(|e| EmbeddingError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EmbeddingError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| EmbeddingError::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn save_samples(path: &Path, samples: &[InteractionSample]) -> Result<(), EmbeddingError> {
    write_jsonl(path, samples)
}

pub fn load_samples(path: &Path) -> Result<Vec<InteractionSample>, EmbeddingError> {
    let rows: Vec<InteractionSample> = read_jsonl(path)?;
    if let Some((i, s)) = rows.iter().enumerate().find(|(_, s)| s.label > 1) {
        return Err(EmbeddingError::format(path, format!("sample {i}: label {} not in {{0,1}}", s.label)));
    }
    Ok(rows)
}

pub fn save_hierarchy(path: &Path, labels: &[HierarchyLabel]) -> Result<(), EmbeddingError> {
    write_jsonl(path, labels)
}

pub fn load_hierarchy(path: &Path) -> Result<Vec<HierarchyLabel>, EmbeddingError> {
    let rows: Vec<HierarchyLabel> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.item_id.as_str()) {
            return Err(EmbeddingError::format(path, format!("duplicate item id {:?}", r.item_id)));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> SemanticEmbeddingTable {
        let v = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        SemanticEmbeddingTable::new(vec!["a".into(), "b".into(), "c".into()], v).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        let t = small_table();
        save_table(&t, &path).unwrap();
        let back = load_table(&path).unwrap();
        assert_eq!(back.ids(), t.ids());
        let bits = |t: &SemanticEmbeddingTable| t.vectors().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn truncated_binary_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        save_table(&small_table(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_table(&path).unwrap_err().to_string();
        assert!(err.contains("expected 48 bytes") && err.contains("found 45"), "{err}");
    }

    #[test]
    fn manifest_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        let v = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let t = SemanticEmbeddingTable::new(vec!["a".into(), "b".into()], v).unwrap();
        save_table(&t, &path).unwrap();
        fs::write(manifest_path(&path), r#"{"n":2,"d":4,"ids":["a","b"]}"#).unwrap();
        let err = load_table(&path).unwrap_err();
        assert!(matches!(err, EmbeddingError::Format { .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        save_table(&small_table(), &path).unwrap();
        fs::write(manifest_path(&path), r#"{"n":3,"d":4,"ids":["a","b","a"]}"#).unwrap();
        let err = load_table(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn samples_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.jsonl");
        let samples = vec![InteractionSample {
            seq: vec!["a".into(), "b".into()],
            target: "c".into(),
            label: 1,
        }];
        save_samples(&sp, &samples).unwrap();
        assert_eq!(load_samples(&sp).unwrap(), samples);
        let line = fs::read_to_string(&sp).unwrap();
        assert_eq!(line.trim(), r#"{"seq":["a","b"],"target":"c","label":1}"#);

        fs::write(&sp, r#"{"seq":["a"],"target":"c","label":2}"#).unwrap();
        assert!(load_samples(&sp).is_err());

        let hp = dir.path().join("h.jsonl");
        let labels = vec![HierarchyLabel {
            item_id: "a".into(),
            l1: 0,
            l2: 1,
            l3: 2,
        }];
        save_hierarchy(&hp, &labels).unwrap();
        assert_eq!(load_hierarchy(&hp).unwrap(), labels);
    }

    #[test]
    fn resolve_unknown_item() {
        let t = small_table();
        let s = InteractionSample {
            seq: vec!["a".into()],
            target: "zzz".into(),
            label: 0,
        };
        assert!(matches!(s.resolve(&t), Err(EmbeddingError::UnknownItem(_))));
    }
}
