//! Semantic IDs and their tab-separated export format:
//! one line per item, `item_id<TAB>c1,c2,...,cL`.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// An item's code index per quantization level, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(pub Vec<usize>);

impl SemanticId {
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn codes(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SidError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// `(item_id, SID)` pairs in catalog order.
pub type SidTable = Vec<(String, SemanticId)>;

pub fn format_sids(sids: &[(String, SemanticId)]) -> String {
    let mut out = String::new();
    for (id, sid) in sids {
        out.push_str(id);
        out.push('\t');
        out.push_str(&sid.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_sids(text: &str) -> Result<SidTable, SidError> {
    let mut out = Vec::new();
    let mut levels = None;
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SidError::Parse { line: n + 1, message };
        let (id, codes) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
        if id.is_empty() {
            return Err(err("empty item id".into()));
        }
        let codes = codes
            .split(',')
            .map(|c| c.trim().parse::<usize>().map_err(|e| err(format!("bad code {c:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        match levels {
            None => levels = Some(codes.len()),
            Some(l) if l != codes.len() => return Err(err(format!("expected {l} levels, found {}", codes.len()))),
            _ => {}
        }
        out.push((id.to_string(), SemanticId(codes)));
    }
    Ok(out)
}

pub fn write_sids(path: &Path, sids: &[(String, SemanticId)]) -> Result<(), SidError> {
    fs::write(path, format_sids(sids)).map_err(|source| SidError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_sids(path: &Path) -> Result<SidTable, SidError> {
    let text = fs::read_to_string(path).map_err(|source| SidError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_sids(&text)
}
