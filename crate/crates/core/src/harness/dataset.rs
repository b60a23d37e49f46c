//! Line-delimited JSON datasets.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{DatasetRecord, TqaExample};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: zero valid records ({diagnostics} malformed lines)")]
    NoValidRecords { path: String, diagnostics: usize },
}

/// A malformed input line that was skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub examples: Vec<TqaExample>,
    pub diagnostics: Vec<LineDiagnostic>,
}

/// Parse dataset text. Blank lines are ignored; malformed records and
/// repeated ids are reported and skipped.
pub fn parse_dataset<S: AsRef<str>>(text: &str, keywords: &[S]) -> LoadedDataset {
    let mut examples = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_example(keywords).map_err(|e| e.to_string()));
        match parsed {
            Ok(ex) if !seen.insert(ex.id().to_owned()) => diagnostics.push(LineDiagnostic {
                line: i + 1,
                message: format!("duplicate id {:?}", ex.id()),
            }),
            Ok(ex) => examples.push(ex),
            Err(message) => diagnostics.push(LineDiagnostic {
                line: i + 1,
                message,
            }),
        }
    }
    LoadedDataset {
        examples,
        diagnostics,
    }
}

pub fn load_dataset<S: AsRef<str>>(
    path: impl AsRef<Path>,
    keywords: &[S],
) -> Result<LoadedDataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let loaded = parse_dataset(&text, keywords);
    if loaded.examples.is_empty() {
        return Err(DatasetError::NoValidRecords {
            path: path.display().to_string(),
            diagnostics: loaded.diagnostics.len(),
        });
    }
    Ok(loaded)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[TqaExample]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for ex in examples {
        let line = serde_json::to_string(&DatasetRecord::from(ex)).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Examples whose questions do not depend on row or column order.
pub fn order_insensitive(examples: &[TqaExample]) -> Vec<TqaExample> {
    examples
        .iter()
        .filter(|e| !e.order_sensitive)
        .cloned()
        .collect()
}
