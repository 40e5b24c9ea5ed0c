//! File formats: tab-separated trial lists, keys, scores, duration tables and
//! enrollment manifests, plus little-endian binary containers for embeddings
//! and trained models.

mod binary;
mod text;

use std::path::Path;

pub use binary::{
    read_embeddings, read_plda, read_psvm, read_transform, write_embeddings, write_plda,
    write_psvm, write_transform,
};
pub use text::{
    format_score, parse_durations, parse_key, parse_manifest, parse_score_value, parse_trial_list,
    read_scores, write_durations, write_key, write_manifest, write_scores, write_trial_list,
};

use crate::error::{Error, Result};

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs a text parser over a file, attaching the path to any format error.
pub fn parse_file<T>(path: impl AsRef<Path>, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse(&text).map_err(|e| match e {
        Error::Format(f) => Error::Format(f.with_path(path)),
        other => other,
    })
}
