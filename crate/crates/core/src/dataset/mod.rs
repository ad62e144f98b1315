//! Reading generated datasets.
//!
//! Training code goes through [`weak`], whose manifest record has no field
//! for annotations beyond the clip-level label set; anything else on a
//! manifest line is discarded by the parser. Evaluation goes through
//! [`strong`].

pub mod strong;
pub mod weak;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::synthdata::{DatasetInfo, Split, DATASET_FILE, FRAME_RATE, MANIFEST_FILE};
use crate::tensorio;

pub fn load_info(dir: &Path) -> Result<DatasetInfo> {
    let path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Parses every manifest line as `T` and keeps those of `split`.
fn read_manifest<T: DeserializeOwned>(dir: &Path, split: Split, split_of: impl Fn(&T) -> Split) -> Result<Vec<T>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: T = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        if split_of(&rec) == split {
            out.push(rec);
        }
    }
    Ok(out)
}

fn load_spec(dir: &Path, rel: &str) -> Result<Spectrogram> {
    let t = tensorio::read_tensor(&dir.join(rel))?;
    Spectrogram::new(t, 1.0 / FRAME_RATE)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= classes) {
        Some(&index) => Err(Error::ClassOutOfRange { index, classes }),
        None => Ok(()),
    }
}
