//! Training-side view of a dataset: spectrograms and clip-level labels.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use super::{check_labels, load_info, load_spec, read_manifest};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::features::Spectrogram;
use crate::synthdata::Split;

/// Manifest line as seen by training. Unknown fields are ignored.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct WeakRecord {
    pub path: String,
    pub split: Split,
    pub weak: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakClip {
    pub spec: Spectrogram,
    pub labels: Vec<usize>,
}

impl WeakClip {
    /// Multi-hot target `s*` over `classes`.
    pub fn target(&self, classes: usize) -> Tensor {
        let mut t = Tensor::zeros([classes]);
        for &c in &self.labels {
            t.data_mut()[c] = 1.0;
        }
        t
    }
}

pub fn load_records(dir: &Path) -> Result<Vec<WeakRecord>> {
    read_manifest(dir, Split::Train, |r: &WeakRecord| r.split)
}

/// Loads the training split.
pub fn load_train(dir: &Path) -> Result<Vec<WeakClip>> {
    let classes = load_info(dir)?.generator.classes;
    let records = load_records(dir)?;
    records
        .par_iter()
        .map(|r| {
            check_labels(&r.weak, classes)?;
            Ok(WeakClip {
                spec: load_spec(dir, &r.path)?,
                labels: r.weak.clone(),
            })
        })
        .collect()
}
