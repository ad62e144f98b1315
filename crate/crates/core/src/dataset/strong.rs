//! Evaluation-side view of a dataset, with frame-accurate annotations.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use super::{check_labels, load_info, load_spec, read_manifest};
use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::metrics::ClipTruth;
use crate::synthdata::{Split, StrongLabel};

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct EvalRecord {
    pub path: String,
    pub split: Split,
    pub weak: Vec<usize>,
    #[serde(default)]
    pub strong: Option<Vec<StrongLabel>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalClip {
    pub path: String,
    pub spec: Spectrogram,
    pub weak: Vec<usize>,
    pub strong: Option<Vec<StrongLabel>>,
}

impl EvalClip {
    pub fn truth(&self) -> ClipTruth<'_> {
        ClipTruth {
            weak: &self.weak,
            strong: self.strong.as_deref(),
        }
    }
}

/// Loads an evaluation split.
pub fn load_eval(dir: &Path, split: Split) -> Result<Vec<EvalClip>> {
    if split == Split::Train {
        return Err(Error::InvalidArgument("the training split has no evaluation view".into()));
    }
    let classes = load_info(dir)?.generator.classes;
    let records: Vec<EvalRecord> = read_manifest(dir, split, |r: &EvalRecord| r.split)?;
    records
        .into_par_iter()
        .map(|r| {
            check_labels(&r.weak, classes)?;
            if let Some(s) = &r.strong {
                check_labels(&s.iter().map(|e| e.class).collect::<Vec<_>>(), classes)?;
            }
            Ok(EvalClip {
                spec: load_spec(dir, &r.path)?,
                path: r.path,
                weak: r.weak,
                strong: r.strong,
            })
        })
        .collect()
}
