//! Inference and scoring of evaluation splits.
//!
//! The `ci` variant predicts from the enhanced features: branch 1 runs
//! first, its clip scores become the soft class mask, and the single-pass
//! intervention produces the final frame and clip scores. The pool is only
//! read.

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::causal::{approx_backdoor, exact_backdoor, ContextPool};
use crate::dataset::strong::EvalClip;
use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::metrics::{self, ClipPrediction, ClipTruth, EvalResult, MetricsConfig};
use crate::model::Model;
use crate::trainer::{branch_one, Variant};

/// Frozen model plus pool, ready for inference.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub pool: Option<&'a ContextPool>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, pool: Option<&'a ContextPool>, variant: Variant) -> Result<Self> {
        match (variant, pool) {
            (Variant::Ci, None) => Err(Error::Config("ci evaluation needs a context pool".into())),
            (Variant::Ci, Some(_)) => Ok(Predictor { model, pool }),
            (Variant::Baseline, _) => Ok(Predictor { model, pool: None }),
        }
    }

    /// Branch-1 scores and final scores for one clip.
    pub fn predict_both(&self, spec: &Spectrogram) -> Result<(ClipPrediction, ClipPrediction)> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false);
        let (x, m1, s1) = branch_one(&mut tape, &self.model.config, &vars, spec)?;
        let first = ClipPrediction {
            clip_scores: tape.value(s1).data().to_vec(),
            frame_scores: tape.value(m1).clone(),
        };
        let Some(pool) = self.pool else {
            return Ok((first.clone(), first));
        };
        let (m2, s2) = approx_backdoor(
            &mut tape,
            x,
            pool,
            &first.clip_scores,
            vars.classifier,
            vars.projection,
            self.model.config.pooling,
        )?;
        let second = ClipPrediction {
            clip_scores: tape.value(s2).data().to_vec(),
            frame_scores: tape.value(m2).clone(),
        };
        Ok((first, second))
    }

    pub fn predict(&self, spec: &Spectrogram) -> Result<ClipPrediction> {
        Ok(self.predict_both(spec)?.1)
    }

    /// Clip scores of the single-pass and the stratified intervention for
    /// one clip, both masked by the branch-1 clip scores.
    pub fn backdoor_pair(&self, spec: &Spectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
        let pool = self
            .pool
            .ok_or_else(|| Error::Config("backdoor comparison needs a context pool".into()))?;
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false);
        let (x, _, s1) = branch_one(&mut tape, &self.model.config, &vars, spec)?;
        let mask = tape.value(s1).data().to_vec();
        let (_, s) = approx_backdoor(
            &mut tape,
            x,
            pool,
            &mask,
            vars.classifier,
            vars.projection,
            self.model.config.pooling,
        )?;
        let approx = tape.value(s).data().to_vec();
        let exact = exact_backdoor(
            &mut tape,
            x,
            pool,
            &mask,
            vars.classifier,
            vars.projection,
            self.model.config.pooling,
        )?;
        Ok((exact, approx))
    }

    /// Predictions for a split, in clip order.
    pub fn predict_all(&self, clips: &[EvalClip]) -> Result<Vec<ClipPrediction>> {
        clips.par_iter().map(|c| self.predict(&c.spec)).collect()
    }
}

/// Scores a split.
pub fn evaluate(
    predictor: &Predictor<'_>,
    clips: &[EvalClip],
    cfg: &MetricsConfig,
) -> Result<(EvalResult, Vec<ClipPrediction>)> {
    let preds = predictor.predict_all(clips)?;
    let truth: Vec<ClipTruth<'_>> = clips.iter().map(EvalClip::truth).collect();
    Ok((metrics::evaluate(&preds, &truth, cfg)?, preds))
}
