//! Weakly supervised training with the dual-branch loss.
//!
//! Branch 1 classifies the backbone features directly. In the `ci` variant
//! its frame predictions then update the context pool for every class in the
//! clip's label set, and branch 2 classifies the enhanced features through
//! the same classifier. The loss is the sum of both branches' binary
//! cross-entropies against the clip labels. The `baseline` variant has no
//! second branch and doubles the branch-1 loss so loss curves stay on the
//! same scale.
//!
//! This module only ever sees clip-level labels (see
//! [`crate::dataset::weak`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::causal::{approx_backdoor, ContextPool, DEFAULT_UPDATE_RATE};
use crate::checkpoint::Checkpoint;
use crate::dataset::weak::WeakClip;
use crate::error::{Error, Result};
use crate::model::{
    aggregate_clip, backbone_forward, frame_scores, spectrogram_input, Model, ModelConfig,
    ModelVars,
};
use crate::synthdata::clip_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    #[default]
    Ci,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Baseline, Variant::Ci];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ci => "ci",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "ci" => Ok(Variant::Ci),
            _ => Err(Error::Config(format!("unknown variant {s:?} (baseline|ci)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Pool update rate.
    pub update_rate: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decision threshold for clip and frame scores.
    pub threshold: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ci,
            update_rate: DEFAULT_UPDATE_RATE,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.update_rate >= 0.0 && self.update_rate.is_finite()) {
            return bad(format!("update_rate must be >= 0, got {}", self.update_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub features: Var,
    pub frames1: Var,
    pub clip1: Var,
    pub frames2: Var,
    pub clip2: Var,
    pub loss1: Var,
    pub loss2: Var,
    pub loss: Var,
}

/// Backbone and branch 1 for one spectrogram: features, frame scores, clip
/// scores.
pub fn branch_one(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    spec: &crate::features::Spectrogram,
) -> Result<(Var, Var, Var)> {
    let input = spectrogram_input(tape, spec);
    let x = backbone_forward(tape, cfg, vars, input)?;
    let m = frame_scores(tape, x, vars.classifier)?;
    let s = aggregate_clip(tape, m, cfg.pooling)?;
    Ok((x, m, s))
}

/// Completes the graph after branch 1. With a pool, branch 2 enhances the
/// features using `mask` over the pool's class rows; without one, branch 2
/// is branch 1.
#[allow(clippy::too_many_arguments)]
pub fn finish_branches(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    (x, m1, s1): (Var, Var, Var),
    pool: Option<&ContextPool>,
    mask: &[f64],
    target: &Tensor,
) -> Result<Branches> {
    let l1 = tape.bce(s1, target)?;
    let (m2, s2, l2) = match pool {
        Some(pool) => {
            let (m2, s2) =
                approx_backdoor(tape, x, pool, mask, vars.classifier, vars.projection, cfg.pooling)?;
            (m2, s2, tape.bce(s2, target)?)
        }
        None => (m1, s1, l1),
    };
    let loss = tape.add(l1, l2)?;
    Ok(Branches {
        features: x,
        frames1: m1,
        clip1: s1,
        frames2: m2,
        clip2: s2,
        loss1: l1,
        loss2: l2,
        loss,
    })
}

/// First- and second-moment state for the adaptive optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Optimizer {
            kind,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let g = &grads[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(g) {
                        *w -= cfg.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

/// Loss components of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    /// Largest `|loss - (loss1 + loss2)|` seen on any clip of the batch.
    pub additivity_gap: f64,
    /// Tape leaves that carried gradient, per clip (model parameters only).
    pub trainable_leaves: usize,
}

/// Per-epoch summary passed to observers.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    /// Classes whose pool row was rewritten during the epoch.
    pub touched: Vec<usize>,
    pub pool_updates: u64,
}

/// Model, pool and optimizer of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub pool: Option<ContextPool>,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh run: parameters initialised from the config seed and, for the
    /// `ci` variant, a zero pool over `frames` frames.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, frames: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(model_cfg, cfg.seed)?;
        let pool = match cfg.variant {
            Variant::Ci => Some(ContextPool::new(model.config.classes, frames, cfg.update_rate)?),
            Variant::Baseline => None,
        };
        let optimizer = Optimizer::new(cfg.optimizer, &model);
        Ok(Trainer {
            config: cfg,
            model,
            pool,
            optimizer,
            epoch: 0,
        })
    }

    /// One optimizer step on `batch`. Gradients are averaged over clips.
    pub fn train_step(&mut self, batch: &[&WeakClip], batch_id: usize) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let k = self.model.config.classes;
        let mut sums: Vec<Vec<f64>> = self
            .model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        let mut stats = StepStats::default();
        for clip in batch {
            let target = clip.target(k);
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let b1 = branch_one(&mut tape, &self.model.config, &vars, &clip.spec)?;
            if let Some(pool) = self.pool.as_mut() {
                pool.update(tape.value(b1.1), &clip.labels)?;
            }
            let br = finish_branches(
                &mut tape,
                &self.model.config,
                &vars,
                b1,
                self.pool.as_ref(),
                target.data(),
                &target,
            )?;
            let (loss, l1, l2) = (
                tape.value(br.loss).item(),
                tape.value(br.loss1).item(),
                tape.value(br.loss2).item(),
            );
            if !loss.is_finite() {
                return Err(self.non_finite(batch_id));
            }
            stats.loss += loss;
            stats.loss1 += l1;
            stats.loss2 += l2;
            stats.additivity_gap = stats.additivity_gap.max((loss - (l1 + l2)).abs());
            stats.trainable_leaves = stats.trainable_leaves.max(tape.trainable_leaves());
            accumulate(&mut sums, &tape.backward(br.loss)?, &vars);
        }
        let scale = 1.0 / batch.len() as f64;
        sums.iter_mut().flatten().for_each(|g| *g *= scale);
        if sums.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.non_finite(batch_id));
        }
        self.optimizer.apply(&mut self.model, &sums, &self.config);
        stats.loss *= scale;
        stats.loss1 *= scale;
        stats.loss2 *= scale;
        Ok(stats)
    }

    fn non_finite(&self, batch: usize) -> Error {
        let norms = self
            .model
            .named_params()
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm()))
            .collect::<Vec<_>>()
            .join(", ");
        Error::NonFiniteLoss {
            epoch: self.epoch,
            batch,
            norms,
        }
    }

    /// Clip visiting order of `epoch`, fixed by the seed.
    pub fn epoch_order(&self, epoch: usize, clips: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..clips).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(self.config.seed, 0x0E90C4, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch over `clips`.
    pub fn run_epoch(&mut self, clips: &[WeakClip]) -> Result<EpochReport> {
        let order = self.epoch_order(self.epoch, clips.len());
        let before = self.pool.as_ref().map_or(0, ContextPool::updates);
        let mut touched = vec![false; self.model.config.classes];
        let (mut loss, mut loss1, mut loss2) = (0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&WeakClip> = idx.iter().map(|&i| &clips[i]).collect();
            for c in batch.iter().flat_map(|c| &c.labels) {
                touched[*c] = true;
            }
            let s = self.train_step(&batch, b)?;
            let w = idx.len() as f64;
            loss += s.loss * w;
            loss1 += s.loss1 * w;
            loss2 += s.loss2 * w;
        }
        self.epoch += 1;
        let n = clips.len().max(1) as f64;
        let touched = match self.pool {
            Some(_) => (0..touched.len()).filter(|&c| touched[c]).collect(),
            None => Vec::new(),
        };
        Ok(EpochReport {
            epoch: self.epoch,
            loss: loss / n,
            loss1: loss1 / n,
            loss2: loss2 / n,
            touched,
            pool_updates: self.pool.as_ref().map_or(0, ContextPool::updates) - before,
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `observe`
    /// after each one.
    pub fn fit(
        &mut self,
        clips: &[WeakClip],
        mut observe: impl FnMut(&EpochReport, &Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let report = self.run_epoch(clips)?;
            observe(&report, self)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::of_model(
            &self.model,
            self.pool.as_ref(),
            json!({
                "epoch": self.epoch,
                "optimizer_step": self.optimizer.step,
                "train": self.config,
            }),
        );
        let names: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            ck.tensors.push((format!("optim.m.{name}"), self.optimizer.m[i].clone()));
            ck.tensors.push((format!("optim.v.{name}"), self.optimizer.v[i].clone()));
        }
        ck
    }

    /// Restores a run saved by [`to_checkpoint`](Self::to_checkpoint).
    pub fn from_checkpoint(ck: &Checkpoint, model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ck.restore_model(model_cfg)?;
        let pool = ck.restore_pool(cfg.update_rate)?;
        if (cfg.variant == Variant::Ci) != pool.is_some() {
            return Err(Error::Config(format!(
                "checkpoint pool presence does not match variant {}",
                cfg.variant
            )));
        }
        let mut optimizer = Optimizer::new(cfg.optimizer, &model);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            for (slot, key) in [(&mut optimizer.m[i], "m"), (&mut optimizer.v[i], "v")] {
                let t = ck
                    .get(&format!("optim.{key}.{name}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for {name}")))?;
                *slot = t.clone();
            }
        }
        let meta_u64 = |key: &str| {
            ck.meta
                .get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Config(format!("checkpoint meta lacks {key}")))
        };
        optimizer.step = meta_u64("optimizer_step")?;
        Ok(Trainer {
            config: cfg,
            model,
            pool,
            optimizer,
            epoch: meta_u64("epoch")? as usize,
        })
    }
}

fn accumulate(sums: &mut [Vec<f64>], grads: &Gradients, vars: &ModelVars) {
    for (sum, var) in sums.iter_mut().zip(vars.all()) {
        let g = grads.get(var).expect("model parameters are trainable leaves");
        for (s, v) in sum.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
}
