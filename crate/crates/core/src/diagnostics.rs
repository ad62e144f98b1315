//! Self-checks exposed through the command line: finite-difference checks
//! of the full training graph and the exact-versus-single-pass intervention
//! comparison.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::gradcheck::{check, FD_STEP};
use crate::autodiff::{Tape, Tensor, Var};
use crate::causal::{approx_backdoor, exact_backdoor, standardize_row, ContextPool, VARIANCE_FLOOR};
use crate::error::Result;
use crate::features::Spectrogram;
use crate::model::{ClassifierVars, Model, ModelConfig, ModelVars, ProjectionVars};
use crate::trainer::{branch_one, finish_branches};

/// Worst relative error per named parameter.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub rel_err: f64,
}

/// Tiny configuration for whole-graph checks: `c = 8`, `k = 3`, 16 frames.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        mel_bins: 8,
        classes: 3,
        channels: vec![4, 4, 8],
        ..ModelConfig::default()
    }
}

/// A model with random (non-zero) projection and a pool of standardized
/// random rows, so every part of the intervention is active.
pub fn random_frozen(cfg: ModelConfig, frames: usize, seed: u64) -> Result<(Model, ContextPool)> {
    let mut model = Model::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let normal = Normal::new(0.0, 0.3).expect("positive std");
    for v in model.projection.weight.data_mut() {
        *v = normal.sample(&mut rng);
    }
    for v in model.projection.bias.data_mut() {
        *v = normal.sample(&mut rng);
    }
    let k = model.config.classes;
    let mut q = Tensor::zeros([k, frames]);
    for j in 0..k {
        let row = &mut q.data_mut()[j * frames..(j + 1) * frames];
        row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        standardize_row(row, VARIANCE_FLOOR);
    }
    let pool = ContextPool::from_matrix(q, crate::causal::DEFAULT_UPDATE_RATE)?;
    Ok((model, pool))
}

/// Random log-mel-like input.
pub fn random_spectrogram(mel_bins: usize, frames: usize, rng: &mut impl Rng) -> Spectrogram {
    let data = (0..mel_bins * frames).map(|_| rng.gen_range(-6.0..0.0)).collect();
    Spectrogram::new(Tensor::new([mel_bins, frames], data).expect("shape"), 0.04)
        .expect("valid spectrogram")
}

/// Finite-difference check of the complete `ci` training loss (both
/// branches, pool update from branch 1, enhancement, shared classifier) with
/// respect to every parameter.
///
/// The pool is a constant of the graph: it is updated once from the
/// unperturbed branch-1 predictions and then held fixed while the loss is
/// differentiated.
pub fn end_to_end_gradcheck(seed: u64) -> Result<Vec<ParamCheck>> {
    let cfg = tiny_config();
    let frames = 16;
    let (model, mut pool) = random_frozen(cfg.clone(), frames, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let spec = random_spectrogram(cfg.mel_bins, frames, &mut rng);
    let labels = [0usize, 2];
    let mut target = Tensor::zeros([cfg.classes]);
    labels.iter().for_each(|&c| target.data_mut()[c] = 1.0);

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (_, m1, _) = branch_one(&mut tape, &cfg, &vars, &spec)?;
    pool.update(tape.value(m1), &labels)?;

    let named = model.named_params();
    let inputs: Vec<Tensor> = named
        .iter()
        .map(|(_, t)| (*t).clone().param())
        .collect();
    let results = check(&inputs, FD_STEP, |tape, v| {
        let vars = vars_from(v);
        let b1 = branch_one(tape, &cfg, &vars, &spec)?;
        Ok(finish_branches(tape, &cfg, &vars, b1, Some(&pool), target.data(), &target)?.loss)
    })?;
    Ok(results
        .into_iter()
        .map(|c| ParamCheck {
            name: named[c.input].0.clone(),
            rel_err: c.rel_err,
        })
        .collect())
}

fn vars_from(v: &[Var]) -> ModelVars {
    let blocks = (0..3).map(|i| (v[2 * i], v[2 * i + 1])).collect();
    ModelVars {
        blocks,
        classifier: ClassifierVars {
            weight: v[6],
            bias: v[7],
        },
        projection: ProjectionVars {
            weight: v[8],
            bias: v[9],
        },
    }
}

/// Deviation between the stratified and the single-pass intervention on one
/// clip.
#[derive(Clone, Debug, Serialize)]
pub struct DeviationRow {
    pub clip: usize,
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    /// Spearman correlation between the two class rankings.
    pub spearman: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleStudy {
    pub rows: Vec<DeviationRow>,
    /// Intervention head only (enhance, classify, aggregate), summed over
    /// clips: one pass versus `k` passes.
    pub single_pass_secs: f64,
    pub k_pass_secs: f64,
    /// Whole network including the backbone, one pass versus `k` passes.
    pub full_single_secs: f64,
    pub full_k_secs: f64,
}

impl OracleStudy {
    /// `k_pass / single_pass` for the intervention head.
    pub fn speedup(&self) -> f64 {
        self.k_pass_secs / self.single_pass_secs
    }

    pub fn full_speedup(&self) -> f64 {
        self.full_k_secs / self.full_single_secs
    }

    pub fn max_dev(&self) -> f64 {
        self.rows.iter().map(|r| r.max_abs_dev).fold(0.0, f64::max)
    }

    pub fn mean_dev(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|r| r.mean_abs_dev).sum::<f64>() / n
    }

    pub fn mean_spearman(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|r| r.spearman).sum::<f64>() / n
    }
}

/// Compares the two intervention paths on every spectrogram and times them.
/// The mask is the branch-1 clip scores, as at inference. Runs serially so
/// the timings are not skewed by scheduling.
pub fn backdoor_study(model: &Model, pool: &ContextPool, specs: &[Spectrogram]) -> Result<OracleStudy> {
    let mut study = OracleStudy {
        rows: Vec::with_capacity(specs.len()),
        single_pass_secs: 0.0,
        k_pass_secs: 0.0,
        full_single_secs: 0.0,
        full_k_secs: 0.0,
    };
    let cfg = &model.config;
    let k = cfg.classes;
    for (i, spec) in specs.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let t0 = Instant::now();
        let (x, _, s1) = branch_one(&mut tape, cfg, &vars, spec)?;
        let backbone = t0.elapsed().as_secs_f64();
        let mask = tape.value(s1).data().to_vec();

        let t0 = Instant::now();
        let (_, s) = approx_backdoor(&mut tape, x, pool, &mask, vars.classifier, vars.projection, cfg.pooling)?;
        let single = t0.elapsed().as_secs_f64();
        let approx = tape.value(s).data().to_vec();

        let t0 = Instant::now();
        let exact = exact_backdoor(&mut tape, x, pool, &mask, vars.classifier, vars.projection, cfg.pooling)?;
        let multi = t0.elapsed().as_secs_f64();

        // A literal k-pass oracle also recomputes the backbone per pass.
        let t0 = Instant::now();
        for _ in 0..k {
            let mut scratch = Tape::new();
            let v = model.bind(&mut scratch, false);
            branch_one(&mut scratch, cfg, &v, spec)?;
        }
        let backbones = t0.elapsed().as_secs_f64();

        study.single_pass_secs += single;
        study.k_pass_secs += multi;
        study.full_single_secs += backbone + single;
        study.full_k_secs += backbones + multi;

        let devs: Vec<f64> = exact.iter().zip(&approx).map(|(e, a)| (e - a).abs()).collect();
        study.rows.push(DeviationRow {
            clip: i,
            max_abs_dev: devs.iter().cloned().fold(0.0, f64::max),
            mean_abs_dev: devs.iter().sum::<f64>() / devs.len() as f64,
            spearman: spearman(&exact, &approx),
        });
    }
    Ok(study)
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&t| r[t] = avg);
        i = j + 1;
    }
    r
}

/// Spearman rank correlation. Two constant vectors count as perfectly
/// agreeing; one constant vector against a varying one gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    match (va > 0.0, vb > 0.0) {
        (true, true) => cov / (va * vb).sqrt(),
        (false, false) => 1.0,
        _ => 0.0,
    }
}
