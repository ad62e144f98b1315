//! Causal intervention on frame features.
//!
//! Clip-level labels are confounded by context: classes that habitually
//! co-occur, and background textures tied to particular classes, leak into
//! each other's frame features. Intervening on the features, `P(Y | do(X))`,
//! removes the edge from context to features. Backdoor adjustment estimates
//! it by stratifying the context into one stratum per class and averaging the
//! predictions obtained under each stratum with its prior:
//!
//! ```text
//! P(Y | do(X)) = sum_i P(Y | X = x, M = f(x, c_i)) P(c_i),   P(c_i) = 1/k
//! ```
//!
//! [`exact_backdoor`] runs that sum literally, one forward pass per stratum.
//! [`approx_backdoor`] moves the weighted sum inside the network so a single
//! pass suffices: the features are enhanced once with the prior-weighted
//! combination of all strata and classified.
//!
//! The strata live in a [`ContextPool`], a `[k, n]` matrix whose row `j`
//! accumulates the frame predictions of class `j` over every training clip
//! labelled with `j`, re-standardized after each addition. Enhancement
//! projects the selected rows to per-channel gains with a 1x1 convolution and
//! applies them multiplicatively: `xe = x + x * conv1x1(diag(mask) q)`.

use log::warn;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{aggregate_clip, frame_scores, ClassifierVars, Pooling, ProjectionVars};

/// Default pool update rate.
pub const DEFAULT_UPDATE_RATE: f64 = 0.01;

/// Rows whose variance falls at or below this floor standardize to zeros.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Per-class context memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPool {
    q: Tensor,
    rate: f64,
    variance_floor: f64,
    priors: Vec<f64>,
    updates: u64,
    row_updates: u64,
    degenerate: u64,
}

impl ContextPool {
    /// Zero-initialised pool of `classes` rows over `frames` frames.
    pub fn new(classes: usize, frames: usize, rate: f64) -> Result<Self> {
        if classes == 0 || frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "pool needs positive extents, got {classes}x{frames}"
            )));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("update rate {rate} must be >= 0")));
        }
        Ok(ContextPool {
            q: Tensor::zeros([classes, frames]),
            rate,
            variance_floor: VARIANCE_FLOOR,
            priors: vec![1.0 / classes as f64; classes],
            updates: 0,
            row_updates: 0,
            degenerate: 0,
        })
    }

    /// Restores a pool from a stored `[k, n]` matrix.
    pub fn from_matrix(q: Tensor, rate: f64) -> Result<Self> {
        if q.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "context pool",
                msg: format!("expected [k, n], got {:?}", q.shape()),
            });
        }
        let mut pool = Self::new(q.shape()[0], q.shape()[1], rate)?;
        pool.q = q;
        Ok(pool)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.q
    }

    pub fn classes(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Number of [`update`](Self::update) calls so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Number of rows rewritten so far (one per present class per update).
    pub fn row_updates(&self) -> u64 {
        self.row_updates
    }

    /// Number of updates that hit a constant row.
    pub fn degenerate_updates(&self) -> u64 {
        self.degenerate
    }

    /// `q_j <- standardize(q_j + rate * m_j)` for every class `j` in
    /// `present`; other rows are untouched. Frame predictions of a different
    /// length are resampled to the pool length first.
    pub fn update(&mut self, m: &Tensor, present: &[usize]) -> Result<()> {
        let k = self.classes();
        if m.shape().len() != 2 || m.shape()[0] != k || m.shape()[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "pool update",
                left: m.shape().to_vec(),
                right: self.q.shape().to_vec(),
            });
        }
        if let Some(&bad) = present.iter().find(|&&j| j >= k) {
            return Err(Error::ClassOutOfRange {
                index: bad,
                classes: k,
            });
        }
        let n = self.frames();
        let m = resample_rows(m, n);
        let mut seen = vec![false; k];
        for &j in present {
            if std::mem::replace(&mut seen[j], true) {
                continue;
            }
            let row = &mut self.q.data_mut()[j * n..(j + 1) * n];
            for (q, &v) in row.iter_mut().zip(m.row(j)) {
                *q += self.rate * v;
            }
            if !standardize_row(row, self.variance_floor) {
                self.degenerate += 1;
                warn!("context pool row {j} is constant after update; reset to zeros");
            }
            self.row_updates += 1;
        }
        self.updates += 1;
        Ok(())
    }

    /// The pool resampled to `frames` frames, rows scaled by `mask`.
    pub fn masked(&self, mask: &[f64], frames: usize) -> Result<Tensor> {
        if mask.len() != self.classes() {
            return Err(Error::ShapeMismatch {
                op: "pool mask",
                left: vec![mask.len()],
                right: vec![self.classes()],
            });
        }
        let mut q = resample_rows(&self.q, frames);
        for (j, &w) in mask.iter().enumerate() {
            q.data_mut()[j * frames..(j + 1) * frames]
                .iter_mut()
                .for_each(|v| *v *= w);
        }
        Ok(q)
    }
}

/// In-place `(x - mean) / sqrt(var)`. Returns `false` and zeroes the row when
/// its variance is at or below `floor`.
pub fn standardize_row(row: &mut [f64], floor: f64) -> bool {
    let (mean, var) = crate::autodiff::mean_var(row);
    if var <= floor {
        row.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let inv = 1.0 / var.sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    true
}

/// Nearest-neighbour resampling of every row of `[k, n]` to `frames` frames.
pub fn resample_rows(m: &Tensor, frames: usize) -> Tensor {
    let (k, n) = (m.shape()[0], m.shape()[1]);
    if n == frames {
        return m.clone();
    }
    let mut out = vec![0.0; k * frames];
    for t in 0..frames {
        let src = (((t as f64 + 0.5) * n as f64 / frames as f64) as usize).min(n - 1);
        for j in 0..k {
            out[j * frames + t] = m.data()[j * n + src];
        }
    }
    Tensor::new(vec![k, frames], out).expect("shape matches")
}

/// `xe = x + x * conv1x1(diag(mask) q, proj_w, proj_b)`.
///
/// The pool enters as a constant: it never receives gradient. `mask` selects
/// which class rows contribute.
pub fn enhance(
    tape: &mut Tape,
    x: Var,
    pool: &ContextPool,
    mask: &[f64],
    proj: ProjectionVars,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "enhance",
            msg: format!("expected features [c, n], got {shape:?}"),
        });
    }
    let q = pool.masked(mask, shape[1])?;
    let q = tape.constant(q);
    let gain = tape.conv1x1(q, proj.weight, proj.bias)?;
    let modulated = tape.mul(x, gain)?;
    tape.add(x, modulated)
}

/// Single-pass intervention: enhance once with the prior-weighted mask
/// (`mask / k`), then classify and aggregate. Returns frame scores `[k, n]`
/// and clip scores `[k]`.
pub fn approx_backdoor(
    tape: &mut Tape,
    x: Var,
    pool: &ContextPool,
    mask: &[f64],
    clf: ClassifierVars,
    proj: ProjectionVars,
    pooling: Pooling,
) -> Result<(Var, Var)> {
    let weighted: Vec<f64> = mask
        .iter()
        .zip(pool.priors())
        .map(|(m, p)| m * p)
        .collect();
    let xe = enhance(tape, x, pool, &weighted, proj)?;
    let m = frame_scores(tape, xe, clf)?;
    let s = aggregate_clip(tape, m, pooling)?;
    Ok((m, s))
}

/// Stratified intervention: one pass per class `i` with only that stratum
/// active (mask `mask_i * e_i`), classified separately; the clip scores are
/// averaged under the uniform prior. Used as a reference, never in training.
pub fn exact_backdoor(
    tape: &mut Tape,
    x: Var,
    pool: &ContextPool,
    mask: &[f64],
    clf: ClassifierVars,
    proj: ProjectionVars,
    pooling: Pooling,
) -> Result<Vec<f64>> {
    let k = pool.classes();
    if mask.len() != k {
        return Err(Error::ShapeMismatch {
            op: "exact_backdoor mask",
            left: vec![mask.len()],
            right: vec![k],
        });
    }
    let mut total = vec![0.0; k];
    for (i, prior) in pool.priors().iter().enumerate() {
        let mut single = vec![0.0; k];
        single[i] = mask[i];
        let xe = enhance(tape, x, pool, &single, proj)?;
        let m = frame_scores(tape, xe, clf)?;
        let s = aggregate_clip(tape, m, pooling)?;
        for (t, v) in total.iter_mut().zip(tape.value(s).data()) {
            *t += prior * v;
        }
    }
    Ok(total)
}
