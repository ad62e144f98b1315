//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conv2dSpec, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of checking one differentiable input.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares analytic gradients against central differences for every input
/// flagged `requires_grad`.
///
/// `build` must construct a scalar loss from the supplied leaves and be a
/// pure function of their values.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        if !inputs[idx].requires_grad() {
            continue;
        }
        let analytic = grads.get(*var).expect("parameter gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[idx].data()[j];
            let h = step * orig.abs().max(1.0);
            work[idx].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[idx].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(compare(idx, &analytic, &numeric));
    }
    Ok(out)
}

fn compare(input: usize, analytic: &[f64], numeric: &[f64]) -> InputCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    let rel_err = if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    };
    let max_abs_err = diff.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    InputCheck {
        input,
        rel_err,
        max_abs_err,
    }
}

/// Summary of one operator's gradient checks over several random instances.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }
}

/// Default finite-difference step for double precision.
pub const FD_STEP: f64 = 1e-6;

/// Runs every tape operator through `instances` random gradient checks.
pub fn operator_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    macro_rules! run {
        ($name:expr, $make:expr, $build:expr) => {{
            let mut worst = 0.0_f64;
            for _ in 0..instances {
                let inputs: Vec<Tensor> = $make(&mut rng);
                for c in check(&inputs, FD_STEP, $build)? {
                    worst = worst.max(c.rel_err);
                }
            }
            reports.push(OpReport {
                name: $name,
                instances,
                worst_rel_err: worst,
            });
        }};
    }

    run!(
        "matmul",
        |r: &mut ChaCha8Rng| {
            let (p, q, s) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            vec![rand_param(r, &[p, q]), rand_param(r, &[q, s]), rand_const(r, &[p, s])]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, v[2])
        }
    );
    run!(
        "conv1x1",
        |r: &mut ChaCha8Rng| {
            let (k, c, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..6));
            vec![
                rand_param(r, &[k, n]),
                rand_param(r, &[c, k]),
                rand_param(r, &[c]),
                rand_const(r, &[c, n]),
            ]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.conv1x1(v[0], v[1], v[2])?;
            project(t, y, v[3])
        }
    );
    run!(
        "sigmoid",
        |r: &mut ChaCha8Rng| {
            let n = r.gen_range(1..8);
            vec![rand_param(r, &[n]), rand_const(r, &[n])]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.sigmoid(v[0]);
            project(t, y, v[1])
        }
    );
    run!(
        "relu",
        |r: &mut ChaCha8Rng| {
            let n = r.gen_range(1..8);
            vec![away_from_zero(r, &[n]), rand_const(r, &[n])]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            project(t, y, v[1])
        }
    );
    run!(
        "add",
        |r: &mut ChaCha8Rng| {
            let s = [r.gen_range(1..4), r.gen_range(1..4)];
            vec![rand_param(r, &s), rand_param(r, &s), rand_const(r, &s)]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            project(t, y, v[2])
        }
    );
    run!(
        "mul",
        |r: &mut ChaCha8Rng| {
            let s = [r.gen_range(1..4), r.gen_range(1..4)];
            vec![rand_param(r, &s), rand_param(r, &s), rand_const(r, &s)]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, v[2])
        }
    );
    run!(
        "mean_axis",
        |r: &mut ChaCha8Rng| {
            let s = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5)];
            let axis = r.gen_range(0..3);
            let mut out_shape = s.to_vec();
            out_shape.remove(axis);
            vec![
                rand_param(r, &s),
                rand_const(r, &out_shape),
                Tensor::scalar(axis as f64),
            ]
        },
        |t: &mut Tape, v: &[Var]| {
            let axis = t.value(v[2]).item() as usize;
            let y = t.mean_axis(v[0], axis)?;
            project(t, y, v[1])
        }
    );
    run!(
        "pool_pairs",
        |r: &mut ChaCha8Rng| {
            let s = [r.gen_range(1..3), r.gen_range(1..6), r.gen_range(1..4)];
            let mut out_shape = s.to_vec();
            out_shape[1] = (s[1] / 2).max(1);
            vec![rand_param(r, &s), rand_const(r, &out_shape)]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.pool_pairs(v[0], 1)?;
            project(t, y, v[1])
        }
    );
    run!(
        "standardize",
        |r: &mut ChaCha8Rng| {
            let s = [r.gen_range(1..4), r.gen_range(2..7)];
            vec![rand_param(r, &s), rand_const(r, &s)]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.standardize(v[0], super::STANDARDIZE_EPS)?;
            project(t, y, v[1])
        }
    );
    run!(
        "standardize_frames",
        |r: &mut ChaCha8Rng| {
            // Groups of two standardize to +-1 and have a near-zero gradient.
            let s = [r.gen_range(1..3), r.gen_range(3..5), r.gen_range(1..5)];
            vec![rand_param(r, &s), rand_const(r, &s)]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.standardize_frames(v[0], super::STANDARDIZE_EPS)?;
            project(t, y, v[1])
        }
    );
    run!(
        "conv2d",
        |r: &mut ChaCha8Rng| {
            let (cin, cout) = (r.gen_range(1..3), r.gen_range(1..3));
            let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
            let (sh, sw) = (r.gen_range(1..3), r.gen_range(1..3));
            let ho = (h + 2 - 3) / sh + 1;
            let wo = (w + 2 - 3) / sw + 1;
            vec![
                rand_param(r, &[cin, h, w]),
                rand_param(r, &[cout, cin, 3, 3]),
                rand_param(r, &[cout]),
                rand_const(r, &[cout, ho, wo]),
                Tensor::vector(vec![sh as f64, sw as f64]),
            ]
        },
        |t: &mut Tape, v: &[Var]| {
            let st = t.value(v[4]).data().to_vec();
            let spec = Conv2dSpec {
                stride: (st[0] as usize, st[1] as usize),
                padding: (1, 1),
            };
            let y = t.conv2d(v[0], v[1], v[2], spec)?;
            project(t, y, v[3])
        }
    );
    run!(
        "linear_softmax",
        |r: &mut ChaCha8Rng| {
            let (k, n) = (r.gen_range(1..4), r.gen_range(1..6));
            let m = Tensor::new(
                vec![k, n],
                (0..k * n).map(|_| r.gen_range(0.05..0.95)).collect(),
            )
            .unwrap()
            .param();
            vec![m, rand_const(r, &[k])]
        },
        |t: &mut Tape, v: &[Var]| {
            let y = t.linear_softmax(v[0])?;
            project(t, y, v[1])
        }
    );
    run!(
        "bce",
        |r: &mut ChaCha8Rng| {
            let k = r.gen_range(1..7);
            let p = Tensor::vector((0..k).map(|_| r.gen_range(0.02..0.98)).collect()).param();
            let y = Tensor::vector((0..k).map(|_| f64::from(r.gen_bool(0.5) as u8)).collect());
            vec![p, y]
        },
        |t: &mut Tape, v: &[Var]| {
            let target = t.value(v[1]).clone();
            t.bce(v[0], &target)
        }
    );
    Ok(reports)
}

/// Reduces a tensor to a scalar through a fixed random projection so that
/// gradients do not cancel (as they would through a plain sum of a
/// standardized tensor).
fn project(t: &mut Tape, y: Var, weights: Var) -> Result<Var> {
    let p = t.mul(y, weights)?;
    Ok(t.sum(p))
}

fn rand_param(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_const(r, shape).param()
}

fn rand_const(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap().param()
}
