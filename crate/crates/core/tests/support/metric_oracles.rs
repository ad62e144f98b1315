//! Exhaustive reference implementations of the metrics, written without
//! reusing any of the library's counting code.

use cised::metrics;
use cised::synthdata::StrongLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub classes: usize,
    pub frames: usize,
    pub preds: Vec<Vec<Vec<bool>>>,
    pub refs: Vec<Vec<StrongLabel>>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let classes = rng.gen_range(1..=3);
    let frames = rng.gen_range(1..=12);
    let clips = rng.gen_range(1..=4);
    let density = rng.gen_range(0.1..0.9);
    let preds = (0..clips)
        .map(|_| {
            (0..classes)
                .map(|_| (0..frames).map(|_| rng.gen_bool(density)).collect())
                .collect()
        })
        .collect();
    let refs = (0..clips)
        .map(|_| {
            (0..rng.gen_range(0..=3))
                .map(|_| {
                    let onset = rng.gen_range(0..frames);
                    StrongLabel {
                        class: rng.gen_range(0..classes),
                        onset,
                        offset: rng.gen_range(onset + 1..=frames),
                    }
                })
                .collect()
        })
        .collect();
    Instance {
        classes,
        frames,
        preds,
        refs,
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn ref_covers(refs: &[StrongLabel], class: usize, t: usize) -> bool {
    refs.iter().any(|r| r.class == class && r.onset <= t && t < r.offset)
}

pub fn segment_f1(inst: &Instance, seg: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, refs) in inst.preds.iter().zip(&inst.refs) {
        for c in 0..inst.classes {
            let mut start = 0;
            while start < inst.frames {
                let frames = start..(start + seg).min(inst.frames);
                let r = frames.clone().any(|t| ref_covers(refs, c, t));
                let p = frames.clone().any(|t| pred[c][t]);
                tp += (r && p) as usize;
                fp += (!r && p) as usize;
                fn_ += (r && !p) as usize;
                start += seg;
            }
        }
    }
    f1(tp, fp, fn_)
}

fn runs(row: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..row.len() {
        let starts = row[t] && (t == 0 || !row[t - 1]);
        if starts {
            let mut end = t;
            while end < row.len() && row[end] {
                end += 1;
            }
            out.push((t, end));
        }
    }
    out
}

/// Largest matching by exhaustive search over every assignment.
fn best_matching(pred: &[(usize, usize)], truth: &[(usize, usize)], collar: f64) -> usize {
    fn go(i: usize, pred: &[(usize, usize)], truth: &[(usize, usize)], used: &mut Vec<bool>, collar: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, truth, used, collar);
        for j in 0..truth.len() {
            let (on, off) = pred[i];
            let (ron, roff) = truth[j];
            let ok = (on as f64 - ron as f64).abs() <= collar
                && (off as f64 - roff as f64).abs() <= collar.max(0.2 * (roff - ron) as f64);
            if !used[j] && ok {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, truth, used, collar));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, truth, &mut vec![false; truth.len()], collar)
}

pub fn event_f1(inst: &Instance, collar: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, refs) in inst.preds.iter().zip(&inst.refs) {
        for c in 0..inst.classes {
            let p = runs(&pred[c]);
            let r: Vec<(usize, usize)> = refs
                .iter()
                .filter(|e| e.class == c)
                .map(|e| (e.onset, e.offset))
                .collect();
            let m = best_matching(&p, &r, collar as f64);
            tp += m;
            fp += p.len() - m;
            fn_ += r.len() - m;
        }
    }
    f1(tp, fp, fn_)
}

/// Precision at each positive's rank, where the rank counts every item
/// scored higher, plus tied items that come no later in input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let ahead: Vec<usize> = (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
            .collect();
        let hits = ahead.iter().filter(|&&j| labels[j]).count();
        total += hits as f64 / ahead.len() as f64;
    }
    Some(total / positives.len() as f64)
}

pub fn at_f1(scores: &[Vec<f64>], weak: &[Vec<usize>], theta: f64) -> f64 {
    let mut confusion = [[0usize; 2]; 2];
    for (s, w) in scores.iter().zip(weak) {
        for (c, &v) in s.iter().enumerate() {
            confusion[(v >= theta) as usize][w.contains(&c) as usize] += 1;
        }
    }
    f1(confusion[1][1], confusion[1][0], confusion[0][1])
}

/// Mismatch count of every metric against its oracle over `instances`
/// random tiny problems.
pub fn run(instances: usize, seed: u64) -> Vec<(&'static str, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = [0usize; 4];
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let pairs = || {
            inst.preds
                .iter()
                .map(Vec::as_slice)
                .zip(inst.refs.iter().map(Vec::as_slice))
        };

        let seg = metrics::segment_f1(pairs(), 4);
        bad[0] += ((seg - segment_f1(&inst, 4)).abs() > 1e-12) as usize;

        let ev = metrics::event_f1(pairs(), 0);
        bad[1] += ((ev - event_f1(&inst, 0)).abs() > 1e-12) as usize;

        let n = rng.gen_range(1..=10);
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..5u8)) / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let ap = metrics::average_precision(&scores, &labels);
        let oracle = average_precision(&scores, &labels);
        let agree = match (ap, oracle) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        bad[2] += (!agree) as usize;

        let clips = rng.gen_range(1..=4);
        let k = inst.classes;
        let clip_scores: Vec<Vec<f64>> = (0..clips)
            .map(|_| (0..k).map(|_| f64::from(rng.gen_range(0..5u8)) / 4.0).collect())
            .collect();
        let weak: Vec<Vec<usize>> = (0..clips)
            .map(|_| (0..k).filter(|_| rng.gen_bool(0.5)).collect())
            .collect();
        let theta = 0.5;
        let at = metrics::at_f1(&clip_scores, &weak, theta).unwrap();
        bad[3] += ((at - at_f1(&clip_scores, &weak, theta)).abs() > 1e-12) as usize;
    }
    vec![
        ("segment_f1", bad[0]),
        ("event_f1", bad[1]),
        ("average_precision", bad[2]),
        ("at_f1", bad[3]),
    ]
}
