//! Tagging and detection metrics.
//!
//! Frame predictions are binarized by a threshold followed by a median
//! filter. Detection is scored at two granularities: fixed-length segments
//! and whole events matched within onset/offset collars. F1 scores are
//! micro-averaged over all (clip, class) decisions; mAP is a macro mean over
//! the classes that have at least one positive.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synthdata::StrongLabel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub threshold: f64,
    /// Odd median-filter width in frames.
    pub median_window: usize,
    pub segment_len: usize,
    /// Onset collar in frames.
    pub collar: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            threshold: 0.5,
            median_window: 5,
            segment_len: 25,
            collar: 5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        check_window(self.median_window)?;
        if self.segment_len == 0 {
            return Err(Error::Config("segment_len must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {theta} outside (0, 1)")));
    }
    Ok(())
}

fn check_window(win: usize) -> Result<()> {
    if win.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("median window {win} must be odd")));
    }
    Ok(())
}

/// True/false positive and false negative tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2tp / (2tp + fp + fn)`; 1.0 when there is nothing to find and
    /// nothing was predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Thresholds `m` (`[k, n]`) at `score >= theta` and median-filters every
/// row with an odd window, replicating edge frames.
pub fn binarize(m: &Tensor, theta: f64, win: usize) -> Result<Vec<Vec<bool>>> {
    check_threshold(theta)?;
    check_window(win)?;
    if m.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "binarize",
            msg: format!("expected [k, n], got {:?}", m.shape()),
        });
    }
    Ok((0..m.shape()[0])
        .map(|c| {
            let row: Vec<bool> = m.row(c).iter().map(|&v| v >= theta).collect();
            median_filter(&row, win)
        })
        .collect())
}

/// Binary median filter (majority vote) with edge replication.
pub fn median_filter(row: &[bool], win: usize) -> Vec<bool> {
    let n = row.len();
    let half = win / 2;
    (0..n)
        .map(|t| {
            let votes = (0..win)
                .filter(|&j| {
                    let idx = (t + j).saturating_sub(half).min(n - 1);
                    row[idx]
                })
                .count();
            votes > half
        })
        .collect()
}

/// Per-frame reference activity `[k][n]`.
pub fn reference_frames(refs: &[StrongLabel], classes: usize, frames: usize) -> Vec<Vec<bool>> {
    let mut out = vec![vec![false; frames]; classes];
    for r in refs {
        let end = r.offset.min(frames);
        out[r.class][r.onset.min(end)..end].iter_mut().for_each(|v| *v = true);
    }
    out
}

/// Segment-level counts for one clip.
pub fn segment_counts(pred: &[Vec<bool>], refs: &[StrongLabel], segment_len: usize) -> Counts {
    let k = pred.len();
    let n = pred.first().map_or(0, Vec::len);
    let segments = n.div_ceil(segment_len);
    let mut ref_active = vec![vec![false; segments]; k];
    for r in refs.iter().filter(|r| r.onset < r.offset.min(n)) {
        let last = (r.offset.min(n) - 1) / segment_len;
        for s in r.onset / segment_len..=last {
            ref_active[r.class][s] = true;
        }
    }
    let mut counts = Counts::default();
    for c in 0..k {
        for (s, &truth) in ref_active[c].iter().enumerate() {
            let lo = s * segment_len;
            let hi = (lo + segment_len).min(n);
            let hit = pred[c][lo..hi].iter().any(|&b| b);
            match (hit, truth) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

/// Micro-averaged segment F1 over clips.
pub fn segment_f1<'a>(
    clips: impl IntoIterator<Item = (&'a [Vec<bool>], &'a [StrongLabel])>,
    segment_len: usize,
) -> f64 {
    let mut total = Counts::default();
    for (pred, refs) in clips {
        total += segment_counts(pred, refs, segment_len);
    }
    total.f1()
}

/// Maximal runs of `true` as half-open `(onset, offset)` frame intervals.
pub fn decode_events(row: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &v) in row.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, row.len()));
    }
    out
}

/// Event-level counts for one clip, per class.
///
/// Predicted events are visited in onset order and each takes the first
/// unmatched reference of its class (in onset order) whose onset lies within
/// `collar` frames and whose offset lies within `max(collar, 0.2 * ref
/// duration)` frames.
pub fn event_counts_per_class(
    pred: &[Vec<bool>],
    refs: &[StrongLabel],
    collar: usize,
) -> Vec<Counts> {
    let collar = collar as f64;
    pred.iter()
        .enumerate()
        .map(|(c, row)| {
            let predicted = decode_events(row);
            let mut truth: Vec<(usize, usize)> = refs
                .iter()
                .filter(|r| r.class == c)
                .map(|r| (r.onset, r.offset))
                .collect();
            truth.sort_unstable();
            let mut used = vec![false; truth.len()];
            let mut tp = 0;
            for &(on, off) in &predicted {
                let hit = truth.iter().enumerate().position(|(j, &(ron, roff))| {
                    let tol = collar.max(0.2 * (roff - ron) as f64);
                    !used[j]
                        && (on as f64 - ron as f64).abs() <= collar
                        && (off as f64 - roff as f64).abs() <= tol
                });
                if let Some(j) = hit {
                    used[j] = true;
                    tp += 1;
                }
            }
            Counts {
                tp,
                fp: predicted.len() - tp,
                fn_: truth.len() - tp,
            }
        })
        .collect()
}

pub fn event_counts(pred: &[Vec<bool>], refs: &[StrongLabel], collar: usize) -> Counts {
    let mut total = Counts::default();
    for c in event_counts_per_class(pred, refs, collar) {
        total += c;
    }
    total
}

/// Micro-averaged event F1 over clips.
pub fn event_f1<'a>(
    clips: impl IntoIterator<Item = (&'a [Vec<bool>], &'a [StrongLabel])>,
    collar: usize,
) -> f64 {
    let mut total = Counts::default();
    for (pred, refs) in clips {
        total += event_counts(pred, refs, collar);
    }
    total.f1()
}

/// Average precision with step interpolation: the mean, over positives, of
/// the precision at each positive's rank. Scores are ranked in descending
/// order, ties kept in input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Macro mean of per-class AP over `columns` of `(scores, labels)`; classes
/// without positives are skipped and counted.
pub fn mean_average_precision(columns: &[(Vec<f64>, Vec<bool>)]) -> (Option<f64>, usize) {
    let aps: Vec<f64> = columns
        .iter()
        .filter_map(|(s, l)| average_precision(s, l))
        .collect();
    let excluded = columns.len() - aps.len();
    let mean = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    (mean, excluded)
}

/// Micro F1 over (clip, class) after thresholding clip scores at `theta`.
pub fn at_counts(clip_scores: &[Vec<f64>], weak: &[Vec<usize>], theta: f64) -> Counts {
    let mut counts = Counts::default();
    for (scores, labels) in clip_scores.iter().zip(weak) {
        for (c, &s) in scores.iter().enumerate() {
            match (s >= theta, labels.contains(&c)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

pub fn at_f1(clip_scores: &[Vec<f64>], weak: &[Vec<usize>], theta: f64) -> Result<f64> {
    check_threshold(theta)?;
    Ok(at_counts(clip_scores, weak, theta).f1())
}

/// Model output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    /// `[k]`
    pub clip_scores: Vec<f64>,
    /// `[k, n]`
    pub frame_scores: Tensor,
}

/// Annotations for one clip; `strong` is absent for weakly labelled data.
#[derive(Clone, Debug)]
pub struct ClipTruth<'a> {
    pub weak: &'a [usize],
    pub strong: Option<&'a [StrongLabel]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub at_f1: f64,
    pub at_map: Option<f64>,
    pub sed_map: Option<f64>,
    pub seg_f1: Option<f64>,
    pub event_f1: Option<f64>,
    /// Event F1 of each class on its own, when strong labels are present.
    pub class_event_f1: Vec<f64>,
    /// Classes left out of AT-mAP / SED-mAP for lack of positives.
    pub at_map_excluded: usize,
    pub sed_map_excluded: usize,
}

impl EvalResult {
    /// `(name, value)` pairs for every present metric, in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = vec![("at_f1".to_string(), self.at_f1)];
        let optional = [
            ("at_map", self.at_map),
            ("sed_map", self.sed_map),
            ("seg_f1", self.seg_f1),
            ("event_f1", self.event_f1),
        ];
        out.extend(optional.iter().filter_map(|(n, v)| v.map(|v| (n.to_string(), v))));
        out.extend(
            self.class_event_f1
                .iter()
                .enumerate()
                .map(|(c, &v)| (format!("event_f1_class{c}"), v)),
        );
        out
    }
}

/// Scores a whole split. Detection metrics are computed only if every clip
/// carries strong labels.
pub fn evaluate(
    preds: &[ClipPrediction],
    truth: &[ClipTruth<'_>],
    cfg: &MetricsConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    if preds.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} clips",
            preds.len(),
            truth.len()
        )));
    }
    let k = preds.first().map_or(0, |p| p.clip_scores.len());
    let clip_scores: Vec<Vec<f64>> = preds.iter().map(|p| p.clip_scores.clone()).collect();
    let weak: Vec<Vec<usize>> = truth.iter().map(|t| t.weak.to_vec()).collect();
    let at_f1 = at_f1(&clip_scores, &weak, cfg.threshold)?;
    let at_columns: Vec<(Vec<f64>, Vec<bool>)> = (0..k)
        .map(|c| {
            (
                clip_scores.iter().map(|s| s[c]).collect(),
                weak.iter().map(|w| w.contains(&c)).collect(),
            )
        })
        .collect();
    let (at_map, at_map_excluded) = mean_average_precision(&at_columns);

    let mut result = EvalResult {
        at_f1,
        at_map,
        sed_map: None,
        seg_f1: None,
        event_f1: None,
        class_event_f1: Vec::new(),
        at_map_excluded,
        sed_map_excluded: 0,
    };
    let Some(strong): Option<Vec<&[StrongLabel]>> = truth.iter().map(|t| t.strong).collect()
    else {
        return Ok(result);
    };

    let mut sed_columns = vec![(Vec::new(), Vec::new()); k];
    let mut seg = Counts::default();
    let mut events = vec![Counts::default(); k];
    for (p, refs) in preds.iter().zip(&strong) {
        let n = p.frame_scores.shape()[1];
        let active = reference_frames(refs, k, n);
        for (c, col) in sed_columns.iter_mut().enumerate() {
            col.0.extend_from_slice(p.frame_scores.row(c));
            col.1.extend_from_slice(&active[c]);
        }
        let binary = binarize(&p.frame_scores, cfg.threshold, cfg.median_window)?;
        seg += segment_counts(&binary, refs, cfg.segment_len);
        for (acc, c) in events
            .iter_mut()
            .zip(event_counts_per_class(&binary, refs, cfg.collar))
        {
            *acc += c;
        }
    }
    let (sed_map, sed_map_excluded) = mean_average_precision(&sed_columns);
    let mut ev_total = Counts::default();
    events.iter().for_each(|&c| ev_total += c);
    result.sed_map = sed_map;
    result.sed_map_excluded = sed_map_excluded;
    result.seg_f1 = Some(seg.f1());
    result.event_f1 = Some(ev_total.f1());
    result.class_event_f1 = events.iter().map(Counts::f1).collect();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(class: usize, onset: usize, offset: usize) -> StrongLabel {
        StrongLabel {
            class,
            onset,
            offset,
        }
    }

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn binarize_cases() {
        let ones = Tensor::full([2, 6], 1.0);
        assert!(binarize(&ones, 0.5, 5).unwrap().iter().flatten().all(|&b| b));
        let m = Tensor::new([1, 4], vec![0.9, 0.9, 0.1, 0.9]).unwrap();
        assert_eq!(binarize(&m, 0.5, 3).unwrap()[0], bits("1111"));
        let m = Tensor::new([1, 5], vec![0.1, 0.1, 0.9, 0.1, 0.1]).unwrap();
        assert_eq!(binarize(&m, 0.5, 3).unwrap()[0], bits("00000"));
        assert!(binarize(&m, 0.5, 4).is_err());
        assert!(binarize(&m, 1.0, 3).is_err());
    }

    #[test]
    fn decode_runs() {
        assert_eq!(decode_events(&bits("0110011")), vec![(1, 3), (5, 7)]);
        assert!(decode_events(&bits("000")).is_empty());
    }

    #[test]
    fn segment_f1_extremes() {
        let refs = [ev(0, 3, 9)];
        let exact = reference_frames(&refs, 2, 30);
        assert_eq!(segment_f1([(exact.as_slice(), &refs[..])], 10), 1.0);
        let empty = vec![vec![false; 30]; 2];
        assert_eq!(segment_f1([(empty.as_slice(), &refs[..])], 10), 0.0);
    }

    #[test]
    fn event_f1_extremes() {
        let refs = [ev(1, 10, 20)];
        let exact = reference_frames(&refs, 2, 40);
        assert_eq!(event_f1([(exact.as_slice(), &refs[..])], 5), 1.0);
        let shifted = reference_frames(&[ev(1, 16, 26)], 2, 40);
        assert_eq!(event_f1([(shifted.as_slice(), &refs[..])], 5), 0.0);
        // Onset and offset both four frames late: inside the collar.
        let near = reference_frames(&[ev(1, 14, 24)], 2, 40);
        assert_eq!(event_f1([(near.as_slice(), &refs[..])], 5), 1.0);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]),
            Some(1.0)
        );
        assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[false, true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
        let (m, excluded) = mean_average_precision(&[
            (vec![0.9, 0.1], vec![true, false]),
            (vec![0.9, 0.1], vec![false, false]),
        ]);
        assert_eq!((m, excluded), (Some(1.0), 1));
    }

    #[test]
    fn at_f1_cases() {
        let weak = vec![vec![0], vec![1, 2]];
        let perfect = vec![vec![0.9, 0.1, 0.2], vec![0.1, 0.8, 0.7]];
        assert_eq!(at_f1(&perfect, &weak, 0.5).unwrap(), 1.0);
        let none = vec![vec![0.1; 3]; 2];
        assert_eq!(at_f1(&none, &weak, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let refs = vec![ev(0, 5, 30), ev(2, 40, 70)];
        let act = reference_frames(&refs, 3, 100);
        let frame = Tensor::new(
            [3, 100],
            act.iter().flatten().map(|&b| if b { 0.9 } else { 0.1 }).collect(),
        )
        .unwrap();
        let preds = vec![ClipPrediction {
            clip_scores: vec![0.9, 0.1, 0.9],
            frame_scores: frame,
        }];
        let truth = vec![ClipTruth {
            weak: &[0, 2],
            strong: Some(&refs),
        }];
        let r = evaluate(&preds, &truth, &MetricsConfig::default()).unwrap();
        assert_eq!(r.at_f1, 1.0);
        assert_eq!(r.seg_f1, Some(1.0));
        assert_eq!(r.event_f1, Some(1.0));
        assert_eq!(r.sed_map, Some(1.0));
        assert_eq!(r.sed_map_excluded, 1);
        assert_eq!(r.class_event_f1, vec![1.0, 1.0, 1.0]);

        let weak_only = vec![ClipTruth {
            weak: &[0, 2],
            strong: None,
        }];
        let r = evaluate(&preds, &weak_only, &MetricsConfig::default()).unwrap();
        assert!(r.seg_f1.is_none() && r.event_f1.is_none() && r.sed_map.is_none());
        assert_eq!(r.rows().len(), 2);
    }
}
