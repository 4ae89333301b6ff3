//! Cross-validation protocol, metrics and experiment reports.
//!
//! Child is the positive class (label 1), adult the negative (label 0).
//! Folds split by session, and metrics are averaged over folds without
//! pooling confusion counts.

mod harness;
mod report;

pub use harness::{
    load_segments, BackboneKind, Backbones, ExperimentResult, ExperimentSpec, FoldRow, Harness, HarnessConfig, PeftKind, Segment,
    SegmentPrediction, TestSource, TrainSource,
};
pub use report::{reproduce, reproduction_specs, results_csv, ReproduceConfig, Reproduction, EXPERIMENTS, REPORT_FILES};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::rng::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles sessions by `seed` and deals them into `k` test folds of
/// `sessions_per_fold` each.
pub fn kfold_split(sessions: &[String], k: usize, sessions_per_fold: usize, seed: u64) -> Result<Vec<Fold>, EvalError> {
    if k == 0 || sessions_per_fold == 0 || k * sessions_per_fold != sessions.len() {
        return Err(EvalError::Indivisible { sessions: sessions.len(), k, per_fold: sessions_per_fold });
    }
    let mut ids = sessions.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != sessions.len() {
        return Err(EvalError::Spec("duplicate session ids".into()));
    }
    ids.shuffle(&mut rng(seed));
    Ok(ids
        .chunks(sessions_per_fold)
        .map(|test| {
            let mut test = test.to_vec();
            test.sort();
            let mut train: Vec<String> = ids.iter().filter(|s| !test.contains(s)).cloned().collect();
            train.sort();
            Fold { train, test }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub recall: f64,
    pub specificity: f64,
    /// Set when one class is missing from the labels; its F1 is taken as 0.
    pub missing_class: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let missing_class = c.tp + c.fn_ == 0 || c.tn + c.fp == 0;
        let f1_child = if c.tp + c.fn_ == 0 { 0.0 } else { f1(c.tp, c.fp, c.fn_) };
        let f1_adult = if c.tn + c.fp == 0 { 0.0 } else { f1(c.tn, c.fn_, c.fp) };
        Self {
            confusion: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            macro_f1: (f1_child + f1_adult) / 2.0,
            recall: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            missing_class,
        }
    }
}

pub fn compute_metrics(preds: &[u8], labels: &[u8]) -> Result<Metrics, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(EvalError::BadLabel(if p > 1 { p } else { y })),
        }
    }
    let m = Metrics::from_confusion(c);
    if m.missing_class {
        log::warn!("a class is absent from the evaluated labels; its F1 counts as 0");
    }
    Ok(m)
}

/// Unweighted means of the four headline metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub recall: f64,
    pub specificity: f64,
}

impl MeanMetrics {
    pub fn of(ms: &[Metrics]) -> Self {
        let n = ms.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: mean(|m| m.accuracy),
            macro_f1: mean(|m| m.macro_f1),
            recall: mean(|m| m.recall),
            specificity: mean(|m| m.specificity),
        }
    }
}

/// Stratified subset: within every `(session, label)` cell keep
/// `round(ratio · n)` items, at least one. Returns sorted indices into `items`.
pub fn subsample_train(items: &[(String, u8)], ratio: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EvalError::Spec(format!("train ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok((0..items.len()).collect());
    }
    let mut cells: BTreeMap<(&str, u8), Vec<usize>> = BTreeMap::new();
    for (i, (s, l)) in items.iter().enumerate() {
        cells.entry((s.as_str(), *l)).or_default().push(i);
    }
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (_, mut idx) in cells {
        idx.shuffle(&mut r);
        let keep = ((ratio * idx.len() as f64).round() as usize).max(1);
        out.extend_from_slice(&idx[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("session_{i:02}")).collect()
    }

    #[test]
    fn folds_partition_sessions() {
        let s = ids(10);
        let folds = kfold_split(&s, 5, 2, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort();
        assert_eq!(seen, s);
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 8);
            assert!(f.train.iter().all(|t| !f.test.contains(t)));
        }
        assert_eq!(folds, kfold_split(&s, 5, 2, 3).unwrap());
        assert!(matches!(kfold_split(&ids(9), 5, 2, 0), Err(EvalError::Indivisible { .. })));
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((m.accuracy, m.recall, m.specificity, m.macro_f1), (0.5, 0.5, 0.5, 0.5));
        let p = compute_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((p.accuracy, p.macro_f1, p.recall, p.specificity), (1.0, 1.0, 1.0, 1.0));
        let d = compute_metrics(&[0; 4], &[1, 1, 0, 0]).unwrap();
        assert_eq!((d.recall, d.specificity, d.accuracy), (0.0, 1.0, 0.5));
        let one = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        assert!(one.missing_class);
        assert_eq!(one.macro_f1, 0.5);
        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::Empty)));
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(matches!(compute_metrics(&[2], &[0]), Err(EvalError::BadLabel(2))));
    }

    #[test]
    fn metrics_match_naive_oracle() {
        let mut r = rng(17);
        for _ in 0..1000 {
            let n = r.random_range(1..60);
            let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
            let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
            let m = compute_metrics(&preds, &labels).unwrap();
            let count = |p: u8, y: u8| (0..n).filter(|&i| preds[i] == p && labels[i] == y).count();
            let (tp, fp, tn, fneg) = (count(1, 1), count(1, 0), count(0, 0), count(0, 1));
            assert_eq!(m.confusion, Confusion { tp, fp, tn, fn_: fneg });
            assert_eq!(m.confusion.total(), n);
            let (pos, neg) = ((tp + fneg) as f64, (tn + fp) as f64);
            if pos > 0.0 && neg > 0.0 {
                let f1c = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
                let f1a = 2.0 * tn as f64 / (2 * tn + fneg + fp) as f64;
                assert_eq!(m.macro_f1, (f1c + f1a) / 2.0);
                let ident = (m.recall * pos + m.specificity * neg) / (pos + neg);
                assert!((ident - m.accuracy).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fold_mean_is_arithmetic() {
        let a = compute_metrics(&[1, 0], &[1, 0]).unwrap();
        let b = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        let m = MeanMetrics::of(&[a, b]);
        assert_eq!(m.accuracy, (a.accuracy + b.accuracy) / 2.0);
        assert_eq!(m.recall, (a.recall + b.recall) / 2.0);
    }

    #[test]
    fn subsampling_is_stratified() {
        let items: Vec<(String, u8)> = (0..100).map(|i| (format!("s{}", i % 2), (i / 2 % 2) as u8)).collect();
        assert_eq!(subsample_train(&items, 1.0, 0).unwrap(), (0..100).collect::<Vec<_>>());
        let half = subsample_train(&items, 0.5, 1).unwrap();
        assert!((half.len() as i64 - 50).abs() <= 2);
        assert_eq!(half, subsample_train(&items, 0.5, 1).unwrap());
        let tiny = subsample_train(&items, 0.001, 1).unwrap();
        assert_eq!(tiny.len(), 4);
        assert!(subsample_train(&items, 0.0, 1).is_err());
        assert!(subsample_train(&items, 1.5, 1).is_err());
    }
}
