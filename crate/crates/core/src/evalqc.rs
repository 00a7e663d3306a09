//! Threshold classification of predicted and real quality, confusion
//! statistics, error and correlation summaries, and the reference-set-size
//! study.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::metrics::{Metric, MetricSet, Scope};
use crate::phantom::derive_seed;
use crate::rca::{best_of, reference_scores, ReferenceOutcome, TestCase};
use crate::register::RegParams;
use crate::volgrid::ReferenceSet;

pub const DEFAULT_DSC_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MSD_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QcLabel {
    Good,
    Poor,
}

/// Metrics a quality decision can be based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QcMetric {
    Dsc,
    Msd,
}

impl QcMetric {
    pub fn metric(self) -> Metric {
        match self {
            QcMetric::Dsc => Metric::Dsc,
            QcMetric::Msd => Metric::Msd,
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            QcMetric::Dsc => DEFAULT_DSC_THRESHOLD,
            QcMetric::Msd => DEFAULT_MSD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcDecision {
    pub label: QcLabel,
    pub metric_used: QcMetric,
    pub threshold: f64,
}

/// DSC is good when `value >= threshold`, MSD when `value <= threshold`.
/// Unbounded or NaN values are poor.
pub fn classify(value: f64, metric: QcMetric, threshold: f64) -> QcDecision {
    let good = match metric {
        QcMetric::Dsc => value >= threshold,
        QcMetric::Msd => value <= threshold,
    };
    QcDecision {
        label: if good { QcLabel::Good } else { QcLabel::Poor },
        metric_used: metric,
        threshold,
    }
}

/// Confusion counts with "good" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: QcLabel, real: QcLabel) {
        match (predicted, real) {
            (QcLabel::Good, QcLabel::Good) => self.tp += 1,
            (QcLabel::Good, QcLabel::Poor) => self.fp += 1,
            (QcLabel::Poor, QcLabel::Poor) => self.tn += 1,
            (QcLabel::Poor, QcLabel::Good) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Summary statistics for one scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric_used: QcMetric,
    pub threshold: f64,
    pub scope: String,
    /// Cases with the scope present in both prediction and truth.
    pub n_cases: usize,
    /// Cases skipped because the scope was absent.
    pub skipped_cases: usize,
    pub counts: Confusion,
    pub accuracy: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub mae: BTreeMap<Metric, Option<f64>>,
    pub pearson_r: BTreeMap<Metric, Option<f64>>,
    /// Pairs left out of MAE and r because a value was unbounded.
    pub excluded_pairs: BTreeMap<Metric, usize>,
}

/// Pearson correlation; `None` for fewer than two pairs or a constant input.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Compares predicted with real quality at one scope.
pub fn evaluate(preds: &[MetricSet], reals: &[MetricSet], metric: QcMetric, threshold: f64, scope: Scope) -> Result<EvalSummary> {
    if preds.len() != reals.len() {
        return Err(QcError::LengthMismatch(preds.len(), reals.len()));
    }
    let mut counts = Confusion::default();
    let mut skipped = 0;
    let mut pairs: BTreeMap<Metric, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut excluded: BTreeMap<Metric, usize> = Metric::ALL.iter().map(|&m| (m, 0)).collect();
    for (p, r) in preds.iter().zip(reals) {
        let (Some(p), Some(r)) = (p.get(scope), r.get(scope)) else {
            skipped += 1;
            continue;
        };
        let key = metric.metric();
        counts.add(classify(p.get(key), metric, threshold).label, classify(r.get(key), metric, threshold).label);
        for m in Metric::ALL {
            let (pv, rv) = (p.get(m), r.get(m));
            if pv.is_finite() && rv.is_finite() {
                let e = pairs.entry(m).or_default();
                e.0.push(pv);
                e.1.push(rv);
            } else {
                *excluded.get_mut(&m).unwrap() += 1;
            }
        }
    }
    let finite = pairs.get(&metric.metric()).map_or(0, |p| p.0.len());
    if finite < 2 {
        return Err(QcError::UndefinedCorrelation(format!(
            "{} finite {} pairs at scope {}",
            finite,
            metric.metric().name(),
            scope.name()
        )));
    }
    let mut mae = BTreeMap::new();
    let mut pearson_r = BTreeMap::new();
    for m in Metric::ALL {
        let (xs, ys) = pairs.get(&m).map(|(a, b)| (a.as_slice(), b.as_slice())).unwrap_or((&[], &[]));
        let err = (!xs.is_empty()).then(|| xs.iter().zip(ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / xs.len() as f64);
        mae.insert(m, err);
        pearson_r.insert(m, pearson(xs, ys));
    }
    Ok(EvalSummary {
        metric_used: metric,
        threshold,
        scope: scope.name().to_string(),
        n_cases: counts.total(),
        skipped_cases: skipped,
        counts,
        accuracy: counts.accuracy(),
        tpr: counts.tpr(),
        fpr: counts.fpr(),
        mae,
        pearson_r,
        excluded_pairs: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefsizeRow {
    pub size: usize,
    pub run: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefsizeStats {
    pub size: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefsizeTable {
    pub rows: Vec<RefsizeRow>,
    pub stats: Vec<RefsizeStats>,
}

/// Seeded subset of `size` reference indices out of `n`, sorted.
pub fn refsize_subset(n: usize, size: usize, run: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, size as u64, run as u64));
    let mut idx = sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Accuracy of whole-heart DSC classification against random reference
/// subsets. Every case must carry ground truth.
pub fn refsize_study(cases: &[TestCase], refs: &ReferenceSet, sizes: &[usize], runs: usize, seed: u64, params: &RegParams, dsc_threshold: f64) -> Result<RefsizeTable> {
    check_refsize_args(refs.len(), sizes, runs)?;
    let reals = cases
        .iter()
        .map(|c| {
            c.real_metrics()
                .unwrap_or_else(|| Err(QcError::InvalidParams(format!("case {} has no ground truth", c.id))))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = cases
        .par_iter()
        .map(|c| reference_scores(c, refs, params))
        .collect::<Result<Vec<_>>>()?;
    refsize_from_scores(&scores, &reals, refs.len(), sizes, runs, seed, dsc_threshold)
}

fn check_refsize_args(n: usize, sizes: &[usize], runs: usize) -> Result<()> {
    if runs < 1 {
        return Err(QcError::InvalidParams("runs must be >= 1".into()));
    }
    if let Some(s) = sizes.iter().find(|&&s| s < 1 || s > n) {
        return Err(QcError::InvalidParams(format!("subset size {s} outside 1..={n}")));
    }
    Ok(())
}

/// [`refsize_study`] on precomputed per-reference scores
/// (`scores[case][reference]`).
pub fn refsize_from_scores(scores: &[Vec<ReferenceOutcome>], reals: &[MetricSet], n_refs: usize, sizes: &[usize], runs: usize, seed: u64, dsc_threshold: f64) -> Result<RefsizeTable> {
    check_refsize_args(n_refs, sizes, runs)?;
    if scores.len() != reals.len() {
        return Err(QcError::LengthMismatch(scores.len(), reals.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.len() != n_refs) {
        return Err(QcError::LengthMismatch(s.len(), n_refs));
    }
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &size in sizes {
        let mut accs = Vec::with_capacity(runs);
        for run in 0..runs {
            let subset = refsize_subset(n_refs, size, run, seed);
            let mut counts = Confusion::default();
            for (case_scores, real) in scores.iter().zip(reals) {
                let (pred, _) = best_of(subset.iter().map(|&i| (i, &case_scores[i].metrics)));
                let (Some(p), Some(r)) = (pred.value(Scope::WholeHeart, Metric::Dsc), real.value(Scope::WholeHeart, Metric::Dsc)) else {
                    continue;
                };
                counts.add(
                    classify(p, QcMetric::Dsc, dsc_threshold).label,
                    classify(r, QcMetric::Dsc, dsc_threshold).label,
                );
            }
            let accuracy = counts.accuracy().unwrap_or(0.0);
            accs.push(accuracy);
            rows.push(RefsizeRow { size, run, accuracy });
        }
        stats.push(RefsizeStats {
            size,
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(RefsizeTable { rows, stats })
}
