//! Reverse classification accuracy.
//!
//! Every reference image is registered to the test image and its labels are
//! carried over and scored against the test segmentation. The best score over
//! the references is the predicted quality of that segmentation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::metrics::{full_metrics, ClassMetrics, Metric, MetricSet, Scope};
use crate::register::{com_align, ffd_register, warp_labels, RegParams};
use crate::volgrid::{Class, LabelMap, ReferenceSet, Volume};

/// An image with the segmentation under assessment and, optionally, the
/// ground truth used only for evaluation.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub id: String,
    pub image: Volume,
    pub seg: LabelMap,
    pub gt: Option<LabelMap>,
}

impl TestCase {
    pub fn new(id: impl Into<String>, image: Volume, seg: LabelMap, gt: Option<LabelMap>) -> Result<TestCase> {
        image.grid().ensure_same(seg.grid())?;
        if let Some(gt) = &gt {
            image.grid().ensure_same(gt.grid())?;
        }
        Ok(TestCase {
            id: id.into(),
            image,
            seg,
            gt,
        })
    }

    /// Metrics of the segmentation against its ground truth, if there is one.
    pub fn real_metrics(&self) -> Option<Result<MetricSet>> {
        self.gt.as_ref().map(|gt| full_metrics(&self.seg, gt))
    }
}

/// What happened when one reference was scored against the test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOutcome {
    pub index: usize,
    pub metrics: MetricSet,
    /// Set when registration failed and the metrics are sentinels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ReferenceOutcome {
    /// Worst-case score for every entry.
    pub fn sentinel(index: usize, reason: String) -> ReferenceOutcome {
        let mut metrics = MetricSet::default();
        for scope in Scope::ALL {
            metrics.insert(scope, ClassMetrics::WORST);
        }
        ReferenceOutcome {
            index,
            metrics,
            failure: Some(reason),
        }
    }
}

/// Index of the reference that produced each predicted value, keyed by
/// scope name and metric.
pub type Winners = BTreeMap<String, BTreeMap<Metric, usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcaPrediction {
    pub predicted: MetricSet,
    pub winner: Winners,
    pub per_reference: Vec<ReferenceOutcome>,
}

impl RcaPrediction {
    /// Reduces per-reference scores: max DSC and min distances, taken
    /// independently per scope and metric. Ties keep the lowest index.
    pub fn from_outcomes(per_reference: Vec<ReferenceOutcome>) -> Result<RcaPrediction> {
        if per_reference.is_empty() {
            return Err(QcError::NoReferences);
        }
        let (predicted, winner) = best_of(per_reference.iter().map(|o| (o.index, &o.metrics)));
        Ok(RcaPrediction {
            predicted,
            winner,
            per_reference,
        })
    }

    /// Reference that won the whole-heart DSC.
    pub fn wh_dsc_winner(&self) -> Option<usize> {
        self.winner.get(Scope::WholeHeart.name()).and_then(|w| w.get(&Metric::Dsc)).copied()
    }
}

/// Best value per scope and metric over `(index, metrics)` pairs.
pub fn best_of<'a>(sets: impl IntoIterator<Item = (usize, &'a MetricSet)>) -> (MetricSet, Winners) {
    let mut best: BTreeMap<Scope, (ClassMetrics, BTreeMap<Metric, usize>)> = BTreeMap::new();
    for (index, set) in sets {
        for scope in Scope::ALL {
            let Some(m) = set.get(scope) else { continue };
            match best.get_mut(&scope) {
                None => {
                    let w = Metric::ALL.iter().map(|&k| (k, index)).collect();
                    best.insert(scope, (*m, w));
                }
                Some((cur, w)) => {
                    for metric in Metric::ALL {
                        if metric.better(m.get(metric), cur.get(metric)) {
                            cur.set(metric, m.get(metric));
                            w.insert(metric, index);
                        }
                    }
                }
            }
        }
    }
    let mut predicted = MetricSet::default();
    let mut winners = Winners::new();
    for (scope, (m, w)) in best {
        predicted.insert(scope, m);
        winners.insert(scope.name().to_string(), w);
    }
    (predicted, winners)
}

/// Registers one reference to the test image and scores its warped labels
/// against the test segmentation.
pub fn score_reference(tc: &TestCase, index: usize, ref_image: &Volume, ref_labels: &LabelMap, params: &RegParams) -> Result<ReferenceOutcome> {
    let init = match com_align(ref_image, &tc.image) {
        Ok(t) => t,
        Err(QcError::EmptyMass) => return Ok(ReferenceOutcome::sentinel(index, "empty image".into())),
        Err(e) => return Err(e),
    };
    let field = match ffd_register(ref_image, &tc.image, init, params) {
        Ok(f) => f,
        Err(QcError::DivergedRegistration(why)) => {
            log::warn!("case {}: reference {index} diverged: {why}", tc.id);
            return Ok(ReferenceOutcome::sentinel(index, why));
        }
        Err(e) => return Err(e),
    };
    let warped = warp_labels(ref_labels, &field, tc.image.grid())?;
    Ok(ReferenceOutcome {
        index,
        metrics: full_metrics(&warped, &tc.seg)?,
        failure: None,
    })
}

/// Scores every reference, in parallel on the current rayon pool.
pub fn reference_scores(tc: &TestCase, refs: &ReferenceSet, params: &RegParams) -> Result<Vec<ReferenceOutcome>> {
    params.validate()?;
    if refs.is_empty() {
        return Err(QcError::NoReferences);
    }
    refs.entries()
        .par_iter()
        .enumerate()
        .map(|(n, (img, lab))| score_reference(tc, n, img, lab, params))
        .collect()
}

/// Predicted quality of `tc.seg` without looking at the ground truth.
pub fn predict_quality(tc: &TestCase, refs: &ReferenceSet, params: &RegParams) -> Result<RcaPrediction> {
    RcaPrediction::from_outcomes(reference_scores(tc, refs, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportReference {
    pub index: usize,
    /// Position in the whole-heart DSC ranking, 0 = best.
    pub rank: usize,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Per-case report written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcaReport {
    pub case_id: String,
    pub predicted: MetricSet,
    pub real: Option<MetricSet>,
    pub winner: Winners,
    pub references: Vec<ReportReference>,
}

/// Builds the report for one case, keeping `k` references spread evenly
/// over the whole-heart DSC ranking (best and worst included when `k >= 2`).
pub fn rca_report(pred: &RcaPrediction, tc: &TestCase, refs: &ReferenceSet, k: usize) -> Result<RcaReport> {
    if pred.per_reference.len() != refs.len() {
        return Err(QcError::LengthMismatch(pred.per_reference.len(), refs.len()));
    }
    let real = tc.real_metrics().transpose()?;
    let wh = |o: &ReferenceOutcome| o.metrics.value(Scope::WholeHeart, Metric::Dsc).unwrap_or(0.0);
    let mut ranked: Vec<&ReferenceOutcome> = pred.per_reference.iter().collect();
    ranked.sort_by(|a, b| wh(b).total_cmp(&wh(a)).then(a.index.cmp(&b.index)));
    let n = ranked.len();
    let k = k.min(n);
    let picks: Vec<usize> = match k {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..k).map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize).collect(),
    };
    let references = picks
        .into_iter()
        .map(|rank| ReportReference {
            index: ranked[rank].index,
            rank,
            metrics: ranked[rank].metrics.clone(),
            failure: ranked[rank].failure.clone(),
        })
        .collect();
    Ok(RcaReport {
        case_id: tc.id.clone(),
        predicted: pred.predicted.clone(),
        real,
        winner: pred.winner.clone(),
        references,
    })
}

/// Classes the segmentation under test contains.
pub fn present_classes(tc: &TestCase) -> Vec<Class> {
    Class::ALL.into_iter().filter(|c| tc.seg.contains(c.code())).collect()
}
