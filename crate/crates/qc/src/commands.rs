//! The `run`, `eval`, `phantom` and `refsize` commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info};
use rayon::prelude::*;
use rcaqc::evalqc::{classify, evaluate, refsize_study, QcLabel, QcMetric};
use rcaqc::metrics::{unbounded, Metric, MetricSet, Scope};
use rcaqc::phantom::make_battery_with;
use rcaqc::rca::{predict_quality, rca_report, RcaReport, TestCase};
use rcaqc::volgrid::{save_label_map, save_volume, ReferenceSet};
use serde::Serialize;
use serde_json::json;

use crate::config::{read_labels, read_manifest, read_volume, CaseEntry, ConfigError, ReferenceEntry, RunConfig};

/// Every case produced output.
pub const EXIT_OK: i32 = 0;
/// Invalid configuration or inputs; nothing was processed.
pub const EXIT_CONFIG: i32 = 1;
/// At least one case failed; the others were still written.
pub const EXIT_CASE_ERROR: i32 = 2;

fn pool(workers: usize) -> Result<rayon::ThreadPool, ConfigError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ConfigError(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

fn load_references(cfg: &RunConfig) -> Result<ReferenceSet, ConfigError> {
    let (entries, base) = read_manifest::<ReferenceEntry>(cfg.references_path()?)?;
    let pairs = entries
        .iter()
        .map(|e| {
            let img = read_volume(&base.join(&e.image)).map_err(|err| ConfigError(format!("reference {}: {err}", e.id)))?;
            let lab = read_labels(&base.join(&e.labels)).map_err(|err| ConfigError(format!("reference {}: {err}", e.id)))?;
            Ok((img, lab))
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    Ok(ReferenceSet::new(pairs)?)
}

fn load_case_entries(cfg: &RunConfig, need_gt: bool) -> Result<(Vec<CaseEntry>, PathBuf), ConfigError> {
    let (mut entries, base) = read_manifest::<CaseEntry>(cfg.cases_path()?)?;
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(ConfigError(format!("duplicate case id {:?}", e.id)));
        }
        if e.id.is_empty() || e.id.contains(['/', '\\']) || e.id == "." || e.id == ".." {
            return Err(ConfigError(format!("case id {:?} is not a plain file name", e.id)));
        }
        if need_gt && e.gt.is_none() {
            return Err(ConfigError(format!("case {} has no ground truth", e.id)));
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((entries, base))
}

fn load_case(e: &CaseEntry, base: &Path, with_gt: bool) -> rcaqc::Result<TestCase> {
    let image = read_volume(&base.join(&e.image))?;
    let seg = read_labels(&base.join(&e.seg))?;
    let gt = match (&e.gt, with_gt) {
        (Some(p), true) => Some(read_labels(&base.join(p))?),
        _ => None,
    };
    TestCase::new(e.id.clone(), image, seg, gt)
}

struct CaseResult {
    id: String,
    report: Result<RcaReport, String>,
    seconds: f64,
}

fn process_cases(cfg: &RunConfig, entries: &[CaseEntry], base: &Path, refs: &ReferenceSet, with_gt: bool) -> Result<Vec<CaseResult>, ConfigError> {
    let pool = pool(cfg.workers)?;
    let results = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let start = Instant::now();
                let report = load_case(e, base, with_gt).and_then(|tc| {
                    let pred = predict_quality(&tc, refs, &cfg.registration)?;
                    rca_report(&pred, &tc, refs, cfg.report_references)
                });
                let seconds = start.elapsed().as_secs_f64();
                match &report {
                    Ok(_) => info!("case {} done in {seconds:.1} s", e.id),
                    Err(err) => error!("case {} failed: {err}", e.id),
                }
                CaseResult {
                    id: e.id.clone(),
                    report: report.map_err(|err| err.to_string()),
                    seconds,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(results)
}

fn metric_columns(prefix: &str) -> Vec<String> {
    Scope::ALL
        .iter()
        .flat_map(|s| Metric::ALL.iter().map(move |m| format!("{prefix}_{}_{}", s.name(), m.name())))
        .collect()
}

fn metric_cells(set: Option<&MetricSet>) -> Vec<String> {
    Scope::ALL
        .iter()
        .flat_map(|&s| {
            Metric::ALL
                .iter()
                .map(move |&m| set.and_then(|x| x.value(s, m)).map(unbounded::format).unwrap_or_default())
        })
        .collect()
}

fn decision_cells(set: Option<&MetricSet>, cfg: &RunConfig) -> [String; 2] {
    let label = |metric: QcMetric, t: f64| {
        set.and_then(|x| x.value(Scope::WholeHeart, metric.metric()))
            .map(|v| match classify(v, metric, t).label {
                QcLabel::Good => "good".to_string(),
                QcLabel::Poor => "poor".to_string(),
            })
            .unwrap_or_default()
    };
    [label(QcMetric::Dsc, cfg.thresholds.dsc), label(QcMetric::Msd, cfg.thresholds.msd_mm)]
}

/// Writes reports, `predictions.csv` and `timings.csv`. Returns whether any
/// case failed.
fn write_outputs(cfg: &RunConfig, results: &[CaseResult], with_real: bool) -> Result<bool, ConfigError> {
    let reports_dir = cfg.output_dir.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let mut csv = csv::Writer::from_path(cfg.output_dir.join("predictions.csv"))?;
    let mut header = vec!["case_id".to_string(), "status".to_string()];
    header.extend(metric_columns("pred"));
    header.extend(["pred_dsc_decision".into(), "pred_msd_decision".into()]);
    if with_real {
        header.extend(metric_columns("real"));
        header.extend(["real_dsc_decision".into(), "real_msd_decision".into()]);
    }
    header.push("error".into());
    csv.write_record(&header)?;
    let mut timings = csv::Writer::from_path(cfg.output_dir.join("timings.csv"))?;
    timings.write_record(["case_id", "wall_seconds"])?;

    let mut any_failed = false;
    for r in results {
        let (status, pred, real, err) = match &r.report {
            Ok(rep) => {
                write_json(&reports_dir.join(format!("{}.json", r.id)), rep)?;
                ("ok", Some(&rep.predicted), rep.real.as_ref(), String::new())
            }
            Err(e) => {
                any_failed = true;
                ("error", None, None, e.clone())
            }
        };
        let mut row = vec![r.id.clone(), status.to_string()];
        row.extend(metric_cells(pred));
        row.extend(decision_cells(pred, cfg));
        if with_real {
            row.extend(metric_cells(real));
            row.extend(decision_cells(real, cfg));
        }
        row.push(err);
        csv.write_record(&row)?;
        timings.write_record([r.id.clone(), format!("{:.3}", r.seconds)])?;
    }
    csv.flush()?;
    timings.flush()?;
    Ok(any_failed)
}

/// `qc run`: predicted quality for every case, without ground truth.
pub fn cmd_run(cfg: &RunConfig) -> Result<i32, ConfigError> {
    let refs = load_references(cfg)?;
    let (entries, base) = load_case_entries(cfg, false)?;
    fs::create_dir_all(&cfg.output_dir)?;
    info!("{} cases against {} references", entries.len(), refs.len());
    let results = process_cases(cfg, &entries, &base, &refs, false)?;
    let failed = write_outputs(cfg, &results, false)?;
    Ok(if failed { EXIT_CASE_ERROR } else { EXIT_OK })
}

/// `qc eval`: `run` plus real metrics, a summary and scatter data.
pub fn cmd_eval(cfg: &RunConfig) -> Result<i32, ConfigError> {
    let (entries, base) = load_case_entries(cfg, true)?;
    let refs = load_references(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    info!("{} cases against {} references", entries.len(), refs.len());
    let results = process_cases(cfg, &entries, &base, &refs, true)?;
    let failed = write_outputs(cfg, &results, true)?;

    let ok: Vec<(&str, &MetricSet, &MetricSet)> = results
        .iter()
        .filter_map(|r| {
            let rep = r.report.as_ref().ok()?;
            Some((r.id.as_str(), &rep.predicted, rep.real.as_ref()?))
        })
        .collect();
    let preds: Vec<MetricSet> = ok.iter().map(|x| x.1.clone()).collect();
    let reals: Vec<MetricSet> = ok.iter().map(|x| x.2.clone()).collect();
    let mut summary = BTreeMap::new();
    for (metric, t) in [(QcMetric::Dsc, cfg.thresholds.dsc), (QcMetric::Msd, cfg.thresholds.msd_mm)] {
        let mut per_scope = serde_json::Map::new();
        for scope in Scope::ALL {
            let entry = match evaluate(&preds, &reals, metric, t, scope) {
                Ok(s) => serde_json::to_value(s)?,
                Err(e) => json!({ "error": e.to_string() }),
            };
            per_scope.insert(scope.name().to_string(), entry);
        }
        summary.insert(metric.metric().name(), per_scope);
    }
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;

    let mut scatter = csv::Writer::from_path(cfg.output_dir.join("scatter.csv"))?;
    scatter.write_record(["case_id", "scope", "metric", "predicted", "real"])?;
    for (id, p, r) in &ok {
        for scope in Scope::ALL {
            for m in Metric::ALL {
                if let (Some(pv), Some(rv)) = (p.value(scope, m), r.value(scope, m)) {
                    scatter.write_record([id.to_string(), scope.name().into(), m.name().into(), unbounded::format(pv), unbounded::format(rv)])?;
                }
            }
        }
    }
    scatter.flush()?;
    Ok(if failed { EXIT_CASE_ERROR } else { EXIT_OK })
}

/// `qc phantom`: writes a battery of NIfTI files with manifests.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<i32, ConfigError> {
    let p = &cfg.phantom;
    let pool = pool(cfg.workers)?;
    let battery = pool.install(|| make_battery_with(&p.base, p.n_cases, p.n_refs, &p.severities, cfg.seed))?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("references"))?;
    fs::create_dir_all(out.join("cases"))?;
    let mut ref_manifest = Vec::new();
    for (rec, (img, lab)) in battery.reference_records.iter().zip(battery.references.entries()) {
        let e = ReferenceEntry {
            id: rec.id.clone(),
            image: PathBuf::from(format!("references/{}_image.nii", rec.id)),
            labels: PathBuf::from(format!("references/{}_labels.nii", rec.id)),
        };
        save_volume(img, out.join(&e.image))?;
        save_label_map(lab, out.join(&e.labels))?;
        ref_manifest.push(e);
    }
    let mut case_manifest = Vec::new();
    for tc in &battery.cases {
        let e = CaseEntry {
            id: tc.id.clone(),
            image: PathBuf::from(format!("cases/{}_image.nii", tc.id)),
            seg: PathBuf::from(format!("cases/{}_seg.nii", tc.id)),
            gt: Some(PathBuf::from(format!("cases/{}_gt.nii", tc.id))),
        };
        save_volume(&tc.image, out.join(&e.image))?;
        save_label_map(&tc.seg, out.join(&e.seg))?;
        if let (Some(gt), Some(path)) = (&tc.gt, &e.gt) {
            save_label_map(gt, out.join(path))?;
        }
        case_manifest.push(e);
    }
    write_json(&out.join("references.json"), &ref_manifest)?;
    write_json(&out.join("cases.json"), &case_manifest)?;
    write_json(
        &out.join("battery.json"),
        &json!({
            "seed": cfg.seed,
            "severities": p.severities,
            "references": battery.reference_records,
            "cases": battery.case_records,
        }),
    )?;
    info!("wrote {} references and {} cases to {}", p.n_refs, p.n_cases, out.display());
    Ok(EXIT_OK)
}

/// `qc refsize`: classification accuracy against random reference subsets.
pub fn cmd_refsize(cfg: &RunConfig) -> Result<i32, ConfigError> {
    let (entries, base) = load_case_entries(cfg, true)?;
    let refs = load_references(cfg)?;
    if let Some(s) = cfg.refsize.sizes.iter().find(|&&s| s < 1 || s > refs.len()) {
        return Err(ConfigError(format!("subset size {s} outside 1..={}", refs.len())));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut cases = Vec::new();
    let mut failed = false;
    for e in &entries {
        match load_case(e, &base, true) {
            Ok(tc) => cases.push(tc),
            Err(err) => {
                error!("case {} failed: {err}", e.id);
                failed = true;
            }
        }
    }
    let pool = pool(cfg.workers)?;
    let table = pool.install(|| {
        refsize_study(&cases, &refs, &cfg.refsize.sizes, cfg.refsize.runs, cfg.seed, &cfg.registration, cfg.thresholds.dsc)
    })?;
    let mut rows = csv::Writer::from_path(cfg.output_dir.join("refsize.csv"))?;
    rows.write_record(["size", "run", "accuracy"])?;
    for r in &table.rows {
        rows.write_record([r.size.to_string(), r.run.to_string(), r.accuracy.to_string()])?;
    }
    rows.flush()?;
    let mut stats = csv::Writer::from_path(cfg.output_dir.join("refsize_summary.csv"))?;
    stats.write_record(["size", "mean", "min", "max"])?;
    for s in &table.stats {
        stats.write_record([s.size.to_string(), s.mean.to_string(), s.min.to_string(), s.max.to_string()])?;
    }
    stats.flush()?;
    Ok(if failed { EXIT_CASE_ERROR } else { EXIT_OK })
}
