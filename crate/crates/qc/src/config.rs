//! Run configuration and manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rcaqc::evalqc::{DEFAULT_DSC_THRESHOLD, DEFAULT_MSD_THRESHOLD};
use rcaqc::phantom::PhantomParams;
use rcaqc::register::RegParams;
use rcaqc::volgrid::{load_label_map, load_volume, read_raw_labels, read_raw_volume, LabelMap, Volume};
use rcaqc::QcError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A problem that stops a command before any case is processed (exit 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<QcError> for ConfigError {
    fn from(e: QcError) -> Self {
        ConfigError(e.to_string())
    }
}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError(e.to_string())
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError(e.to_string())
    }
}

impl From<csv::Error> for ConfigError {
    fn from(e: csv::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub dsc: f64,
    pub msd_mm: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            dsc: DEFAULT_DSC_THRESHOLD,
            msd_mm: DEFAULT_MSD_THRESHOLD,
        }
    }
}

/// Settings of `qc phantom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_cases: usize,
    pub n_refs: usize,
    pub severities: Vec<f64>,
    pub base: PhantomParams,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_cases: 10,
            n_refs: 5,
            severities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            base: PhantomParams::default(),
        }
    }
}

/// Settings of `qc refsize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefsizeConfig {
    pub sizes: Vec<usize>,
    pub runs: usize,
}

impl Default for RefsizeConfig {
    fn default() -> Self {
        RefsizeConfig {
            sizes: vec![2, 5, 10, 15, 20],
            runs: 5,
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_report_references() -> usize {
    5
}

/// Contents of the `--config` JSON file. Relative paths are resolved
/// against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Reference manifest (run, eval, refsize).
    #[serde(default)]
    pub references: Option<PathBuf>,
    /// Case manifest (run, eval, refsize).
    #[serde(default)]
    pub cases: Option<PathBuf>,
    #[serde(default)]
    pub registration: RegParams,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// References listed in each per-case report.
    #[serde(default = "default_report_references")]
    pub report_references: usize,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub refsize: RefsizeConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub dsc_threshold: Option<f64>,
    pub msd_threshold: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: Overrides) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.references = cfg.references.map(|p| base.join(p));
        cfg.cases = cfg.cases.map(|p| base.join(p));
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(t) = overrides.dsc_threshold {
            cfg.thresholds.dsc = t;
        }
        if let Some(t) = overrides.msd_threshold {
            cfg.thresholds.msd_mm = t;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers < 1 {
            return Err(ConfigError("workers must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.thresholds.dsc) {
            return Err(ConfigError("DSC threshold must lie in [0, 1]".into()));
        }
        if !(self.thresholds.msd_mm.is_finite() && self.thresholds.msd_mm >= 0.0) {
            return Err(ConfigError("MSD threshold must be a finite value >= 0".into()));
        }
        self.registration.validate()?;
        Ok(())
    }

    pub fn references_path(&self) -> Result<&Path, ConfigError> {
        self.references
            .as_deref()
            .ok_or_else(|| ConfigError("config has no reference manifest".into()))
    }

    pub fn cases_path(&self) -> Result<&Path, ConfigError> {
        self.cases.as_deref().ok_or_else(|| ConfigError("config has no case manifest".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    pub seg: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

/// Reads a JSON list and resolves the entries' paths against the manifest's
/// directory.
pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, PathBuf), ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let entries = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok((entries, path.parent().unwrap_or(Path::new(".")).to_path_buf()))
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "raw")
}

/// NIfTI (`.nii`) or the raw test format (`.raw`).
pub fn read_volume(path: &Path) -> rcaqc::Result<Volume> {
    if is_raw(path) {
        read_raw_volume(path)
    } else {
        load_volume(path)
    }
}

pub fn read_labels(path: &Path) -> rcaqc::Result<LabelMap> {
    if is_raw(path) {
        read_raw_labels(path)
    } else {
        load_label_map(path)
    }
}
