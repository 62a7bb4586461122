//! Run configuration: one JSON file, environment overrides for paths only.
//!
//! The config hash identifies an experiment. It is the SHA-256 of the
//! resolved config (env overrides applied, seed propagated) minus `out_dir`,
//! so relocating outputs never invalidates artifacts but any change to data
//! paths, thresholds, features, or hyperparameters does.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use velofed::featurize::{load_date_set, FeatureSpec};
use velofed::fedlearn::FedConfig;
use velofed::gbt::TreeParams;
use velofed::ingest::{CleanConfig, TripSchema};
use velofed::{Error, Result};

/// Boosting parameters plus the shrinkage applied at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub trees: TreeParams,
    pub eta: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            trees: TreeParams::default(),
            eta: 0.3,
        }
    }
}

/// Temporal split fractions over the hourly grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.7,
            valid: 0.2,
            test: 0.1,
        }
    }
}

/// Complete run configuration.
///
/// `seed` overrides `fed.seed` at load time so one knob controls every
/// stochastic component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_name: String,
    pub trips_csv: PathBuf,
    pub schema: TripSchema,
    pub clean: CleanConfig,
    pub features: FeatureSpec,
    pub gbt: GbtConfig,
    pub fed: FedConfig,
    pub split: SplitConfig,
    /// Optional JSON map {station id -> client index}; hash partition otherwise.
    pub partition_file: Option<PathBuf>,
    pub holidays_file: Option<PathBuf>,
    pub school_days_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Day rendered in the percentile-station series; first complete test day
    /// when absent.
    pub report_day: Option<NaiveDate>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_name: "dataset".into(),
            trips_csv: PathBuf::from("trips.csv"),
            schema: TripSchema::default(),
            clean: CleanConfig::default(),
            features: FeatureSpec::default(),
            gbt: GbtConfig::default(),
            fed: FedConfig::default(),
            split: SplitConfig::default(),
            partition_file: None,
            holidays_file: None,
            school_days_file: None,
            out_dir: PathBuf::from("out"),
            seed: 42,
            report_day: None,
        }
    }
}

/// Path fields that may be overridden from the environment, and nothing else.
const ENV_OVERRIDES: [(&str, fn(&mut RunConfig, PathBuf)); 5] = [
    ("VELOFED_TRIPS_CSV", |c, p| c.trips_csv = p),
    ("VELOFED_OUT_DIR", |c, p| c.out_dir = p),
    ("VELOFED_PARTITION_FILE", |c, p| c.partition_file = Some(p)),
    ("VELOFED_HOLIDAYS_FILE", |c, p| c.holidays_file = Some(p)),
    ("VELOFED_SCHOOL_DAYS_FILE", |c, p| {
        c.school_days_file = Some(p)
    }),
];

/// A parsed, resolved config together with its identifying hash.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Loaded {
    pub fn from_file(path: &Path) -> Result<Loaded> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        Loaded::from_config(cfg)
    }

    /// Resolve env overrides, propagate the seed, validate, compute the hash.
    pub fn from_config(mut cfg: RunConfig) -> Result<Loaded> {
        for (var, apply) in ENV_OVERRIDES {
            if let Some(v) = env::var_os(var) {
                apply(&mut cfg, PathBuf::from(v));
            }
        }
        cfg.fed.seed = cfg.seed;
        validate(&cfg)?;
        let hash = config_hash(&cfg)?;
        Ok(Loaded { cfg, hash })
    }

    /// Calendar spec with holiday/school files folded in.
    pub fn resolved_features(&self) -> Result<FeatureSpec> {
        let mut spec = self.cfg.features.clone();
        if let Some(p) = &self.cfg.holidays_file {
            spec.calendar.holidays = load_date_set(p)?;
        }
        if let Some(p) = &self.cfg.school_days_file {
            spec.calendar.school_days = Some(load_date_set(p)?);
        }
        Ok(spec)
    }

    /// Explicit partition map when configured.
    pub fn partition_map(&self) -> Result<Option<BTreeMap<String, u32>>> {
        match &self.cfg.partition_file {
            None => Ok(None),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read partition {}: {e}", p.display()))
                })?;
                let map: BTreeMap<String, u32> = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("partition {}: {e}", p.display())))?;
                Ok(Some(map))
            }
        }
    }
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.features.validate()?;
    cfg.gbt.trees.validate()?;
    if !(cfg.gbt.eta > 0.0 && cfg.gbt.eta <= 1.0) {
        return Err(Error::config("gbt.eta must lie in (0, 1]"));
    }
    cfg.fed.validate()?;
    let s = &cfg.split;
    if (s.train + s.valid + s.test - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    for p in [&cfg.partition_file, &cfg.holidays_file, &cfg.school_days_file]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            return Err(Error::config(format!(
                "referenced file does not exist: {}",
                p.display()
            )));
        }
    }
    Ok(())
}

/// SHA-256 over the canonical JSON of the config with `out_dir` blanked.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut keyed = cfg.clone();
    keyed.out_dir = PathBuf::new();
    let canonical = serde_json::to_string(&keyed)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}
