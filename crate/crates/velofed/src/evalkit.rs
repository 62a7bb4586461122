//! Forecast quality metrics and report assembly for the centralized-vs-federated
//! comparison.
//!
//! Conventions fixed here:
//! - smape is a fraction in [0, 2]; a 0/0 term counts as 0.
//! - maape is in radians, bounded by pi/2; actual=0 with a nonzero forecast counts pi/2.
//! - reports micro-average: all (station, origin-hour) points of a task are pooled
//!   before the metric is taken.
//! - percentile station selection uses the nearest-rank definition.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::TargetKind;

/// Forecast horizons evaluated per task, in hours ahead.
pub const HORIZONS: [u8; 6] = [1, 2, 3, 4, 5, 6];

/// Percentile levels supported by representative-station selection.
pub const SUPPORTED_PERCENTILES: [u32; 3] = [25, 50, 75];

/// Unit annotation embedded in every report artifact.
pub const METRIC_UNITS: &str = "smape: fraction in [0,2]; maape: radians; mae, rmse: bikes";

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape(format!(
            "metric inputs differ in length: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::shape("metric inputs are empty"));
    }
    if y.iter().chain(y_hat.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Mean absolute error, in bikes.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sum: f64 = y.iter().zip(y_hat).map(|(a, p)| (a - p).abs()).sum();
    Ok(sum / y.len() as f64)
}

/// Root mean squared error, in bikes.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sum: f64 = y.iter().zip(y_hat).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok((sum / y.len() as f64).sqrt())
}

/// Symmetric mean absolute percentage error as a fraction in [0, 2].
///
/// Term: 2|y - yhat| / (|y| + |yhat|), defined as 0 when both are 0.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, p)| {
            let denom = a.abs() + p.abs();
            if denom == 0.0 {
                0.0
            } else {
                2.0 * (a - p).abs() / denom
            }
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Mean arctangent absolute percentage error, in radians.
///
/// Term: arctan(|y - yhat| / |y|); pi/2 when y = 0 with a nonzero forecast,
/// 0 when both are 0.
pub fn maape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, p)| {
            if *a == 0.0 {
                if *p == 0.0 {
                    0.0
                } else {
                    FRAC_PI_2
                }
            } else {
                ((a - p).abs() / a.abs()).atan()
            }
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Which training regime produced the model under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CML")]
    Cml,
    #[serde(rename = "HFL-global")]
    HflGlobal,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Cml => write!(f, "CML"),
            Variant::HflGlobal => write!(f, "HFL-global"),
        }
    }
}

/// Test-set actuals and raw model outputs for one station under one task.
#[derive(Debug, Clone)]
pub struct StationPrediction {
    pub station_id: String,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// All per-station predictions for one (horizon, target) task.
#[derive(Debug, Clone)]
pub struct TaskPredictions {
    pub horizon: u8,
    pub target: TargetKind,
    pub stations: Vec<StationPrediction>,
}

/// Metrics of one (horizon, target) cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub horizon: u8,
    pub target: TargetKind,
    pub smape: f64,
    pub maape: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_points: u64,
}

/// Full evaluation of one model variant over all 12 tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: Variant,
    pub units: String,
    pub cells: Vec<TaskMetrics>,
    pub n_points: u64,
}

fn pool_task(task: &TaskPredictions) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = Vec::new();
    let mut y_hat = Vec::new();
    for s in &task.stations {
        if s.actual.len() != s.predicted.len() {
            return Err(Error::shape(format!(
                "station {}: {} actuals vs {} predictions",
                s.station_id,
                s.actual.len(),
                s.predicted.len()
            )));
        }
        y.extend_from_slice(&s.actual);
        // Demand is a count; negative model outputs are clamped at 0.
        y_hat.extend(s.predicted.iter().map(|v| v.max(0.0)));
    }
    Ok((y, y_hat))
}

/// Micro-averaged metrics for a single task, predictions clamped at 0.
pub fn task_metrics(task: &TaskPredictions) -> Result<TaskMetrics> {
    let (y, y_hat) = pool_task(task)?;
    if y.is_empty() {
        return Err(Error::shape(format!(
            "task horizon={} target={}: no test points",
            task.horizon, task.target
        )));
    }
    Ok(TaskMetrics {
        horizon: task.horizon,
        target: task.target,
        smape: smape(&y, &y_hat)?,
        maape: maape(&y, &y_hat)?,
        mae: mae(&y, &y_hat)?,
        rmse: rmse(&y, &y_hat)?,
        n_points: y.len() as u64,
    })
}

/// Per-station RMSE within one task (used for representative-station selection).
pub fn per_station_rmse(task: &TaskPredictions) -> Result<Vec<(String, f64)>> {
    task.stations
        .iter()
        .map(|s| {
            let clamped: Vec<f64> = s.predicted.iter().map(|v| v.max(0.0)).collect();
            Ok((s.station_id.clone(), rmse(&s.actual, &clamped)?))
        })
        .collect()
}

/// Build the report over all 12 (horizon, target) tasks.
pub fn evaluate(dataset: &str, variant: Variant, tasks: &[TaskPredictions]) -> Result<MetricsReport> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        if !seen.insert((t.horizon, t.target)) {
            return Err(Error::invalid(format!(
                "duplicate task horizon={} target={}",
                t.horizon, t.target
            )));
        }
    }
    let mut missing = Vec::new();
    for h in HORIZONS {
        for target in [TargetKind::Arrivals, TargetKind::Departures] {
            if !seen.contains(&(h, target)) {
                missing.push(format!("horizon={h} target={target}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing task models: {}",
            missing.join(", ")
        )));
    }

    let mut cells: Vec<TaskMetrics> = tasks.iter().map(task_metrics).collect::<Result<_>>()?;
    cells.sort_by_key(|c| (c.horizon, c.target));
    let n_points = cells.iter().map(|c| c.n_points).sum();
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        variant,
        units: METRIC_UNITS.to_string(),
        cells,
        n_points,
    })
}

impl MetricsReport {
    fn cell(&self, horizon: u8, target: TargetKind) -> Option<&TaskMetrics> {
        self.cells
            .iter()
            .find(|c| c.horizon == horizon && c.target == target)
    }

    /// Tab-separated table, one row per metric, one column per horizon,
    /// each cell an arrivals/departures pair.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# dataset={} variant={} n_points={}\n# cell = arrivals/departures; {}\n",
            self.dataset, self.variant, self.n_points, self.units
        );
        out.push_str("metric");
        for h in HORIZONS {
            out.push_str(&format!("\th{h}"));
        }
        out.push('\n');
        let metrics: [(&str, fn(&TaskMetrics) -> f64); 4] = [
            ("smape", |c| c.smape),
            ("maape", |c| c.maape),
            ("mae", |c| c.mae),
            ("rmse", |c| c.rmse),
        ];
        for (name, get) in metrics {
            out.push_str(name);
            for h in HORIZONS {
                let a = self.cell(h, TargetKind::Arrivals).map_or(f64::NAN, get);
                let d = self.cell(h, TargetKind::Departures).map_or(f64::NAN, get);
                out.push_str(&format!("\t{a:.3}/{d:.3}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Relative CML-to-HFL gap for one (horizon, target) cell; None when the
/// CML metric is 0 (gap undefined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub horizon: u8,
    pub target: TargetKind,
    pub mae_gap: Option<f64>,
    pub rmse_gap: Option<f64>,
}

fn relative_gap(cml: f64, hfl: f64) -> Option<f64> {
    if cml == 0.0 {
        None
    } else {
        Some((hfl - cml) / cml)
    }
}

/// Per-cell relative change (hfl - cml)/cml in MAE and RMSE.
pub fn compare(cml: &MetricsReport, hfl: &MetricsReport) -> Result<Vec<GapCell>> {
    if cml.cells.len() != hfl.cells.len() {
        return Err(Error::shape("reports have different cell counts"));
    }
    cml.cells
        .iter()
        .map(|c| {
            let h = hfl.cell(c.horizon, c.target).ok_or_else(|| {
                Error::shape(format!(
                    "HFL report lacks cell horizon={} target={}",
                    c.horizon, c.target
                ))
            })?;
            Ok(GapCell {
                horizon: c.horizon,
                target: c.target,
                mae_gap: relative_gap(c.mae, h.mae),
                rmse_gap: relative_gap(c.rmse, h.rmse),
            })
        })
        .collect()
}

/// Tab-separated gap table, percentages, `n/a` where the gap is undefined.
pub fn gap_table(gaps: &[GapCell]) -> String {
    fn fmt_gap(g: Option<f64>) -> String {
        g.map_or_else(|| "n/a".to_string(), |v| format!("{:+.2}%", v * 100.0))
    }
    let mut out = String::from("horizon\ttarget\tmae_gap\trmse_gap\n");
    for g in gaps {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            g.horizon,
            g.target,
            fmt_gap(g.mae_gap),
            fmt_gap(g.rmse_gap)
        ));
    }
    out
}

/// Station chosen to represent one RMSE percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeStation {
    pub percentile: u32,
    pub station_id: String,
    pub rmse: f64,
}

/// Nearest-rank percentile selection over per-station horizon-1 RMSE.
///
/// Ties in RMSE are broken by station-id order. Only percentiles 25/50/75
/// are supported.
pub fn representative_stations(
    rmse_by_station: &[(String, f64)],
    percentiles: &[u32],
) -> Result<Vec<RepresentativeStation>> {
    if rmse_by_station.len() < 4 {
        return Err(Error::invalid(format!(
            "representative-station selection needs >= 4 stations, got {}",
            rmse_by_station.len()
        )));
    }
    for p in percentiles {
        if !SUPPORTED_PERCENTILES.contains(p) {
            return Err(Error::invalid(format!(
                "percentile {p} outside supported set {SUPPORTED_PERCENTILES:?}"
            )));
        }
    }
    let mut sorted: Vec<&(String, f64)> = rmse_by_station.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let n = sorted.len();
    Ok(percentiles
        .iter()
        .map(|&p| {
            // Nearest rank: smallest rank r with r/n >= p/100, i.e. r = ceil(p*n/100).
            let rank = (p as usize * n).div_ceil(100).max(1);
            let (station_id, rmse) = sorted[rank - 1];
            RepresentativeStation {
                percentile: p,
                station_id: station_id.clone(),
                rmse: *rmse,
            }
        })
        .collect())
}

/// Plot-ready day of aligned actuals and per-variant predictions for one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySeries {
    pub percentile: u32,
    pub station_id: String,
    pub timestamps: Vec<String>,
    pub actual: Vec<f64>,
    pub cml: Vec<f64>,
    pub hfl: Vec<f64>,
}

impl DaySeries {
    pub fn new(
        percentile: u32,
        station_id: String,
        timestamps: Vec<String>,
        actual: Vec<f64>,
        cml: Vec<f64>,
        hfl: Vec<f64>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if actual.len() != n || cml.len() != n || hfl.len() != n {
            return Err(Error::shape("day series columns differ in length"));
        }
        Ok(DaySeries {
            percentile,
            station_id,
            timestamps,
            actual,
            cml,
            hfl,
        })
    }

    /// Tab-separated file body for external plotting.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("timestamp\tactual\tcml\thfl\n");
        for i in 0..self.timestamps.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.timestamps[i], self.actual[i], self.cml[i], self.hfl[i]
            ));
        }
        out
    }
}
