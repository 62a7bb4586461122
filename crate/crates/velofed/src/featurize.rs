//! Supervised-matrix construction from demand series.
//!
//! One task = (target kind, horizon). Feature layout is fixed and station-agnostic:
//! RBF(hour-of-day), RBF(day-of-week), calendar flags, lags of both arrivals and
//! departures, rolling mean/min/max of the target series, EWM means of the target
//! series, one Fourier reconstruction per period.
//!
//! Leakage rules:
//! - every data-driven feature at origin t reads demand at hours <= t only;
//! - Fourier coefficients are fit on the burn-in prefix of the training split and
//!   are thereafter deterministic in the hour index;
//! - origins with incomplete history are dropped, never imputed.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DemandSeries, TemporalSplit};
use crate::matrix::DenseMatrix;

/// Look-back cap in hours: no lag may reach further than one week.
pub const LOOKBACK_HOURS: usize = 168;

/// Which demand component a task forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Arrivals,
    Departures,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetKind::Arrivals => write!(f, "arrivals"),
            TargetKind::Departures => write!(f, "departures"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfSpec {
    pub k: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    /// Cycle lengths in hours.
    pub periods: Vec<u32>,
    pub harmonics_per_period: usize,
    /// Prefix of the training split used to fit coefficients, in hours.
    pub burnin_len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalendarSpec {
    pub holidays: BTreeSet<NaiveDate>,
    /// Work hours [start, end) on weekdays.
    pub workhour_start: u32,
    pub workhour_end: u32,
    pub school_days: Option<BTreeSet<NaiveDate>>,
}

impl CalendarSpec {
    pub fn with_workhours() -> Self {
        CalendarSpec {
            workhour_start: 9,
            workhour_end: 17,
            ..CalendarSpec::default()
        }
    }
}

/// Full feature configuration; defaults give the 57-feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub rbf_hour: RbfSpec,
    pub rbf_dow: RbfSpec,
    pub lags: Vec<usize>,
    pub rolling_windows: Vec<usize>,
    pub ewm_halflives: Vec<f64>,
    pub fourier: FourierSpec,
    pub calendar: CalendarSpec,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            rbf_hour: RbfSpec { k: 12, sigma: 2.0 },
            rbf_dow: RbfSpec { k: 7, sigma: 1.0 },
            lags: vec![1, 2, 3, 6, 12, 24, 168],
            rolling_windows: vec![3, 6, 12, 24, 168],
            ewm_halflives: vec![3.0, 12.0, 24.0],
            fourier: FourierSpec {
                periods: vec![24, 168],
                harmonics_per_period: 3,
                burnin_len: 672,
            },
            calendar: CalendarSpec::with_workhours(),
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rbf_hour.k < 1 || self.rbf_dow.k < 1 {
            return Err(Error::config("RBF component counts must be >= 1"));
        }
        if self.rbf_hour.sigma <= 0.0 || self.rbf_dow.sigma <= 0.0 {
            return Err(Error::config("RBF sigmas must be positive"));
        }
        if self.lags.is_empty() || self.lags.iter().any(|&l| l == 0 || l > LOOKBACK_HOURS) {
            return Err(Error::config(format!(
                "lags must be in [1, {LOOKBACK_HOURS}]"
            )));
        }
        if self.rolling_windows.iter().any(|&w| w == 0) {
            return Err(Error::config("rolling windows must be >= 1"));
        }
        if self.ewm_halflives.iter().any(|&h| h <= 0.0) {
            return Err(Error::config("EWM halflives must be positive"));
        }
        if self.fourier.harmonics_per_period < 1 {
            return Err(Error::config("Fourier harmonics must be >= 1"));
        }
        if self.fourier.periods.iter().any(|&p| p == 0) {
            return Err(Error::config("Fourier periods must be positive"));
        }
        if self.workhours().0 >= self.workhours().1 {
            return Err(Error::config("workhour_start must precede workhour_end"));
        }
        Ok(())
    }

    fn workhours(&self) -> (u32, u32) {
        (self.calendar.workhour_start, self.calendar.workhour_end)
    }

    /// Earliest origin hour with complete lag and rolling history.
    pub fn first_valid_origin(&self) -> usize {
        let max_lag = self.lags.iter().copied().max().unwrap_or(0);
        let max_window = self.rolling_windows.iter().copied().max().unwrap_or(1);
        max_lag.max(max_window - 1)
    }

    pub fn n_features(&self) -> usize {
        self.rbf_hour.k
            + self.rbf_dow.k
            + 4
            + 2 * self.lags.len()
            + 3 * self.rolling_windows.len()
            + self.ewm_halflives.len()
            + self.fourier.periods.len()
    }

    /// Fixed, station-agnostic feature names in row layout order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_features());
        for j in 0..self.rbf_hour.k {
            names.push(format!("rbf_hour_{j}"));
        }
        for j in 0..self.rbf_dow.k {
            names.push(format!("rbf_dow_{j}"));
        }
        names.extend(
            ["is_holiday", "is_workhour", "is_school", "is_weekend"]
                .iter()
                .map(|s| s.to_string()),
        );
        for series in ["arrivals", "departures"] {
            for lag in &self.lags {
                names.push(format!("{series}_lag_{lag}"));
            }
        }
        for w in &self.rolling_windows {
            for stat in ["mean", "min", "max"] {
                names.push(format!("target_roll_{stat}_{w}"));
            }
        }
        for h in &self.ewm_halflives {
            names.push(format!("target_ewm_{h}"));
        }
        for p in &self.fourier.periods {
            names.push(format!("fourier_{p}"));
        }
        names
    }
}

/// Gaussian radial basis encoding of a circular quantity.
///
/// Centers are (j * period / K) for j = 0..K; distance is circular.
pub fn rbf_encode(value: f64, period: f64, k: usize, sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::config("RBF sigma must be positive"));
    }
    if period <= 0.0 || k == 0 {
        return Err(Error::config("RBF period and K must be positive"));
    }
    Ok((0..k)
        .map(|j| {
            let center = j as f64 * period / k as f64;
            let raw = (value - center).abs() % period;
            let d = raw.min(period - raw);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect())
}

/// OLS fit of mean + sum_k a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierCoeffs {
    pub period: f64,
    pub mean: f64,
    pub cos_coef: Vec<f64>,
    pub sin_coef: Vec<f64>,
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Divergence("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

fn fourier_basis(t: f64, period: f64, harmonics: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for k in 1..=harmonics {
        let phase = 2.0 * std::f64::consts::PI * k as f64 * t / period;
        out.push(phase.cos());
        out.push(phase.sin());
    }
}

/// Least-squares seasonal fit over `values`, whose first element sits at
/// absolute hour `start_hour`.
pub fn fourier_fit(
    values: &[f64],
    start_hour: usize,
    period: f64,
    harmonics: usize,
) -> Result<FourierCoeffs> {
    let p = 2 * harmonics + 1;
    if values.len() < 2 * p {
        return Err(Error::invalid(format!(
            "burn-in of {} points cannot fit {} Fourier parameters",
            values.len(),
            p
        )));
    }
    // Normal equations: (B^T B) x = B^T y with B the basis matrix.
    let mut btb = vec![vec![0.0; p]; p];
    let mut bty = vec![0.0; p];
    let mut basis = Vec::with_capacity(p);
    for (i, &y) in values.iter().enumerate() {
        fourier_basis((start_hour + i) as f64, period, harmonics, &mut basis);
        for r in 0..p {
            bty[r] += basis[r] * y;
            for c in r..p {
                btb[r][c] += basis[r] * basis[c];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            btb[r][c] = btb[c][r];
        }
    }
    let x = solve_linear(btb, bty)?;
    Ok(FourierCoeffs {
        period,
        mean: x[0],
        cos_coef: (0..harmonics).map(|k| x[1 + 2 * k]).collect(),
        sin_coef: (0..harmonics).map(|k| x[2 + 2 * k]).collect(),
    })
}

/// Evaluate the fitted seasonal signal at an absolute hour index.
pub fn fourier_eval(coeffs: &FourierCoeffs, t: f64) -> f64 {
    let mut v = coeffs.mean;
    for (k, (a, b)) in coeffs.cos_coef.iter().zip(&coeffs.sin_coef).enumerate() {
        let phase = 2.0 * std::f64::consts::PI * (k + 1) as f64 * t / coeffs.period;
        v += a * phase.cos() + b * phase.sin();
    }
    v
}

/// Lagged values series[t - lag] in lag order. Caller guarantees t >= max lag.
pub fn build_lags(series: &[f64], t: usize, lags: &[usize]) -> Vec<f64> {
    lags.iter().map(|&lag| series[t - lag]).collect()
}

/// Mean, min, max over series[t-window+1 ..= t]. Caller guarantees coverage.
pub fn rolling_stats(series: &[f64], t: usize, window: usize) -> (f64, f64, f64) {
    let slice = &series[t + 1 - window..=t];
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in slice {
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    (sum / window as f64, min, max)
}

/// EWM mean of series[0..=t] with alpha = 1 - 2^(-1/halflife) and m_0 = x_0.
pub fn ewm_stats(series: &[f64], t: usize, halflife: f64) -> f64 {
    let alpha = 1.0 - 2f64.powf(-1.0 / halflife);
    let mut m = series[0];
    for &x in &series[1..=t] {
        m = alpha * x + (1.0 - alpha) * m;
    }
    m
}

/// (is_holiday, is_workhour, is_school, is_weekend) as 0/1 values.
pub fn calendar_flags(t: chrono::NaiveDateTime, cal: &CalendarSpec) -> [f64; 4] {
    let date = t.date();
    let weekday = date.weekday().num_days_from_monday(); // Mon=0 .. Sun=6
    let hour = t.time().hour();
    let is_weekend = weekday >= 5;
    let is_workhour = !is_weekend && hour >= cal.workhour_start && hour < cal.workhour_end;
    let member = |set: &BTreeSet<NaiveDate>| set.contains(&date);
    [
        member(&cal.holidays) as u8 as f64,
        is_workhour as u8 as f64,
        cal.school_days.as_ref().is_some_and(member) as u8 as f64,
        is_weekend as u8 as f64,
    ]
}

/// One-date-per-line ISO calendar file (blank lines and #-comments ignored).
pub fn load_date_set(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    let file = std::fs::File::open(path)?;
    let mut dates = BTreeSet::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let date = NaiveDate::parse_from_str(line, "%Y-%m-%d")
            .map_err(|_| Error::Schema(format!("bad calendar date {line:?}")))?;
        dates.insert(date);
    }
    Ok(dates)
}

/// Supervised rows of one (station, target, horizon) task over one split part.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub station: String,
    pub target_kind: TargetKind,
    pub horizon: u8,
    pub feature_names: Vec<String>,
    pub rows: DenseMatrix,
    pub targets: Vec<f64>,
    pub origin_index: Vec<usize>,
}

/// Train/valid/test matrices of one task for one station.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMatrices {
    pub train: FeatureMatrix,
    pub valid: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Feature rows for every origin with complete history, horizon-independent.
struct FeatureTable {
    first_origin: usize,
    rows: DenseMatrix,
}

fn build_table(
    series: &DemandSeries,
    target_kind: TargetKind,
    spec: &FeatureSpec,
    split: &TemporalSplit,
) -> Result<FeatureTable> {
    spec.validate()?;
    let len = series.len();
    if split.len != len {
        return Err(Error::shape(format!(
            "split covers {} intervals, series has {len}",
            split.len
        )));
    }
    if spec.fourier.burnin_len > split.train_end {
        return Err(Error::config(format!(
            "Fourier burn-in of {} hours exceeds the {}-hour training split",
            spec.fourier.burnin_len, split.train_end
        )));
    }
    let first_origin = spec.first_valid_origin();
    if first_origin >= len {
        return Err(Error::invalid(format!(
            "series of {len} hours leaves no origin with {first_origin} hours of history"
        )));
    }

    let arrivals: Vec<f64> = series.arrivals.iter().map(|&v| v as f64).collect();
    let departures: Vec<f64> = series.departures.iter().map(|&v| v as f64).collect();
    let target: &[f64] = match target_kind {
        TargetKind::Arrivals => &arrivals,
        TargetKind::Departures => &departures,
    };

    let fourier: Vec<FourierCoeffs> = spec
        .fourier
        .periods
        .iter()
        .map(|&p| {
            fourier_fit(
                &target[..spec.fourier.burnin_len],
                0,
                p as f64,
                spec.fourier.harmonics_per_period,
            )
        })
        .collect::<Result<_>>()?;

    // Hour-of-day and day-of-week take few distinct values; precompute their encodings.
    let hour_table: Vec<Vec<f64>> = (0..24)
        .map(|h| rbf_encode(h as f64, 24.0, spec.rbf_hour.k, spec.rbf_hour.sigma))
        .collect::<Result<_>>()?;
    let dow_table: Vec<Vec<f64>> = (0..7)
        .map(|d| rbf_encode(d as f64, 7.0, spec.rbf_dow.k, spec.rbf_dow.sigma))
        .collect::<Result<_>>()?;

    // EWM states advanced hour by hour; value at origin t includes x_t.
    let alphas: Vec<f64> = spec
        .ewm_halflives
        .iter()
        .map(|&h| 1.0 - 2f64.powf(-1.0 / h))
        .collect();
    let mut ewm_state: Vec<f64> = vec![target[0]; alphas.len()];
    for t in 1..=first_origin.min(len - 1) {
        for (m, &a) in ewm_state.iter_mut().zip(&alphas) {
            *m = a * target[t] + (1.0 - a) * *m;
        }
    }

    let mut rows = DenseMatrix::with_cols(spec.n_features());
    let mut row = Vec::with_capacity(spec.n_features());
    for t in first_origin..len {
        if t > first_origin {
            for (m, &a) in ewm_state.iter_mut().zip(&alphas) {
                *m = a * target[t] + (1.0 - a) * *m;
            }
        }
        row.clear();
        let when = series.timestamp(t);
        row.extend_from_slice(&hour_table[when.time().hour() as usize]);
        row.extend_from_slice(&dow_table[when.date().weekday().num_days_from_monday() as usize]);
        row.extend_from_slice(&calendar_flags(when, &spec.calendar));
        for lag_source in [&arrivals, &departures] {
            for &lag in &spec.lags {
                row.push(lag_source[t - lag]);
            }
        }
        for &w in &spec.rolling_windows {
            let (mean, min, max) = rolling_stats(target, t, w);
            row.push(mean);
            row.push(min);
            row.push(max);
        }
        row.extend_from_slice(&ewm_state);
        for c in &fourier {
            row.push(fourier_eval(c, t as f64));
        }
        rows.push_row(&row)?;
    }
    Ok(FeatureTable { first_origin, rows })
}

fn slice_part(
    table: &FeatureTable,
    series: &DemandSeries,
    target: &[f64],
    target_kind: TargetKind,
    horizon: u8,
    names: &[String],
    origins: std::ops::Range<usize>,
    part: &str,
) -> Result<FeatureMatrix> {
    let mut rows = DenseMatrix::with_cols(table.rows.n_cols());
    let mut targets = Vec::new();
    let mut origin_index = Vec::new();
    for t in origins {
        rows.push_row(table.rows.row(t - table.first_origin))?;
        targets.push(target[t + horizon as usize]);
        origin_index.push(t);
    }
    if targets.is_empty() {
        return Err(Error::invalid(format!(
            "station {} horizon {horizon}: no {part} rows survive history and horizon limits",
            series.station
        )));
    }
    Ok(FeatureMatrix {
        station: series.station.clone(),
        target_kind,
        horizon,
        feature_names: names.to_vec(),
        rows,
        targets,
        origin_index,
    })
}

/// Build train/valid/test matrices for several horizons of one task, sharing
/// one feature-table computation. Rows are assigned to parts by origin hour.
pub fn assemble_horizons(
    series: &DemandSeries,
    target_kind: TargetKind,
    horizons: &[u8],
    spec: &FeatureSpec,
    split: &TemporalSplit,
) -> Result<Vec<SplitMatrices>> {
    if horizons.is_empty() || horizons.iter().any(|&h| h < 1 || h > 6) {
        return Err(Error::config("horizons must lie in [1, 6]"));
    }
    let table = build_table(series, target_kind, spec, split)?;
    let names = spec.feature_names();
    let arrivals: Vec<f64>;
    let departures: Vec<f64>;
    let target: &[f64] = match target_kind {
        TargetKind::Arrivals => {
            arrivals = series.arrivals.iter().map(|&v| v as f64).collect();
            &arrivals
        }
        TargetKind::Departures => {
            departures = series.departures.iter().map(|&v| v as f64).collect();
            &departures
        }
    };

    horizons
        .iter()
        .map(|&h| {
            let last_origin = split.len - 1 - h as usize; // inclusive
            let clip = |lo: usize, hi: usize| lo.max(table.first_origin)..hi.min(last_origin + 1);
            Ok(SplitMatrices {
                train: slice_part(
                    &table, series, target, target_kind, h, &names,
                    clip(0, split.train_end), "train",
                )?,
                valid: slice_part(
                    &table, series, target, target_kind, h, &names,
                    clip(split.train_end, split.valid_end), "valid",
                )?,
                test: slice_part(
                    &table, series, target, target_kind, h, &names,
                    clip(split.valid_end, split.len), "test",
                )?,
            })
        })
        .collect()
}

/// Single-horizon convenience wrapper around assemble_horizons.
pub fn assemble_matrix(
    series: &DemandSeries,
    target_kind: TargetKind,
    horizon: u8,
    spec: &FeatureSpec,
    split: &TemporalSplit,
) -> Result<SplitMatrices> {
    Ok(assemble_horizons(series, target_kind, &[horizon], spec, split)?
        .pop()
        .expect("one horizon in, one out"))
}
