//! Deterministic synthetic fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use velofed::featurize::{FeatureSpec, FourierSpec, RbfSpec};
use velofed::ingest::DemandSeries;
use velofed_cli::config::RunConfig;

/// Grid origin for synthetic data; a Monday, so weekday features line up
/// with t % 168.
pub const GRID_T0: &str = "2022-03-07T00:00:00";

pub fn t0() -> NaiveDateTime {
    GRID_T0.parse().expect("valid grid origin")
}

/// Per-station sinusoidal demand intensity with daily and weekly structure.
pub struct DemandProfile {
    pub base: f64,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    pub daily_phase: f64,
    pub weekly_phase: f64,
}

impl DemandProfile {
    pub fn sample(rng: &mut ChaCha8Rng) -> DemandProfile {
        let tau = std::f64::consts::TAU;
        DemandProfile {
            base: rng.gen_range(3.0..9.0),
            daily_amp: rng.gen_range(0.5..0.9),
            weekly_amp: rng.gen_range(0.1..0.3),
            daily_phase: rng.gen_range(0.0..tau),
            weekly_phase: rng.gen_range(0.0..tau),
        }
    }

    pub fn lambda(&self, t: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        let daily = 1.0 + self.daily_amp * (tau * (t % 24) as f64 / 24.0 + self.daily_phase).sin();
        let weekly =
            1.0 + self.weekly_amp * (tau * (t % 168) as f64 / 168.0 + self.weekly_phase).sin();
        (self.base * daily * weekly).max(0.05)
    }
}

fn poisson_counts(profile: &DemandProfile, n_hours: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n_hours)
        .map(|t| {
            Poisson::new(profile.lambda(t))
                .expect("positive rate")
                .sample(rng) as u32
        })
        .collect()
}

/// Poisson counts around independent arrival/departure profiles.
pub fn synthetic_series(station: &str, n_hours: usize, rng: &mut ChaCha8Rng) -> DemandSeries {
    let arr = DemandProfile::sample(rng);
    let dep = DemandProfile::sample(rng);
    DemandSeries {
        station: station.to_string(),
        t0: t0(),
        step_seconds: 3600,
        arrivals: poisson_counts(&arr, n_hours, rng),
        departures: poisson_counts(&dep, n_hours, rng),
    }
}

/// Stations "S000".."S{n-1}", all drawn from one seeded stream.
pub fn synthetic_store(
    n_stations: usize,
    n_hours: usize,
    seed: u64,
) -> BTreeMap<String, DemandSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_stations)
        .map(|i| {
            let name = format!("S{i:03}");
            let series = synthetic_series(&name, n_hours, &mut rng);
            (name, series)
        })
        .collect()
}

/// Write a trips CSV in the default schema whose hourly departures follow
/// per-station profiles; destinations rotate among the other stations.
/// Returns the number of trip rows written.
pub fn write_trips_csv(path: &Path, n_stations: usize, n_days: usize, seed: u64) -> usize {
    assert!(n_stations >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles: Vec<DemandProfile> = (0..n_stations)
        .map(|_| DemandProfile::sample(&mut rng))
        .collect();
    let start = t0();
    let mut out = String::from("start_station_name,end_station_name,started_at,ended_at\n");
    let mut n = 0;
    for hour in 0..n_days * 24 {
        for (s, profile) in profiles.iter().enumerate() {
            let k = Poisson::new(profile.lambda(hour))
                .expect("positive rate")
                .sample(&mut rng) as usize;
            for _ in 0..k {
                let dest = (s + rng.gen_range(1..n_stations)) % n_stations;
                let t_start = start
                    + chrono::Duration::minutes(hour as i64 * 60 + rng.gen_range(0..60) as i64);
                let t_end = t_start + chrono::Duration::minutes(rng.gen_range(4..45) as i64);
                writeln!(
                    out,
                    "S{s:03},S{dest:03},{},{}",
                    t_start.format("%Y-%m-%dT%H:%M:%S"),
                    t_end.format("%Y-%m-%dT%H:%M:%S")
                )
                .expect("string write");
                n += 1;
            }
        }
    }
    std::fs::write(path, out).expect("fixture write");
    n
}

/// Compact feature set for short synthetic series (first origin 24,
/// Fourier burn-in 96 hours).
pub fn light_features() -> FeatureSpec {
    FeatureSpec {
        rbf_hour: RbfSpec { k: 6, sigma: 2.0 },
        rbf_dow: RbfSpec { k: 4, sigma: 1.0 },
        lags: vec![1, 2, 24],
        rolling_windows: vec![24],
        ewm_halflives: vec![24.0],
        fourier: FourierSpec {
            periods: vec![24],
            harmonics_per_period: 2,
            burnin_len: 96,
        },
        ..FeatureSpec::default()
    }
}

/// Fuller feature set for multi-month series (first origin 168,
/// Fourier burn-in 672 hours).
pub fn medium_features() -> FeatureSpec {
    FeatureSpec {
        lags: vec![1, 2, 3, 24, 168],
        rolling_windows: vec![24],
        ewm_halflives: vec![24.0],
        fourier: FourierSpec {
            periods: vec![24, 168],
            harmonics_per_period: 2,
            burnin_len: 672,
        },
        ..FeatureSpec::default()
    }
}

/// Fast end-to-end run configuration over `trips`, writing to `out`.
pub fn small_config(trips: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset_name = "synthetic".into();
    cfg.trips_csv = trips.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg.features = light_features();
    cfg.gbt.trees.n_trees = 10;
    cfg.gbt.trees.max_depth = 4;
    cfg.fed.n_clients = 3;
    cfg.fed.p_train = 0.5;
    cfg.fed.e_local = 3;
    cfg.fed.e_global = 3;
    cfg.fed.patience = 3;
    cfg.fed.trees_per_client = 10;
    cfg.fed.channels = 2;
    cfg.fed.sgd.lr = 0.005;
    cfg.fed.sgd.batch = 128;
    cfg.seed = 7;
    cfg
}

/// Invoke the CLI binary with extra environment variables.
pub fn run_cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_velofed"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary starts")
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// All regular files directly under `dir`, keyed by file name.
pub fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("output directory exists") {
        let entry = entry.expect("dir entry");
        if entry.file_type().expect("file type").is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            files.insert(name, std::fs::read(entry.path()).expect("file read"));
        }
    }
    files
}
