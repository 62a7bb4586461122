//! The four subcommand implementations.
//!
//! Task layout: 2 targets (arrivals, departures) x 6 horizons = 12 tasks.
//! Train and validation rows are identical across horizons (only the target
//! shifts), so each target's training matrix is pooled and presorted once;
//! this requires the test split to cover more hours than the largest horizon,
//! which load_inputs enforces.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use velofed::evalkit::{
    self, DaySeries, GapCell, MetricsReport, StationPrediction, TaskPredictions, Variant,
};
use velofed::featurize::{assemble_horizons, FeatureSpec, SplitMatrices, TargetKind};
use velofed::fedlearn::{self, ClientTask};
use velofed::gbt::{self, Ensemble};
use velofed::ingest::{
    self, ClientPartition, DemandSeries, IngestManifest, PartitionMode, TemporalSplit,
};
use velofed::{DenseMatrix, Error, Result};

use crate::artifacts::{read_stamped, write_atomic, write_stamped, LockGuard, Stamp};
use crate::config::Loaded;

/// Every run covers the full horizon range; the 12-task evaluation contract
/// depends on it.
pub const HORIZONS: [u8; 6] = [1, 2, 3, 4, 5, 6];
pub const TARGETS: [TargetKind; 2] = [TargetKind::Arrivals, TargetKind::Departures];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn variant_slug(v: Variant) -> &'static str {
    match v {
        Variant::Cml => "cml",
        Variant::HflGlobal => "hfl",
    }
}

/// File layout of one output directory.
pub struct OutPaths {
    root: PathBuf,
}

impl OutPaths {
    pub fn new(root: &Path) -> OutPaths {
        OutPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("demand.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn model(&self, v: Variant, t: TargetKind, h: u8) -> PathBuf {
        self.root
            .join(format!("model_{}_{t}_h{h}.json", variant_slug(v)))
    }

    pub fn rounds(&self, t: TargetKind, h: u8) -> PathBuf {
        self.root.join(format!("rounds_hfl_{t}_h{h}.jsonl"))
    }

    pub fn metrics(&self, v: Variant) -> PathBuf {
        self.root.join(format!("metrics_{}.json", variant_slug(v)))
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("comparison.json")
    }

    pub fn series(&self, t: TargetKind, percentile: u32) -> PathBuf {
        self.root.join(format!("series_{t}_p{percentile}.tsv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn stamp_of(l: &Loaded) -> Stamp {
    Stamp::new(&l.hash, l.cfg.seed)
}

/// Parse, clean, and aggregate trips into the hourly demand store.
pub fn cmd_ingest(l: &Loaded) -> Result<IngestManifest> {
    let cfg = &l.cfg;
    if !cfg.trips_csv.exists() {
        return Err(Error::config(format!(
            "input file does not exist: {}",
            cfg.trips_csv.display()
        )));
    }
    let _lock = LockGuard::acquire(&cfg.out_dir)?;
    let paths = OutPaths::new(&cfg.out_dir);

    let file = fs::File::open(&cfg.trips_csv)?;
    let (trips, parse) = ingest::parse_trips(io::BufReader::new(file), &cfg.schema)?;
    info!("parsed {} trips, {} malformed rows skipped", parse.parsed, parse.malformed);
    let (kept, stations, clean) = ingest::clean_trips(&trips, &cfg.clean);
    info!(
        "cleaning kept {} of {} trips across {} stations",
        clean.retained_trips, clean.input_trips, clean.retained_stations
    );
    let series = ingest::aggregate_demand(&kept, &stations, ingest::SECONDS_PER_HOUR)?;

    let mut tmp = paths.store();
    tmp.set_extension("csv.tmp");
    ingest::write_demand_store(&tmp, &series)?;
    fs::rename(&tmp, paths.store())?;

    let first = series
        .values()
        .next()
        .ok_or_else(|| Error::invalid("no stations survived cleaning"))?;
    let manifest = IngestManifest {
        t0: first.t0,
        step_seconds: first.step_seconds,
        len: first.len(),
        stations: series.keys().cloned().collect(),
        parse,
        clean,
    };
    write_stamped(&paths.manifest(), &stamp_of(l), &manifest)?;
    info!(
        "demand store: {} stations x {} hours from {}",
        manifest.stations.len(),
        manifest.len,
        manifest.t0.format(TIME_FORMAT)
    );
    Ok(manifest)
}

/// Demand store + split + feature spec, with the cross-horizon pooling guard.
fn load_inputs(
    l: &Loaded,
) -> Result<(
    IngestManifest,
    BTreeMap<String, DemandSeries>,
    TemporalSplit,
    FeatureSpec,
)> {
    let paths = OutPaths::new(&l.cfg.out_dir);
    let manifest = read_stamped::<IngestManifest>(&paths.manifest(), &stamp_of(l))?.payload;
    let series = ingest::read_demand_store(&paths.store())?;
    let got: Vec<&String> = series.keys().collect();
    if got.len() != manifest.stations.len() || got.iter().zip(&manifest.stations).any(|(a, b)| *a != b) {
        return Err(Error::Schema("demand store disagrees with manifest stations".into()));
    }
    let split = ingest::temporal_split(
        manifest.len,
        (l.cfg.split.train, l.cfg.split.valid, l.cfg.split.test),
    )?;
    let max_h = *HORIZONS.last().unwrap() as usize;
    if manifest.len - split.valid_end <= max_h {
        return Err(Error::config(format!(
            "test split covers {} hours but must exceed the largest horizon ({max_h})",
            manifest.len - split.valid_end
        )));
    }
    let spec = l.resolved_features()?;
    Ok((manifest, series, split, spec))
}

/// Per-station matrices for all horizons of one target.
type StationMats = BTreeMap<String, Vec<SplitMatrices>>;

fn station_matrices(
    series: &BTreeMap<String, DemandSeries>,
    target: TargetKind,
    spec: &FeatureSpec,
    split: &TemporalSplit,
) -> Result<StationMats> {
    series
        .iter()
        .map(|(name, s)| Ok((name.clone(), assemble_horizons(s, target, &HORIZONS, spec, split)?)))
        .collect()
}

/// Concatenate the train/valid feature rows of all given stations (identical
/// across horizons) and per-horizon target vectors.
struct Pooled {
    x_train: DenseMatrix,
    x_valid: DenseMatrix,
    y_train: Vec<Vec<f64>>,
    y_valid: Vec<Vec<f64>>,
}

fn pool(mats: &StationMats, stations: Option<&[&str]>, n_cols: usize) -> Result<Pooled> {
    let mut p = Pooled {
        x_train: DenseMatrix::with_cols(n_cols),
        x_valid: DenseMatrix::with_cols(n_cols),
        y_train: vec![Vec::new(); HORIZONS.len()],
        y_valid: vec![Vec::new(); HORIZONS.len()],
    };
    let selected: Vec<&Vec<SplitMatrices>> = match stations {
        None => mats.values().collect(),
        Some(list) => list.iter().map(|s| &mats[*s]).collect(),
    };
    for per_h in selected {
        p.x_train.extend_rows(&per_h[0].train.rows)?;
        p.x_valid.extend_rows(&per_h[0].valid.rows)?;
        for (hi, m) in per_h.iter().enumerate() {
            debug_assert_eq!(m.train.rows.n_rows(), per_h[0].train.rows.n_rows());
            p.y_train[hi].extend_from_slice(&m.train.targets);
            p.y_valid[hi].extend_from_slice(&m.valid.targets);
        }
    }
    Ok(p)
}

/// Model document payloads keep the exact bytes-level format of the owning
/// module: the stamped envelope embeds the module-serialized JSON as a value.
fn module_doc(json: &str) -> Result<Value> {
    Ok(serde_json::from_str(json)?)
}

#[derive(Serialize, Deserialize)]
struct HflPayload {
    forest: Value,
    layer: Value,
}

fn read_cml_model(path: &Path, stamp: &Stamp) -> Result<Ensemble> {
    let doc = read_stamped::<Value>(path, stamp)?;
    gbt::deserialize(&serde_json::to_string(&doc.payload)?)
}

fn read_hfl_model(
    path: &Path,
    stamp: &Stamp,
) -> Result<(fedlearn::GlobalForest, fedlearn::AggLayer)> {
    let doc = read_stamped::<HflPayload>(path, stamp)?;
    Ok((
        fedlearn::deserialize_forest(&serde_json::to_string(&doc.payload.forest)?)?,
        fedlearn::deserialize_layer(&serde_json::to_string(&doc.payload.layer)?)?,
    ))
}

/// Station -> client assignment, hash-partitioned unless a map is configured.
fn partition(l: &Loaded, stations: &[String]) -> Result<ClientPartition> {
    let file_map = l.partition_map()?;
    let mode = match &file_map {
        Some(m) => PartitionMode::File(m),
        None => PartitionMode::Hash,
    };
    let station_set: BTreeSet<String> = stations.iter().cloned().collect();
    let part = ingest::partition_clients(&station_set, l.cfg.fed.n_clients, mode)?;
    for c in 0..part.n_clients {
        if part.stations_of(c).is_empty() {
            return Err(Error::config(format!(
                "client {c} has no stations; lower fed.n_clients or provide a partition file"
            )));
        }
    }
    Ok(part)
}

/// Train one variant over all 12 tasks.
pub fn cmd_train(l: &Loaded, variant: Variant) -> Result<()> {
    let _lock = LockGuard::acquire(&l.cfg.out_dir)?;
    let (manifest, series, split, spec) = load_inputs(l)?;
    let paths = OutPaths::new(&l.cfg.out_dir);
    let stamp = stamp_of(l);
    let names = spec.feature_names();
    let part = match variant {
        Variant::Cml => None,
        Variant::HflGlobal => Some(partition(l, &manifest.stations)?),
    };

    for target in TARGETS {
        let mats = station_matrices(&series, target, &spec, &split)?;
        match variant {
            Variant::Cml => {
                let pooled = pool(&mats, None, names.len())?;
                let pre = gbt::Presorted::new(&pooled.x_train);
                for (hi, &h) in HORIZONS.iter().enumerate() {
                    let ensemble = gbt::fit_ensemble_presorted(
                        &pooled.x_train,
                        &pre,
                        &pooled.y_train[hi],
                        &l.cfg.gbt.trees,
                        l.cfg.gbt.eta,
                        names.clone(),
                        Some(gbt::EarlyStop {
                            x_val: &pooled.x_valid,
                            y_val: &pooled.y_valid[hi],
                            patience: l.cfg.fed.patience as usize,
                        }),
                    )?;
                    info!(
                        "cml {target} h{h}: {} trees on {} rows",
                        ensemble.trees.len(),
                        pooled.x_train.n_rows()
                    );
                    let doc = module_doc(&gbt::serialize(&ensemble)?)?;
                    write_stamped(&paths.model(variant, target, h), &stamp, &doc)?;
                }
            }
            Variant::HflGlobal => {
                let part = part.as_ref().expect("partition prepared for hfl");
                for (hi, &h) in HORIZONS.iter().enumerate() {
                    let mut clients: Vec<ClientTask> = Vec::with_capacity(part.n_clients as usize);
                    for cid in 0..part.n_clients {
                        let stations = part.stations_of(cid);
                        let mut p = pool(&mats, Some(&stations), names.len())?;
                        clients.push(ClientTask {
                            client_id: cid,
                            x_train: std::mem::replace(&mut p.x_train, DenseMatrix::with_cols(0)),
                            y_train: std::mem::take(&mut p.y_train[hi]),
                            x_valid: std::mem::replace(&mut p.x_valid, DenseMatrix::with_cols(0)),
                            y_valid: std::mem::take(&mut p.y_valid[hi]),
                        });
                    }
                    let run = fedlearn::run_federation(
                        &clients,
                        &names,
                        &l.cfg.gbt.trees,
                        l.cfg.gbt.eta,
                        &l.cfg.fed,
                        None,
                    )?;
                    info!(
                        "hfl {target} h{h}: {} rounds, final l2 {:.4}",
                        run.rounds.len(),
                        run.layer.l2_norm()
                    );
                    let payload = HflPayload {
                        forest: module_doc(&fedlearn::serialize_forest(&run.forest)?)?,
                        layer: module_doc(&fedlearn::serialize_layer(&run.layer)?)?,
                    };
                    write_stamped(&paths.model(variant, target, h), &stamp, &payload)?;
                    write_atomic(&paths.rounds(target, h), run.round_log_lines()?.as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Which model files of a variant exist: all, none, or a partial set (error).
fn variant_state(paths: &OutPaths, v: Variant) -> Result<bool> {
    let missing: Vec<String> = TARGETS
        .iter()
        .flat_map(|&t| HORIZONS.iter().map(move |&h| (t, h)))
        .filter(|&(t, h)| !paths.model(v, t, h).exists())
        .map(|(t, h)| format!("{t} h{h}"))
        .collect();
    if missing.is_empty() {
        return Ok(true);
    }
    if missing.len() == TARGETS.len() * HORIZONS.len() {
        return Ok(false);
    }
    Err(Error::config(format!(
        "variant {} is partially trained; missing tasks: {}",
        variant_slug(v),
        missing.join(", ")
    )))
}

#[derive(Debug)]
pub struct EvalSummary {
    pub evaluated: Vec<Variant>,
    pub compared: bool,
    pub notices: Vec<String>,
}

/// Evaluate all trained variants; write metrics, comparison, and the
/// percentile-station day series when both variants exist.
pub fn cmd_evaluate(l: &Loaded) -> Result<EvalSummary> {
    let _lock = LockGuard::acquire(&l.cfg.out_dir)?;
    let (manifest, series, split, spec) = load_inputs(l)?;
    let paths = OutPaths::new(&l.cfg.out_dir);
    let stamp = stamp_of(l);
    let names = spec.feature_names();

    let mut summary = EvalSummary {
        evaluated: Vec::new(),
        compared: false,
        notices: Vec::new(),
    };
    let variants: Vec<Variant> = [Variant::Cml, Variant::HflGlobal]
        .into_iter()
        .filter_map(|v| match variant_state(&paths, v) {
            Ok(true) => Some(Ok(v)),
            Ok(false) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        return Err(Error::config(
            "no trained models in the output directory; run train first",
        ));
    }

    // tasks[variant] -> 12 TaskPredictions; mats kept for series lookup.
    let mut tasks: BTreeMap<&str, Vec<TaskPredictions>> = BTreeMap::new();
    let mut arrivals_mats: Option<StationMats> = None;
    for target in TARGETS {
        let mats = station_matrices(&series, target, &spec, &split)?;
        for &v in &variants {
            for (hi, &h) in HORIZONS.iter().enumerate() {
                let mut stations = Vec::with_capacity(mats.len());
                match v {
                    Variant::Cml => {
                        let model = read_cml_model(&paths.model(v, target, h), &stamp)?;
                        if model.feature_names != names {
                            return Err(Error::Schema(format!(
                                "model {} h{h} disagrees with the feature layout",
                                variant_slug(v)
                            )));
                        }
                        for (name, per_h) in &mats {
                            stations.push(StationPrediction {
                                station_id: name.clone(),
                                actual: per_h[hi].test.targets.clone(),
                                predicted: gbt::predict(&model, &per_h[hi].test.rows)?,
                            });
                        }
                    }
                    Variant::HflGlobal => {
                        let (forest, layer) = read_hfl_model(&paths.model(v, target, h), &stamp)?;
                        if forest.feature_names != names {
                            return Err(Error::Schema(format!(
                                "model {} h{h} disagrees with the feature layout",
                                variant_slug(v)
                            )));
                        }
                        for (name, per_h) in &mats {
                            stations.push(StationPrediction {
                                station_id: name.clone(),
                                actual: per_h[hi].test.targets.clone(),
                                predicted: fedlearn::predict_global(
                                    &forest,
                                    &layer,
                                    &per_h[hi].test.rows,
                                )?,
                            });
                        }
                    }
                }
                tasks.entry(variant_slug(v)).or_default().push(TaskPredictions {
                    horizon: h,
                    target,
                    stations,
                });
            }
        }
        if target == TargetKind::Arrivals {
            arrivals_mats = Some(mats);
        }
    }

    let mut reports: BTreeMap<&str, MetricsReport> = BTreeMap::new();
    for &v in &variants {
        let report = evalkit::evaluate(&l.cfg.dataset_name, v, &tasks[variant_slug(v)])?;
        write_stamped(&paths.metrics(v), &stamp, &report)?;
        info!("metrics written for {v} over {} points", report.n_points);
        reports.insert(variant_slug(v), report);
        summary.evaluated.push(v);
    }

    if summary.evaluated.len() == 2 {
        let gaps = evalkit::compare(&reports["cml"], &reports["hfl"])?;
        write_stamped(&paths.comparison(), &stamp, &gaps)?;
        summary.compared = true;
        write_day_series(
            l,
            &paths,
            &stamp,
            &manifest,
            &series,
            &split,
            arrivals_mats.as_ref().expect("arrivals matrices kept"),
            &tasks,
            &mut summary.notices,
        )?;
    } else {
        summary.notices.push(format!(
            "only {} trained; comparison and day series skipped",
            summary.evaluated[0]
        ));
    }
    for n in &summary.notices {
        info!("{n}");
    }
    Ok(summary)
}

/// Index of the first predicted hour of the day series and its length.
///
/// Predicted hours for horizon 1 are (origin + 1) for test origins, i.e.
/// indices [valid_end + 1, len). Defaults to the first complete calendar day
/// in that span, or the longest available window when no full day fits.
fn series_window(
    l: &Loaded,
    manifest: &IngestManifest,
    split: &TemporalSplit,
    notices: &mut Vec<String>,
) -> Result<(usize, usize)> {
    let lo = split.valid_end + 1;
    let len = manifest.len;
    if let Some(day) = l.cfg.report_day {
        let start = day.and_hms_opt(0, 0, 0).expect("midnight exists");
        let steps = (start - manifest.t0).num_seconds() / manifest.step_seconds;
        if steps < lo as i64 || (steps + 24) as usize > len {
            return Err(Error::config(format!(
                "report_day {day} does not lie fully inside the test span"
            )));
        }
        return Ok((steps as usize, 24));
    }
    // First index >= lo at 00:00 grid time.
    let hour_of = |idx: usize| -> u32 {
        use chrono::Timelike;
        (manifest.t0 + chrono::Duration::seconds(idx as i64 * manifest.step_seconds)).hour()
    };
    let mut idx = lo;
    while idx < len && hour_of(idx) != 0 {
        idx += 1;
    }
    if idx + 24 <= len {
        return Ok((idx, 24));
    }
    let n = (len - lo).min(24);
    notices.push(format!(
        "test span holds no complete day; series covers {n} hours from index {lo}"
    ));
    Ok((lo, n))
}

#[allow(clippy::too_many_arguments)]
fn write_day_series(
    l: &Loaded,
    paths: &OutPaths,
    stamp: &Stamp,
    manifest: &IngestManifest,
    series: &BTreeMap<String, DemandSeries>,
    split: &TemporalSplit,
    arrivals_mats: &StationMats,
    tasks: &BTreeMap<&str, Vec<TaskPredictions>>,
    notices: &mut Vec<String>,
) -> Result<()> {
    // Representative stations by horizon-1 arrivals RMSE of the CML variant.
    let cml_h1 = tasks["cml"]
        .iter()
        .find(|t| t.horizon == 1 && t.target == TargetKind::Arrivals)
        .expect("12-task set contains h1 arrivals");
    let rmse = evalkit::per_station_rmse(cml_h1)?;
    if rmse.len() < 4 {
        notices.push("fewer than 4 stations; day series skipped".into());
        return Ok(());
    }
    let reps = evalkit::representative_stations(&rmse, &evalkit::SUPPORTED_PERCENTILES)?;
    let (start, n_hours) = series_window(l, manifest, split, notices)?;

    for target in TARGETS {
        for rep in &reps {
            let pick = |slug: &str| -> Result<Vec<f64>> {
                let task = tasks[slug]
                    .iter()
                    .find(|t| t.horizon == 1 && t.target == target)
                    .expect("12-task set");
                let sp = task
                    .stations
                    .iter()
                    .find(|s| s.station_id == rep.station_id)
                    .expect("station evaluated");
                // Test origins are contiguous, so predicted hour -> row is an
                // offset from the first test origin.
                let first = arrivals_mats[&rep.station_id][0].test.origin_index[0];
                (start..start + n_hours)
                    .map(|idx| {
                        let row = (idx - 1).checked_sub(first).ok_or_else(|| {
                            Error::invalid("series window precedes test origins")
                        })?;
                        Ok(sp.predicted[row].max(0.0))
                    })
                    .collect()
            };
            let s = &series[&rep.station_id];
            let actual: Vec<f64> = (start..start + n_hours)
                .map(|idx| match target {
                    TargetKind::Arrivals => s.arrivals[idx] as f64,
                    TargetKind::Departures => s.departures[idx] as f64,
                })
                .collect();
            let timestamps: Vec<String> = (start..start + n_hours)
                .map(|idx| s.timestamp(idx).format(TIME_FORMAT).to_string())
                .collect();
            let day = DaySeries::new(
                rep.percentile,
                rep.station_id.clone(),
                timestamps,
                actual,
                pick("cml")?,
                pick("hfl")?,
            )?;
            let text = format!(
                "# config {} seed {} version {} station {} rmse_h1 {}\n{}",
                stamp.config_hash,
                stamp.seed,
                stamp.code_version,
                rep.station_id,
                rep.rmse,
                day.to_delimited()
            );
            write_atomic(&paths.series(target, rep.percentile), text.as_bytes())?;
        }
    }
    Ok(())
}

/// Render evaluation artifacts into one human-readable report.
pub fn cmd_report(l: &Loaded) -> Result<String> {
    let _lock = LockGuard::acquire(&l.cfg.out_dir)?;
    let paths = OutPaths::new(&l.cfg.out_dir);
    let stamp = stamp_of(l);

    let mut out = format!(
        "# velofed run report\n# config {} seed {} version {}\n# dataset: {}\n",
        stamp.config_hash, stamp.seed, stamp.code_version, l.cfg.dataset_name
    );
    let mut any = false;
    for v in [Variant::Cml, Variant::HflGlobal] {
        let path = paths.metrics(v);
        if !path.exists() {
            continue;
        }
        let report = read_stamped::<MetricsReport>(&path, &stamp)?.payload;
        out.push_str(&format!("\n== {v} ==\n{}", report.to_table()));
        any = true;
    }
    if !any {
        return Err(Error::config(
            "no metrics in the output directory; run evaluate first",
        ));
    }
    if paths.comparison().exists() {
        let gaps = read_stamped::<Vec<GapCell>>(&paths.comparison(), &stamp)?.payload;
        out.push_str(&format!(
            "\n== HFL vs CML relative gap ==\n{}",
            evalkit::gap_table(&gaps)
        ));
    } else {
        out.push_str("\n(comparison unavailable: single variant evaluated)\n");
    }
    let mut series_files: Vec<String> = Vec::new();
    for t in TARGETS {
        for p in evalkit::SUPPORTED_PERCENTILES {
            let path = paths.series(t, p);
            if path.exists() {
                series_files.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    if !series_files.is_empty() {
        out.push_str(&format!(
            "\npercentile-station day series: {}\n",
            series_files.join(", ")
        ));
    }
    write_atomic(&paths.report(), out.as_bytes())?;
    Ok(out)
}
