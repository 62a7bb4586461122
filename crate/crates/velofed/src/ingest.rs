//! Trip-log ETL: parse raw rental records, clean them, aggregate per-station
//! hourly demand, partition stations into simulated clients, and split the
//! temporal axis.
//!
//! Invariants maintained here:
//! - cleaned trips satisfy t_end >= t_start and touch only retained stations;
//! - every demand series shares one dataset-global, gap-free hourly grid;
//! - the temporal split is a property of the grid, identical for all stations;
//! - timestamps are naive local time exactly as shipped in the trip files.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_HOUR: i64 = 3600;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// One rental record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub start_station: String,
    pub end_station: String,
    pub t_start: NaiveDateTime,
    pub t_end: NaiveDateTime,
}

/// Column names and formats of a trip file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripSchema {
    pub start_station: String,
    pub end_station: String,
    pub started_at: String,
    pub ended_at: String,
    /// chrono strftime format; a variant with 'T' replaced by ' ' is tried as fallback.
    pub timestamp_format: String,
    pub delimiter: char,
}

impl Default for TripSchema {
    fn default() -> Self {
        TripSchema {
            start_station: "start_station_name".into(),
            end_station: "end_station_name".into(),
            started_at: "started_at".into(),
            ended_at: "ended_at".into(),
            timestamp_format: "%Y-%m-%dT%H:%M:%S".into(),
            delimiter: ',',
        }
    }
}

/// Row bookkeeping from parse_trips.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub parsed: u64,
    pub malformed: u64,
}

fn parse_timestamp(s: &str, format: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, format)
        .ok()
        .or_else(|| {
            if format.contains('T') {
                NaiveDateTime::parse_from_str(s, &format.replace('T', " ")).ok()
            } else {
                None
            }
        })
}

/// Parse a delimited trip file with a header row. Malformed rows (missing or
/// empty fields, unparseable timestamps) are counted, not fatal.
pub fn parse_trips<R: io::Read>(reader: R, schema: &TripSchema) -> Result<(Vec<Trip>, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} missing from header")))
    };
    let c_start = col(&schema.start_station)?;
    let c_end = col(&schema.end_station)?;
    let c_started = col(&schema.started_at)?;
    let c_ended = col(&schema.ended_at)?;

    let mut trips = Vec::new();
    let mut report = ParseReport::default();
    for record in rdr.records() {
        let record = record?;
        let fields = (
            record.get(c_start).map(str::trim),
            record.get(c_end).map(str::trim),
            record.get(c_started).and_then(|s| parse_timestamp(s.trim(), &schema.timestamp_format)),
            record.get(c_ended).and_then(|s| parse_timestamp(s.trim(), &schema.timestamp_format)),
        );
        match fields {
            (Some(start), Some(end), Some(t_start), Some(t_end)) if !start.is_empty() && !end.is_empty() => {
                trips.push(Trip {
                    start_station: start.to_string(),
                    end_station: end.to_string(),
                    t_start,
                    t_end,
                });
                report.parsed += 1;
            }
            _ => report.malformed += 1,
        }
    }
    Ok((trips, report))
}

/// Removal tallies from clean_trips, one reason per removed trip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_trips: u64,
    pub removed_duration: u64,
    pub removed_negative: u64,
    pub removed_short_roundtrip: u64,
    pub removed_inactive_station: u64,
    pub removed_stations: u64,
    pub retained_trips: u64,
    pub retained_stations: u64,
}

/// Thresholds for clean_trips, in the units the rules are stated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub max_duration_hours: i64,
    pub min_roundtrip_seconds: i64,
    pub min_daily_rentals: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            max_duration_hours: 24,
            min_roundtrip_seconds: 120,
            min_daily_rentals: 3.0,
        }
    }
}

fn epoch(t: NaiveDateTime) -> i64 {
    t.and_utc().timestamp()
}

/// Apply trip-level filters, then drop stations averaging fewer than
/// `min_daily_rentals` departures per day over their active span.
///
/// The station filter is evaluated once on the trip-level survivors; span is
/// days between a station's first and last touch (start or end), minimum 1.
pub fn clean_trips(
    trips: &[Trip],
    cfg: &CleanConfig,
) -> (Vec<Trip>, BTreeSet<String>, CleanReport) {
    let mut report = CleanReport {
        input_trips: trips.len() as u64,
        ..CleanReport::default()
    };
    let max_duration = cfg.max_duration_hours * SECONDS_PER_HOUR;

    let mut survivors: Vec<&Trip> = Vec::with_capacity(trips.len());
    for t in trips {
        let duration = epoch(t.t_end) - epoch(t.t_start);
        if duration > max_duration {
            report.removed_duration += 1;
        } else if duration < 0 {
            report.removed_negative += 1;
        } else if t.start_station == t.end_station && duration < cfg.min_roundtrip_seconds {
            report.removed_short_roundtrip += 1;
        } else {
            survivors.push(t);
        }
    }

    // Per-station activity: departure count plus first/last touch as start or end.
    struct Activity {
        departures: u64,
        first: i64,
        last: i64,
    }
    let mut activity: BTreeMap<String, Activity> = BTreeMap::new();
    for t in &survivors {
        for (station, is_departure, at) in [
            (&t.start_station, true, epoch(t.t_start)),
            (&t.end_station, false, epoch(t.t_end)),
        ] {
            let a = activity.entry(station.clone()).or_insert(Activity {
                departures: 0,
                first: at,
                last: at,
            });
            if is_departure {
                a.departures += 1;
            }
            a.first = a.first.min(at);
            a.last = a.last.max(at);
        }
    }

    let mut retained: BTreeSet<String> = BTreeSet::new();
    for (station, a) in &activity {
        let span_days = ((a.last - a.first) as f64 / SECONDS_PER_DAY as f64).max(1.0);
        if a.departures as f64 / span_days >= cfg.min_daily_rentals {
            retained.insert(station.clone());
        } else {
            report.removed_stations += 1;
        }
    }

    let mut cleaned = Vec::with_capacity(survivors.len());
    for t in survivors {
        if retained.contains(&t.start_station) && retained.contains(&t.end_station) {
            cleaned.push(t.clone());
        } else {
            report.removed_inactive_station += 1;
        }
    }
    report.retained_trips = cleaned.len() as u64;
    report.retained_stations = retained.len() as u64;
    (cleaned, retained, report)
}

/// Per-station hourly demand on the dataset-global grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandSeries {
    pub station: String,
    pub t0: NaiveDateTime,
    pub step_seconds: i64,
    pub arrivals: Vec<u32>,
    pub departures: Vec<u32>,
}

impl DemandSeries {
    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    /// Timestamp of interval `i`.
    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        chrono::DateTime::from_timestamp(epoch(self.t0) + i as i64 * self.step_seconds, 0)
            .expect("grid timestamp in range")
            .naive_utc()
    }
}

fn floor_to_step(ts: i64, step: i64) -> i64 {
    ts - ts.rem_euclid(step)
}

/// Count arrivals and departures per station per hour on one global grid
/// spanning floor-to-hour of the earliest event to the hour of the latest,
/// zero-filled. Stations without trips get all-zero series.
pub fn aggregate_demand(
    trips: &[Trip],
    stations: &BTreeSet<String>,
    step_seconds: i64,
) -> Result<BTreeMap<String, DemandSeries>> {
    if stations.is_empty() {
        return Err(Error::invalid("no stations to aggregate"));
    }
    if step_seconds <= 0 {
        return Err(Error::config("aggregation step must be positive"));
    }
    let events = trips
        .iter()
        .flat_map(|t| [epoch(t.t_start), epoch(t.t_end)]);
    let (mut min_ts, mut max_ts) = (i64::MAX, i64::MIN);
    for e in events {
        min_ts = min_ts.min(e);
        max_ts = max_ts.max(e);
    }
    if min_ts > max_ts {
        return Err(Error::invalid("no trips to aggregate"));
    }
    let grid_start = floor_to_step(min_ts, step_seconds);
    let len = ((floor_to_step(max_ts, step_seconds) - grid_start) / step_seconds + 1) as usize;
    let t0 = chrono::DateTime::from_timestamp(grid_start, 0)
        .ok_or_else(|| Error::invalid("grid start out of range"))?
        .naive_utc();

    let mut series: BTreeMap<String, DemandSeries> = stations
        .iter()
        .map(|s| {
            (
                s.clone(),
                DemandSeries {
                    station: s.clone(),
                    t0,
                    step_seconds,
                    arrivals: vec![0; len],
                    departures: vec![0; len],
                },
            )
        })
        .collect();

    for t in trips {
        let bucket = |ts: i64| ((floor_to_step(ts, step_seconds) - grid_start) / step_seconds) as usize;
        if let Some(s) = series.get_mut(&t.start_station) {
            s.departures[bucket(epoch(t.t_start))] += 1;
        }
        if let Some(s) = series.get_mut(&t.end_station) {
            s.arrivals[bucket(epoch(t.t_end))] += 1;
        }
    }
    Ok(series)
}

/// Assignment of stations to simulated clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub n_clients: u32,
    pub assignment: BTreeMap<String, u32>,
}

impl ClientPartition {
    /// Stations of one client, in id order.
    pub fn stations_of(&self, client: u32) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == client)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// How stations map to clients.
pub enum PartitionMode<'a> {
    /// Stable hash of the station id modulo n_clients.
    Hash,
    /// Explicit station -> client map; must cover every station.
    File(&'a BTreeMap<String, u32>),
}

/// FNV-1a 64-bit over a byte string. Fixed here so any other implementation
/// can reproduce the client assignment.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Assign every station to a client in [0, n_clients).
pub fn partition_clients(
    stations: &BTreeSet<String>,
    n_clients: u32,
    mode: PartitionMode<'_>,
) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(Error::config("n_clients must be >= 1"));
    }
    let mut assignment = BTreeMap::new();
    for station in stations {
        let client = match &mode {
            PartitionMode::Hash => (fnv1a64(station.as_bytes()) % n_clients as u64) as u32,
            PartitionMode::File(map) => {
                let c = *map.get(station).ok_or_else(|| {
                    Error::config(format!("partition file lacks station {station:?}"))
                })?;
                if c >= n_clients {
                    return Err(Error::config(format!(
                        "partition file assigns station {station:?} to client {c} >= n_clients {n_clients}"
                    )));
                }
                c
            }
        };
        assignment.insert(station.clone(), client);
    }
    Ok(ClientPartition {
        n_clients,
        assignment,
    })
}

/// Shared train/valid/test boundaries on the hourly grid, as interval indices:
/// train = [0, train_end), valid = [train_end, valid_end), test = [valid_end, len).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train_end: usize,
    pub valid_end: usize,
    pub len: usize,
}

/// Split the grid at floor(f_train * L) and floor((f_train + f_valid) * L).
///
/// Fractions are snapped to multiples of 1e-6 so the floor is taken of the
/// exact rational product, not of a binary-float approximation.
pub fn temporal_split(series_len: usize, fractions: (f64, f64, f64)) -> Result<TemporalSplit> {
    let (f_train, f_valid, f_test) = fractions;
    if series_len < 10 {
        return Err(Error::invalid(format!(
            "series of {series_len} intervals is too short to split"
        )));
    }
    if (f_train + f_valid + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let ppm = |f: f64| -> Result<u64> {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config("split fractions must lie in [0, 1]"));
        }
        Ok((f * 1e6).round() as u64)
    };
    let train_ppm = ppm(f_train)?;
    let valid_ppm = ppm(f_valid)?;
    let l = series_len as u64;
    let train_end = (train_ppm * l / 1_000_000) as usize;
    let valid_end = ((train_ppm + valid_ppm) * l / 1_000_000) as usize;
    if train_end < 1 || valid_end <= train_end || series_len <= valid_end {
        return Err(Error::invalid(
            "split leaves an empty train, valid, or test part",
        ));
    }
    Ok(TemporalSplit {
        train_end,
        valid_end,
        len: series_len,
    })
}

/// Grid metadata and cleaning bookkeeping persisted next to the demand store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub t0: NaiveDateTime,
    pub step_seconds: i64,
    pub len: usize,
    pub stations: Vec<String>,
    pub parse: ParseReport,
    pub clean: CleanReport,
}

const STORE_TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Write the demand store: one CSV with columns
/// (station_id, hour_index, timestamp, arrivals, departures), sorted by
/// (station_id, hour_index).
pub fn write_demand_store(path: &Path, series: &BTreeMap<String, DemandSeries>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "hour_index", "timestamp", "arrivals", "departures"])?;
    for s in series.values() {
        for i in 0..s.len() {
            w.write_record([
                s.station.as_str(),
                &i.to_string(),
                &s.timestamp(i).format(STORE_TIME_FORMAT).to_string(),
                &s.arrivals[i].to_string(),
                &s.departures[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a demand store back into per-station series.
pub fn read_demand_store(path: &Path) -> Result<BTreeMap<String, DemandSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut series: BTreeMap<String, DemandSeries> = BTreeMap::new();
    for record in rdr.records() {
        let r = record?;
        let get = |i: usize| r.get(i).ok_or_else(|| Error::Schema("short demand row".into()));
        let station = get(0)?.to_string();
        let index: usize = get(1)?.parse().map_err(|_| Error::Schema("bad hour_index".into()))?;
        let ts = NaiveDateTime::parse_from_str(get(2)?, STORE_TIME_FORMAT)
            .map_err(|_| Error::Schema("bad timestamp in demand store".into()))?;
        let arrivals: u32 = get(3)?.parse().map_err(|_| Error::Schema("bad arrivals".into()))?;
        let departures: u32 = get(4)?.parse().map_err(|_| Error::Schema("bad departures".into()))?;
        let entry = series.entry(station.clone()).or_insert_with(|| DemandSeries {
            station,
            t0: ts,
            step_seconds: SECONDS_PER_HOUR,
            arrivals: Vec::new(),
            departures: Vec::new(),
        });
        if entry.arrivals.len() != index {
            return Err(Error::Schema(format!(
                "demand store rows out of order at {} index {}",
                entry.station, index
            )));
        }
        entry.arrivals.push(arrivals);
        entry.departures.push(departures);
    }
    let mut len = None;
    for s in series.values() {
        if s.is_empty() {
            return Err(Error::Schema(format!("station {} has no rows", s.station)));
        }
        if *len.get_or_insert(s.len()) != s.len() {
            return Err(Error::Schema("stations disagree on grid length".into()));
        }
    }
    Ok(series)
}
