//! End-to-end exercises of the four subcommands, library-level and through
//! the binary.

mod common;

use std::fs;

use serde_json::Value;

use velofed::evalkit::{MetricsReport, Variant};
use velofed::featurize::TargetKind;
use velofed::gbt::{self, Ensemble, Node};
use velofed::ingest::{self, CleanReport, DemandSeries, IngestManifest, ParseReport};
use velofed::Error;
use velofed_cli::artifacts::{read_stamped, write_stamped, Stamp};
use velofed_cli::config::Loaded;
use velofed_cli::pipeline::{self, OutPaths, HORIZONS, TARGETS};

fn load(cfg: velofed_cli::config::RunConfig) -> Loaded {
    Loaded::from_config(cfg).expect("config is valid")
}

fn stamp(l: &Loaded) -> Stamp {
    Stamp::new(&l.hash, l.cfg.seed)
}

fn read_model_payload(l: &Loaded, v: Variant, t: TargetKind, h: u8) -> Value {
    let paths = OutPaths::new(&l.cfg.out_dir);
    read_stamped::<Value>(&paths.model(v, t, h), &stamp(l))
        .expect("model document reads back")
        .payload
}

#[test]
fn ingest_manifest_matches_fixture_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    // 10 data rows: 6 clean, 1 short round trip, 1 negative duration,
    // 1 over 24 h, 1 malformed timestamp.
    fs::write(
        &trips,
        "start_station_name,end_station_name,started_at,ended_at\n\
         A,B,2022-05-02T10:05:00,2022-05-02T10:25:00\n\
         B,A,2022-05-02T10:40:00,2022-05-02T11:10:00\n\
         A,B,2022-05-02T11:15:00,2022-05-02T11:45:00\n\
         B,A,2022-05-02T12:05:00,2022-05-02T12:20:00\n\
         A,A,2022-05-02T12:30:00,2022-05-02T12:31:00\n\
         A,B,2022-05-02T12:50:00,2022-05-02T12:40:00\n\
         B,A,2022-05-01T09:00:00,2022-05-02T13:30:00\n\
         A,B,not-a-time,2022-05-02T13:00:00\n\
         A,B,2022-05-02T13:10:00,2022-05-02T13:30:00\n\
         B,A,2022-05-02T13:20:00,2022-05-02T13:55:00\n",
    )
    .unwrap();
    let l = load(common::small_config(&trips, &dir.path().join("out")));

    let manifest = pipeline::cmd_ingest(&l).expect("ingest succeeds");

    assert_eq!(manifest.parse, ParseReport { parsed: 9, malformed: 1 });
    assert_eq!(
        manifest.clean,
        CleanReport {
            input_trips: 9,
            removed_duration: 1,
            removed_negative: 1,
            removed_short_roundtrip: 1,
            removed_inactive_station: 0,
            removed_stations: 0,
            retained_trips: 6,
            retained_stations: 2,
        }
    );
    assert_eq!(manifest.stations, vec!["A".to_string(), "B".to_string()]);
    assert_eq!(manifest.t0, "2022-05-02T10:00:00".parse().unwrap());
    assert_eq!(manifest.step_seconds, 3600);
    assert_eq!(manifest.len, 4);

    let store = ingest::read_demand_store(&OutPaths::new(&l.cfg.out_dir).store()).unwrap();
    assert_eq!(store["A"].arrivals, vec![0, 1, 1, 1]);
    assert_eq!(store["A"].departures, vec![1, 1, 0, 1]);
    assert_eq!(store["B"].arrivals, vec![1, 1, 0, 1]);
    assert_eq!(store["B"].departures, vec![1, 0, 1, 1]);
}

#[test]
fn missing_inputs_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.csv");
    let cfg = common::small_config(&absent, &dir.path().join("out"));
    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();

    let out = common::run_cli(&["ingest", "--config", cfg_arg], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        common::stderr_of(&out).contains("absent.csv"),
        "stderr names the missing input: {}",
        common::stderr_of(&out)
    );

    // Training before ingest reports the missing artifact, not a panic.
    let out = common::run_cli(&["train", "--variant", "cml", "--config", cfg_arg], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(common::stderr_of(&out).contains("manifest.json"));

    // Unknown variant is a clap usage error.
    let out = common::run_cli(&["train", "--variant", "bogus", "--config", cfg_arg], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Missing --config.
    let out = common::run_cli(&["evaluate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(common::stderr_of(&out).contains("--config"));
}

#[test]
fn ingest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    common::write_trips_csv(&trips, 4, 10, 11);
    let l = load(common::small_config(&trips, &dir.path().join("out")));

    pipeline::cmd_ingest(&l).unwrap();
    let first = common::dir_snapshot(&l.cfg.out_dir);
    pipeline::cmd_ingest(&l).unwrap();
    let second = common::dir_snapshot(&l.cfg.out_dir);

    assert!(first.contains_key("demand.csv"));
    assert!(first.contains_key("manifest.json"));
    assert_eq!(first, second);
}

#[test]
fn same_seed_produces_identical_artifacts_across_directories() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    common::write_trips_csv(&trips, 4, 10, 12);

    let mut snapshots = Vec::new();
    for sub in ["out1", "out2"] {
        let mut cfg = common::small_config(&trips, &dir.path().join(sub));
        cfg.gbt.trees.n_trees = 5;
        let l = load(cfg);
        pipeline::cmd_ingest(&l).unwrap();
        pipeline::cmd_train(&l, Variant::Cml).unwrap();
        pipeline::cmd_evaluate(&l).unwrap();
        snapshots.push(common::dir_snapshot(&l.cfg.out_dir));
    }
    // The hash excludes out_dir, so the two runs are byte-identical.
    assert_eq!(snapshots[0], snapshots[1]);
    assert!(snapshots[0].contains_key("metrics_cml.json"));
}

#[test]
fn single_client_federation_stage_one_matches_cml() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    common::write_trips_csv(&trips, 4, 10, 13);
    let mut cfg = common::small_config(&trips, &dir.path().join("out"));
    cfg.gbt.trees.n_trees = 8;
    cfg.fed.n_clients = 1;
    cfg.fed.trees_per_client = 8;
    cfg.fed.p_train = 1.0;
    cfg.fed.e_local = 1;
    cfg.fed.e_global = 1;
    let l = load(cfg);

    pipeline::cmd_ingest(&l).unwrap();
    pipeline::cmd_train(&l, Variant::Cml).unwrap();
    pipeline::cmd_train(&l, Variant::HflGlobal).unwrap();

    for target in TARGETS {
        for h in HORIZONS {
            let cml: Ensemble = gbt::deserialize(
                &serde_json::to_string(&read_model_payload(&l, Variant::Cml, target, h)).unwrap(),
            )
            .unwrap();
            let doc = read_model_payload(&l, Variant::HflGlobal, target, h);
            let forest = velofed::fedlearn::deserialize_forest(
                &serde_json::to_string(&doc["forest"]).unwrap(),
            )
            .unwrap();

            // One client pooling every station sees exactly the CML training
            // set, so stage 1 reproduces the CML ensemble up to padding.
            assert_eq!(forest.client_order, vec![0]);
            assert_eq!(forest.base_scores, vec![cml.base_score]);
            assert_eq!(forest.trees.len(), 8);
            assert!(!cml.trees.is_empty() && cml.trees.len() <= 8);
            assert_eq!(&forest.trees[..cml.trees.len()], &cml.trees[..]);
            for pad in &forest.trees[cml.trees.len()..] {
                assert_eq!(*pad, Node::zero_leaf());
            }
        }
    }
}

#[test]
fn perfect_stub_model_yields_zero_metrics_and_single_variant_notice() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(&dir.path().join("unused.csv"), &dir.path().join("out"));
    cfg.dataset_name = "constant".into();
    let l = load(cfg);
    let paths = OutPaths::new(&l.cfg.out_dir);
    fs::create_dir_all(&l.cfg.out_dir).unwrap();

    // Constant demand of 4 bikes per hour at every station.
    let n = 300usize;
    let stations: Vec<String> = (0..4).map(|i| format!("S{i:03}")).collect();
    let store: std::collections::BTreeMap<String, DemandSeries> = stations
        .iter()
        .map(|s| {
            (
                s.clone(),
                DemandSeries {
                    station: s.clone(),
                    t0: common::t0(),
                    step_seconds: 3600,
                    arrivals: vec![4; n],
                    departures: vec![4; n],
                },
            )
        })
        .collect();
    ingest::write_demand_store(&paths.store(), &store).unwrap();
    let manifest = IngestManifest {
        t0: common::t0(),
        step_seconds: 3600,
        len: n,
        stations,
        parse: ParseReport::default(),
        clean: CleanReport::default(),
    };
    write_stamped(&paths.manifest(), &stamp(&l), &manifest).unwrap();

    // A base-score-only ensemble is a perfect oracle for constant demand.
    let spec = l.resolved_features().unwrap();
    let oracle = Ensemble {
        version: gbt::MODEL_SCHEMA_VERSION,
        base_score: 4.0,
        eta: l.cfg.gbt.eta,
        params: l.cfg.gbt.trees.clone(),
        feature_names: spec.feature_names(),
        trees: vec![Node::zero_leaf()],
    };
    let doc: Value = serde_json::from_str(&gbt::serialize(&oracle).unwrap()).unwrap();
    for target in TARGETS {
        for h in HORIZONS {
            write_stamped(&paths.model(Variant::Cml, target, h), &stamp(&l), &doc).unwrap();
        }
    }

    let summary = pipeline::cmd_evaluate(&l).unwrap();
    assert_eq!(summary.evaluated, vec![Variant::Cml]);
    assert!(!summary.compared);
    assert!(summary.notices.iter().any(|n| n.contains("only CML")));
    assert!(!paths.comparison().exists());

    let report = read_stamped::<MetricsReport>(&paths.metrics(Variant::Cml), &stamp(&l))
        .unwrap()
        .payload;
    assert_eq!(report.cells.len(), 12);
    for cell in &report.cells {
        assert_eq!(cell.smape, 0.0);
        assert_eq!(cell.maape, 0.0);
        assert_eq!(cell.mae, 0.0);
        assert_eq!(cell.rmse, 0.0);
    }

    let text = pipeline::cmd_report(&l).unwrap();
    assert!(text.contains("comparison unavailable"));
    assert!(paths.report().exists());
}

#[test]
fn evaluation_refuses_mismatched_stamps_and_partial_variants() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    common::write_trips_csv(&trips, 4, 10, 14);
    let mut cfg = common::small_config(&trips, &dir.path().join("out"));
    cfg.gbt.trees.n_trees = 5;
    let l = load(cfg.clone());
    pipeline::cmd_ingest(&l).unwrap();
    pipeline::cmd_train(&l, Variant::Cml).unwrap();

    // A different eta changes the config hash; artifacts are refused.
    let mut other = cfg;
    other.gbt.eta = 0.25;
    let err = pipeline::cmd_evaluate(&load(other)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err}");
    assert!(err.to_string().contains("re-run"), "got {err}");

    // A half-trained variant is an error that lists the absent tasks.
    fs::remove_file(OutPaths::new(&l.cfg.out_dir).model(Variant::Cml, TargetKind::Departures, 4))
        .unwrap();
    let err = pipeline::cmd_evaluate(&l).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err}");
    let msg = err.to_string();
    assert!(msg.contains("departures h4"), "got {msg}");
}

#[test]
fn environment_variables_override_paths_only() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    common::write_trips_csv(&trips, 4, 10, 15);
    // The config points at a bogus input and directory; the environment fixes both.
    let cfg = common::small_config(&dir.path().join("wrong.csv"), &dir.path().join("ignored"));
    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let real_out = dir.path().join("real_out");

    let out = common::run_cli(
        &["ingest", "--config", cfg_path.to_str().unwrap()],
        &[
            ("VELOFED_TRIPS_CSV", trips.to_str().unwrap()),
            ("VELOFED_OUT_DIR", real_out.to_str().unwrap()),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", common::stderr_of(&out));
    assert!(real_out.join("manifest.json").exists());
    assert!(!dir.path().join("ignored").exists());
}
