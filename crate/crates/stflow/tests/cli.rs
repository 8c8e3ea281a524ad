//! End-to-end runs of the `stflow` binary over the synthetic city fixture:
//! the full ingest / build-graph / train / evaluate / predict / export-plots
//! chain, determinism across repeat runs, and the documented exit codes.

mod common;

use std::fs;
use std::path::Path;

use common::{assert_success, run_cli, small_run_config, synthetic_trips_csv, write_file};
use stflow::artifact;
use stflow::checkpoint::Checkpoint;
use stflow::error::Error;

const DAYS: usize = 10;

/// Lay out a working directory with the fixture and config; returns the
/// config path.
fn setup(dir: &Path, out_name: &str) -> std::path::PathBuf {
    let trips = dir.join("trips.csv");
    write_file(&trips, &synthetic_trips_csv(DAYS));
    let out_dir = dir.join(out_name);
    let config_path = dir.join(format!("{out_name}.conf"));
    write_file(&config_path, &small_run_config(&trips, &out_dir, DAYS));
    config_path
}

fn run_chain(dir: &Path, out_name: &str) -> std::path::PathBuf {
    let config = setup(dir, out_name);
    let c = config.to_str().unwrap();
    assert_success(&run_cli(&["--config", c, "ingest"], dir), "ingest");
    assert_success(&run_cli(&["--config", c, "build-graph"], dir), "build-graph");
    assert_success(&run_cli(&["--config", c, "train"], dir), "train");
    assert_success(&run_cli(&["--config", c, "evaluate"], dir), "evaluate");
    assert_success(
        &run_cli(
            &["--config", c, "predict", "--at", "2021-06-10 12:00:00"],
            dir,
        ),
        "predict",
    );
    let ckpt = dir.join(out_name).join("checkpoint.bin");
    assert_success(
        &run_cli(
            &["--config", c, "export-plots", "--checkpoint", ckpt.to_str().unwrap()],
            dir,
        ),
        "export-plots",
    );
    dir.join(out_name)
}

#[test]
fn full_chain_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_chain(dir.path(), "run");

    for file in [
        "registry.csv",
        "traffic.bin",
        "traffic.csv",
        "ingest_report.txt",
        "distance.bin",
        "distance.csv",
        "propagation.bin",
        "propagation.csv",
        "checkpoint.bin",
        "history.csv",
        "metrics.txt",
        "metrics.csv",
        "baseline_persistence.csv",
        "baseline_historical.csv",
        "forecast.csv",
        "predictions.csv",
        "plots/fig1_per_step_mean.csv",
        "plots/fig2_per_station_mean.csv",
        "plots/fig2_histogram.csv",
        "plots/fig4_distance.csv",
        "plots/fig5_per_step_comparison.csv",
        "plots/fig6_per_station_comparison.csv",
        "plots/fig6_histograms.csv",
        "manifest-ingest.json",
        "manifest-train.json",
    ] {
        assert!(out.join(file).exists(), "missing {file}");
    }

    // Ingest accounting: the fixture plants exactly 3 bad rows.
    let report = fs::read_to_string(out.join("ingest_report.txt")).unwrap();
    assert!(report.contains("rows_dropped_malformed = 1"), "{report}");
    assert!(report.contains("rows_dropped_missing_station = 1"), "{report}");
    assert!(report.contains("rows_dropped_negative_duration = 1"), "{report}");

    // The registry holds the six synthetic stations in id order.
    let registry = artifact::read_registry(&out.join("registry.csv")).unwrap();
    assert_eq!(registry.len(), 6);
    let ids: Vec<&str> = registry.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["S01", "S02", "S03", "S04", "S05", "S06"]);

    // Traffic CSV and binary agree.
    let bin = artifact::read_traffic(&out.join("traffic.bin")).unwrap();
    let csv = artifact::read_traffic_csv(&out.join("traffic.csv")).unwrap();
    assert_eq!(bin, csv);
    assert_eq!(bin.t_bins(), DAYS * 48);

    // The propagation operator is well-formed.
    let p = artifact::read_propagation(&out.join("propagation.bin")).unwrap();
    assert_eq!(p.n(), 6);
    assert!(p.spectral_radius_estimate(200) <= 1.0 + 1e-9);

    // Metrics row parses and respects the power-mean inequality.
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = metrics.lines().nth(1).unwrap();
    let cells: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    let (mae, rmse) = (cells[0], cells[1]);
    assert!(rmse >= mae && mae >= 0.0);

    // Forecast covers every station once per horizon step.
    let forecast = fs::read_to_string(out.join("forecast.csv")).unwrap();
    assert_eq!(forecast.lines().count(), 1 + 6);
    assert!(forecast.lines().nth(1).unwrap().starts_with("2021-06-10 12:00:00,S01,"));
}

#[test]
fn repeat_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = run_chain(dir.path(), "a");
    let out_b = run_chain(dir.path(), "b");
    for file in [
        "registry.csv",
        "traffic.bin",
        "checkpoint.bin",
        "history.csv",
        "metrics.txt",
        "predictions.csv",
        "plots/fig5_per_step_comparison.csv",
    ] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn exported_aggregates_match_detail_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_chain(dir.path(), "agg");

    // Re-derive the fig5 series from the detail table.
    let mut rdr = csv::Reader::from_path(out.join("predictions.csv")).unwrap();
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<String, (f64, f64, u64)> = BTreeMap::new();
    for record in rdr.records() {
        let r = record.unwrap();
        let e = groups.entry(r[0].to_string()).or_insert((0.0, 0.0, 0));
        e.0 += r[2].parse::<f64>().unwrap();
        e.1 += r[3].parse::<f64>().unwrap();
        e.2 += 1;
    }
    let mut rdr = csv::Reader::from_path(out.join("plots/fig5_per_step_comparison.csv")).unwrap();
    let mut fig5_rows = 0;
    for record in rdr.records() {
        let r = record.unwrap();
        let (sum_t, sum_p, c) = groups[&r[0]];
        let want_t: f64 = r[1].parse().unwrap();
        let want_p: f64 = r[2].parse().unwrap();
        assert_eq!(want_t.to_bits(), (sum_t / c as f64).to_bits());
        assert_eq!(want_p.to_bits(), (sum_p / c as f64).to_bits());
        fig5_rows += 1;
    }
    assert_eq!(fig5_rows, groups.len());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_chain(dir.path(), "codes");
    let config = dir.path().join("codes.conf");
    let c = config.to_str().unwrap();

    // Unknown config key: usage error, exit 1.
    let bad_conf = dir.path().join("bad.conf");
    write_file(&bad_conf, "model.wat = 3\n");
    let output = run_cli(&["--config", bad_conf.to_str().unwrap(), "ingest"], dir.path());
    assert_eq!(output.status.code(), Some(1));

    // Missing input file: data error, exit 2.
    let output = run_cli(
        &["--config", c, "ingest", "--trips", "nope.csv"],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(2));

    // Corrupt checkpoint magic: data error, exit 2, named version error.
    let ckpt = out.join("checkpoint.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[12] = b'9'; // version digit of "STFLOW-CKPT v1"
    fs::write(out.join("tampered.bin"), &bytes).unwrap();
    let output = run_cli(
        &[
            "--config",
            c,
            "evaluate",
            "--checkpoint",
            out.join("tampered.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("version"), "{stderr}");

    // Negative learning rate: parameter error, exit 1.
    let lr_conf = dir.path().join("lr.conf");
    let base = fs::read_to_string(&config).unwrap();
    write_file(
        &lr_conf,
        &base.replace("train.learning_rate = 0.004", "train.learning_rate = -1"),
    );
    let output = run_cli(&["--config", lr_conf.to_str().unwrap(), "train"], dir.path());
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn fingerprint_mismatch_refuses_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_chain(dir.path(), "fp");
    let config = dir.path().join("fp.conf");

    // Forge a checkpoint with a different fingerprint.
    let mut ckpt = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    ckpt.registry_fingerprint = "0".repeat(64);
    ckpt.save(&out.join("forged.bin")).unwrap();

    let output = run_cli(
        &[
            "--config",
            config.to_str().unwrap(),
            "evaluate",
            "--checkpoint",
            out.join("forged.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("fingerprint"), "{stderr}");

    // The library surfaces the same condition as a typed error.
    let registry = artifact::read_registry(&out.join("registry.csv")).unwrap();
    let err = ckpt.verify_registry(&registry).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }));
}

#[test]
fn seed_override_changes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "seeded");
    let c = config.to_str().unwrap();
    assert_success(&run_cli(&["--config", c, "ingest"], dir.path()), "ingest");
    assert_success(&run_cli(&["--config", c, "train"], dir.path()), "train");
    let first = fs::read(dir.path().join("seeded/checkpoint.bin")).unwrap();
    assert_success(
        &run_cli(&["--config", c, "--seed", "7", "train"], dir.path()),
        "train with seed",
    );
    let second = fs::read(dir.path().join("seeded/checkpoint.bin")).unwrap();
    assert_ne!(first, second);
}
