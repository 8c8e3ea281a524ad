//! On-disk artifact formats.
//!
//! Binary containers carry a single text header line followed by
//! little-endian payloads; every CSV alternative is lossless. All writes go
//! through a temp-file-plus-rename so a crash never leaves a corrupt
//! artifact behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{DistanceMatrix, PropagationOperator};
use crate::ingest::{
    format_timestamp, parse_timestamp, Histogram, IngestReport, Station, StationRegistry,
    StatsBundle, TrafficTensor, BIN_SECONDS,
};
use crate::pipeline::{EpochRecord, MetricsReport, PredictionTable};

const TRAFFIC_MAGIC: &str = "STFLOW-TRAFFIC v1";
const MATRIX_MAGIC: &str = "STFLOW-MATRIX v1";

/// Write atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile::Builder::new()
        .prefix(".stflow-tmp")
        .tempfile_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(String, &'a [u8])> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Artifact(format!("{}: missing header line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| Error::Artifact(format!("{}: header is not UTF-8", path.display())))?;
    Ok((header.to_string(), &bytes[pos + 1..]))
}

fn check_magic(header: &str, expected: &str) -> Result<Vec<(String, String)>> {
    let Some(rest) = header.strip_prefix(expected) else {
        let found = header
            .split_whitespace()
            .take(2)
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::ArtifactVersion {
            expected: expected.to_string(),
            found,
        });
    };
    Ok(rest
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn header_field<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Artifact(format!("header field {key} missing or unparsable")))
}

// ---- traffic tensor ----

pub fn write_traffic(path: &Path, traffic: &TrafficTensor) -> Result<()> {
    let mut bytes = format!(
        "{TRAFFIC_MAGIC} T={} N={} origin={} bin={}\n",
        traffic.t_bins(),
        traffic.n_stations(),
        traffic.origin(),
        BIN_SECONDS
    )
    .into_bytes();
    bytes.reserve(traffic.values().len() * 4);
    for &v in traffic.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn read_traffic(path: &Path) -> Result<TrafficTensor> {
    let bytes = fs::read(path)?;
    let (header, payload) = split_header(&bytes, path)?;
    let fields = check_magic(&header, TRAFFIC_MAGIC)?;
    let t: usize = header_field(&fields, "T")?;
    let n: usize = header_field(&fields, "N")?;
    let origin: i64 = header_field(&fields, "origin")?;
    let bin: i64 = header_field(&fields, "bin")?;
    if bin != BIN_SECONDS {
        return Err(Error::Artifact(format!(
            "{}: unsupported bin length {bin}",
            path.display()
        )));
    }
    if payload.len() != t * n * 4 {
        return Err(Error::Artifact(format!(
            "{}: payload holds {} bytes, header wants {}",
            path.display(),
            payload.len(),
            t * n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TrafficTensor::from_parts(t, n, origin, values)
}

/// Lossless wide CSV: one row per bin, `bin_timestamp` then one column per
/// station in registry index order.
pub fn write_traffic_csv(path: &Path, traffic: &TrafficTensor) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["bin_timestamp".to_string()];
    header.extend((0..traffic.n_stations()).map(|i| format!("station_{i}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for t in 0..traffic.t_bins() {
        let mut record = vec![format_timestamp(traffic.bin_timestamp(t))];
        record.extend(traffic.row(t).iter().map(u32::to_string));
        wtr.write_record(&record).map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn read_traffic_csv(path: &Path) -> Result<TrafficTensor> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let n = rdr.headers().map_err(csv_err)?.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::Artifact(format!("{}: no station columns", path.display())));
    }
    let mut origin = 0i64;
    let mut values: Vec<u32> = Vec::new();
    let mut t = 0usize;
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let ts = parse_timestamp(record.get(0).unwrap_or_default())?;
        if t == 0 {
            origin = ts;
        } else if ts != origin + t as i64 * BIN_SECONDS {
            return Err(Error::Artifact(format!(
                "{}: bins are not contiguous at row {t}",
                path.display()
            )));
        }
        for i in 1..=n {
            let cell = record.get(i).unwrap_or_default();
            values.push(cell.parse().map_err(|_| {
                Error::Artifact(format!("{}: bad count {cell:?} at row {t}", path.display()))
            })?);
        }
        t += 1;
    }
    TrafficTensor::from_parts(t, n, origin, values)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Artifact(format!("csv: {e}"))
}

// ---- station registry ----

pub fn write_registry(path: &Path, registry: &StationRegistry) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["station_id", "name", "latitude", "longitude", "index"])
        .map_err(csv_err)?;
    for s in registry.iter() {
        wtr.write_record([
            s.id.as_str(),
            s.name.as_str(),
            &s.latitude.to_string(),
            &s.longitude.to_string(),
            &s.index.to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn read_registry(path: &Path) -> Result<StationRegistry> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let want = ["station_id", "name", "latitude", "longitude", "index"];
    let headers = rdr.headers().map_err(csv_err)?;
    if headers.iter().ne(want) {
        return Err(Error::Artifact(format!(
            "{}: registry header mismatch",
            path.display()
        )));
    }
    let mut stations = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(csv_err)?;
        let get = |i: usize| r.get(i).unwrap_or_default();
        stations.push(Station {
            id: get(0).to_string(),
            name: get(1).to_string(),
            latitude: get(2)
                .parse()
                .map_err(|_| Error::Artifact(format!("bad latitude {:?}", get(2))))?,
            longitude: get(3)
                .parse()
                .map_err(|_| Error::Artifact(format!("bad longitude {:?}", get(3))))?,
            index: get(4)
                .parse()
                .map_err(|_| Error::Artifact(format!("bad index {:?}", get(4))))?,
        });
    }
    StationRegistry::from_stations(stations)
}

// ---- square matrices ----

fn write_square_matrix(path: &Path, n: usize, values: &[f64]) -> Result<()> {
    let mut bytes = format!("{MATRIX_MAGIC} N={n}\n").into_bytes();
    bytes.reserve(values.len() * 8);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

fn read_square_matrix(path: &Path) -> Result<(usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let (header, payload) = split_header(&bytes, path)?;
    let fields = check_magic(&header, MATRIX_MAGIC)?;
    let n: usize = header_field(&fields, "N")?;
    if payload.len() != n * n * 8 {
        return Err(Error::Artifact(format!(
            "{}: payload holds {} bytes, header wants {}",
            path.display(),
            payload.len(),
            n * n * 8
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, values))
}

pub fn write_distance_matrix(path: &Path, d: &DistanceMatrix) -> Result<()> {
    write_square_matrix(path, d.n(), d.values())
}

pub fn read_distance_matrix(path: &Path) -> Result<DistanceMatrix> {
    let (n, values) = read_square_matrix(path)?;
    DistanceMatrix::from_parts(n, values)
}

pub fn write_propagation(path: &Path, p: &PropagationOperator) -> Result<()> {
    write_square_matrix(path, p.n(), p.values())
}

pub fn read_propagation(path: &Path) -> Result<PropagationOperator> {
    let (n, values) = read_square_matrix(path)?;
    PropagationOperator::from_parts(n, values)
}

/// Plain grid CSV (no header): N rows of N values, for heat-map plotting.
pub fn write_matrix_csv(path: &Path, n: usize, values: &[f64]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in values.chunks(n) {
        wtr.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

// ---- ingest report and stats ----

pub fn render_ingest_report(report: &IngestReport) -> String {
    format!(
        "rows_read = {}\nrows_kept = {}\nrows_dropped_malformed = {}\nrows_dropped_missing_station = {}\nrows_dropped_negative_duration = {}\n",
        report.rows_read,
        report.rows_kept,
        report.rows_dropped_malformed,
        report.rows_dropped_missing_station,
        report.rows_dropped_negative_duration
    )
}

pub fn write_ingest_report(path: &Path, report: &IngestReport) -> Result<()> {
    atomic_write(path, render_ingest_report(report).as_bytes())
}

/// Per-time-step network mean: `bin_timestamp,mean_traffic`.
pub fn write_per_step_stats(path: &Path, traffic: &TrafficTensor, stats: &StatsBundle) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_timestamp", "mean_traffic"]).map_err(csv_err)?;
    for (t, &mean) in stats.per_step_mean.iter().enumerate() {
        wtr.write_record([format_timestamp(traffic.bin_timestamp(t)), mean.to_string()])
            .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

/// Per-station lifetime mean: `station_index,station_id,mean_traffic`.
pub fn write_per_station_stats(
    path: &Path,
    registry: &StationRegistry,
    stats: &StatsBundle,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["station_index", "station_id", "mean_traffic"])
        .map_err(csv_err)?;
    for (i, &mean) in stats.per_station_mean.iter().enumerate() {
        wtr.write_record([
            i.to_string(),
            registry.station(i).id.clone(),
            mean.to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn write_histogram(path: &Path, hist: &Histogram) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_left", "bin_right", "count"]).map_err(csv_err)?;
    for (b, &count) in hist.counts.iter().enumerate() {
        let (lo, hi) = hist.bin_range(b);
        wtr.write_record([lo.to_string(), hi.to_string(), count.to_string()])
            .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

// ---- training history, metrics, predictions ----

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["epoch", "train_loss", "val_loss", "is_best"]).map_err(csv_err)?;
    for r in history {
        wtr.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.is_best.to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn render_metrics(report: &MetricsReport) -> String {
    format!(
        "mae = {}\nrmse = {}\nmape_masked = {}\nmape_raw = {}\nmasked_cells = {}\ntotal_cells = {}\nmape_raw_note = {}\n",
        report.mae,
        report.rmse,
        report.mape_masked,
        report.mape_raw,
        report.masked_cells,
        report.total_cells,
        if report.mape_raw_unreliable {
            "raw MAPE unreliable: zero-truth cells dominate the denominator"
        } else {
            "ok"
        }
    )
}

pub fn write_metrics(path_txt: &Path, path_csv: &Path, report: &MetricsReport) -> Result<()> {
    atomic_write(path_txt, render_metrics(report).as_bytes())?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["mae", "rmse", "mape_masked"]).map_err(csv_err)?;
    wtr.write_record([
        report.mae.to_string(),
        report.rmse.to_string(),
        report.mape_masked.to_string(),
    ])
    .map_err(csv_err)?;
    atomic_write(path_csv, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

/// Detail table: `bin_timestamp,station_id,y_true,y_pred` with reported
/// (zero-clipped) predictions.
pub fn write_predictions(
    path: &Path,
    table: &PredictionTable,
    registry: &StationRegistry,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_timestamp", "station_id", "y_true", "y_pred"]).map_err(csv_err)?;
    for row in &table.rows {
        wtr.write_record([
            format_timestamp(row.timestamp),
            registry.station(row.station).id.clone(),
            row.y_true.to_string(),
            row.y_pred().to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

/// Predicted vs true network mean per time step.
pub fn write_per_step_comparison(path: &Path, series: &[(i64, f64, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_timestamp", "mean_true", "mean_pred"]).map_err(csv_err)?;
    for &(ts, t, p) in series {
        wtr.write_record([format_timestamp(ts), t.to_string(), p.to_string()])
            .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

/// Predicted vs true per-station mean over the exported window.
pub fn write_per_station_comparison(
    path: &Path,
    series: &[(usize, f64, f64)],
    registry: &StationRegistry,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["station_id", "mean_true", "mean_pred"]).map_err(csv_err)?;
    for &(s, t, p) in series {
        wtr.write_record([
            registry.station(s).id.clone(),
            t.to_string(),
            p.to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn write_comparison_histograms(
    path: &Path,
    truth: &Histogram,
    pred: &Histogram,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_left", "bin_right", "count_true", "count_pred"]).map_err(csv_err)?;
    let bins = truth.counts.len().max(pred.counts.len());
    for b in 0..bins {
        let (lo, hi) = truth.bin_range(b);
        wtr.write_record([
            lo.to_string(),
            hi.to_string(),
            truth.counts.get(b).copied().unwrap_or(0).to_string(),
            pred.counts.get(b).copied().unwrap_or(0).to_string(),
        ])
        .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

/// Forecast-only export for a single prediction call.
pub fn write_forecast(
    path: &Path,
    rows: &[(i64, String, f64)], // timestamp, station id, clipped prediction
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["bin_timestamp", "station_id", "y_pred"]).map_err(csv_err)?;
    for (ts, id, pred) in rows {
        wtr.write_record([format_timestamp(*ts), id.clone(), pred.to_string()])
            .map_err(csv_err)?;
    }
    atomic_write(path, &wtr.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

// ---- run manifest ----

/// Provenance record: config hash, seed, and input fingerprints. Contains
/// no clock so identical runs write identical manifests.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Artifact(format!("manifest: {e}")))?;
        atomic_write(path, format!("{json}\n").as_bytes())
    }
}
