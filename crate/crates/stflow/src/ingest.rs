//! Trip ingestion: stream raw trip CSVs into cleaned records, build the
//! deterministic station registry, and bin traffic (departures + arrivals)
//! into the T x N tensor the model consumes.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDateTime;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bin length: 30 minutes.
pub const BIN_SECONDS: i64 = 1800;

/// Histogram bin width for per-station mean traffic.
pub const STATS_HIST_WIDTH: f64 = 0.25;

/// One cleaned ride. Timestamps are seconds on the file's own clock; the
/// raw data carries no zone suffix and is never shifted.
#[derive(Clone, Debug, PartialEq)]
pub struct TripRecord {
    pub started_at: i64,
    pub ended_at: i64,
    pub start_station_id: String,
    pub start_station_name: String,
    pub end_station_id: String,
    pub end_station_name: String,
    pub start_lat: f64,
    pub start_lng: f64,
    pub end_lat: f64,
    pub end_lng: f64,
}

/// Row accounting for one parse pass; `rows_read` always equals
/// `rows_kept` plus the dropped counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_kept: u64,
    pub rows_dropped_malformed: u64,
    pub rows_dropped_missing_station: u64,
    pub rows_dropped_negative_duration: u64,
}

impl IngestReport {
    pub fn rows_dropped(&self) -> u64 {
        self.rows_dropped_malformed
            + self.rows_dropped_missing_station
            + self.rows_dropped_negative_duration
    }

    pub fn balanced(&self) -> bool {
        self.rows_read == self.rows_kept + self.rows_dropped()
    }
}

/// Parse `YYYY-MM-DD HH:MM:SS` (an optional fractional part is truncated).
pub fn parse_timestamp(s: &str) -> Result<i64> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M:%S%.f")
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|e| Error::Data(format!("bad timestamp {s:?}: {e}")))
}

/// Inverse of [`parse_timestamp`], used by every CSV export.
pub fn format_timestamp(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.naive_utc().format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

const REQUIRED_COLUMNS: [&str; 10] = [
    "started_at",
    "ended_at",
    "start_station_name",
    "start_station_id",
    "end_station_name",
    "end_station_id",
    "start_lat",
    "start_lng",
    "end_lat",
    "end_lng",
];

struct Columns {
    started_at: usize,
    ended_at: usize,
    start_station_name: usize,
    start_station_id: usize,
    end_station_name: usize,
    end_station_id: usize,
    start_lat: usize,
    start_lng: usize,
    end_lat: usize,
    end_lng: usize,
}

impl Columns {
    fn resolve(header: &csv::StringRecord) -> Result<Columns> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let missing: Vec<&str> = REQUIRED_COLUMNS
            .iter()
            .copied()
            .filter(|c| find(c).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Ingest(format!(
                "header is missing required columns: {}",
                missing.join(", ")
            )));
        }
        let at = |name: &str| find(name).unwrap();
        Ok(Columns {
            started_at: at("started_at"),
            ended_at: at("ended_at"),
            start_station_name: at("start_station_name"),
            start_station_id: at("start_station_id"),
            end_station_name: at("end_station_name"),
            end_station_id: at("end_station_id"),
            start_lat: at("start_lat"),
            start_lng: at("start_lng"),
            end_lat: at("end_lat"),
            end_lng: at("end_lng"),
        })
    }
}

/// Streaming trip parser. Yields one [`TripRecord`] per valid row in file
/// order; rows that fail validation are counted by cause in the report and
/// skipped. The only `Err` item is a fatal mid-stream I/O failure.
pub struct TripStream<'a, R: Read> {
    records: csv::ByteRecordsIntoIter<R>,
    cols: Columns,
    report: &'a mut IngestReport,
}

/// Open a trip CSV stream. A missing or incomplete header is fatal;
/// individual bad rows never are.
pub fn parse_trips<R: Read>(reader: R, report: &mut IngestReport) -> Result<TripStream<'_, R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Ingest(format!("cannot read header: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(Error::Ingest("empty header row".into()));
    }
    let cols = Columns::resolve(&header)?;
    Ok(TripStream {
        records: rdr.into_byte_records(),
        cols,
        report,
    })
}

enum RowOutcome {
    Keep(TripRecord),
    Malformed,
    MissingStation,
    NegativeDuration,
}

impl<R: Read> TripStream<'_, R> {
    fn classify(&self, record: &csv::ByteRecord) -> RowOutcome {
        let field = |idx: usize| -> Option<&str> {
            record.get(idx).and_then(|b| std::str::from_utf8(b).ok())
        };
        // Station-id presence is checked first: a row without an id is a
        // missing-station drop even when its other fields are unparsable.
        let Some(start_id) = field(self.cols.start_station_id) else {
            return RowOutcome::Malformed;
        };
        let Some(end_id) = field(self.cols.end_station_id) else {
            return RowOutcome::Malformed;
        };
        let (start_id, end_id) = (start_id.trim(), end_id.trim());
        if start_id.is_empty() || end_id.is_empty() {
            return RowOutcome::MissingStation;
        }

        let parse_ts = |idx: usize| field(idx).and_then(|s| parse_timestamp(s).ok());
        let parse_coord = |idx: usize| field(idx).and_then(|s| s.trim().parse::<f64>().ok());
        let (Some(started_at), Some(ended_at)) =
            (parse_ts(self.cols.started_at), parse_ts(self.cols.ended_at))
        else {
            return RowOutcome::Malformed;
        };
        let (Some(start_lat), Some(start_lng), Some(end_lat), Some(end_lng)) = (
            parse_coord(self.cols.start_lat),
            parse_coord(self.cols.start_lng),
            parse_coord(self.cols.end_lat),
            parse_coord(self.cols.end_lng),
        ) else {
            return RowOutcome::Malformed;
        };
        let lat_ok = |v: f64| (-90.0..=90.0).contains(&v);
        let lng_ok = |v: f64| (-180.0..=180.0).contains(&v);
        if !(lat_ok(start_lat) && lat_ok(end_lat) && lng_ok(start_lng) && lng_ok(end_lng)) {
            return RowOutcome::Malformed;
        }
        if ended_at < started_at {
            return RowOutcome::NegativeDuration;
        }
        let name = |idx: usize| field(idx).unwrap_or("").trim().to_string();
        RowOutcome::Keep(TripRecord {
            started_at,
            ended_at,
            start_station_id: start_id.to_string(),
            start_station_name: name(self.cols.start_station_name),
            end_station_id: end_id.to_string(),
            end_station_name: name(self.cols.end_station_name),
            start_lat,
            start_lng,
            end_lat,
            end_lng,
        })
    }
}

impl<R: Read> Iterator for TripStream<'_, R> {
    type Item = Result<TripRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.records.next()? {
                Ok(record) => {
                    self.report.rows_read += 1;
                    match self.classify(&record) {
                        RowOutcome::Keep(trip) => {
                            self.report.rows_kept += 1;
                            return Some(Ok(trip));
                        }
                        RowOutcome::Malformed => self.report.rows_dropped_malformed += 1,
                        RowOutcome::MissingStation => {
                            self.report.rows_dropped_missing_station += 1
                        }
                        RowOutcome::NegativeDuration => {
                            self.report.rows_dropped_negative_duration += 1
                        }
                    }
                }
                Err(e) => {
                    if e.is_io_error() {
                        return Some(Err(Error::Ingest(format!("stream failed mid-read: {e}"))));
                    }
                    // Structural row problems (field count, bad UTF-8 in a
                    // quoted field) are per-row drops, not fatal.
                    self.report.rows_read += 1;
                    self.report.rows_dropped_malformed += 1;
                }
            }
        }
    }
}

/// Collect a whole stream into memory; test- and small-file-sized inputs.
pub fn collect_trips<R: Read>(reader: R, report: &mut IngestReport) -> Result<Vec<TripRecord>> {
    parse_trips(reader, report)?.collect()
}

/// One docking station. Coordinates are the arithmetic mean over every
/// occurrence of the id in either trip role; the index is the station's
/// position in lexicographic id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub index: usize,
}

/// Deterministic station table: indices form a contiguous bijection 0..N
/// in lexicographic id order.
#[derive(Clone, Debug, PartialEq)]
pub struct StationRegistry {
    stations: Vec<Station>,
}

impl StationRegistry {
    pub fn from_stations(stations: Vec<Station>) -> Result<Self> {
        for (i, s) in stations.iter().enumerate() {
            if s.index != i {
                return Err(Error::Data(format!(
                    "registry: station {} carries index {} at position {i}",
                    s.id, s.index
                )));
            }
            if i > 0 && stations[i - 1].id >= s.id {
                return Err(Error::Data(format!(
                    "registry: ids out of lexicographic order near {}",
                    s.id
                )));
            }
        }
        if stations.is_empty() {
            return Err(Error::Data("no stations".into()));
        }
        Ok(StationRegistry { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Station> {
        self.stations.iter()
    }

    pub fn station(&self, index: usize) -> &Station {
        &self.stations[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
    }

    /// SHA-256 over the newline-joined id list; binds checkpoints to a
    /// station ordering.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.stations {
            hasher.update(s.id.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registry restricted to `indices` (ascending); stations are reindexed
    /// 0..k and stay in lexicographic order.
    pub fn subset(&self, indices: &[usize]) -> Result<StationRegistry> {
        let mut stations = Vec::with_capacity(indices.len());
        for (new_index, &old) in indices.iter().enumerate() {
            if old >= self.stations.len() {
                return Err(Error::Data(format!("subset: index {old} out of range")));
            }
            if new_index > 0 && indices[new_index - 1] >= old {
                return Err(Error::Data("subset: indices must be strictly ascending".into()));
            }
            let mut s = self.stations[old].clone();
            s.index = new_index;
            stations.push(s);
        }
        StationRegistry::from_stations(stations)
    }
}

#[derive(Default)]
struct StationAccumulator {
    name: Option<String>,
    lat_sum: f64,
    lng_sum: f64,
    occurrences: u64,
}

/// Incremental registry construction; a single sequential reduction.
#[derive(Default)]
pub struct RegistryBuilder {
    acc: BTreeMap<String, StationAccumulator>,
}

impl RegistryBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, trip: &TripRecord) {
        self.observe(
            &trip.start_station_id,
            &trip.start_station_name,
            trip.start_lat,
            trip.start_lng,
        );
        self.observe(
            &trip.end_station_id,
            &trip.end_station_name,
            trip.end_lat,
            trip.end_lng,
        );
    }

    fn observe(&mut self, id: &str, name: &str, lat: f64, lng: f64) {
        let entry = self.acc.entry(id.to_string()).or_default();
        if entry.name.is_none() && !name.is_empty() {
            entry.name = Some(name.to_string());
        }
        entry.lat_sum += lat;
        entry.lng_sum += lng;
        entry.occurrences += 1;
    }

    pub fn finish(self) -> Result<StationRegistry> {
        if self.acc.is_empty() {
            return Err(Error::Data("no stations".into()));
        }
        let stations = self
            .acc
            .into_iter()
            .enumerate()
            .map(|(index, (id, acc))| Station {
                name: acc.name.unwrap_or_else(|| id.clone()),
                id,
                latitude: acc.lat_sum / acc.occurrences as f64,
                longitude: acc.lng_sum / acc.occurrences as f64,
                index,
            })
            .collect();
        StationRegistry::from_stations(stations)
    }
}

/// One station per distinct id appearing as start or end of any trip.
pub fn build_station_registry<I, B>(trips: I) -> Result<StationRegistry>
where
    I: IntoIterator<Item = B>,
    B: std::borrow::Borrow<TripRecord>,
{
    let mut builder = RegistryBuilder::new();
    for trip in trips {
        builder.add(trip.borrow());
    }
    builder.finish()
}

/// T x N grid of non-negative traffic counts: departures from a station in
/// a bin plus arrivals at it. Bins are half-open `[edge, edge + 1800)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficTensor {
    values: Vec<u32>,
    t_bins: usize,
    n_stations: usize,
    origin: i64,
}

impl TrafficTensor {
    pub fn from_parts(t_bins: usize, n_stations: usize, origin: i64, values: Vec<u32>) -> Result<Self> {
        if values.len() != t_bins * n_stations {
            return Err(Error::Data(format!(
                "traffic tensor: {} values for {t_bins} x {n_stations}",
                values.len()
            )));
        }
        Ok(TrafficTensor {
            values,
            t_bins,
            n_stations,
            origin,
        })
    }

    pub fn t_bins(&self) -> usize {
        self.t_bins
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    /// Left edge of bin 0 (seconds).
    pub fn origin(&self) -> i64 {
        self.origin
    }

    pub fn bin_seconds(&self) -> i64 {
        BIN_SECONDS
    }

    /// Left edge of bin `t`.
    pub fn bin_timestamp(&self, t: usize) -> i64 {
        self.origin + t as i64 * BIN_SECONDS
    }

    pub fn value(&self, t: usize, n: usize) -> u32 {
        self.values[t * self.n_stations + n]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.values[t * self.n_stations..(t + 1) * self.n_stations]
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    pub fn station_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.n_stations];
        for row in self.values.chunks(self.n_stations) {
            for (tot, &v) in totals.iter_mut().zip(row) {
                *tot += v as u64;
            }
        }
        totals
    }

    /// Indices of the `k` highest-total stations, ties broken toward the
    /// lower index, returned in ascending index order.
    pub fn top_stations(&self, k: usize) -> Vec<usize> {
        let totals = self.station_totals();
        let mut order: Vec<usize> = (0..self.n_stations).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(totals[i]), i));
        let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
        chosen.sort_unstable();
        chosen
    }

    /// Column-subset of the tensor, stations reordered to `indices`.
    pub fn select_stations(&self, indices: &[usize]) -> Result<TrafficTensor> {
        if indices.iter().any(|&i| i >= self.n_stations) {
            return Err(Error::Data("select_stations: index out of range".into()));
        }
        let mut values = Vec::with_capacity(self.t_bins * indices.len());
        for t in 0..self.t_bins {
            let row = self.row(t);
            values.extend(indices.iter().map(|&i| row[i]));
        }
        TrafficTensor::from_parts(self.t_bins, indices.len(), self.origin, values)
    }
}

/// Incremental traffic aggregation; endpoint events land independently, so
/// a trip may contribute only its in-range endpoint.
pub struct TrafficBuilder<'r> {
    registry: &'r StationRegistry,
    range_start: i64,
    range_end: i64,
    values: Vec<u32>,
    t_bins: usize,
}

impl<'r> TrafficBuilder<'r> {
    pub fn new(registry: &'r StationRegistry, range_start: i64, range_end: i64) -> Result<Self> {
        if range_end <= range_start {
            return Err(Error::Param(format!(
                "traffic range: end {} must exceed start {}",
                format_timestamp(range_end),
                format_timestamp(range_start)
            )));
        }
        if range_start.rem_euclid(BIN_SECONDS) != 0 || range_end.rem_euclid(BIN_SECONDS) != 0 {
            return Err(Error::Param(
                "traffic range boundaries must align to 30-minute edges".into(),
            ));
        }
        let t_bins = ((range_end - range_start) / BIN_SECONDS) as usize;
        Ok(TrafficBuilder {
            registry,
            range_start,
            range_end,
            values: vec![0; t_bins * registry.len()],
            t_bins,
        })
    }

    pub fn add(&mut self, trip: &TripRecord) -> Result<()> {
        self.event(trip.started_at, &trip.start_station_id)?;
        self.event(trip.ended_at, &trip.end_station_id)
    }

    fn event(&mut self, ts: i64, station_id: &str) -> Result<()> {
        if ts < self.range_start || ts >= self.range_end {
            return Ok(());
        }
        let Some(idx) = self.registry.index_of(station_id) else {
            return Err(Error::Data(format!(
                "trip references station {station_id:?} absent from the registry"
            )));
        };
        let bin = ((ts - self.range_start) / BIN_SECONDS) as usize;
        self.values[bin * self.registry.len() + idx] += 1;
        Ok(())
    }

    pub fn finish(self) -> TrafficTensor {
        TrafficTensor {
            values: self.values,
            t_bins: self.t_bins,
            n_stations: self.registry.len(),
            origin: self.range_start,
        }
    }
}

/// Bin every in-range endpoint event of `trips` over `[range_start, range_end)`.
pub fn aggregate_traffic<I, B>(
    trips: I,
    registry: &StationRegistry,
    range_start: i64,
    range_end: i64,
) -> Result<TrafficTensor>
where
    I: IntoIterator<Item = B>,
    B: std::borrow::Borrow<TripRecord>,
{
    let mut builder = TrafficBuilder::new(registry, range_start, range_end)?;
    for trip in trips {
        builder.add(trip.borrow())?;
    }
    Ok(builder.finish())
}

/// Histogram over per-station mean traffic, fixed-width bins from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bin_width: f64) -> Histogram {
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let bins = (max / bin_width).floor() as usize + 1;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let mut b = (v / bin_width).floor() as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        Histogram { bin_width, counts }
    }

    pub fn bin_range(&self, b: usize) -> (f64, f64) {
        (b as f64 * self.bin_width, (b + 1) as f64 * self.bin_width)
    }

    /// Index of the fullest bin (ties toward the lower bin).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    /// Largest local maximum whose bin center falls inside `[lo, hi]`.
    pub fn local_peak_in(&self, lo: f64, hi: f64) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 0..self.counts.len() {
            let center = (i as f64 + 0.5) * self.bin_width;
            if center < lo || center > hi || self.counts[i] == 0 {
                continue;
            }
            let left_ok = i == 0 || self.counts[i - 1] <= self.counts[i];
            let right_ok = i + 1 >= self.counts.len() || self.counts[i + 1] <= self.counts[i];
            if left_ok && right_ok && best.is_none_or(|b| self.counts[i] > self.counts[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Aggregate series behind the traffic plots: the per-time-step network
/// mean and the per-station lifetime mean with its distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsBundle {
    pub per_step_mean: Vec<f64>,
    pub per_station_mean: Vec<f64>,
    pub histogram: Histogram,
}

pub fn traffic_stats(traffic: &TrafficTensor) -> Result<StatsBundle> {
    let (t, n) = (traffic.t_bins(), traffic.n_stations());
    if t == 0 {
        return Err(Error::Data("traffic stats: empty tensor".into()));
    }
    let per_step_mean: Vec<f64> = (0..t)
        .map(|ti| traffic.row(ti).iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let totals = traffic.station_totals();
    let per_station_mean: Vec<f64> = totals.iter().map(|&tot| tot as f64 / t as f64).collect();
    let histogram = Histogram::from_values(&per_station_mean, STATS_HIST_WIDTH);
    Ok(StatsBundle {
        per_step_mean,
        per_station_mean,
        histogram,
    })
}
