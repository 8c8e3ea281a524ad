//! Shared fixtures: a synthetic trip file with daily structure, and helpers
//! for driving the CLI binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stflow::ingest::parse_timestamp;

/// Station layout for the synthetic city: a compact core plus one outlier.
pub const STATIONS: [(&str, &str, f64, f64); 6] = [
    ("S01", "Harbor & 1st", 40.7000, -74.0100),
    ("S02", "Harbor & 5th", 40.7045, -74.0080),
    ("S03", "Market Sq", 40.7090, -74.0035),
    ("S04", "Old Mill", 40.7130, -74.0000),
    ("S05", "North Gate", 40.7180, -73.9950),
    ("S06", "Hilltop", 40.7700, -73.9300),
];

/// Hash-based noise in [-1, 1); deterministic in its arguments.
fn unit_noise(station: usize, day: usize, slot: usize) -> f64 {
    let mut z = (station as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((day * 48 + slot) as u64);
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Deterministic daily demand profile with unequal peaks, scaled per
/// station, modulated by a slow day-to-day level, plus count-like
/// dispersion around the expected value.
pub fn expected_departures(station: usize, day: usize, slot: usize) -> usize {
    let tod = slot as f64 / 48.0;
    let morning = (-((tod - 0.35) * 12.0).powi(2)).exp() * 3.0;
    let evening = (-((tod - 0.75) * 10.0).powi(2)).exp() * 5.0;
    let base = 0.3 + morning + evening;
    let amp = [1.6, 1.1, 2.3, 0.8, 1.4, 0.5][station % 6];
    // Slow multiplicative level: period well above one day so the history
    // window carries information the time-of-day average cannot.
    let level = 1.0 + 0.45 * ((day as f64 * 0.9) + station as f64 * 0.3).sin();
    // Half-hourly alternation (dock rebalancing rhythm): persistence lags
    // it by construction, while the window exposes its phase.
    let sway = 1.0 + 0.35 * if slot % 2 == 0 { 1.0 } else { -1.0 };
    let mean = base * amp * level * sway;
    let noisy = mean + 0.8 * mean.sqrt() * unit_noise(station, day, slot);
    noisy.round().max(0.0) as usize
}

/// Synthetic trip CSV covering `days` days from June 1; valid rows plus a
/// handful of deliberately broken ones at the top.
pub fn synthetic_trips_csv(days: usize) -> String {
    let mut out = String::from(
        "ride_id,rideable_type,started_at,ended_at,start_station_name,start_station_id,end_station_name,end_station_id,start_lat,start_lng,end_lat,end_lng,member_casual\n",
    );
    // Broken rows: negative duration, missing end station, bad coordinate.
    out.push_str("bad1,classic,2021-06-01 10:00:00,2021-06-01 09:59:00,Harbor & 1st,S01,Market Sq,S03,40.7000,-74.0100,40.7090,-74.0035,member\n");
    out.push_str("bad2,classic,2021-06-01 10:00:00,2021-06-01 10:10:00,Harbor & 1st,S01,,,40.7000,-74.0100,,,member\n");
    out.push_str("bad3,classic,2021-06-01 10:00:00,2021-06-01 10:10:00,Harbor & 1st,S01,Market Sq,S03,40.7000,-74.0100,999.0,-74.0035,member\n");

    let origin = parse_timestamp("2021-06-01 00:00:00").unwrap();
    let mut ride = 0usize;
    for day in 0..days {
        for slot in 0..48usize {
            for (s, station) in STATIONS.iter().enumerate() {
                let n_dep = expected_departures(s, day, slot);
                for k in 0..n_dep {
                    let started = origin
                        + (day * 86400) as i64
                        + (slot * 1800) as i64
                        + ((k * 293 + s * 97) % 1700) as i64;
                    let duration = 300 + ((ride * 131) % 1500) as i64;
                    let dest = (s + 1 + (ride % (STATIONS.len() - 1))) % STATIONS.len();
                    let to = STATIONS[dest];
                    ride += 1;
                    out.push_str(&format!(
                        "r{ride},classic,{},{},{},{},{},{},{},{},{},{},member\n",
                        stflow::ingest::format_timestamp(started),
                        stflow::ingest::format_timestamp(started + duration),
                        station.1,
                        station.0,
                        to.1,
                        to.0,
                        station.2,
                        station.3,
                        to.2,
                        to.3,
                    ));
                }
            }
        }
    }
    out
}

pub fn stflow_bin() -> &'static str {
    env!("CARGO_BIN_EXE_stflow")
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(stflow_bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should spawn")
}

pub fn assert_success(output: &Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Small-model config for fast end-to-end runs over the synthetic city.
pub fn small_run_config(trips: &Path, out_dir: &Path, days: usize) -> String {
    assert!(days <= 29, "synthetic fixture stays inside June");
    let end = format!("2021-06-{:02} 00:00:00", 1 + days);
    format!(
        "data.trips_csv = {}\n\
         data.range_start = 2021-06-01 00:00:00\n\
         data.range_end = {end}\n\
         graph.epsilon = 0.3\n\
         model.history_steps = 8\n\
         model.temporal_kernel = 2\n\
         model.temporal_channels_1 = 6\n\
         model.spatial_channels = 4\n\
         model.temporal_channels_2 = 6\n\
         train.learning_rate = 0.004\n\
         train.batch_size = 32\n\
         train.max_epochs = 8\n\
         train.patience = 0\n\
         train.seed = 42\n\
         out.dir = {}\n",
        trips.display(),
        out_dir.display()
    )
}

pub fn write_file(path: &Path, contents: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, contents).unwrap();
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

/// The real June 2021 archive, when present: `STFLOW_TRIPS_CSV` or
/// `data/202106-citibike-tripdata.csv` under the workspace root.
pub fn real_dataset_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("STFLOW_TRIPS_CSV") {
        let p = PathBuf::from(p);
        return p.exists().then_some(p);
    }
    let default = workspace_root().join("data/202106-citibike-tripdata.csv");
    default.exists().then_some(default)
}
