use crate::error::Result;
use crate::ingest::BIN_SECONDS;

use super::{metrics_from_pairs, MetricsReport, Splits, WindowedDataset};

const TOD_SLOTS: usize = (86_400 / BIN_SECONDS) as usize;

/// Forecast every horizon step as the last observed history bin.
pub fn baseline_persistence(dataset: &WindowedDataset, test: &[usize]) -> Result<MetricsReport> {
    let (m, h, n) = (
        dataset.history_steps(),
        dataset.horizon_steps(),
        dataset.n_stations(),
    );
    let mut pairs = Vec::with_capacity(test.len() * h * n);
    for &k in test {
        let last = dataset.raw_row(k + m - 1).to_vec();
        for step in 0..h {
            let truth = dataset.raw_row(k + m + step);
            for ni in 0..n {
                pairs.push((truth[ni], last[ni]));
            }
        }
    }
    metrics_from_pairs(pairs)
}

/// Forecast each (station, time-of-day) cell as its mean over the training
/// range; the training range is every bin before the validation boundary.
pub fn baseline_historical_average(
    dataset: &WindowedDataset,
    splits: &Splits,
) -> Result<MetricsReport> {
    let n = dataset.n_stations();
    let train_end_bin = (((splits.val_start - dataset.origin()) / BIN_SECONDS).max(0) as usize)
        .min(dataset.t_bins());
    let tod_of = |bin: usize| {
        ((dataset.origin() / BIN_SECONDS + bin as i64).rem_euclid(TOD_SLOTS as i64)) as usize
    };

    let mut sums = vec![0.0; TOD_SLOTS * n];
    let mut counts = vec![0u64; TOD_SLOTS];
    let mut station_sums = vec![0.0; n];
    for t in 0..train_end_bin {
        let slot = tod_of(t);
        counts[slot] += 1;
        let row = dataset.raw_row(t);
        for ni in 0..n {
            sums[slot * n + ni] += row[ni];
            station_sums[ni] += row[ni];
        }
    }
    // Slots unseen in a short training range fall back to the station mean.
    let station_means: Vec<f64> = station_sums
        .iter()
        .map(|s| s / train_end_bin.max(1) as f64)
        .collect();
    let mean_at = |slot: usize, ni: usize| {
        if counts[slot] > 0 {
            sums[slot * n + ni] / counts[slot] as f64
        } else {
            station_means[ni]
        }
    };

    let (m, h) = (dataset.history_steps(), dataset.horizon_steps());
    let mut pairs = Vec::with_capacity(splits.test.len() * h * n);
    for &k in &splits.test {
        for step in 0..h {
            let bin = k + m + step;
            let slot = tod_of(bin);
            let truth = dataset.raw_row(bin);
            for ni in 0..n {
                pairs.push((truth[ni], mean_at(slot, ni)));
            }
        }
    }
    metrics_from_pairs(pairs)
}
