use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ingest::{TrafficTensor, BIN_SECONDS};
use crate::stgcn::ForecastBatch;

use super::Normalizer;

const SECONDS_PER_DAY: i64 = 86_400;

/// Supervised sliding windows over the traffic series: sample `k` pairs the
/// `M` bins starting at `k` with the following `H` target bins. Samples are
/// strictly chronological and stamped with their target's first bin
/// timestamp.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    series: Vec<f64>,
    t_bins: usize,
    n_stations: usize,
    origin: i64,
    history_steps: usize,
    horizon_steps: usize,
}

/// Build the window view of a traffic tensor.
pub fn make_windows(traffic: &TrafficTensor, history: usize, horizon: usize) -> Result<WindowedDataset> {
    WindowedDataset::new(traffic, history, horizon)
}

impl WindowedDataset {
    pub fn new(traffic: &TrafficTensor, history: usize, horizon: usize) -> Result<Self> {
        if history == 0 || horizon == 0 {
            return Err(Error::Param("windows: history and horizon must be >= 1".into()));
        }
        let t = traffic.t_bins();
        if t < history + horizon {
            return Err(Error::Data(format!(
                "series too short: {t} bins cannot fit {history} history + {horizon} horizon"
            )));
        }
        Ok(WindowedDataset {
            series: traffic.values().iter().map(|&v| v as f64).collect(),
            t_bins: t,
            n_stations: traffic.n_stations(),
            origin: traffic.origin(),
            history_steps: history,
            horizon_steps: horizon,
        })
    }

    /// Sample count: `T - M - H + 1`.
    pub fn len(&self) -> usize {
        self.t_bins - self.history_steps - self.horizon_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn t_bins(&self) -> usize {
        self.t_bins
    }

    pub fn history_steps(&self) -> usize {
        self.history_steps
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn origin(&self) -> i64 {
        self.origin
    }

    /// One past the last covered second.
    pub fn data_end(&self) -> i64 {
        self.origin + self.t_bins as i64 * BIN_SECONDS
    }

    /// Left edge of sample `k`'s first target bin.
    pub fn target_timestamp(&self, k: usize) -> i64 {
        self.origin + (k + self.history_steps) as i64 * BIN_SECONDS
    }

    /// Raw (unnormalized) count at bin `t`, station `n`.
    pub fn raw(&self, t: usize, n: usize) -> f64 {
        self.series[t * self.n_stations + n]
    }

    pub fn raw_row(&self, t: usize) -> &[f64] {
        &self.series[t * self.n_stations..(t + 1) * self.n_stations]
    }

    /// Assemble samples `indices` into a model batch, normalizing inputs and
    /// targets. X is `[B, M, N, 1]`, Y is `[B, H, N]`.
    pub fn batch<F: Scalar>(&self, indices: &[usize], normalizer: &Normalizer) -> ForecastBatch<F> {
        let (b, m, h, n) = (
            indices.len(),
            self.history_steps,
            self.horizon_steps,
            self.n_stations,
        );
        let mut x = Vec::with_capacity(b * m * n);
        let mut y = Vec::with_capacity(b * h * n);
        let mut target_timestamps = Vec::with_capacity(b);
        for &k in indices {
            debug_assert!(k < self.len());
            for t in k..k + m {
                x.extend(self.raw_row(t).iter().map(|&v| F::from_f64(normalizer.apply(v))));
            }
            for t in k + m..k + m + h {
                y.extend(self.raw_row(t).iter().map(|&v| F::from_f64(normalizer.apply(v))));
            }
            target_timestamps.push(self.target_timestamp(k));
        }
        ForecastBatch {
            x: Tensor::new(&[b, m, n, 1], x).expect("batch shape"),
            y: Tensor::new(&[b, h, n], y).expect("batch shape"),
            y_hat: None,
            target_timestamps,
        }
    }

    /// Raw target values of sample `k` in time-major order, for metric
    /// computation against inverted predictions.
    pub fn raw_targets(&self, k: usize) -> Vec<f64> {
        let start = (k + self.history_steps) * self.n_stations;
        self.series[start..start + self.horizon_steps * self.n_stations].to_vec()
    }
}

/// Chronological split policy: the last `test_days` calendar days of data
/// are the holdout, preceded by `val_days` of validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub test_days: u32,
    pub val_days: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_days: 3,
            val_days: 3,
        }
    }
}

/// Disjoint, exhaustive sample-index split. A sample belongs to the split
/// containing its target timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub val_start: i64,
    pub test_start: i64,
}

pub fn split_by_time(dataset: &WindowedDataset, spec: &SplitSpec) -> Result<Splits> {
    let data_end = dataset.data_end();
    let test_start = data_end - spec.test_days as i64 * SECONDS_PER_DAY;
    let val_start = test_start - spec.val_days as i64 * SECONDS_PER_DAY;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..dataset.len() {
        let tt = dataset.target_timestamp(k);
        if tt >= test_start {
            test.push(k);
        } else if tt >= val_start {
            val.push(k);
        } else {
            train.push(k);
        }
    }
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::Data(format!(
                "split: {name} split is empty; the series spans too few days"
            )));
        }
    }
    Ok(Splits {
        train,
        val,
        test,
        val_start,
        test_start,
    })
}
