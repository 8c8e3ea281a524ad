use std::collections::BTreeMap;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::ingest::Histogram;
use crate::stgcn::{predict, ModelParams, STGCNConfig};

use super::{Normalizer, WindowedDataset};

/// One predicted cell. The raw model output is kept unclipped; reported
/// values clip at zero because counts cannot be negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub timestamp: i64,
    pub station: usize,
    pub y_true: f64,
    pub y_pred_raw: f64,
}

impl PredictionRow {
    pub fn y_pred(&self) -> f64 {
        self.y_pred_raw.max(0.0)
    }
}

/// Per-bin per-station predicted vs true counts plus the aggregate series
/// derived from them.
#[derive(Clone, Debug)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
    pub n_stations: usize,
}

/// Run the model over `indices` and collect the detail table in count units.
pub fn export_predictions<F: Scalar>(
    params: &ModelParams<F>,
    config: &STGCNConfig,
    propagation: &PropagationOperator,
    dataset: &WindowedDataset,
    indices: &[usize],
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<PredictionTable> {
    if indices.is_empty() {
        return Err(Error::Data("export: empty index set".into()));
    }
    let (h, n) = (dataset.horizon_steps(), dataset.n_stations());
    let mut rows = Vec::with_capacity(indices.len() * h * n);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch::<F>(chunk, normalizer);
        let pred = predict(params, propagation, config, &batch.x)?;
        for (bi, &k) in chunk.iter().enumerate() {
            let truth = dataset.raw_targets(k);
            let base_ts = dataset.target_timestamp(k);
            for step in 0..h {
                for station in 0..n {
                    let z = pred.data()[(bi * h + step) * n + station].into_f64();
                    rows.push(PredictionRow {
                        timestamp: base_ts + step as i64 * crate::ingest::BIN_SECONDS,
                        station,
                        y_true: truth[step * n + station],
                        y_pred_raw: normalizer.invert(z),
                    });
                }
            }
        }
    }
    Ok(PredictionTable {
        rows,
        n_stations: n,
    })
}

/// Forecast the `H` bins starting at `at` from the `M` bins before it.
/// Returns clipped counts in horizon-major order (`[H, N]`). `at` may equal
/// the end of the data, which forecasts past the observed range.
pub fn forecast_at<F: Scalar>(
    params: &ModelParams<F>,
    config: &STGCNConfig,
    propagation: &PropagationOperator,
    traffic: &crate::ingest::TrafficTensor,
    normalizer: &Normalizer,
    at: i64,
) -> Result<Vec<f64>> {
    let bin = crate::ingest::BIN_SECONDS;
    if (at - traffic.origin()).rem_euclid(bin) != 0 {
        return Err(Error::Param(format!(
            "forecast: timestamp must align to a 30-minute bin edge relative to the data origin"
        )));
    }
    let m = config.history_steps as i64;
    let first_history = (at - traffic.origin()) / bin - m;
    if first_history < 0 || first_history + m > traffic.t_bins() as i64 {
        return Err(Error::Data(format!(
            "forecast: needs {m} history bins before the requested time, data covers bins 0..{}",
            traffic.t_bins()
        )));
    }
    let n = traffic.n_stations();
    if n != config.n_nodes {
        return Err(Error::Shape(format!(
            "forecast: traffic has {n} stations, model wants {}",
            config.n_nodes
        )));
    }
    let mut x = Vec::with_capacity(config.history_steps * n);
    for t in first_history..first_history + m {
        x.extend(
            traffic
                .row(t as usize)
                .iter()
                .map(|&v| F::from_f64(normalizer.apply(v as f64))),
        );
    }
    let x = crate::autodiff::Tensor::new(&[1, config.history_steps, n, 1], x)?;
    let pred = predict(params, propagation, config, &x)?;
    Ok(pred
        .data()
        .iter()
        .map(|&z| normalizer.invert(z.into_f64()).max(0.0))
        .collect())
}

impl PredictionTable {
    /// Mean over stations per time step: (timestamp, true mean, predicted
    /// mean), predictions clipped. Derived from the detail rows, so
    /// re-aggregating an exported table reproduces it exactly.
    pub fn per_step_series(&self) -> Vec<(i64, f64, f64)> {
        let mut groups: BTreeMap<i64, (f64, f64, u64)> = BTreeMap::new();
        for row in &self.rows {
            let e = groups.entry(row.timestamp).or_insert((0.0, 0.0, 0));
            e.0 += row.y_true;
            e.1 += row.y_pred();
            e.2 += 1;
        }
        groups
            .into_iter()
            .map(|(ts, (t, p, c))| (ts, t / c as f64, p / c as f64))
            .collect()
    }

    /// Mean over the covered window per station: (station, true mean,
    /// predicted mean), predictions clipped.
    pub fn per_station_series(&self) -> Vec<(usize, f64, f64)> {
        let mut sums = vec![(0.0, 0.0, 0u64); self.n_stations];
        for row in &self.rows {
            let e = &mut sums[row.station];
            e.0 += row.y_true;
            e.1 += row.y_pred();
            e.2 += 1;
        }
        sums.into_iter()
            .enumerate()
            .filter(|(_, (_, _, c))| *c > 0)
            .map(|(s, (t, p, c))| (s, t / c as f64, p / c as f64))
            .collect()
    }

    /// Distributions of the per-station means (true, predicted).
    pub fn per_station_histograms(&self, bin_width: f64) -> (Histogram, Histogram) {
        let series = self.per_station_series();
        let truths: Vec<f64> = series.iter().map(|&(_, t, _)| t).collect();
        let preds: Vec<f64> = series.iter().map(|&(_, _, p)| p).collect();
        (
            Histogram::from_values(&truths, bin_width),
            Histogram::from_values(&preds, bin_width),
        )
    }
}
