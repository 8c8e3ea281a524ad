use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::stgcn::{predict, ModelParams, STGCNConfig};

use super::{Normalizer, WindowedDataset};

/// Denominator guard for the raw MAPE; zero-truth cells make the raw
/// number explode, which is exactly why the masked variant exists.
const RAW_MAPE_EPS: f64 = 1e-8;

/// Threshold for the masked MAPE: only cells whose ground truth reaches
/// this count participate.
pub const MAPE_MASK_THRESHOLD: f64 = 1.0;

/// Forecast quality in original count units. `mape_raw` is reported but
/// flagged unreliable whenever zero-truth cells were present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent error over cells with truth >= 1.
    pub mape_masked: f64,
    /// Percent error over all cells with an epsilon-guarded denominator.
    pub mape_raw: f64,
    pub total_cells: u64,
    pub masked_cells: u64,
    /// Raw MAPE divided by zero-adjacent truths; do not trust it.
    pub mape_raw_unreliable: bool,
}

/// Metrics over (truth, prediction) pairs in count units.
pub fn metrics_from_pairs<I>(pairs: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut total_cells = 0u64;
    let mut masked_cells = 0u64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut raw_pct_sum = 0.0;
    let mut masked_pct_sum = 0.0;
    let mut saw_small_truth = false;
    for (truth, pred) in pairs {
        let err = pred - truth;
        total_cells += 1;
        abs_sum += err.abs();
        sq_sum += err * err;
        raw_pct_sum += err.abs() / truth.max(RAW_MAPE_EPS);
        if truth >= MAPE_MASK_THRESHOLD {
            masked_cells += 1;
            masked_pct_sum += err.abs() / truth;
        } else {
            saw_small_truth = true;
        }
    }
    if total_cells == 0 {
        return Err(Error::Data("metrics: no prediction cells".into()));
    }
    let mae = abs_sum / total_cells as f64;
    let rmse = (sq_sum / total_cells as f64).sqrt();
    // Power-mean inequality; holds up to sqrt round-off.
    assert!(
        rmse >= mae - 1e-9 * mae.max(1.0),
        "rmse {rmse} fell below mae {mae}"
    );
    Ok(MetricsReport {
        mae,
        rmse,
        mape_masked: if masked_cells > 0 {
            100.0 * masked_pct_sum / masked_cells as f64
        } else {
            0.0
        },
        mape_raw: 100.0 * raw_pct_sum / total_cells as f64,
        total_cells,
        masked_cells,
        mape_raw_unreliable: saw_small_truth,
    })
}

/// Run the model over `indices`, invert predictions to count units, clip at
/// zero for reporting, and score against the raw targets.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    config: &STGCNConfig,
    propagation: &PropagationOperator,
    dataset: &WindowedDataset,
    indices: &[usize],
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::Data("evaluate: empty split".into()));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch::<F>(chunk, normalizer);
        let pred = predict(params, propagation, config, &batch.x)?;
        for (bi, &k) in chunk.iter().enumerate() {
            let truth = dataset.raw_targets(k);
            let per_sample = truth.len();
            for (ci, &t) in truth.iter().enumerate() {
                let z = pred.data()[bi * per_sample + ci].into_f64();
                let y = normalizer.invert(z).max(0.0);
                pairs.push((t, y));
            }
        }
    }
    metrics_from_pairs(pairs)
}

/// Mean squared error of the model over `indices` in normalized units; the
/// quantity the training loop tracks.
pub fn dataset_loss<F: Scalar>(
    params: &ModelParams<F>,
    config: &STGCNConfig,
    propagation: &PropagationOperator,
    dataset: &WindowedDataset,
    indices: &[usize],
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("loss: empty split".into()));
    }
    let mut sq_sum = 0.0;
    let mut count = 0u64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch::<F>(chunk, normalizer);
        let pred = predict(params, propagation, config, &batch.x)?;
        for (p, t) in pred.data().iter().zip(batch.y.data()) {
            let d = p.into_f64() - t.into_f64();
            sq_sum += d * d;
            count += 1;
        }
    }
    Ok(sq_sum / count as f64)
}
