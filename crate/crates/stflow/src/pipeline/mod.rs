//! Supervised pipeline over the traffic tensor: sliding windows,
//! chronological splits, input normalization, training with early stopping,
//! count-unit metrics, reference baselines, and prediction export.

mod baseline;
mod export;
mod metrics;
mod normalize;
mod train;
mod window;

pub use baseline::{baseline_historical_average, baseline_persistence};
pub use export::{export_predictions, forecast_at, PredictionRow, PredictionTable};
pub use metrics::{dataset_loss, evaluate, metrics_from_pairs, MetricsReport, MAPE_MASK_THRESHOLD};
pub use normalize::{fit_normalizer, Normalizer};
pub use train::{train, EpochRecord, Precision, TrainOptions, TrainOutcome};
pub use window::{make_windows, split_by_time, SplitSpec, Splits, WindowedDataset};
