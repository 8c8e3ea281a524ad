use crate::error::{Error, Result};

use super::WindowedDataset;

/// Constant training splits fall back to unit scale.
const STD_FLOOR: f64 = 1e-9;

/// Z-score transform fit on training inputs only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Fit mean and population std over the X windows of the training split,
/// values weighted by how often the windows present them.
pub fn fit_normalizer(dataset: &WindowedDataset, train: &[usize]) -> Result<Normalizer> {
    if train.is_empty() {
        return Err(Error::Data("normalizer: empty training split".into()));
    }
    let (m, n) = (dataset.history_steps(), dataset.n_stations());
    let count = (train.len() * m * n) as f64;
    let mut sum = 0.0;
    for &k in train {
        for t in k..k + m {
            sum += dataset.raw_row(t).iter().sum::<f64>();
        }
    }
    let mean = sum / count;
    let mut var = 0.0;
    for &k in train {
        for t in k..k + m {
            for &v in dataset.raw_row(t) {
                let d = v - mean;
                var += d * d;
            }
        }
    }
    let std = (var / count).sqrt();
    Ok(Normalizer {
        mean,
        std: if std < STD_FLOOR { 1.0 } else { std },
    })
}
