use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Scalar, Tape};
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::stgcn::{bind_model, forward, harvest_grads, ModelParams, STGCNConfig};

use super::{dataset_loss, Normalizer, Splits, WindowedDataset};

/// Training arithmetic width. f64 is the default; f32 halves memory traffic
/// at the cost of gradient-check fidelity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Mini-batch training knobs. Adam moments use the standard 0.9 / 0.999 /
/// 1e-8 settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            precision: Precision::F64,
        }
    }
}

/// One line of the training history; replayable into the results table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub is_best: bool,
}

/// Training result: the best-validation parameters (not necessarily the
/// final ones; the history exposes both).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub stopped_early: bool,
}

fn ensure_finite_loss(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "loss became {loss} at epoch {epoch}, batch {batch}; training aborted"
        )))
    }
}

/// Mini-batch MSE training with Adam and best-validation early stopping.
pub fn train(
    config: &STGCNConfig,
    opts: &TrainOptions,
    dataset: &WindowedDataset,
    splits: &Splits,
    normalizer: &Normalizer,
    propagation: &PropagationOperator,
) -> Result<TrainOutcome> {
    match opts.precision {
        Precision::F64 => train_impl::<f64>(config, opts, dataset, splits, normalizer, propagation),
        Precision::F32 => train_impl::<f32>(config, opts, dataset, splits, normalizer, propagation),
    }
}

fn train_impl<F: Scalar>(
    config: &STGCNConfig,
    opts: &TrainOptions,
    dataset: &WindowedDataset,
    splits: &Splits,
    normalizer: &Normalizer,
    propagation: &PropagationOperator,
) -> Result<TrainOutcome> {
    config.validate()?;
    if opts.learning_rate < 0.0 {
        return Err(Error::Param(format!(
            "training: learning rate must be non-negative, got {}",
            opts.learning_rate
        )));
    }
    if opts.batch_size == 0 || opts.max_epochs == 0 {
        return Err(Error::Param(
            "training: batch_size and max_epochs must be >= 1".into(),
        ));
    }
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Data("training: empty train or validation split".into()));
    }
    if propagation.n() != config.n_nodes {
        return Err(Error::Shape(format!(
            "training: propagation operator is {}x{0} but the model wants {} nodes",
            propagation.n(),
            config.n_nodes
        )));
    }

    let mut params = ModelParams::<F>::init(config, opts.seed)?;
    // A zero learning rate runs the full loop without optimizer steps,
    // leaving the parameters at initialization.
    let mut adam: Option<AdamState<F>> = if opts.learning_rate > 0.0 {
        Some(AdamState::with_defaults(
            opts.learning_rate,
            &params.param_sizes(),
        )?)
    } else {
        None
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_flat = params.to_flat_f64();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut stopped_early = false;
    let mut order = splits.train.clone();

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch = dataset.batch::<F>(chunk, normalizer);
            let mut tape = Tape::new();
            let binding = bind_model(&mut tape, &params, propagation);
            let x = tape.constant(&batch.x);
            let y = tape.constant(&batch.y);
            let pred = forward(&mut tape, x, &binding, config)?;
            let loss = tape.mse_loss(pred, y)?;
            let loss_v = tape.value(loss)[0].into_f64();
            ensure_finite_loss(loss_v, epoch, bi)?;
            loss_sum += loss_v * chunk.len() as f64;

            tape.backward(loss)?;
            harvest_grads(&tape, &binding, &mut params);
            if let Some(state) = adam.as_mut() {
                adam_step(&mut params.params_mut(), state)?;
            }
            params.zero_grads();
        }
        let train_loss = loss_sum / splits.train.len() as f64;
        let val_loss = dataset_loss(
            &params,
            config,
            propagation,
            dataset,
            &splits.val,
            normalizer,
            opts.batch_size,
        )?;
        ensure_finite_loss(val_loss, epoch, usize::MAX)?;

        let is_best = val_loss < best_val_loss;
        if is_best {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_flat = params.to_flat_f64();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            is_best,
        });
        if opts.patience > 0 && epochs_since_best >= opts.patience {
            stopped_early = true;
            break;
        }
    }

    let final_val_loss = history.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        params: ModelParams::<f64>::from_flat_f64(config, &best_flat)?,
        history,
        best_epoch,
        best_val_loss,
        final_val_loss,
        stopped_early,
    })
}
