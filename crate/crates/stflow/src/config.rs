//! Run configuration: a flat `key = value` text file with `#` comments.
//! Every field has a default; unknown keys are rejected rather than
//! ignored, so typos surface immediately. CLI flags override file values.

use std::path::{Path, PathBuf};

use crate::artifact::sha256_hex;
use crate::error::{Error, Result};
use crate::ingest::{format_timestamp, parse_timestamp};
use crate::pipeline::{Precision, SplitSpec, TrainOptions};
use crate::stgcn::STGCNConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Raw trip CSV (the public monthly archive layout).
    pub trips_csv: PathBuf,
    /// Covered range, aligned to 30-minute edges; half-open.
    pub range_start: i64,
    pub range_end: i64,

    /// Gaussian kernel bandwidth in km^2; `None` means auto (the squared
    /// standard deviation of the off-diagonal distances).
    pub sigma_sq: Option<f64>,
    /// Adjacency sparsity threshold.
    pub epsilon: f64,

    pub history_steps: usize,
    pub horizon_steps: usize,
    pub temporal_kernel: usize,
    pub input_channels: usize,
    pub temporal_channels_1: usize,
    pub spatial_channels: usize,
    pub temporal_channels_2: usize,
    pub n_blocks: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Restrict training to the k busiest stations; 0 keeps all.
    pub top_stations: usize,

    pub test_days: u32,
    pub val_days: u32,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trips_csv: PathBuf::from("data/202106-citibike-tripdata.csv"),
            range_start: parse_timestamp("2021-06-01 00:00:00").unwrap(),
            range_end: parse_timestamp("2021-07-01 00:00:00").unwrap(),
            sigma_sq: None,
            epsilon: 0.5,
            history_steps: 12,
            horizon_steps: 1,
            temporal_kernel: 3,
            input_channels: 1,
            temporal_channels_1: 32,
            spatial_channels: 16,
            temporal_channels_2: 32,
            n_blocks: 1,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            precision: Precision::F64,
            top_stations: 0,
            test_days: 3,
            val_days: 3,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
            seen.push(key.to_string());
            config.set(key, value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "data.trips_csv" => self.trips_csv = PathBuf::from(value),
            "data.range_start" => self.range_start = parse_timestamp(value).map_err(reword(key))?,
            "data.range_end" => self.range_end = parse_timestamp(value).map_err(reword(key))?,
            "graph.sigma_sq" => {
                self.sigma_sq = if value == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "graph.epsilon" => self.epsilon = num(key, value)?,
            "model.history_steps" => self.history_steps = num(key, value)?,
            "model.horizon_steps" => self.horizon_steps = num(key, value)?,
            "model.temporal_kernel" => self.temporal_kernel = num(key, value)?,
            "model.input_channels" => self.input_channels = num(key, value)?,
            "model.temporal_channels_1" => self.temporal_channels_1 = num(key, value)?,
            "model.spatial_channels" => self.spatial_channels = num(key, value)?,
            "model.temporal_channels_2" => self.temporal_channels_2 = num(key, value)?,
            "model.blocks" => self.n_blocks = num(key, value)?,
            "train.learning_rate" => self.learning_rate = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.max_epochs" => self.max_epochs = num(key, value)?,
            "train.patience" => self.patience = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.precision" => self.precision = value.parse()?,
            "train.top_stations" => self.top_stations = num(key, value)?,
            "split.test_days" => self.test_days = num(key, value)?,
            "split.val_days" => self.val_days = num(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(c)) == c` and serializing
    /// again reproduces the same bytes.
    pub fn serialize(&self) -> String {
        let sigma = match self.sigma_sq {
            None => "auto".to_string(),
            Some(v) => v.to_string(),
        };
        format!(
            "# stflow run configuration\n\
             data.trips_csv = {}\n\
             data.range_start = {}\n\
             data.range_end = {}\n\
             graph.sigma_sq = {}\n\
             graph.epsilon = {}\n\
             model.history_steps = {}\n\
             model.horizon_steps = {}\n\
             model.temporal_kernel = {}\n\
             model.input_channels = {}\n\
             model.temporal_channels_1 = {}\n\
             model.spatial_channels = {}\n\
             model.temporal_channels_2 = {}\n\
             model.blocks = {}\n\
             train.learning_rate = {}\n\
             train.batch_size = {}\n\
             train.max_epochs = {}\n\
             train.patience = {}\n\
             train.seed = {}\n\
             train.precision = {}\n\
             train.top_stations = {}\n\
             split.test_days = {}\n\
             split.val_days = {}\n\
             out.dir = {}\n",
            self.trips_csv.display(),
            format_timestamp(self.range_start),
            format_timestamp(self.range_end),
            sigma,
            self.epsilon,
            self.history_steps,
            self.horizon_steps,
            self.temporal_kernel,
            self.input_channels,
            self.temporal_channels_1,
            self.spatial_channels,
            self.temporal_channels_2,
            self.n_blocks,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.seed,
            self.precision,
            self.top_stations,
            self.test_days,
            self.val_days,
            self.out_dir.display(),
        )
    }

    /// Hash of the canonical serialization; recorded in run manifests.
    pub fn hash(&self) -> String {
        sha256_hex(self.serialize().as_bytes())
    }

    pub fn model_config(&self, n_nodes: usize) -> STGCNConfig {
        STGCNConfig {
            history_steps: self.history_steps,
            horizon_steps: self.horizon_steps,
            temporal_kernel: self.temporal_kernel,
            input_channels: self.input_channels,
            temporal_channels_1: self.temporal_channels_1,
            spatial_channels: self.spatial_channels,
            temporal_channels_2: self.temporal_channels_2,
            n_blocks: self.n_blocks,
            n_nodes,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            test_days: self.test_days,
            val_days: self.val_days,
        }
    }
}

fn reword(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Config(format!("{key}: {e}"))
}
