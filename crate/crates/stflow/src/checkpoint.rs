//! Model checkpoints: a text header, one JSON metadata line, and the flat
//! little-endian f64 parameter payload in the canonical order defined by
//! [`ModelParams`]. The registry fingerprint binds a checkpoint to the
//! station ordering it was trained with; node order is semantic in every
//! matrix, so loading against a different registry is refused.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::atomic_write;
use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::ingest::StationRegistry;
use crate::pipeline::{Normalizer, Precision};
use crate::stgcn::{ModelParams, STGCNConfig};

const CKPT_MAGIC: &str = "STFLOW-CKPT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NormalizerMeta {
    mean: f64,
    std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GraphMeta {
    sigma_sq: f64,
    epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: STGCNConfig,
    normalizer: NormalizerMeta,
    graph: GraphMeta,
    top_stations: usize,
    registry_fingerprint: String,
    precision: Precision,
    param_count: usize,
}

/// A trained model plus everything needed to run it again: architecture,
/// normalizer statistics, graph kernel parameters, and the station-order
/// fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: STGCNConfig,
    pub normalizer: Normalizer,
    pub sigma_sq: f64,
    pub epsilon: f64,
    pub top_stations: usize,
    pub registry_fingerprint: String,
    pub precision: Precision,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.params.len() != self.model.param_count() {
            return Err(Error::Artifact(format!(
                "checkpoint: payload holds {} parameters, config wants {}",
                self.params.len(),
                self.model.param_count()
            )));
        }
        let meta = CheckpointMeta {
            model: self.model.clone(),
            normalizer: NormalizerMeta {
                mean: self.normalizer.mean,
                std: self.normalizer.std,
            },
            graph: GraphMeta {
                sigma_sq: self.sigma_sq,
                epsilon: self.epsilon,
            },
            top_stations: self.top_stations,
            registry_fingerprint: self.registry_fingerprint.clone(),
            precision: self.precision,
            param_count: self.params.len(),
        };
        let meta_line = serde_json::to_string(&meta)
            .map_err(|e| Error::Artifact(format!("checkpoint metadata: {e}")))?;
        let mut bytes = format!("{CKPT_MAGIC}\n{meta_line}\n").into_bytes();
        bytes.reserve(self.params.len() * 8);
        for &v in &self.params {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .unwrap_or_default();
        if magic != CKPT_MAGIC {
            return Err(Error::ArtifactVersion {
                expected: CKPT_MAGIC.to_string(),
                found: magic.split_whitespace().take(2).collect::<Vec<_>>().join(" "),
            });
        }
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::Artifact(format!("{}: missing metadata line", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_line)
            .map_err(|e| Error::Artifact(format!("{}: metadata: {e}", path.display())))?;
        let payload = lines.next().unwrap_or_default();
        if payload.len() != meta.param_count * 8 {
            return Err(Error::Artifact(format!(
                "{}: payload holds {} bytes, metadata wants {}",
                path.display(),
                payload.len(),
                meta.param_count * 8
            )));
        }
        if meta.param_count != meta.model.param_count() {
            return Err(Error::Artifact(format!(
                "{}: param_count {} disagrees with the architecture's {}",
                path.display(),
                meta.param_count,
                meta.model.param_count()
            )));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Checkpoint {
            model: meta.model,
            normalizer: Normalizer {
                mean: meta.normalizer.mean,
                std: meta.normalizer.std,
            },
            sigma_sq: meta.graph.sigma_sq,
            epsilon: meta.graph.epsilon,
            top_stations: meta.top_stations,
            registry_fingerprint: meta.registry_fingerprint,
            precision: meta.precision,
            params,
        })
    }

    /// Refuse to pair this checkpoint with a registry it was not trained on.
    pub fn verify_registry(&self, registry: &StationRegistry) -> Result<()> {
        let fp = registry.fingerprint();
        if fp != self.registry_fingerprint {
            return Err(Error::FingerprintMismatch {
                checkpoint: self.registry_fingerprint.clone(),
                registry: fp,
            });
        }
        Ok(())
    }

    pub fn model_params<F: Scalar>(&self) -> Result<ModelParams<F>> {
        ModelParams::from_flat_f64(&self.model, &self.params)
    }
}
