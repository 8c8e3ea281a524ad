//! Bike-share traffic forecasting toolkit.
//!
//! The crate turns raw trip CSVs into per-station traffic series, builds a
//! station proximity graph, and trains a one-block spatio-temporal graph
//! convolutional network on top of a small built-in reverse-mode autodiff
//! engine. Everything is deterministic given a seed: same inputs, same
//! outputs, byte for byte.
//!
//! Module map:
//! - [`ingest`]: trip CSV parsing, station registry, traffic binning
//! - [`graph`]: haversine distances, Gaussian-kernel adjacency, normalized
//!   propagation operator
//! - [`autodiff`]: dense tensors, a define-by-run tape, Adam
//! - [`stgcn`]: the forecasting architecture and its parameters
//! - [`pipeline`]: windowing, chronological splits, training, metrics,
//!   baselines, prediction export
//! - [`artifact`], [`config`], [`checkpoint`]: on-disk formats used by the
//!   `stflow` binary and by foreign-language bindings

pub mod artifact;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod pipeline;
pub mod stgcn;

pub use error::{Error, Result};
