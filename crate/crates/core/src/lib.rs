//! Streaming recommendation training with learned embedding assignment.
//!
//! Low-frequency user and item ids share a small hierarchy of embeddings; an
//! actor-critic identity agent per field decides when an id climbs toward (or
//! falls back from) a unique embedding. Threshold-filter and unfiltered
//! baselines, metrics, data ingestion and a synthetic stream generator are
//! included for comparison.

pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reward;
pub mod trainer;

pub use embedding::{Action, EmbeddingStore, Field, IdKey, IdState, ParamReport, Slot};
pub use error::{Error, Result};
pub use trainer::{run_experiment, Engine, Mode, TrainerConfig};
