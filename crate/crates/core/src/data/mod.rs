//! Trajectory datasets, the JSONL file format, and the synthetic environments.

pub mod env;
pub mod gen;
pub mod io;
pub mod noise;
pub mod stats;
pub mod trajectory;
pub mod window;

pub use env::{EnvKind, StepResult, ToyEnv};
pub use gen::{anchors, gen_dataset, Anchors, Behavior};
pub use io::{load_trajectories, save_trajectories};
pub use noise::{inject_action_noise, NoiseRecord};
pub use stats::DatasetStats;
pub use trajectory::{compute_rtg, Dataset, Trajectory};
pub use window::{sample_window, Batch, ModelInput, StepSampler, TrajectoryWindow};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed JSON: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: ragged array `{field}`: {detail}")]
    Ragged {
        line: usize,
        field: &'static str,
        detail: String,
    },
    #[error("line {line}: non-finite value in `{field}`")]
    NonFinite { line: usize, field: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("step {t} out of range for an episode of length {len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("action contains a non-finite component")]
    NonFiniteAction,
    #[error("{what}: expected {expected} components, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
}
