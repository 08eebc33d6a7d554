//! Experiment configuration, runs, checkpoints, metrics and datasets.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod metrics;
pub mod run;
pub mod verify;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use config::{CorpusData, ExperimentConfig, ModelKind, ModelSpec, StarGraphData, Task, TrainSpec};
pub use corpus::{gen_synthetic_corpus, Corpus};
pub use metrics::{read_metrics, MetricsLog, MetricsRow};
pub use run::{run, RunOptions, RunSummary, Trainee};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config at {path}: {message}")]
    InvalidConfig { path: String, message: String },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] crate::bst::BstError),
    #[error(transparent)]
    Graph(#[from] crate::stargraph::StarGraphError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Maps storage-full I/O errors to [`HarnessError::DiskFull`].
    pub fn from_io(e: std::io::Error, path: &Path) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            HarnessError::DiskFull(path.to_path_buf())
        } else {
            HarnessError::Io(e)
        }
    }
}

/// Exclusive ownership of an output directory for the lifetime of a run.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = "run.lock";

    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
