//! The compiler-facing contract: turn IR into an embedding, transform it
//! with a pass sub-sequence, and measure object size plus static throughput.
//!
//! Two implementations: [`mock::MockBackend`] is hermetic and fully
//! deterministic (training and tests run on it), [`toolchain::ToolchainBackend`]
//! drives external `opt`/`clang`/`llvm-mca`/embedding processes.

pub mod mock;
pub mod toolchain;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::SubSequence;
use crate::reward::Measurement;

/// Program-level embedding width; the Q-network input dimension.
pub const EMBED_DIM: usize = 300;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("tool {tool} failed: {detail}")]
    ToolFailure { tool: String, detail: String },
    #[error("bad embedding vector: {0}")]
    BadVector(String),
    #[error("transformed IR failed verification: {0}")]
    InvalidIr(String),
    #[error("could not parse tool output: {0}")]
    ParseFailure(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("handle kind not supported by this backend: {0}")]
    WrongHandle(String),
    #[error(transparent)]
    Measurement(#[from] crate::reward::RewardError),
}

/// Fixed-width real vector representing one program state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.len() != EMBED_DIM {
            return Err(BackendError::BadVector(format!(
                "expected {EMBED_DIM} entries, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(BackendError::BadVector(format!("non-finite entry {bad}")));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// What an [`IrHandle`] points at.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IrSource {
    /// Synthetic program: a seed plus the action ids applied so far fully
    /// determine the mock's state.
    Mock { program_seed: u64, history: Vec<u32> },
    /// IR module on disk (textual or bitcode).
    File { path: PathBuf },
}

/// Handle to the current IR artifact. The generation counter increments on
/// every transformation; handles themselves are immutable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IrHandle {
    pub source: IrSource,
    pub generation: u64,
}

impl IrHandle {
    pub fn mock(program_seed: u64) -> Self {
        IrHandle {
            source: IrSource::Mock { program_seed, history: Vec::new() },
            generation: 0,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        IrHandle { source: IrSource::File { path: path.into() }, generation: 0 }
    }

    /// Short human-readable identity for logs and reports.
    pub fn describe(&self) -> String {
        match &self.source {
            IrSource::Mock { program_seed, .. } => format!("mock:{program_seed}"),
            IrSource::File { path } => path.display().to_string(),
        }
    }
}

impl fmt::Display for IrHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@g{}", self.describe(), self.generation)
    }
}

/// Measurements of the untouched module and of the module after the full
/// `Oz` pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub unopt: Measurement,
    pub oz: Measurement,
}

/// The environment's view of a compiler. One backend instance per
/// environment; implementations must be safe to share read-only.
pub trait Backend: Send + Sync {
    /// Program-level embedding of the module. Deterministic for identical IR
    /// bytes; implementations cache by content.
    fn embed(&self, ir: &IrHandle) -> Result<Embedding, BackendError>;

    /// Applies one pass sub-sequence, returning a handle to the transformed
    /// module. The input handle is unchanged; the new handle's generation is
    /// one higher.
    fn apply_passes(&self, ir: &IrHandle, seq: &SubSequence) -> Result<IrHandle, BackendError>;

    /// Object-file size (unlinked) and static throughput of the module.
    fn measure(&self, ir: &IrHandle) -> Result<Measurement, BackendError>;

    /// Measurements for the unoptimized module and for the module after the
    /// full `Oz` pipeline. `ir` must be an untransformed handle. Cached.
    fn baseline(&self, ir: &IrHandle) -> Result<Baseline, BackendError>;

    /// Number of (real or simulated) tool invocations so far; cache hits do
    /// not count. Lets tests observe caching behavior.
    fn invocations(&self) -> u64;
}
