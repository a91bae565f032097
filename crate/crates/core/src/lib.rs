//! Unsupervised discovery of an agent's action space from unlabeled video,
//! with grounding to real actions, action-conditioned prediction, visual
//! servoing and the evaluation harness around them.

pub mod checkpoint;
pub mod composer;
pub mod dataio;
pub mod env;
pub mod evalkit;
pub mod fsutil;
pub mod grounding;
pub mod model;
pub mod planner;
pub mod rng;
pub mod svp;
pub mod train;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("checksum mismatch in {shard}")]
    Checksum { shard: String },
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Autodiff(#[from] clasp_autodiff::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingArtifact(_) => 3,
            Self::Numerical(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
