//! Dataset generation, reconstruction and evaluation commands around
//! `connrsfm-core`, with their file formats.

pub mod commands;
pub mod config;
pub mod ground_truth;
pub mod output;
pub mod pipeline;
pub mod tracks;

use std::path::{Path, PathBuf};

use connrsfm_core::evaluation::EvaluationError;
use connrsfm_core::solver::SolverError;
use connrsfm_core::synthetic::SyntheticError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("track file line {line}: {message}")]
    Tracks { line: usize, message: String },
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error("reconstruction files: {0}")]
    Reconstruction(String),
    #[error("frame count mismatch: ground truth has {expected}, input has {found}")]
    FrameMismatch { expected: usize, found: usize },
    #[error("point count mismatch: ground truth has {expected}, input has {found}")]
    PointMismatch { expected: usize, found: usize },
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub fn tracks(line: usize, message: String) -> Self {
        Self::Tracks { line, message }
    }
}
