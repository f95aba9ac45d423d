//! One error type for every command, mapped onto the fixed exit-code
//! contract: 0 ok, 2 bad input, 3 divergence, 4 shape mismatch, 5 failed
//! gradient check.

use std::path::PathBuf;

use thiserror::Error;

use convdysat_core::checkpoint::CheckpointError;
use convdysat_core::evaluation::EvalError;
use convdysat_core::graph::GraphError;
use convdysat_core::model::ModelError;
use convdysat_core::tape::TensorError;
use convdysat_core::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Shape(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Io { .. } | Self::Graph(_) | Self::Checkpoint(_) => 2,
            Self::Train(e) => train_code(e),
            Self::Model(e) => model_code(e),
            Self::Eval(e) => match e {
                EvalError::DimMismatch { .. } => 4,
                _ => 2,
            },
            Self::Tensor(_) => 4,
            Self::Shape(_) => 4,
            Self::GradCheck(_) => 5,
        }
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Diverged { .. } | TrainError::NanGradient { .. } => 3,
        TrainError::Model(m) => model_code(m),
        TrainError::Tensor(_) => 4,
        _ => 2,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        // Config-level mistakes the user can fix in the run file.
        ModelError::HeadDivisibility { .. }
        | ModelError::BadKernel { .. }
        | ModelError::NoStructuralLayers
        | ModelError::EmptyPositives => 2,
        _ => 4,
    }
}
