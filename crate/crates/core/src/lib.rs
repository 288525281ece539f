//! Diffusion transformer nowcasting with causal (condition-to-prediction)
//! attention and Channel-To-Batch Shift, plus the forecast-verification
//! toolkit used to score it.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and tape-based reverse-mode differentiation
//! - [`diffusion`]: DDPM noise schedule, forward/reverse steps, loss
//! - [`tokenizer`]: patchify, positional tables, condition/prediction layout
//! - [`model`]: the denoising transformer and its checkpoint format
//! - [`data`]: synthetic rainfall, normalization, the RSEQ sequence format
//! - [`metrics`]: CSI, FSS, CRPS, radial spectra, Taylor stats, token similarity
//! - [`optim`]: Adam
//! - [`pipeline`]: training, ensemble sampling and evaluation runs
//! - [`cli`]: run configuration and the command-line verbs

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Format(#[from] data::FormatError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error(transparent)]
    Config(#[from] cli::ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
