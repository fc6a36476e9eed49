//! Layout-aware embodied navigation and referring-expression grounding on
//! procedurally generated houses.
//!
//! The crate is organised bottom-up: [`tensor`] (autodiff engine), [`env`]
//! (houses, episodes, planner), [`codebook`] (room-type memory and goal
//! imagination), [`agent`] (the navigation model), [`train`], [`eval`] and
//! [`cli`].

pub mod agent;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod env;
pub mod eval;
pub mod pipeline;
pub mod selftest;
pub mod tensor;
pub mod train;

/// Errors surfaced by the model, training and evaluation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Codebook(#[from] codebook::CodebookError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite loss at iteration {iteration} (batch {batch})")]
    NonFinite { iteration: usize, batch: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
