//! Variational autoencoders whose decoder variance γ² is computed from the
//! running reconstruction error instead of being learned, together with the
//! two-stage generation pipeline, latent-activity diagnostics and
//! Fréchet-distance evaluation.

pub mod error;
pub mod exec;
pub mod loss;
pub mod nn;

pub use error::{Error, Result};
pub use exec::Exec;
pub mod data;
pub mod models;
pub mod npy;
pub mod diagnostics;
pub mod checkpoint;
pub mod train;
pub mod config;
pub mod evaluate;
pub mod plot;
pub mod second_stage;
pub mod sweep;
