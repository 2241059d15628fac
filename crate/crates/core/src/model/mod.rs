//! The multi-channel-in, multi-channel-out separation network.
//!
//! Encoder (framing, linear basis, ReLU) -> TCN superblocks of dilated
//! depthwise blocks, each followed by a TAC layer -> per-source sigmoid masks
//! on the encoder output -> shared linear decoder with overlap-add ->
//! mixture-consistency projection.

mod config;
mod network;
mod params;

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::signal::SignalError;

pub use config::ModelConfig;
pub use network::{build_forward, encode, estimates_from_tensor, forward, tac_layer, ForwardGraph};
pub use params::{ModelParams, TensorMismatch};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("parameter mismatch:\n{}", format_mismatches(.0))]
    TensorMismatch(Vec<TensorMismatch>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn format_mismatches(list: &[TensorMismatch]) -> String {
    list.iter().map(|m| format!("  {m}")).collect::<Vec<_>>().join("\n")
}
