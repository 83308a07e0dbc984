//! Desk-scale multimodal preference reward modeling.
//!
//! The crate trains small reward models that score (prompt, image) pairs from
//! the hidden state of a toy decoder-only multimodal transformer. A
//! cross-attention reward head reads early visual tokens against the final
//! EOS hidden state; per-perspective low-rank adapters specialize the frozen
//! backbone for alignment, fidelity, safety, and overall ranking. The trained
//! reward can then steer a toy denoising process at inference time through a
//! sequential Monte Carlo particle system.
//!
//! Module map:
//! - [`data`]: synthetic corpus generation, edit-distance overlap filtering,
//!   hard-negative mining, line-delimited dataset IO.
//! - [`backbone`]: the toy multimodal transformer and low-rank adapters.
//! - [`reward_head`]: cross-attention and linear/MLP reward heads.
//! - [`model`]: backbone + per-perspective modules glued into one reward
//!   model, with the full manual backward pass.
//! - [`objectives`]: ranking, preference-embedding, and cross-entropy losses.
//! - [`training`]: frozen-backbone fine-tuning loop and gradient checking.
//! - [`evaluation`]: pairwise accuracy, rank correlations, and F1.
//! - [`steering`]: toy diffusion process and SMC inference-time steering.

pub mod backbone;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod reward_head;
pub mod steering;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown perspective: {0}")]
    UnknownPerspective(String),
    #[error("adapter for perspective {0} is already merged")]
    AlreadyMerged(String),
    #[error("mining error: {0}")]
    Mining(String),
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
