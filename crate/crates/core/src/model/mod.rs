//! Tiny decoder-only transformer with per-head attention capture and
//! low-rank adapters on the attention projections.
//!
//! All arithmetic is `f64`. Sequences are processed as a *packed batch*:
//! the token rows of several sequences are stacked into one matrix so the
//! projections and the MLP run as single matrix products, while attention is
//! evaluated per sequence segment. No padding is ever introduced.

mod backward;
pub mod checkpoint;
mod forward;
mod params;

pub use backward::{backward, Gradients, Trainable, Upstream};
pub(crate) use forward::completion_entropy;
pub use forward::{
    forward, forward_batch, generate, generate_many, greedy_argmax, logits_entropy, predictive_entropy,
    AttentionTensor, BatchTrace, ForwardTrace,
};
pub use params::{AdapterBank, AdapterSite, LayerParams, LowRank, ModelConfig, ParamSet, Parameters};

pub type TokenId = u32;
