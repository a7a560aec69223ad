//! Attention-shifting unlearning on a desk-scale transformer.
//!
//! The pipeline: [`corpus`] generates fictitious-author QA data, [`unlearn`]
//! pretrains a tiny [`model`] until it memorizes every answer, then trains
//! low-rank attention adapters so that attention on the forget split moves
//! away from fact-bearing tokens ([`importance`], [`shift`]) while attention on
//! neighbouring data is mildly reinforced. [`eval`] measures what was
//! forgotten and what survived.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod importance;
pub mod model;
pub mod shift;
pub mod unlearn;

pub use error::{Error, Result};
