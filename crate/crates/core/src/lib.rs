//! Cross-domain few-shot learning by localized task expansion and inner-task
//! decomposition.
//!
//! Support images are localized with class activation maps, their
//! foregrounds rotated and exchanged across backgrounds to form an expanded
//! support set, and a copy of the encoder is adapted on inner episodes drawn
//! from that set before each outer metric-learning update.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod expand;
pub mod heads;
pub mod inner;
pub(crate) mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod viz;
pub mod wsol;

pub use error::{Error, Result};
