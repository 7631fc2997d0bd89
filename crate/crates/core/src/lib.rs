//! Two-step parameter-efficient fine-tuning of a small LLaMA-style decoder:
//! domain-adaptive pretraining of an adapter, then downstream classification
//! with stacked adapters over a frozen base.

pub mod adapters;
pub mod autograd;
pub mod data;
pub mod error;
pub mod hpo;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stacking;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
