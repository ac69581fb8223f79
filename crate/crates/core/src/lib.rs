//! Adversarial testing toolkit for recurrent neural networks.
//!
//! The crate bundles a small recurrent engine that records every hidden and
//! cell state of a forward pass, state-based coverage metrics over those
//! traces, the objectives that drive gradient-based input search, synthesis
//! of discrete and continuous adversarial inputs, sequence-model metrics,
//! and a campaign harness tying them together.

pub mod coverage;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod rnn;
pub mod synthesis;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
