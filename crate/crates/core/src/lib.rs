//! Capacity-matched sparse vs dense MLP training with gradient-flow
//! instrumentation and paired statistics.
//!
//! A sparse network of width `input + 4` with a fixed random mask is trained
//! alongside a narrower dense network holding the same number of active
//! weights per layer. Both record gradient-norm measures during training; the
//! [`stats`] module then tests whether sparse beats dense per configuration
//! and how closely each measure tracks test performance.
//!
//! The guide under `book/` walks through the pieces; its code samples run as
//! doc-tests of this crate.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradflow;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparsity;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/pairing.md")]
    pub mod pairing {}
    #[doc = include_str!("../../../book/src/gradient-flow.md")]
    pub mod gradient_flow {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    pub mod statistics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub mod file_formats {}
}
