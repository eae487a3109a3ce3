//! Desk-scale simulator of federated instruction tuning with proxy guidance.
//!
//! Devices fine-tune low-rank adapters on a small byte-level language model
//! under federated averaging. Each round the server combines the tuned small
//! model with a frozen large model through logit arithmetic and distills the
//! combination back into the small model. Everything runs in f64 on CPU and
//! every run is bit-reproducible from its seed.

pub mod adapter;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod proxy;
pub mod rng;

pub use error::{Error, Result};
