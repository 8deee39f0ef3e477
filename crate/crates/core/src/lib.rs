//! Faithful fine-tuning on a desk-scale transformer.
//!
//! The crate covers the whole pipeline: a small autodiff engine ([`nn`]), a
//! decoder-only transformer with low-rank adapters ([`model`]), a synthetic
//! fact world with prompt rendering and entity tagging ([`data`]), hotspot
//! span extraction ([`spans`]), the decomposed training objectives
//! ([`losses`]), probing-based module selection ([`probing`]), the
//! fine-tuning loop ([`training`]) and truthfulness metrics ([`eval`]).

pub mod data;
pub mod error;
pub mod cli;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod probing;
pub mod spans;
pub mod training;
pub mod util;

pub use error::{Error, Result};
