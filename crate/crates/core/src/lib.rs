//! Hierarchical recurrent encoder-decoder (HRED) for context-aware query
//! suggestion, with the count-based baselines and ranking evaluation used to
//! compare against it.

pub mod baselines;
mod binio;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
