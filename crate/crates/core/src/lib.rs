//! Attention-based GRU translation with word-prediction supervision.

pub mod cli;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;
pub mod word_prediction;

pub use error::{NmtError, Result};
