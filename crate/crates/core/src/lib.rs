//! Attention-based concept disentanglement for compositional zero-shot
//! learning.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod emd;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
