//! Part-supervised robust recognition toolkit.

pub mod advtrain;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod fewshot;
pub mod image;
pub mod mpm;
pub mod nn;
pub mod optim;
pub mod part_data;
pub mod pseudolabel;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
