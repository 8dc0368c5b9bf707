//! Debiasing lab for masked language models: a frozen toy encoder gains
//! trainable profession rows, trained on gender-swapped text, and is
//! compared against full second-phase training.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod files;
pub mod model;
pub mod neutralize;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
