pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod par;
pub mod persistence;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
