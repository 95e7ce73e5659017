//! Modality-conditioned masked autoencoding for multi-modality 3D volumes.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod modality;
pub mod network;
pub mod objectives;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
