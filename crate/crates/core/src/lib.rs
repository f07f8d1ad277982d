//! Federated fine-tuning with a learned gradient codec.
//!
//! The crate simulates federated LoRA fine-tuning of a small target model in
//! which clients compress their adapter updates with an autoencoder trained
//! on recorded update snapshots, with optional client-level differential
//! privacy.

pub mod bundle;
pub(crate) mod bytes;
pub mod capture;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod graph;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod privacy;
pub mod report;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
