//! Toy-scale conditional diffusion with low-rank adapters predicted by a
//! hypernetwork, plus classifier-free and hybrid-model guidance.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod hypernet;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod schedule;
pub mod tensor;
pub mod toy_data;
pub mod training;

pub use error::{Error, Result};
