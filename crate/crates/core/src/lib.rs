//! Teacher-student anomaly detection with attention recalibration through
//! Fisher-weighted mixed-precision quantization and fine-tuning.

pub mod error;
pub mod hqs;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod synthdata;
pub mod models;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{adam_step, AdamState, Gradients, Tape, Tensor, Var};
