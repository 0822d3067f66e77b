pub mod autodiff;
pub mod codebook;
pub mod data;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod quantizers;
pub mod replacement;
pub mod tensor;

pub use codebook::{Codebook, UsageStats};
pub use error::{Error, ErrorKind, Result};
pub use quantizers::{Method, QuantizationResult, QuantizerConfig};
pub use tensor::Tensor;
