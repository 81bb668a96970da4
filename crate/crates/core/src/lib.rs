//! Wavelet-memory guided face restoration at toy scale: a small reverse-mode
//! tensor engine, wavelet packet analysis, a key-value wavelet memory,
//! RM³ modulation blocks, degradation synthesis, losses, metrics and the
//! training and restoration pipeline.

pub mod config;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
mod kernels;
pub mod memory;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod wavelet;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Reduction, Var};
pub use memory::{MemoryBank, Query};
pub use tensor::Tensor;
pub use wavelet::{wavelet_style_code, wpd_forward, wpd_inverse, WaveletCode, WaveletPacketTree};
