//! Convolutional layers with filters decomposed over fixed bases
//! (Fourier-Bessel, random, PCA), a small double-precision training stack,
//! and tools for checking deformation-stability bounds numerically.

pub mod bases;
pub mod bessel;
mod codec;
pub mod config;
pub mod data;
pub mod dcf;
pub mod error;
pub mod model_io;
pub mod nn;
pub mod stability;
pub mod tensor;
pub mod train;

pub use bases::{BasisKind, BasisSet, FBMode, Parity};
pub use dcf::{CompressionReport, DcfLayer, Decomposition};
pub use error::{DcfError, Result};
pub use nn::{Layer, Mode, Network, TrainConfig};
pub use tensor::Tensor;
