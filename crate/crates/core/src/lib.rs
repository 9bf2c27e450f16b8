//! Hierarchical learned video compression at desk scale.
//!
//! The crate is organized around a three-layer group of pictures: intra-coded
//! anchors (layer 1), a bi-directionally predicted middle frame (layer 2), and
//! motion-duplicated frame pairs (layer 3), followed by a recurrent quality
//! enhancement pass over the decoded sequence. Everything is built on a small
//! reverse-mode autodiff tape so the same network code serves training
//! (noise-relaxed quantization) and inference (hard quantization plus a
//! bit-exact range coder).
//!
//! Core math is generic over the scalar type: codec paths run in `f32`,
//! gradient verification in `f64`.

pub mod codecs;
pub mod entropy;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod wrqe;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the codec-path workhorse.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by gradient checks and numeric oracles.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision autodiff tape.
pub type Tape32 = tensor::tape::Tape<f32>;
/// Double-precision autodiff tape.
pub type Tape64 = tensor::tape::Tape<f64>;
/// The deployable codec model bundle (networks + densities), single precision.
pub type CodecModel32 = codecs::CodecModel<f32>;
