//! Quantization-error compensation for transformer inference.
//!
//! A quantized backbone computes `X Ŵ` while a second worker adds
//! `(X A_r) B_r`, the rank-`r` SVD approximation of the residual
//! `ΔW = W - Ŵ`. Ranks per matrix come from a priority score that mixes
//! spectrum salience, output sensitivity and expert routing mass.

pub mod allocator;
pub mod compensator;
pub mod error;
pub mod ids;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod sensitivity;
pub mod toymodel;

pub use error::{Error, Result};
pub use ids::{MatrixId, Slot, WindowId, WindowKind};
pub use numerics::DenseMatrix;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/profiling.md")]
    mod profiling {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
