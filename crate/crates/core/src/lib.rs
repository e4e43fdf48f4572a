//! Spatial transformer point convolution (STPC) for point-cloud semantic
//! segmentation, built on a small self-contained reverse-mode autodiff
//! engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tape`], [`tensor`], [`optim`], [`nn`]: dense `f64` tensors, the
//!   differentiation tape, Adam and perceptron helpers;
//! - [`geometry`]: KNN, random subsampling, nearest-point upsampling;
//! - [`stpc`]: the direction dictionary, sparse direction encoding,
//!   spatial transform and anisotropic convolution, plus the isotropic
//!   pooling variants used for ablations;
//! - [`segnet`]: the encoder-decoder segmentation network and its
//!   training loop;
//! - [`metrics`], [`dataio`], [`checkpoint`], [`gradcheck`]: evaluation,
//!   synthetic data and file formats, parameter dumps, finite-difference
//!   checks.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod segnet;
pub mod stpc;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{NeighborIndex, PointCloud};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/stpc-layer.md")]
    pub mod stpc_layer {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/plotting.md")]
    pub mod plotting {}
}
