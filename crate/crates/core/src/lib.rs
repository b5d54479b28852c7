//! Res2Net multi-scale residual blocks built from first principles.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense NCHW arrays with channel split/concat.
//! - [`nnops`]: convolution, batch norm, pooling, activations.
//! - [`autodiff`]: a reverse-mode tape plus a finite-difference checker.
//! - [`res2net`]: the hierarchical block, its SE and grouped variants, the
//!   bottleneck baseline and whole-network templates.
//! - [`analysis`]: parameter/MAC accounting, the width-for-scale solver,
//!   dimension sweeps and receptive-field analysis.
//! - [`harness`]: datasets, SGD training, evaluation, Grad-CAM and weight files.
//!
//! With the default `parallel` feature, inner loops run on rayon. Work is
//! split into fixed chunks and reduced in index order, so results do not
//! depend on the thread count.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod nnops;
pub mod par;
pub mod res2net;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
