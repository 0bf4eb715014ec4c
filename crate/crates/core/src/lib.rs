//! Slice-to-volume reconstruction with Gaussian primitives.
//!
//! A high-resolution volume is represented as a cloud of anisotropic 3D
//! Gaussians and fitted to thick, motion-corrupted slice stacks. The slice
//! PSF is folded into each primitive's covariance in closed form, and the
//! per-slice rigid motion is estimated jointly with the field.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod forward;
pub mod geom;
pub mod init;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod motion;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
