//! Nonlocal elliptic problems of fractional p-Laplacian type with
//! heterogeneous kernels, and numerical homogenization diagnostics.

pub mod error;
pub mod fraccalc;
pub mod gamma;
mod gauss;
pub mod grid;
pub mod homog;
pub mod kernels;
pub mod solver;

pub use error::{Error, Result};
