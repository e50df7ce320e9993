//! Galerkin discretization of the 3D fractional Laplacian with Duffy-type
//! singular quadrature.

pub mod assembly;
pub mod duffy;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod mesh;
pub mod oracle;
pub mod poly;
pub mod quadrature;
pub mod solver;
pub mod study;

pub use error::{Error, Result};
