//! Numerical laboratory for single-interior-measurement coefficient
//! identification in two dimensions.

pub mod coefficients;
pub mod config;
pub mod contour;
pub mod distance;
pub mod error;
pub mod expr;
pub mod fit;
pub mod geometry;
pub mod grid;
pub mod identity;
pub mod pipeline;
pub mod sectors;
pub mod solver;
pub mod stability;

pub use error::{Error, Result};
pub use grid::{build_grid, integrate, norm, ComplexField, Domain, Grid, GridField, Mask, NormKind, RealField};
pub use num_complex::Complex64;
