//! High-dimensional sample correlation matrices.
//!
//! The crate covers the model `X = A Z` and the sample covariance and
//! correlation matrices built from it:
//!
//! - [`linalg`]: symmetric matrices, Jacobi eigensolver, spectral distributions
//! - [`datagen`]: seeded data generation and mixing matrices
//! - [`stats`]: sample covariance/correlation and comparison statistics
//! - [`lsd`]: Marchenko–Pastur and semicircle laws, Stieltjes solvers
//! - [`estimators`]: thresholding and moment-based spectrum estimation
//! - [`spiked`]: spiked correlation models and eigenvalue predictions

pub mod datagen;
pub mod estimators;
pub mod error;
pub mod linalg;
pub mod lsd;
pub mod rng;
pub mod spiked;
pub mod stats;

pub use error::{Error, Result};
pub use linalg::{DataMatrix, SymmetricMatrix};
pub use rng::RandomStream;
