//! Limiting spectral distributions of sample correlation matrices.
//!
//! Closed forms are provided for the Marchenko–Pastur and semicircle laws.
//! For a general population spectrum `H` (given as an [`AtomicMeasure`]) the
//! Stieltjes transform is found by damped fixed-point iteration, and
//! densities are recovered by Stieltjes inversion `f(x) = im s(x + iη) / π`.

mod law;
mod measure;
mod solver;

pub use law::{support_edges, Grid, LawHeader, LawKind, LimitLaw, DEFAULT_ETA};
pub use measure::AtomicMeasure;
pub use solver::{
    companion_residual, mp_density, mp_edges, mp_stieltjes_closed, semicircle_density,
    semicircle_stieltjes, solve_stieltjes, solve_stieltjes_zero_gamma, underline_s, ComplexPoint,
    SolverOptions,
};
