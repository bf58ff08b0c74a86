//! Lattice laboratory for the renormalized stochastic objects of the
//! two-dimensional dynamical phi^4 model with a noise-correlated diffusion matrix.

pub mod chebyshev;
pub mod corr_field;
pub mod error;
pub mod fft;
pub mod gauss_kernels;
pub mod lattice_noise;
pub mod linalg;
pub mod mc_experiments;
pub mod quadrature;
pub mod regular_part;
pub mod renorm_trees;
pub mod stats;
pub mod wick_calculus;

pub use error::{Error, Result};
