//! Emulation and Bayesian calibration for computer models whose output is
//! high-dimensional semi-continuous spatial data (zero-inflated positive
//! fields).
//!
//! The pipeline splits a semi-continuous field into a binary presence
//! pattern and a positive-thickness pattern, reduces both to low-dimensional
//! scores (logistic PCA for presence, probabilistic PCA with missing values
//! for thickness), emulates each score with a one-dimensional Gaussian
//! process over input space, and calibrates the input parameters by
//! Metropolis-within-Gibbs sampling of a factorized posterior whose
//! continuous part uses Woodbury-accelerated low-rank covariance algebra.

pub mod bases;
pub mod calibration;
pub mod config;
pub mod data;
pub mod emulator;
pub mod error;
pub mod gp;
pub mod lowrank;
pub mod lpca;
pub mod ppca;
pub mod projection;
pub mod synthetic;

pub use error::{Error, Result};
