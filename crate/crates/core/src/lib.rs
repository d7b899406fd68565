//! Operator-adapted wavelets (gamblets) for SPD operators and
//! near-minimax recovery of their solutions from noisy measurements.
//!
//! The pipeline is bottom-up: [`hierarchy`] builds nested pre-Haar
//! measurement functions, [`operators`] discretizes an elliptic operator or a
//! grounded graph Laplacian, [`gamblets`] computes the multiresolution
//! decomposition, and [`denoise`] / [`graphdenoise`] recover signals from
//! noisy measurements.

pub mod cli;
pub mod denoise;
pub mod error;
pub mod gamblets;
pub mod graphdenoise;
pub mod hierarchy;
pub mod numerics;
pub mod operators;

pub use error::{GambletError, Result};
pub use nalgebra;
pub use numerics::{RectMatrix, SymMatrix, Vector};
