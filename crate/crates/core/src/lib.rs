//! Multi-receiver OFDM passive radar processing.
//!
//! The pipeline runs from synthetic observations to target positions and velocities:
//! [`waveform`] simulates the observations, [`cgd_solver`] recovers the
//! structured delay-Doppler matrix, [`spectral`] extracts per-receiver paths,
//! and [`localize`] / [`neural_locator`] turn those paths into targets.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub mod error;
pub mod cgd_solver;
pub mod geometry;
pub mod harness;
pub mod localize;
pub mod neural_locator;
pub(crate) mod io;
pub mod spectral;
pub mod structured_ops;
pub mod waveform;

pub use error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;
