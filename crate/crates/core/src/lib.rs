//! Distributed multi-frequency calibration of sensor arrays.
//!
//! Per-wavelength complex sensor gains, apparent source directions,
//! directional gains and noise powers are estimated jointly from sample
//! covariance matrices. Gains and directional gains follow smooth spectral
//! models whose coefficients are agreed on by a network of agents through
//! consensus ADMM, either around a fusion center or by neighbour-to-neighbour
//! message passing. Directions come from a hard-thresholded correlation
//! against a local steering dictionary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod basis;
pub mod doa;
pub mod driver;
pub mod error;
pub mod model;
pub mod network;
pub mod scenario;

pub use error::{Error, Result};
