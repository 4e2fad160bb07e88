//! Active-sensing localization with learned beamforming codebooks.
//!
//! A base station localizes a user from a short sequence of uplink
//! pilots reflected off one or more reconfigurable intelligent
//! surfaces. An LSTM compresses the measurement history, a sensing
//! head proposes reflection and beamforming vectors, and a vector
//! quantizer snaps those proposals onto trainable unit-modulus
//! codebooks so that only codeword indices ever cross the control
//! link. Training runs end to end through the measurement equation
//! with a straight-through gradient estimator around the quantizer.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod training;

pub use error::Error;
