//! Covariance magnetometry simulation toolkit.
//!
//! Simulates two non-interacting spin-qubit magnetometers exposed to a shared
//! (correlated) magnetic field plus independent local fields, runs the full
//! measurement chain (field synthesis, dynamical-decoupling phase accumulation,
//! quantum projection, noisy readout), and estimates shot-to-shot correlations
//! between the two raw signal streams. Closed-form predictions for every
//! estimated quantity live in [`theory`], so each Monte Carlo result can be
//! checked against an analytic route.

pub mod error;
pub mod estimators;
pub mod field;
pub mod harness;
pub mod measurement;
pub mod rng;
pub mod sequence;
pub mod theory;

pub use error::{Error, Result};
