//! Near-field multiuser localization toolkit for an extremely large antenna
//! array (ELAA) read out through a limited number of RF chains.
//!
//! The library covers the full uplink pipeline: near-field channel synthesis
//! with a directional radiation pattern and free-space path loss, analog
//! beamforming with colored noise, array partitioning into subarrays, a
//! message-passing position estimator (APLE-LM) with analytic gradients and
//! Hessians, Bayesian Cramér–Rao bounds, and a Monte Carlo experiment
//! harness with an exhaustive-search baseline.

pub mod bcrb;
pub mod channel;
pub mod deriv;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod partition;
pub mod rf;

pub use error::{Error, Result};
pub use geometry::{ArrayGeometry, CartesianPosition, PolarPosition};
