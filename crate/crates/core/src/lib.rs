//! Geostatistical interpolation with a two-branch Bayesian neural network.
//!
//! Point-sampled targets are predicted from an observation-centred patch of
//! a gridded auxiliary variable plus the standardised location. Monte Carlo
//! dropout turns the network into a Gaussian-mixture posterior predictive,
//! from which maps, uncertainty decompositions and scores are derived.

pub mod data;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predict;
pub mod rng;
pub mod synth;
pub mod train;
