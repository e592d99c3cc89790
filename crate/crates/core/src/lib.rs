//! Noise covariance identification for linear time-invariant state-space
//! models from outlier-contaminated measurement data.
//!
//! The estimator matches empirical lagged autocovariances of Kalman predictor
//! innovations against their model-implied linear expressions in
//! `[vec(Q); vec(R)]` (autocovariance least squares), robustified in two
//! tiers: MAD-thresholded removal of grossly contaminated innovations, then
//! Huber-weighted iteratively reweighted least squares on the resulting
//! regression.
//!
//! Module map:
//! - [`ssm`]: model types and trajectory simulation with optional
//!   measurement outliers
//! - [`kalman`]: steady-state gain, fixed-gain predictor, time-varying
//!   filter, discrete Lyapunov solver
//! - [`als`]: design matrix, theoretical/empirical autocovariances, OLS,
//!   PSD projection
//! - [`robust`]: MAD scale, innovation outlier detection, Huber IRLS
//! - [`estimator`]: the batched outer loop combining the above
//! - [`baselines`]: comparison filters (oracle, fixed, correntropy,
//!   Student-t)
//! - [`experiments`]: the two-phase Monte Carlo study and parameter sweeps

pub mod als;
pub mod baselines;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod kalman;
pub mod linalg;
pub mod robust;
pub mod ssm;

pub use error::{Error, Result};
