//! Off-policy policy-gradient estimation by double fitted iteration with
//! linear features, plus exact oracles, importance-sampling baselines,
//! covariance and bootstrap inference, and policy optimization.

pub mod baselines;
pub mod dataset;
pub mod discounted;
pub mod envs;
pub mod estimator;
pub mod error;
pub mod features;
pub mod fpg;
pub mod inference;
pub mod linalg;
pub mod mdp;
pub mod metrics;
pub mod optimize;
pub mod policy;

pub use error::{FpgError, Result};
