//! One entry point over every gradient estimator, used by the bootstrap,
//! the sweeps and the command line.

use crate::baselines::{gpomdp_estimate, is_estimate, on_policy_reinforce};
use crate::dataset::Dataset;
use crate::discounted::{discounted_fit, discounted_fpg_estimate};
use crate::error::{config, Result};
use crate::features::FeatureMap;
use crate::fpg::{fpg_estimate, model_based_estimate, GradientEstimate, Method, DEFAULT_LAMBDA};
use crate::policy::{ActionPolicy, Policy};

#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub method: Method,
    pub lambda: f64,
    pub phi: FeatureMap,
    /// Initial distribution paired with the target's first-step action
    /// probabilities.
    pub xi: Vec<f64>,
    /// Discount for the time-homogeneous variant.
    pub gamma: Option<f64>,
}

impl EstimatorConfig {
    pub fn fpg(phi: FeatureMap, xi: Vec<f64>) -> Self {
        Self { method: Method::Fpg, lambda: DEFAULT_LAMBDA, phi, xi, gamma: None }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Runs the configured estimator. Importance-sampling methods need the
/// behavior policy; the FPG family never looks at it.
pub fn estimate(
    ds: &Dataset,
    target: &dyn Policy,
    behavior: Option<&dyn ActionPolicy>,
    cfg: &EstimatorConfig,
) -> Result<GradientEstimate> {
    let need_behavior = || behavior.ok_or_else(|| config(format!("method '{}' needs the behavior policy", cfg.method)));
    match (cfg.method, cfg.gamma) {
        (Method::Fpg, Some(g)) | (Method::DiscountedFpg, Some(g)) => {
            let fit = discounted_fit(ds, target, &cfg.phi, cfg.lambda, g)?;
            discounted_fpg_estimate(&fit, target, &cfg.phi, &cfg.xi)
        }
        (Method::DiscountedFpg, None) => Err(config("discounted estimator needs a discount factor")),
        (Method::Fpg, None) => fpg_estimate(ds, target, &cfg.phi, cfg.lambda, &cfg.xi),
        (Method::ModelBased, _) => model_based_estimate(ds, target, &cfg.phi, cfg.lambda, &cfg.xi),
        (Method::Is, _) => Ok(is_estimate(ds, target, need_behavior()?)?.estimate),
        (Method::Gpomdp, _) => Ok(gpomdp_estimate(ds, target, need_behavior()?)?.estimate),
        (Method::Reinforce, _) => on_policy_reinforce(ds, target),
    }
}
