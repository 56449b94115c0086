//! Importance-sampling policy-gradient baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config, FpgError, Result};
use crate::fpg::{GradientEstimate, Method};
use crate::policy::{ActionPolicy, Policy};

/// Log-weights above this are clamped before exponentiation.
pub const LOG_WEIGHT_CAP: f64 = 700.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(sum w)^2 / sum w^2`.
    pub ess: f64,
    /// Number of weights that hit the `exp(700)` clamp.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ISEstimate {
    pub estimate: GradientEstimate,
    pub weights: WeightStats,
}

impl ISEstimate {
    pub fn grad(&self) -> &[f64] {
        &self.estimate.grad
    }
}

fn check(ds: &Dataset, target: &dyn Policy, behavior: Option<&dyn ActionPolicy>) -> Result<()> {
    if let Some(b) = behavior {
        if b.n_states() != target.n_states() || b.n_actions() != target.n_actions() {
            return Err(config("behavior and target policies have different dimensions"));
        }
    }
    if ds.is_empty() {
        return Err(crate::error::input("need at least one episode"));
    }
    ds.validate(target.n_states(), target.n_actions(), false)
}

/// Per-step cumulative log-ratios `sum_{h' <= h} log pi / pi_b` of one
/// episode; `None` behavior means on-policy (all zeros).
fn cumulative_log_ratios(
    ds: &Dataset,
    k: usize,
    target: &dyn Policy,
    behavior: Option<&dyn ActionPolicy>,
    probs: &mut [f64],
) -> Result<Vec<f64>> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(ds.horizon());
    for (h, st) in ds.episodes[k].steps.iter().enumerate() {
        if let Some(b) = behavior {
            b.probs_into(h, st.s, probs);
            let pb = probs[st.a];
            if pb <= 0.0 {
                return Err(FpgError::ZeroBehaviorProbability { k, h: h + 1, s: st.s, a: st.a });
            }
            target.probs_into(h, st.s, probs);
            acc += probs[st.a].ln() - pb.ln();
        }
        out.push(acc);
    }
    Ok(out)
}

fn weight(logw: f64, clamped: &mut usize) -> f64 {
    if logw > LOG_WEIGHT_CAP {
        *clamped += 1;
        LOG_WEIGHT_CAP.exp()
    } else {
        logw.exp()
    }
}

fn stats(ws: &[f64], clamped: usize) -> WeightStats {
    let sum: f64 = ws.iter().sum();
    let sq: f64 = ws.iter().map(|w| w * w).sum();
    WeightStats {
        min: ws.iter().cloned().fold(f64::INFINITY, f64::min),
        max: ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean: sum / ws.len() as f64,
        ess: if sq > 0.0 { sum * sum / sq } else { 0.0 },
        clamped,
    }
}

fn trajectory_is(
    ds: &Dataset,
    target: &dyn Policy,
    behavior: Option<&dyn ActionPolicy>,
    per_step: bool,
    method: Method,
) -> Result<ISEstimate> {
    let start = Instant::now();
    check(ds, target, behavior)?;
    let (na, m, hz) = (target.n_actions(), target.n_params(), ds.horizon());
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut episode_weights = Vec::with_capacity(ds.len());
    let mut clamped = 0;
    for (k, ep) in ds.episodes.iter().enumerate() {
        let logw = cumulative_log_ratios(ds, k, target, behavior, &mut probs)?;
        let w_full = weight(logw[hz - 1], &mut clamped);
        episode_weights.push(w_full);
        // reward-to-go, weighted per step for the GPOMDP form
        let mut to_go = vec![0.0; hz + 1];
        for h in (0..hz).rev() {
            let r = if per_step {
                let mut dummy = 0;
                weight(logw[h], &mut dummy) * ep.steps[h].r
            } else {
                ep.steps[h].r
            };
            to_go[h] = to_go[h + 1] + r;
        }
        for (h, st) in ep.steps.iter().enumerate() {
            let coef = if per_step { to_go[h] } else { w_full * to_go[h] };
            if coef == 0.0 {
                continue;
            }
            target.score_into(h, st.s, st.a, &mut score);
            for (g, sc) in grad.iter_mut().zip(&score) {
                *g += coef * sc;
            }
        }
    }
    let k = ds.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    let mut estimate = GradientEstimate::new(grad, method, ds, None, start);
    if clamped > 0 {
        estimate.warnings.push(format!("{clamped} importance weights clamped at exp({LOG_WEIGHT_CAP})"));
    }
    Ok(ISEstimate { estimate, weights: stats(&episode_weights, clamped) })
}

/// `(1/K) sum_k w_k sum_h (sum_{h' >= h} r_h') score(s_h, a_h)` with the full
/// trajectory ratio `w_k`.
pub fn is_estimate(ds: &Dataset, target: &dyn Policy, behavior: &dyn ActionPolicy) -> Result<ISEstimate> {
    trajectory_is(ds, target, Some(behavior), false, Method::Is)
}

/// Causally truncated weights: each reward `r_h'` carries only the ratio of
/// the first `h'` steps.
pub fn gpomdp_estimate(ds: &Dataset, target: &dyn Policy, behavior: &dyn ActionPolicy) -> Result<ISEstimate> {
    trajectory_is(ds, target, Some(behavior), true, Method::Gpomdp)
}

/// Plain Monte-Carlo REINFORCE on data drawn from the target itself.
pub fn on_policy_reinforce(ds: &Dataset, target: &dyn Policy) -> Result<GradientEstimate> {
    Ok(trajectory_is(ds, target, None, false, Method::Reinforce)?.estimate)
}
