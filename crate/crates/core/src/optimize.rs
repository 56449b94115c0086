//! Gradient ascent on the policy parameters: on-policy REINFORCE, FPG with a
//! replay window over recent iterations, and offline FPG on a fixed dataset.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::on_policy_reinforce;
use crate::dataset::{simulate_range, Dataset};
use crate::error::{input, Result};
use crate::features::FeatureMap;
use crate::fpg::{fpg_estimate, DEFAULT_LAMBDA};
use crate::mdp::{exact_evaluation, fnv1a, MdpSpec};
use crate::policy::Policy;

/// Parameter norm beyond which ascent stops.
pub const DIVERGENCE_NORM: f64 = 1e6;
pub const DEFAULT_STEP: f64 = 0.5;
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ascent {
    Reinforce,
    Fpg,
}

#[derive(Clone, Debug)]
pub struct AscentConfig {
    pub estimator: Ascent,
    pub step: f64,
    pub iters: usize,
    pub episodes_per_iter: usize,
    /// Number of most recent iterations whose data FPG pools.
    pub window: usize,
    pub lambda: f64,
    /// Defaults to one-hot features.
    pub phi: Option<FeatureMap>,
    pub seed: u64,
}

impl AscentConfig {
    pub fn new(estimator: Ascent, iters: usize, episodes_per_iter: usize, seed: u64) -> Self {
        Self {
            estimator,
            step: DEFAULT_STEP,
            iters,
            episodes_per_iter,
            window: DEFAULT_WINDOW,
            lambda: DEFAULT_LAMBDA,
            phi: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta_hash: String,
    /// Exact value of the policy used in this iteration.
    pub value: f64,
    pub est_norm: f64,
    /// Against the exact gradient; NaN when that gradient vanishes.
    pub cos_angle: f64,
    pub rel_err: f64,
    /// Cumulative episodes sampled up to and including this iteration.
    pub episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    /// Exact value after the last update.
    pub final_value: f64,
    pub final_theta: Vec<f64>,
    /// Set when ascent stopped early.
    pub stopped: Option<String>,
}

impl OptimizationTrace {
    /// Episodes consumed when the value first reached `threshold`.
    pub fn episodes_to_reach(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.value >= threshold).map(|r| r.episodes)
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema: fpg-trace v1")?;
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

pub fn theta_hash(theta: &[f64]) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
    format!("{:016x}", fnv1a(&bytes))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn row<P: Policy>(mdp: &MdpSpec, pol: &P, iter: usize, est: &[f64], episodes: usize) -> Result<TraceRow> {
    let ev = exact_evaluation(mdp, pol)?;
    let exact = &ev.grad_v;
    let (ne, nx) = (norm(est), norm(exact));
    let dot: f64 = est.iter().zip(exact).map(|(a, b)| a * b).sum();
    let diff: Vec<f64> = est.iter().zip(exact).map(|(a, b)| a - b).collect();
    let (cos_angle, rel_err) = if nx > 0.0 {
        let c = if ne > 0.0 { (dot / (ne * nx)).clamp(-1.0, 1.0) } else { 0.0 };
        (c, norm(&diff) / nx)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TraceRow {
        iter,
        theta_hash: theta_hash(pol.params()),
        value: ev.v,
        est_norm: ne,
        cos_angle,
        rel_err,
        episodes,
    })
}

/// Takes `theta + step * grad`; `None` once the norm passes the guard.
fn update<P: Policy>(pol: &P, grad: &[f64], step: f64) -> Result<std::result::Result<P, String>> {
    let theta: Vec<f64> = pol.params().iter().zip(grad).map(|(t, g)| t + step * g).collect();
    let n = norm(&theta);
    if !(n <= DIVERGENCE_NORM) {
        return Ok(Err(format!("parameter norm {n:.3e} exceeds {DIVERGENCE_NORM:.0e}; stopped")));
    }
    Ok(Ok(pol.with_params(&theta)?))
}

fn finish<P: Policy>(mdp: &MdpSpec, pol: &P, mut trace: OptimizationTrace) -> Result<(OptimizationTrace, P)>
where
    P: Clone,
{
    trace.final_value = exact_evaluation(mdp, pol)?.v;
    trace.final_theta = pol.params().to_vec();
    Ok((trace, pol.clone()))
}

/// Online ascent. Iteration `i` samples episode streams
/// `i * E .. (i + 1) * E` of `seed` under the current policy.
pub fn ascend<P: Policy + Clone>(mdp: &MdpSpec, init: &P, cfg: &AscentConfig) -> Result<(OptimizationTrace, P)> {
    if !(cfg.step >= 0.0) {
        return Err(input("step size must be non-negative"));
    }
    if cfg.episodes_per_iter == 0 {
        return Err(input("need at least one episode per iteration"));
    }
    if cfg.estimator == Ascent::Fpg && cfg.window == 0 {
        return Err(input("replay window must be at least 1"));
    }
    let phi = cfg.phi.clone().unwrap_or_else(|| FeatureMap::one_hot(mdp.n_states(), mdp.n_actions()));
    let e = cfg.episodes_per_iter;
    let mut pol = init.clone();
    let mut trace = OptimizationTrace::default();
    let mut window: VecDeque<Dataset> = VecDeque::new();
    for i in 0..cfg.iters {
        let fresh = simulate_range(mdp, &pol, i * e..(i + 1) * e, cfg.seed)?;
        let grad = match cfg.estimator {
            Ascent::Reinforce => on_policy_reinforce(&fresh, &pol)?.grad,
            Ascent::Fpg => {
                window.push_back(fresh);
                while window.len() > cfg.window {
                    window.pop_front();
                }
                let pooled = Dataset::concat(window.iter())?;
                fpg_estimate(&pooled, &pol, &phi, cfg.lambda, mdp.initial_dist())?.grad
            }
        };
        trace.rows.push(row(mdp, &pol, i, &grad, (i + 1) * e)?);
        match update(&pol, &grad, cfg.step)? {
            Ok(next) => pol = next,
            Err(msg) => {
                trace.stopped = Some(msg);
                break;
            }
        }
    }
    finish(mdp, &pol, trace)
}

#[derive(Clone, Debug)]
pub struct OfflineConfig {
    pub step: f64,
    pub iters: usize,
    pub lambda: f64,
    pub phi: FeatureMap,
    pub xi: Vec<f64>,
}

/// Ascent where every gradient is estimated by FPG from the same data.
/// `mdp` is used only to record exact values in the trace.
pub fn offline_ascend<P: Policy + Clone>(ds: &Dataset, mdp: &MdpSpec, init: &P, cfg: &OfflineConfig) -> Result<(OptimizationTrace, P)> {
    if !(cfg.step >= 0.0) {
        return Err(input("step size must be non-negative"));
    }
    let mut pol = init.clone();
    let mut trace = OptimizationTrace::default();
    for i in 0..cfg.iters {
        let grad = fpg_estimate(ds, &pol, &cfg.phi, cfg.lambda, &cfg.xi)?.grad;
        trace.rows.push(row(mdp, &pol, i, &grad, ds.len())?);
        match update(&pol, &grad, cfg.step)? {
            Ok(next) => pol = next,
            Err(msg) => {
                trace.stopped = Some(msg);
                break;
            }
        }
    }
    finish(mdp, &pol, trace)
}

/// Exponential smoothing `s_t = alpha x_t + (1 - alpha) s_{t-1}`.
pub fn smooth(xs: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut s = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for &x in xs {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    out
}
