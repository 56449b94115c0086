//! Accuracy metrics against the exact gradient and the dataset-size and
//! distribution-shift sweeps built on them.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::simulate;
use crate::error::{input, FpgError, Result};
use crate::estimator::{estimate, EstimatorConfig};
use crate::features::{chi2_restricted, max_mismatch_condition, nu_theta, population_covariance, FeatureMap};
use crate::fpg::{Method, DEFAULT_LAMBDA};
use crate::mdp::{exact_policy_gradient, MdpSpec};
use crate::policy::{EpsilonGreedy, SoftmaxTabularPolicy};

/// Behavior mixing levels used by the shift sweep when none are given.
pub const DEFAULT_EPSILONS: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 0.7];

/// `(cos angle, relative l2 error)` of `est` against `exact`.
pub fn metric_cos_and_rel(est: &[f64], exact: &[f64]) -> Result<(f64, f64)> {
    if est.len() != exact.len() {
        return Err(input("gradient lengths differ"));
    }
    let nx = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nx == 0.0 {
        return Err(FpgError::DegenerateTarget);
    }
    let ne = est.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = est.iter().zip(exact).map(|(a, b)| a * b).sum();
    let diff = est.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let cos = if ne > 0.0 { (dot / (ne * nx)).clamp(-1.0, 1.0) } else { 0.0 };
    Ok((cos, diff / nx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub cos_angle: f64,
    pub rel_err: f64,
    /// Worst per-step condition number of the whitened target covariance.
    pub mismatch_cond: f64,
    #[serde(rename = "chi2_F")]
    pub chi2_f: f64,
    /// The only column that varies between identical runs.
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub mdp: MdpSpec,
    pub target: SoftmaxTabularPolicy,
    pub phi: FeatureMap,
    pub lambda: f64,
    pub gamma: Option<f64>,
}

impl SweepSpec {
    pub fn new(mdp: MdpSpec, target: SoftmaxTabularPolicy) -> Self {
        let phi = FeatureMap::one_hot(mdp.n_states(), mdp.n_actions());
        Self { mdp, target, phi, lambda: DEFAULT_LAMBDA, gamma: None }
    }
}

/// Shift diagnostics of the `epsilon`-greedy behavior, from population
/// covariances. `chi2` is infinite when the behavior misses a target direction.
pub fn shift_diagnostics(spec: &SweepSpec, epsilon: f64) -> Result<(f64, f64)> {
    let beh = EpsilonGreedy::new(spec.target.clone(), epsilon)?;
    let sb = population_covariance(&spec.mdp, &beh, &spec.phi)?;
    let st = population_covariance(&spec.mdp, &spec.target, &spec.phi)?;
    let cond = max_mismatch_condition(&sb, &st);
    let nu = nu_theta(&spec.mdp, &spec.target, &spec.phi)?;
    let chi2 = match chi2_restricted(&nu.nu, &sb) {
        Ok(c) => c,
        Err(FpgError::UncoveredDirection { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok((cond, chi2))
}

/// One row per `(K, epsilon, seed, method)`. All methods in a cell see the
/// same dataset, simulated from `seed` under the `epsilon`-greedy target.
/// Rows are sorted by `(K, epsilon, seed, method order)`.
pub fn sweep(spec: &SweepSpec, ks: &[usize], epsilons: &[f64], seeds: &[u64], methods: &[Method]) -> Result<Vec<MetricRow>> {
    if ks.is_empty() || epsilons.is_empty() || seeds.is_empty() || methods.is_empty() {
        return Err(input("sweep needs at least one K, epsilon, seed and method"));
    }
    let exact = exact_policy_gradient(&spec.mdp, &spec.target)?;
    if exact.iter().all(|&g| g == 0.0) {
        return Err(FpgError::DegenerateTarget);
    }
    let diags = epsilons.iter().map(|&e| shift_diagnostics(spec, e)).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for &k in ks {
        for (ei, &eps) in epsilons.iter().enumerate() {
            for &seed in seeds {
                cells.push((k, ei, eps, seed));
            }
        }
    }
    let cfg = EstimatorConfig {
        method: Method::Fpg,
        lambda: spec.lambda,
        phi: spec.phi.clone(),
        xi: spec.mdp.initial_dist().to_vec(),
        gamma: spec.gamma,
    };
    let nested: Vec<Vec<MetricRow>> = cells
        .par_iter()
        .map(|&(k, ei, eps, seed)| {
            let beh = EpsilonGreedy::new(spec.target.clone(), eps)?;
            let ds = simulate(&spec.mdp, &beh, k, seed)?;
            methods
                .iter()
                .map(|&method| {
                    let start = Instant::now();
                    let est = estimate(&ds, &spec.target, Some(&beh), &EstimatorConfig { method, ..cfg.clone() })?;
                    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    let (cos_angle, rel_err) = metric_cos_and_rel(&est.grad, &exact)?;
                    Ok(MetricRow {
                        method: method.to_string(),
                        k,
                        epsilon: eps,
                        seed,
                        cos_angle,
                        rel_err,
                        mismatch_cond: diags[ei].0,
                        chi2_f: diags[ei].1,
                        wall_ms,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    // cells were built in sorted order and par_iter preserves it
    Ok(nested.into_iter().flatten().collect())
}

pub fn sweep_k(spec: &SweepSpec, epsilon: f64, ks: &[usize], seeds: &[u64], methods: &[Method]) -> Result<Vec<MetricRow>> {
    sweep(spec, ks, &[epsilon], seeds, methods)
}

pub fn sweep_shift(spec: &SweepSpec, epsilons: &[f64], k: usize, seeds: &[u64], methods: &[Method]) -> Result<Vec<MetricRow>> {
    sweep(spec, &[k], epsilons, seeds, methods)
}

pub fn write_rows<W: Write>(rows: &[MetricRow], mut w: W) -> Result<()> {
    writeln!(w, "# schema: fpg-metrics v1")?;
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_rows(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_rows(rows, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Median with NaNs dropped; NaN for an empty input.
pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `field` over the rows matching `method`, `k` and `epsilon`.
pub fn median_of(rows: &[MetricRow], method: Method, k: usize, epsilon: f64, field: impl Fn(&MetricRow) -> f64) -> f64 {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method.as_str() && r.k == k && r.epsilon == epsilon)
        .map(field)
        .collect();
    median(&xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_mdp, target_policy};

    #[test]
    fn metric_identities() {
        let g = [0.3, -1.2, 0.5];
        assert_eq!(metric_cos_and_rel(&g, &g).unwrap(), (1.0, 0.0));
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let (c, r) = metric_cos_and_rel(&neg, &g).unwrap();
        assert!((c + 1.0).abs() < 1e-15 && (r - 2.0).abs() < 1e-15);
        let dbl: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
        let (c, r) = metric_cos_and_rel(&dbl, &g).unwrap();
        assert!((c - 1.0).abs() < 1e-15 && (r - 1.0).abs() < 1e-15);
        assert!(matches!(metric_cos_and_rel(&g, &[0.0; 3]), Err(FpgError::DegenerateTarget)));
    }

    fn spec() -> SweepSpec {
        let mdp = random_mdp(4, 2, 4, 17).unwrap();
        let target = target_policy(&mdp, 5.0).unwrap();
        SweepSpec::new(mdp, target)
    }

    #[test]
    fn single_cell_gives_one_row_per_method() {
        let methods = [Method::Fpg, Method::Is, Method::Gpomdp];
        let rows = sweep_k(&spec(), 0.3, &[50], &[1], &methods).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| (-1.0..=1.0).contains(&r.cos_angle) && r.rel_err >= 0.0));
    }

    #[test]
    fn zero_reward_env_is_degenerate() {
        let mut doc = spec().mdp.to_document();
        doc.reward.iter_mut().flatten().flatten().for_each(|r| *r = 0.0);
        let mdp = MdpSpec::from_document(doc).unwrap();
        let target = SoftmaxTabularPolicy::uniform(4, 2);
        let err = sweep_k(&SweepSpec::new(mdp, target), 0.0, &[10], &[1], &[Method::Fpg]).unwrap_err();
        assert!(matches!(err, FpgError::DegenerateTarget));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn on_policy_mismatch_is_one_and_grows_with_epsilon() {
        let sp = spec();
        let (c0, chi0) = shift_diagnostics(&sp, 0.0).unwrap();
        assert!((c0 - 1.0).abs() < 1e-8, "{c0}");
        assert!(chi0.abs() < 1e-8);
        let mut prev = c0;
        for eps in [0.1, 0.3, 0.5, 0.7] {
            let (c, _) = shift_diagnostics(&sp, eps).unwrap();
            assert!(c >= prev - 1e-9, "eps {eps}: {c} < {prev}");
            prev = c;
        }
    }

    #[test]
    fn rows_are_sorted_and_deterministic() {
        let sp = spec();
        let a = sweep(&sp, &[20, 40], &[0.0, 0.5], &[2, 1], &[Method::Fpg, Method::Is]).unwrap();
        let b = sweep(&sp, &[20, 40], &[0.0, 0.5], &[2, 1], &[Method::Fpg, Method::Is]).unwrap();
        let strip = |rows: &[MetricRow]| rows.iter().map(|r| MetricRow { wall_ms: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.len(), 16);
        assert_eq!((a[0].k, a[0].epsilon, a[0].seed, a[0].method.as_str()), (20, 0.0, 2, "fpg"));
        assert_eq!(a[15].k, 40);
        let mut buf = Vec::new();
        write_rows(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# schema: fpg-metrics v1\nmethod,K,epsilon,seed,cos_angle,rel_err,mismatch_cond,chi2_F,wall_ms\n"));
        assert_eq!(text.lines().count(), 18);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
