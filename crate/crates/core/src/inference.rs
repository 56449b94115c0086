//! Error covariance of the FPG estimate, bound diagnostics, and the episode
//! bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{episode_rng, Dataset};
use crate::error::{config, input, Result};
use crate::estimator::{estimate, EstimatorConfig};
use crate::features::{empirical_covariance, max_leverage, nu_theta, population_covariance, FeatureMap, FeatureMean};
use crate::fpg::{fit_model, fpg_recursion, FittedModel, FittedValues, GradientEstimate};
use crate::linalg::{spectral_norm, sym_pow, CovFactor};
use crate::mdp::{exact_evaluation, occupancy, ExactEvaluation, MdpSpec};
use crate::policy::{ActionPolicy, Policy};

/// `Q_h(s, a)` and `grad Q_h(s, a)` for `h = 0..=H` (the last layer is zero).
#[derive(Clone, Debug)]
pub struct QTables {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub n_params: usize,
    q: Vec<f64>,
    grad_q: Vec<f64>,
}

impl QTables {
    pub fn from_exact(ev: &ExactEvaluation) -> Result<Self> {
        if ev.grad_q.is_empty() {
            return Err(input("exact evaluation carries no gradients"));
        }
        let sa = ev.n_states * ev.n_actions;
        let mut q = ev.q.clone();
        q.extend(std::iter::repeat(0.0).take(sa));
        let mut grad_q = ev.grad_q.clone();
        grad_q.extend(std::iter::repeat(0.0).take(sa * ev.n_params));
        Ok(Self {
            n_states: ev.n_states,
            n_actions: ev.n_actions,
            horizon: ev.horizon,
            n_params: ev.n_params,
            q,
            grad_q,
        })
    }

    /// `Q_h = phi^T w_h`, `grad Q_h = phi^T W_h`.
    pub fn from_fitted(values: &FittedValues, phi: &FeatureMap) -> Self {
        let (ns, na) = (phi.n_states(), phi.n_actions());
        let hz = values.w.len() - 1;
        let m = values.big_w[0].ncols();
        let mut q = Vec::with_capacity((hz + 1) * ns * na);
        let mut grad_q = Vec::with_capacity((hz + 1) * ns * na * m);
        for h in 0..=hz {
            for s in 0..ns {
                for a in 0..na {
                    q.push(values.q(phi, h, s, a));
                    grad_q.extend(values.grad_q(phi, h, s, a));
                }
            }
        }
        Self { n_states: ns, n_actions: na, horizon: hz, n_params: m, q, grad_q }
    }

    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn grad_q(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let i = ((h * self.n_states + s) * self.n_actions + a) * self.n_params;
        &self.grad_q[i..i + self.n_params]
    }
}

/// Bellman residuals `eps_{h,k}` and their parameter gradients, indexed
/// `[h][k]` (flattened).
#[derive(Clone, Debug)]
pub struct Residuals {
    pub k: usize,
    pub n_params: usize,
    pub eps: Vec<f64>,
    pub grad_eps: Vec<f64>,
}

impl Residuals {
    pub fn eps(&self, h: usize, k: usize) -> f64 {
        self.eps[h * self.k + k]
    }
    pub fn grad_eps(&self, h: usize, k: usize) -> &[f64] {
        let i = (h * self.k + k) * self.n_params;
        &self.grad_eps[i..i + self.n_params]
    }
}

/// `eps = Q_h(s, a) - r - sum_a' pi(a'|s') Q_{h+1}(s', a')` and
/// `grad eps = grad Q_h(s, a) - sum_a' pi(a'|s') (score Q_{h+1} + grad Q_{h+1})(s', a')`.
pub fn residuals(ds: &Dataset, target: &dyn Policy, q: &QTables) -> Result<Residuals> {
    let (ns, na, m, hz) = (target.n_states(), target.n_actions(), target.n_params(), ds.horizon());
    if q.n_states != ns || q.n_actions != na || q.n_params != m || q.horizon != hz {
        return Err(config("Q tables do not match the dataset and policy"));
    }
    ds.validate(ns, na, false)?;
    let k = ds.len();
    let mut eps = vec![0.0; hz * k];
    let mut grad_eps = vec![0.0; hz * k * m];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for h in 0..hz {
        // per next state: V_{h+1}(s') and the PG Bellman integrand
        let mut v_next = vec![0.0; ns];
        let mut g_next = vec![0.0; ns * m];
        for s in 0..ns {
            target.probs_into(h + 1, s, &mut probs);
            for a in 0..na {
                target.score_into(h + 1, s, a, &mut score);
                let qn = q.q(h + 1, s, a);
                v_next[s] += probs[a] * qn;
                let gq = q.grad_q(h + 1, s, a);
                for j in 0..m {
                    g_next[s * m + j] += probs[a] * (score[j] * qn + gq[j]);
                }
            }
        }
        for (kk, st) in ds.step_records(h).enumerate() {
            eps[h * k + kk] = q.q(h, st.s, st.a) - st.r - v_next[st.s_next];
            let gq = q.grad_q(h, st.s, st.a);
            for j in 0..m {
                grad_eps[(h * k + kk) * m + j] = gq[j] - g_next[st.s_next * m + j];
            }
        }
    }
    Ok(Residuals { k, n_params: m, eps, grad_eps })
}

#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    pub lambda_hat: DMatrix<f64>,
    /// Per-step influence vectors, `K x m` each.
    pub influence: Vec<DMatrix<f64>>,
}

/// `Lambda_hat = sum_h Cov_k(x_{h,k})` with
/// `x = grad(eps) phi^T Sigma_h^-1 nu_h + eps phi^T Sigma_h^-1 grad nu_h`.
/// `Sigma_h` is inverted on its range.
pub fn lambda_hat(
    ds: &Dataset,
    target: &dyn Policy,
    phi: &FeatureMap,
    nu: &FeatureMean,
    q: &QTables,
    sigma: &[DMatrix<f64>],
) -> Result<CovarianceEstimate> {
    if ds.len() < 2 {
        return Err(input("covariance needs at least two episodes"));
    }
    let hz = ds.horizon();
    if nu.nu.len() != hz || sigma.len() != hz {
        return Err(config("feature means or covariances do not match the horizon"));
    }
    let res = residuals(ds, target, q)?;
    let (k, m) = (ds.len(), target.n_params());
    let mut total = DMatrix::zeros(m, m);
    let mut influence = Vec::with_capacity(hz);
    for h in 0..hz {
        let pinv = sym_pow(&sigma[h], -1.0, 1e-12);
        let a = &pinv * &nu.nu[h];
        let b = &pinv * &nu.grad_nu[h];
        let mut x = DMatrix::zeros(k, m);
        for (kk, st) in ds.step_records(h).enumerate() {
            let f = phi.phi_sparse(st.s, st.a);
            let c: f64 = f.iter().map(|&(i, v)| v * a[i]).sum();
            let e = res.eps(h, kk);
            let ge = res.grad_eps(h, kk);
            for j in 0..m {
                let fb: f64 = f.iter().map(|&(i, v)| v * b[(i, j)]).sum();
                x[(kk, j)] = ge[j] * c + e * fb;
            }
        }
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(k, m, |r, c| x[(r, c)] - mean[c]);
        total += centered.transpose() * &centered / (k as f64 - 1.0);
        influence.push(x);
    }
    Ok(CovarianceEstimate { lambda_hat: crate::linalg::symmetrize(&total), influence })
}

/// Feature means implied by the fitted model: `nu_1 = sum xi pi phi`,
/// `nu_{h+1} = M_h^T nu_h`, and their parameter derivatives.
pub fn plug_in_nu(model: &FittedModel, target: &dyn Policy, phi: &FeatureMap, xi: &[f64]) -> Result<FeatureMean> {
    let (ns, na, m, d) = (target.n_states(), target.n_actions(), target.n_params(), phi.dim());
    if xi.len() != ns {
        return Err(config("initial distribution has the wrong length"));
    }
    let mut nu0 = DVector::zeros(d);
    let mut g0 = DMatrix::zeros(d, m);
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for s in 0..ns {
        target.probs_into(0, s, &mut probs);
        for a in 0..na {
            target.score_into(0, s, a, &mut score);
            let w = xi[s] * probs[a];
            for &(i, x) in phi.phi_sparse(s, a) {
                nu0[i] += w * x;
                for j in 0..m {
                    g0[(i, j)] += w * score[j] * x;
                }
            }
        }
    }
    let mut nu = vec![nu0];
    let mut grad_nu = vec![g0];
    for h in 0..model.horizon() - 1 {
        let layer = &model.layers[h];
        let mt = layer.m.transpose();
        let next = &mt * &nu[h];
        let mut g = &mt * &grad_nu[h];
        for j in 0..m {
            let extra = layer.grad_m[j].transpose() * &nu[h];
            let mut col = g.column_mut(j);
            col += extra;
        }
        nu.push(next);
        grad_nu.push(g);
    }
    Ok(FeatureMean { nu, grad_nu })
}

/// Fully data-driven `Lambda_hat`: fitted `Q`, fitted `nu`, ridge `Sigma_hat`.
pub fn plug_in_covariance(
    ds: &Dataset,
    target: &dyn Policy,
    phi: &FeatureMap,
    lambda: f64,
    xi: &[f64],
) -> Result<CovarianceEstimate> {
    let model = fit_model(ds, target, phi, lambda)?;
    let q = QTables::from_fitted(&fpg_recursion(&model), phi);
    let nu = plug_in_nu(&model, target, phi, xi)?;
    let sigma = empirical_covariance(ds, phi, lambda)?;
    lambda_hat(ds, target, phi, &nu, &q, &sigma)
}

/// `Lambda_hat` with exact `Q`, `nu` and behavior covariance substituted;
/// isolates the sampling error of the covariance itself.
pub fn oracle_covariance(
    ds: &Dataset,
    mdp: &MdpSpec,
    behavior: &dyn ActionPolicy,
    target: &dyn Policy,
    phi: &FeatureMap,
) -> Result<CovarianceEstimate> {
    let q = QTables::from_exact(&exact_evaluation(mdp, target)?)?;
    let nu = nu_theta(mdp, target, phi)?;
    let sigma = population_covariance(mdp, behavior, phi)?;
    lambda_hat(ds, target, phi, &nu, &q, &sigma)
}

/// Exact `Lambda_theta`: the expectation over the behavior data
/// distribution, enumerated over `(h, s, a, s')`.
pub fn population_lambda(mdp: &MdpSpec, behavior: &dyn ActionPolicy, target: &dyn Policy, phi: &FeatureMap) -> Result<DMatrix<f64>> {
    let (ns, na, m, hz) = (mdp.n_states(), mdp.n_actions(), target.n_params(), mdp.horizon());
    let ev = exact_evaluation(mdp, target)?;
    let q = QTables::from_exact(&ev)?;
    let nu = nu_theta(mdp, target, phi)?;
    let sigma = population_covariance(mdp, behavior, phi)?;
    let occ = occupancy(mdp, behavior)?;
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    let mut lam = DMatrix::zeros(m, m);
    for h in 0..hz {
        let pinv = sym_pow(&sigma[h], -1.0, 1e-12);
        let a_vec = &pinv * &nu.nu[h];
        let b = &pinv * &nu.grad_nu[h];
        let mut v_next = vec![0.0; ns];
        let mut g_next = vec![0.0; ns * m];
        for s in 0..ns {
            target.probs_into(h + 1, s, &mut probs);
            for a in 0..na {
                target.score_into(h + 1, s, a, &mut score);
                let qn = q.q(h + 1, s, a);
                v_next[s] += probs[a] * qn;
                for j in 0..m {
                    g_next[s * m + j] += probs[a] * (score[j] * qn + q.grad_q(h + 1, s, a)[j]);
                }
            }
        }
        let mut mean = DVector::zeros(m);
        let mut second = DMatrix::zeros(m, m);
        for s in 0..ns {
            for a in 0..na {
                let mu = occ.at(h, s, a);
                if mu == 0.0 {
                    continue;
                }
                let f = phi.phi_sparse(s, a);
                let c: f64 = f.iter().map(|&(i, v)| v * a_vec[i]).sum();
                let fb: Vec<f64> = (0..m).map(|j| f.iter().map(|&(i, v)| v * b[(i, j)]).sum()).collect();
                for (sp, &p) in mdp.p(h, s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let e = q.q(h, s, a) - mdp.r(h, s, a) - v_next[sp];
                    let x = DVector::from_fn(m, |j, _| (q.grad_q(h, s, a)[j] - g_next[sp * m + j]) * c + e * fb[j]);
                    mean += &x * (mu * p);
                    second += &x * x.transpose() * (mu * p);
                }
            }
        }
        lam += second - &mean * mean.transpose();
    }
    Ok(crate::linalg::symmetrize(&lam))
}

/// Constants of the finite-sample guarantees, computed from population
/// quantities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub b_theta: Vec<f64>,
    pub chi2_f: f64,
    /// `max_{h,s,a} phi^T Sigma_h^-1 phi`.
    pub c1d_max: f64,
    /// Informational only; the leading constants are not tight.
    pub c_theta: f64,
    /// `||Sigma_h^{-1/2} nu_h||` per step.
    pub shift_norms: Vec<f64>,
    pub score_bound: f64,
    pub horizon: usize,
    pub n_params: usize,
}

impl BoundReport {
    /// Leading term `4 b_theta sqrt(min(C1 d, H) log(8m/delta) / K)` of the
    /// reward-free bound for component `j`.
    pub fn leading_bound(&self, j: usize, k: usize, delta: f64) -> f64 {
        let c = self.c1d_max.min(self.horizon as f64);
        4.0 * self.b_theta[j] * (c * (8.0 * self.n_params as f64 / delta).ln() / k as f64).sqrt()
    }
}

pub const DEFAULT_DELTA: f64 = 0.1;

pub fn bound_report(mdp: &MdpSpec, behavior: &dyn ActionPolicy, target: &dyn Policy, phi: &FeatureMap) -> Result<BoundReport> {
    let (ns, na, m, hz, d) = (mdp.n_states(), mdp.n_actions(), target.n_params(), mdp.horizon(), phi.dim());
    let sigma = population_covariance(mdp, behavior, phi)?;
    let sigma_t = population_covariance(mdp, target, phi)?;
    let mean = nu_theta(mdp, target, phi)?;
    let occ_b = occupancy(mdp, behavior)?;
    for (h, s) in sigma.iter().enumerate() {
        CovFactor::new(s, h + 1, true)?;
    }
    let inv_half: Vec<DMatrix<f64>> = sigma.iter().map(|s| sym_pow(s, -0.5, 0.0)).collect();
    let whitened: Vec<DMatrix<f64>> = (0..hz).map(|h| &inv_half[h] * &sigma_t[h] * &inv_half[h]).collect();
    let eig = |a: &DMatrix<f64>| crate::linalg::sym_eigenvalues(a);
    let mut kappa1 = 0.0_f64;
    for h in 0..hz {
        let top = *eig(&whitened[h]).last().unwrap();
        let den = if h + 1 < hz { eig(&whitened[h + 1])[0].min(1.0) } else { 1.0 };
        kappa1 = kappa1.max(top / den);
    }
    // next-state features under the target, weighted by the data's next-state marginal
    let g = target.score_bound();
    let mut kappa2 = 0.0_f64;
    let mut kappa3 = 0.0_f64;
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for h1 in 1..hz {
        let marg = occ_b.state_marginal(h1);
        let mut e2 = DMatrix::zeros(d, d);
        let mut e3 = vec![DMatrix::zeros(d, d); m];
        for s in 0..ns {
            if marg[s] == 0.0 {
                continue;
            }
            target.probs_into(h1, s, &mut probs);
            let mut phi_t = DVector::<f64>::zeros(d);
            let mut dphi = DMatrix::<f64>::zeros(d, m);
            for a in 0..na {
                target.score_into(h1, s, a, &mut score);
                for &(i, x) in phi.phi_sparse(s, a) {
                    phi_t[i] += probs[a] * x;
                    for j in 0..m {
                        dphi[(i, j)] += probs[a] * score[j] * x;
                    }
                }
            }
            e2 += &phi_t * phi_t.transpose() * marg[s];
            for j in 0..m {
                let c = dphi.column(j);
                e3[j] += c * c.transpose() * marg[s];
            }
        }
        kappa2 = kappa2.max(spectral_norm(&(&inv_half[h1] * e2 * &inv_half[h1])).sqrt());
        for e in &e3 {
            kappa3 = kappa3.max(spectral_norm(&(&inv_half[h1] * e * &inv_half[h1])).sqrt() / g);
        }
    }
    let shift_norms: Vec<f64> = (0..hz).map(|h| (&inv_half[h] * &mean.nu[h]).norm()).collect();
    let max_shift = shift_norms.iter().cloned().fold(0.0, f64::max);
    let hf = hz as f64;
    let b_theta = (0..m)
        .map(|j| {
            let gn = (0..hz)
                .map(|h| (&inv_half[h] * mean.grad_nu[h].column(j)).norm())
                .fold(0.0, f64::max);
            hf * hf * g * max_shift + hf * gn
        })
        .collect();
    let c1d_max = max_leverage(phi, &sigma).into_iter().fold(0.0, f64::max);
    let chi2_f = crate::features::chi2_restricted(&mean.nu, &sigma)?;
    let t_inv_half = sym_pow(&sigma_t[0], -0.5, 1e-12);
    let max_gnu1 = (0..m)
        .map(|j| (&t_inv_half * mean.grad_nu[0].column(j)).norm())
        .fold(0.0, f64::max);
    let nu1 = (&t_inv_half * &mean.nu[0]).norm();
    let c_theta = 240.0 * c1d_max * (m as f64).sqrt() * hf.powi(3) * kappa1 * (5.0 + kappa2 + kappa3) * (max_gnu1 + hf * g * nu1);
    Ok(BoundReport {
        kappa1,
        kappa2,
        kappa3,
        b_theta,
        chi2_f,
        c1d_max,
        c_theta,
        shift_norms,
        score_bound: g,
        horizon: hz,
        n_params: m,
    })
}

/// `B` estimates, each on `K` episodes drawn with replacement. Replicate
/// `b` draws its indices from stream `b` of `seed`.
pub fn bootstrap(
    ds: &Dataset,
    target: &dyn Policy,
    behavior: Option<&dyn ActionPolicy>,
    cfg: &EstimatorConfig,
    b: usize,
    seed: u64,
) -> Result<Vec<GradientEstimate>> {
    if b == 0 {
        return Err(input("bootstrap needs at least one replicate"));
    }
    let k = ds.len();
    let resamples: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            (0..k).map(|_| rng.gen_range(0..k)).collect()
        })
        .collect();
    bootstrap_with_indices(ds, target, behavior, cfg, &resamples)
}

/// Bootstrap over caller-supplied resamples.
pub fn bootstrap_with_indices(
    ds: &Dataset,
    target: &dyn Policy,
    behavior: Option<&dyn ActionPolicy>,
    cfg: &EstimatorConfig,
    resamples: &[Vec<usize>],
) -> Result<Vec<GradientEstimate>> {
    resamples
        .par_iter()
        .map(|idx| {
            if idx.iter().any(|&i| i >= ds.len()) {
                return Err(input("resample index out of range"));
            }
            estimate(&ds.select(idx), target, behavior, cfg)
        })
        .collect()
}

/// Percentile interval at coverage `level` (linear interpolation between
/// order statistics).
pub fn percentile_interval(samples: &[f64], level: f64) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
