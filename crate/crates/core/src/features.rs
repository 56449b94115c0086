//! State-action feature maps and the covariance-style statistics built on them.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{config, input, FpgError, Result};
use crate::linalg::{sym_eigenvalues, sym_pow, symmetrize};
use crate::mdp::{occupancy, MdpSpec, OccupancyMeasure};
use crate::policy::{ActionPolicy, Policy};

/// `phi: S x A -> R^d`, materialized as a table over the finite state and
/// action sets. Rows are kept both dense and as sparse `(index, value)` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    rows: Vec<f64>,
    sparse: Vec<Vec<(usize, f64)>>,
    one_hot: bool,
}

impl FeatureMap {
    /// Tabular features: `phi(s, a) = e_{s * A + a}`.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let d = n_states * n_actions;
        let mut rows = vec![0.0; d * d];
        for i in 0..d {
            rows[i * d + i] = 1.0;
        }
        let mut fm = Self::build(n_states, n_actions, d, rows);
        fm.one_hot = true;
        fm
    }

    /// Arbitrary features; `rows` is `(S * A) x d`, row `s * A + a`.
    pub fn from_rows(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() != n_states * n_actions * dim {
            return Err(config(format!(
                "feature table has {} entries, expected {}x{}x{}",
                rows.len(),
                n_states,
                n_actions,
                dim
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(input("non-finite feature"));
        }
        Ok(Self::build(n_states, n_actions, dim, rows))
    }

    fn build(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Self {
        let sparse = rows
            .chunks(dim)
            .map(|r| r.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect())
            .collect();
        Self { n_states, n_actions, dim, rows, sparse, one_hot: false }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn is_one_hot(&self) -> bool {
        self.one_hot
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.dim;
        &self.rows[i..i + self.dim]
    }

    pub fn phi_sparse(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.sparse[s * self.n_actions + a]
    }

    pub fn phi_vec(&self, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(self.phi(s, a))
    }

    /// Whether the constant function lies in the span of the features
    /// (least-squares residual of `1` against the feature table).
    pub fn spans_constant(&self) -> bool {
        let n = self.n_states * self.n_actions;
        let x = DMatrix::from_row_slice(n, self.dim, &self.rows);
        let ones = DVector::from_element(n, 1.0);
        let svd = x.clone().svd(true, true);
        match svd.solve(&ones, 1e-10) {
            Ok(w) => (&x * w - ones).amax() < 1e-8,
            Err(_) => false,
        }
    }

    pub(crate) fn check(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if n_states != self.n_states || n_actions != self.n_actions {
            return Err(config(format!(
                "features are defined on {}x{} but the problem is {}x{}",
                self.n_states, self.n_actions, n_states, n_actions
            )));
        }
        Ok(())
    }
}

/// `Sigma_hat_h = (lambda I + sum_k phi phi^T) / K` per step; the `1/K`
/// also scales the ridge term.
pub fn empirical_covariance(ds: &Dataset, phi: &FeatureMap, lambda: f64) -> Result<Vec<DMatrix<f64>>> {
    if !(lambda >= 0.0) {
        return Err(input(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    if ds.is_empty() {
        return Err(input("need at least one episode"));
    }
    let k = ds.len() as f64;
    let d = phi.dim();
    Ok((0..ds.horizon())
        .map(|h| {
            let mut sig = DMatrix::<f64>::identity(d, d) * lambda;
            for st in ds.step_records(h) {
                add_outer(&mut sig, phi.phi_sparse(st.s, st.a), 1.0);
            }
            sig / k
        })
        .collect())
}

pub(crate) fn add_outer(m: &mut DMatrix<f64>, x: &[(usize, f64)], w: f64) {
    for &(i, xi) in x {
        for &(j, xj) in x {
            m[(i, j)] += w * xi * xj;
        }
    }
}

/// `E[phi phi^T]` at every step under an occupancy measure.
pub fn occupancy_covariance(occ: &OccupancyMeasure, phi: &FeatureMap) -> Vec<DMatrix<f64>> {
    (0..occ.horizon)
        .map(|h| {
            let mut sig = DMatrix::zeros(phi.dim(), phi.dim());
            for s in 0..occ.n_states {
                for a in 0..occ.n_actions {
                    let w = occ.at(h, s, a);
                    if w != 0.0 {
                        add_outer(&mut sig, phi.phi_sparse(s, a), w);
                    }
                }
            }
            sig
        })
        .collect()
}

/// `E[phi]` at every step under an occupancy measure.
pub fn occupancy_mean(occ: &OccupancyMeasure, phi: &FeatureMap) -> Vec<DVector<f64>> {
    (0..occ.horizon)
        .map(|h| {
            let mut nu = DVector::zeros(phi.dim());
            for s in 0..occ.n_states {
                for a in 0..occ.n_actions {
                    let w = occ.at(h, s, a);
                    for &(i, x) in phi.phi_sparse(s, a) {
                        nu[i] += w * x;
                    }
                }
            }
            nu
        })
        .collect()
}

/// Population covariance `Sigma_h` of a (behavior or target) policy. Needs
/// the true MDP, so it is a diagnostic only.
pub fn population_covariance(mdp: &MdpSpec, policy: &dyn ActionPolicy, phi: &FeatureMap) -> Result<Vec<DMatrix<f64>>> {
    phi.check(mdp.n_states(), mdp.n_actions())?;
    Ok(occupancy_covariance(&occupancy(mdp, policy)?, phi))
}

/// `nu_h = E^pi[phi(s_h, a_h)]` and its parameter Jacobian (`d x m`).
#[derive(Clone, Debug)]
pub struct FeatureMean {
    pub nu: Vec<DVector<f64>>,
    pub grad_nu: Vec<DMatrix<f64>>,
}

/// Exact `nu_h^theta` and `grad nu_h^theta` by a forward pass that carries
/// the score-weighted occupancy
/// `g_h(s, a) = E[1{s_h = s, a_h = a} sum_{h' <= h} score_{h'}]`.
pub fn nu_theta(mdp: &MdpSpec, policy: &dyn Policy, phi: &FeatureMap) -> Result<FeatureMean> {
    phi.check(mdp.n_states(), mdp.n_actions())?;
    let occ = occupancy(mdp, policy)?;
    let (ns, na, hz, m, d) = (mdp.n_states(), mdp.n_actions(), mdp.horizon(), policy.n_params(), phi.dim());
    let nu = occupancy_mean(&occ, phi);
    let mut grad_nu = Vec::with_capacity(hz);
    let mut g = vec![0.0; ns * na * m];
    let mut state_g = vec![0.0; ns * m];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for h in 0..hz {
        let state_mass = occ.state_marginal(h);
        if h > 0 {
            // push g_{h-1} through p_{h-1}
            state_g.iter_mut().for_each(|x| *x = 0.0);
            for s in 0..ns {
                for a in 0..na {
                    let src = &g[(s * na + a) * m..(s * na + a + 1) * m];
                    for (sp, &p) in mdp.p(h - 1, s, a).iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        for (t, x) in state_g[sp * m..(sp + 1) * m].iter_mut().zip(src) {
                            *t += p * x;
                        }
                    }
                }
            }
        } else {
            state_g.iter_mut().for_each(|x| *x = 0.0);
        }
        for s in 0..ns {
            policy.probs_into(h, s, &mut probs);
            for a in 0..na {
                policy.score_into(h, s, a, &mut score);
                let out = &mut g[(s * na + a) * m..(s * na + a + 1) * m];
                for j in 0..m {
                    out[j] = probs[a] * (state_g[s * m + j] + state_mass[s] * score[j]);
                }
            }
        }
        let mut jac = DMatrix::zeros(d, m);
        for s in 0..ns {
            for a in 0..na {
                let gs = &g[(s * na + a) * m..(s * na + a + 1) * m];
                for &(i, x) in phi.phi_sparse(s, a) {
                    for j in 0..m {
                        jac[(i, j)] += x * gs[j];
                    }
                }
            }
        }
        grad_nu.push(jac);
    }
    Ok(FeatureMean { nu, grad_nu })
}

/// `cond(S_t^{1/2} S_d^{-1} S_t^{1/2})` with `S_d` the data covariance and
/// `S_t` the target covariance, restricted to the support of `S_t`.
/// Returns `f64::INFINITY` when the data covariance does not cover that support.
pub fn mismatch_condition_number(sigma_data: &DMatrix<f64>, sigma_target: &DMatrix<f64>) -> f64 {
    const TOL: f64 = 1e-12;
    let data_inv = sym_pow(sigma_data, -1.0, TOL);
    let target_half = sym_pow(sigma_target, 0.5, TOL);
    // support check: the target range must lie in the data range
    let proj = sigma_data * &data_inv;
    let leak = (&proj * &target_half - &target_half).amax();
    if leak > 1e-8 * target_half.amax().max(1.0) {
        return f64::INFINITY;
    }
    let rank = sym_eigenvalues(sigma_target)
        .iter()
        .filter(|&&l| l > TOL * sym_eigenvalues(sigma_target).last().copied().unwrap_or(0.0).max(0.0))
        .count();
    if rank == 0 {
        return f64::INFINITY;
    }
    let mid = symmetrize(&(&target_half * data_inv * &target_half));
    let eig = sym_eigenvalues(&mid);
    let top = &eig[eig.len() - rank..];
    let (lo, hi) = (top[0], top[rank - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Largest per-step mismatch condition number.
pub fn max_mismatch_condition(sigma_data: &[DMatrix<f64>], sigma_target: &[DMatrix<f64>]) -> f64 {
    sigma_data
        .iter()
        .zip(sigma_target)
        .map(|(d, t)| mismatch_condition_number(d, t))
        .fold(0.0, f64::max)
}

/// Restricted chi-square divergence `max_h nu_h^T Sigma_h^+ nu_h - 1` of the
/// target feature means against the behavior covariances. Directions that
/// neither distribution reaches are ignored; a target mean with mass
/// outside the behavior support is an error naming that direction.
pub fn chi2_restricted(nu_target: &[DVector<f64>], sigma_behavior: &[DMatrix<f64>]) -> Result<f64> {
    if nu_target.len() != sigma_behavior.len() {
        return Err(config("chi2: step counts differ"));
    }
    let mut best = f64::NEG_INFINITY;
    for (h, (nu, sig)) in nu_target.iter().zip(sigma_behavior).enumerate() {
        let pinv = sym_pow(sig, -1.0, 1e-12);
        let resid = nu - sig * (&pinv * nu);
        if resid.norm() > 1e-8 * nu.norm().max(1e-300) {
            return Err(FpgError::UncoveredDirection {
                h: h + 1,
                direction: (resid.clone() / resid.norm()).iter().copied().collect(),
            });
        }
        best = best.max(nu.dot(&(&pinv * nu)) - 1.0);
    }
    Ok(best)
}

/// `max_{s,a} phi(s,a)^T Sigma^{-1} phi(s,a)` (the `C_1 d` quantity) at each step.
pub fn max_leverage(phi: &FeatureMap, sigma: &[DMatrix<f64>]) -> Vec<f64> {
    sigma
        .iter()
        .map(|sig| {
            let inv = sym_pow(sig, -1.0, 1e-12);
            let mut best = 0.0_f64;
            for s in 0..phi.n_states() {
                for a in 0..phi.n_actions() {
                    let x = phi.phi_vec(s, a);
                    best = best.max(x.dot(&(&inv * &x)));
                }
            }
            best
        })
        .collect()
}

/// All covariance statistics for one (behavior, target) pair. The
/// population entries need the true MDP and are for diagnostics only.
#[derive(Clone, Debug)]
pub struct CovStats {
    pub sigma_hat: Vec<DMatrix<f64>>,
    pub sigma_pop: Vec<DMatrix<f64>>,
    pub nu_theta: Vec<DVector<f64>>,
    pub grad_nu_theta: Vec<DMatrix<f64>>,
    pub sigma_theta: Vec<DMatrix<f64>>,
}

impl CovStats {
    pub fn compute(
        ds: &Dataset,
        mdp: &MdpSpec,
        behavior: &dyn ActionPolicy,
        target: &dyn Policy,
        phi: &FeatureMap,
        lambda: f64,
    ) -> Result<Self> {
        let mean = nu_theta(mdp, target, phi)?;
        Ok(Self {
            sigma_hat: empirical_covariance(ds, phi, lambda)?,
            sigma_pop: population_covariance(mdp, behavior, phi)?,
            nu_theta: mean.nu,
            grad_nu_theta: mean.grad_nu,
            sigma_theta: population_covariance(mdp, target, phi)?,
        })
    }
}
