//! Time-homogeneous discounted FPG through the resolvent `(I - gamma M)^-1`.
//!
//! Statistics are pooled over every step of every episode and normalized
//! by `1/(HK)`, ridge term included. This differs from the per-step
//! finite-horizon convention in [`crate::fpg`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{input, FpgError, Result};
use crate::features::{add_outer, FeatureMap};
use crate::fpg::{check_inputs, factor_covariance, gradient_from_weights, next_state_cache, GradientEstimate, Method};
use crate::policy::Policy;

#[derive(Clone, Debug)]
pub struct DiscountedFit {
    pub gamma: f64,
    pub w_r: DVector<f64>,
    pub m: DMatrix<f64>,
    pub grad_m: Vec<DMatrix<f64>>,
    pub w: DVector<f64>,
    pub grad_w: Vec<DVector<f64>>,
    /// Spectral radius of `gamma M`.
    pub spectral_radius: f64,
    pub k: usize,
    pub lambda: f64,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl DiscountedFit {
    /// Solves `(I - gamma M) w = w_r` and
    /// `(I - gamma M) grad_w_j = gamma grad M_j w`.
    pub fn from_parts(w_r: DVector<f64>, m: DMatrix<f64>, grad_m: Vec<DMatrix<f64>>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(input(format!("discount must lie in (0, 1), got {gamma}")));
        }
        let d = w_r.len();
        let mut warnings = Vec::new();
        if gamma <= 0.5 {
            warnings.push(format!("gamma = {gamma} <= 1/2 is outside the range covered by the error analysis"));
        }
        let gm = &m * gamma;
        let eig = gm.complex_eigenvalues();
        let spectral_radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let resolvent = DMatrix::identity(d, d) - &gm;
        let sv = resolvent.clone().singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin > 1e-12 * smax.max(1.0)) {
            let closest = eig
                .iter()
                .min_by(|a, b| (*a - 1.0).norm().partial_cmp(&(*b - 1.0).norm()).unwrap())
                .map_or(f64::NAN, |z| z.re);
            return Err(FpgError::SingularResolvent { eigenvalue: closest });
        }
        if spectral_radius >= 1.0 {
            warnings.push(format!("spectral radius of gamma M is {spectral_radius:.4} >= 1"));
        }
        let lu = resolvent.lu();
        let w = lu.solve(&w_r).ok_or(FpgError::SingularResolvent { eigenvalue: 1.0 })?;
        let grad_w = grad_m
            .iter()
            .map(|g| lu.solve(&(g * &w * gamma)).ok_or(FpgError::SingularResolvent { eigenvalue: 1.0 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gamma,
            w_r,
            m,
            grad_m,
            w,
            grad_w,
            spectral_radius,
            k: 0,
            lambda: 0.0,
            seed: None,
            warnings,
        })
    }

    pub fn big_w(&self) -> DMatrix<f64> {
        let d = self.w.len();
        DMatrix::from_fn(d, self.grad_w.len(), |i, j| self.grad_w[j][i])
    }
}

/// Pooled regression over all `(h, k)` followed by the resolvent solve.
pub fn discounted_fit(ds: &Dataset, target: &dyn Policy, phi: &FeatureMap, lambda: f64, gamma: f64) -> Result<DiscountedFit> {
    check_inputs(ds, target, phi, lambda)?;
    let (d, m, hz) = (phi.dim(), target.n_params(), ds.horizon());
    let n = (hz * ds.len()) as f64;
    let mut sigma = DMatrix::<f64>::identity(d, d) * lambda;
    let mut b_r = DVector::<f64>::zeros(d);
    let mut b_m = DMatrix::<f64>::zeros(d, d);
    let mut b_gm = vec![DMatrix::<f64>::zeros(d, d); m];
    for h in 0..hz {
        let cache = next_state_cache(target, phi, h + 1);
        for st in ds.step_records(h) {
            let f = phi.phi_sparse(st.s, st.a);
            add_outer(&mut sigma, f, 1.0);
            for &(i, x) in f {
                b_r[i] += x * st.r;
                for &(l, y) in &cache.psi[st.s_next] {
                    b_m[(i, l)] += x * y;
                }
                for (j, u) in &cache.u[st.s_next] {
                    for &(l, y) in u {
                        b_gm[*j][(i, l)] += x * y;
                    }
                }
            }
        }
    }
    let factor = factor_covariance(&(sigma / n), 0, lambda)?;
    let w_r = factor.solve_vec(&(b_r / n));
    let mm = factor.solve_mat(&(b_m / n));
    let grad_m = b_gm.into_iter().map(|b| factor.solve_mat(&(b / n))).collect();
    let mut fit = DiscountedFit::from_parts(w_r, mm, grad_m, gamma)?;
    fit.k = ds.len();
    fit.lambda = lambda;
    fit.seed = ds.meta.seed;
    let bound = 1.0 / (1.0 - gamma);
    let max_q = (0..phi.n_states())
        .flat_map(|s| (0..phi.n_actions()).map(move |a| (s, a)))
        .map(|(s, a)| phi.phi_sparse(s, a).iter().map(|&(i, x)| x * fit.w[i]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if max_q > 2.0 * bound {
        fit.warnings.push(format!("fitted |Q| reaches {max_q:.3e} > 2/(1 - gamma)"));
    }
    Ok(fit)
}

/// `sum_s xi(s) sum_a pi(a|s) phi^T (grad w + w score^T)`.
pub fn discounted_fpg_estimate(fit: &DiscountedFit, target: &dyn Policy, phi: &FeatureMap, xi: &[f64]) -> Result<GradientEstimate> {
    let start = Instant::now();
    let grad = gradient_from_weights(target, phi, xi, &fit.w, &fit.big_w())?;
    Ok(GradientEstimate {
        grad,
        method: Method::DiscountedFpg,
        k: fit.k,
        lambda: Some(fit.lambda),
        seed: fit.seed,
        wall_time: start.elapsed().as_secs_f64(),
        warnings: fit.warnings.clone(),
    })
}
