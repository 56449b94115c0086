//! Double fitted policy-gradient iteration with linear features: the
//! closed-form matrix recursion and the equivalent model-based plug-in.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config, input, Result};
use crate::features::{add_outer, FeatureMap};
use crate::linalg::CovFactor;
use crate::policy::Policy;

pub const DEFAULT_LAMBDA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fpg,
    ModelBased,
    DiscountedFpg,
    Is,
    Gpomdp,
    Reinforce,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fpg => "fpg",
            Method::ModelBased => "model_based",
            Method::DiscountedFpg => "discounted_fpg",
            Method::Is => "is",
            Method::Gpomdp => "gpomdp",
            Method::Reinforce => "reinforce",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = crate::FpgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpg" => Ok(Method::Fpg),
            "model_based" | "model-based" => Ok(Method::ModelBased),
            "discounted_fpg" => Ok(Method::DiscountedFpg),
            "is" => Ok(Method::Is),
            "gpomdp" => Ok(Method::Gpomdp),
            "reinforce" => Ok(Method::Reinforce),
            _ => Err(config(format!("unknown method '{s}' (expected fpg, model_based, discounted_fpg, is, gpomdp or reinforce)"))),
        }
    }
}

/// An estimate of `grad v_theta` plus where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub method: Method,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seconds.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl GradientEstimate {
    pub(crate) fn new(grad: Vec<f64>, method: Method, ds: &Dataset, lambda: Option<f64>, start: Instant) -> Self {
        Self {
            grad,
            method,
            k: ds.len(),
            lambda,
            seed: ds.meta.seed,
            wall_time: start.elapsed().as_secs_f64(),
            warnings: Vec::new(),
        }
    }
}

/// One regression layer: `w_r`, `M` and the `m` blocks of `grad M`
/// (block `j` is the `j`-th `d x d` slab of the `d x md` Kronecker layout).
#[derive(Clone, Debug)]
pub struct LayerFit {
    pub w_r: DVector<f64>,
    pub m: DMatrix<f64>,
    pub grad_m: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct FittedModel {
    pub dim: usize,
    pub n_params: usize,
    pub lambda: f64,
    pub layers: Vec<LayerFit>,
}

impl FittedModel {
    pub fn horizon(&self) -> usize {
        self.layers.len()
    }
}

/// `w[h]`, `W[h]` for `h = 0..=H`; the last layer is all zeros.
#[derive(Clone, Debug)]
pub struct FittedValues {
    pub w: Vec<DVector<f64>>,
    pub big_w: Vec<DMatrix<f64>>,
}

impl FittedValues {
    pub fn q(&self, phi: &FeatureMap, h: usize, s: usize, a: usize) -> f64 {
        phi.phi_sparse(s, a).iter().map(|&(i, x)| x * self.w[h][i]).sum()
    }

    pub fn grad_q(&self, phi: &FeatureMap, h: usize, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.big_w[h].ncols()];
        for &(i, x) in phi.phi_sparse(s, a) {
            for (j, o) in out.iter_mut().enumerate() {
                *o += x * self.big_w[h][(i, j)];
            }
        }
        out
    }
}

pub(crate) fn check_inputs(ds: &Dataset, target: &dyn Policy, phi: &FeatureMap, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(input(format!("ridge lambda must be a finite value >= 0, got {lambda}")));
    }
    if ds.is_empty() {
        return Err(input("need at least one episode"));
    }
    phi.check(target.n_states(), target.n_actions())?;
    ds.validate(target.n_states(), target.n_actions(), false)
}

/// Per-state action integrals at the next step:
/// `psi(s) = sum_a pi(a|s) phi(s, a)` and, for each parameter `j` with a
/// nonzero contribution, `u_j(s) = sum_a pi(a|s) score_j(s, a) phi(s, a)`.
pub(crate) struct NextStateCache {
    pub psi: Vec<Vec<(usize, f64)>>,
    pub u: Vec<Vec<(usize, Vec<(usize, f64)>)>>,
}

pub(crate) fn next_state_cache(target: &dyn Policy, phi: &FeatureMap, h: usize) -> NextStateCache {
    let (ns, na, m, d) = (target.n_states(), target.n_actions(), target.n_params(), phi.dim());
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    let mut psi = Vec::with_capacity(ns);
    let mut u = Vec::with_capacity(ns);
    let mut dense_u = vec![0.0; m * d];
    let mut touched = vec![false; m];
    for s in 0..ns {
        target.probs_into(h, s, &mut probs);
        let mut dense_psi = vec![0.0; d];
        dense_u.iter_mut().for_each(|x| *x = 0.0);
        touched.iter_mut().for_each(|x| *x = false);
        for a in 0..na {
            let p = probs[a];
            if p == 0.0 {
                continue;
            }
            target.score_into(h, s, a, &mut score);
            let f = phi.phi_sparse(s, a);
            for &(i, x) in f {
                dense_psi[i] += p * x;
            }
            for (j, &sc) in score.iter().enumerate() {
                if sc == 0.0 {
                    continue;
                }
                touched[j] = true;
                for &(i, x) in f {
                    dense_u[j * d + i] += p * sc * x;
                }
            }
        }
        psi.push(sparsify(&dense_psi));
        u.push(
            (0..m)
                .filter(|&j| touched[j])
                .map(|j| (j, sparsify(&dense_u[j * d..(j + 1) * d])))
                .filter(|(_, v)| !v.is_empty())
                .collect(),
        );
    }
    NextStateCache { psi, u }
}

fn sparsify(v: &[f64]) -> Vec<(usize, f64)> {
    v.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect()
}

fn add_outer_pair(m: &mut DMatrix<f64>, x: &[(usize, f64)], y: &[(usize, f64)]) {
    for &(i, xi) in x {
        for &(j, yj) in y {
            m[(i, j)] += xi * yj;
        }
    }
}

/// Factorizes `Sigma_hat_h`; with `lambda = 0` a singular matrix is an error
/// naming the step and its null direction.
pub(crate) fn factor_covariance(sigma: &DMatrix<f64>, h: usize, lambda: f64) -> Result<CovFactor> {
    CovFactor::new(sigma, h, lambda == 0.0)
}

/// Closed forms for step `h` (zero-based).
pub fn fit_layer(ds: &Dataset, target: &dyn Policy, phi: &FeatureMap, lambda: f64, h: usize) -> Result<LayerFit> {
    let (d, m) = (phi.dim(), target.n_params());
    let k = ds.len() as f64;
    let cache = next_state_cache(target, phi, h + 1);
    let mut sigma = DMatrix::<f64>::identity(d, d) * lambda;
    let mut b_r = DVector::<f64>::zeros(d);
    let mut b_m = DMatrix::<f64>::zeros(d, d);
    let mut b_gm = vec![DMatrix::<f64>::zeros(d, d); m];
    for st in ds.step_records(h) {
        let f = phi.phi_sparse(st.s, st.a);
        add_outer(&mut sigma, f, 1.0);
        for &(i, x) in f {
            b_r[i] += x * st.r;
        }
        add_outer_pair(&mut b_m, f, &cache.psi[st.s_next]);
        for (j, uj) in &cache.u[st.s_next] {
            add_outer_pair(&mut b_gm[*j], f, uj);
        }
    }
    let factor = factor_covariance(&(sigma / k), h, lambda)?;
    Ok(LayerFit {
        w_r: factor.solve_vec(&(b_r / k)),
        m: factor.solve_mat(&(b_m / k)),
        grad_m: b_gm.into_iter().map(|b| factor.solve_mat(&(b / k))).collect(),
    })
}

/// `w_r`, `M`, `grad M` for every step.
pub fn fit_model(ds: &Dataset, target: &dyn Policy, phi: &FeatureMap, lambda: f64) -> Result<FittedModel> {
    check_inputs(ds, target, phi, lambda)?;
    let layers = (0..ds.horizon())
        .into_par_iter()
        .map(|h| fit_layer(ds, target, phi, lambda, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedModel { dim: phi.dim(), n_params: target.n_params(), lambda, layers })
}

/// One backward step: `w = w_r + M w'`, `W[:, j] = grad M_j w' + M W'[:, j]`.
pub fn recursion_step(layer: &LayerFit, w_next: &DVector<f64>, big_w_next: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let w = &layer.w_r + &layer.m * w_next;
    let mut big_w = &layer.m * big_w_next;
    for (j, gm) in layer.grad_m.iter().enumerate() {
        let col = gm * w_next;
        let mut c = big_w.column_mut(j);
        c += col;
    }
    (w, big_w)
}

pub fn fpg_recursion(model: &FittedModel) -> FittedValues {
    let (d, m, hz) = (model.dim, model.n_params, model.horizon());
    let mut w = vec![DVector::zeros(d); hz + 1];
    let mut big_w = vec![DMatrix::zeros(d, m); hz + 1];
    for h in (0..hz).rev() {
        let (a, b) = recursion_step(&model.layers[h], &w[h + 1], &big_w[h + 1]);
        w[h] = a;
        big_w[h] = b;
    }
    FittedValues { w, big_w }
}

/// `sum_s xi(s) sum_a pi_1(a|s) phi(s, a)^T (W_1 + w_1 score(s, a)^T)`.
pub fn gradient_from_weights(
    target: &dyn Policy,
    phi: &FeatureMap,
    xi: &[f64],
    w1: &DVector<f64>,
    big_w1: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let (ns, na, m) = (target.n_states(), target.n_actions(), target.n_params());
    if xi.len() != ns {
        return Err(config(format!("initial distribution has {} entries for {ns} states", xi.len())));
    }
    let mut grad = vec![0.0; m];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for s in 0..ns {
        if xi[s] == 0.0 {
            continue;
        }
        target.probs_into(0, s, &mut probs);
        for a in 0..na {
            let wgt = xi[s] * probs[a];
            if wgt == 0.0 {
                continue;
            }
            target.score_into(0, s, a, &mut score);
            let f = phi.phi_sparse(s, a);
            let q: f64 = f.iter().map(|&(i, x)| x * w1[i]).sum();
            for j in 0..m {
                let gq: f64 = f.iter().map(|&(i, x)| x * big_w1[(i, j)]).sum();
                grad[j] += wgt * (gq + q * score[j]);
            }
        }
    }
    Ok(grad)
}

fn max_abs_q(phi: &FeatureMap, w: &DVector<f64>) -> f64 {
    let mut best = 0.0_f64;
    for s in 0..phi.n_states() {
        for a in 0..phi.n_actions() {
            let q: f64 = phi.phi_sparse(s, a).iter().map(|&(i, x)| x * w[i]).sum();
            best = best.max(q.abs());
        }
    }
    best
}

/// FPG estimate of `grad v_theta`. Layers are fitted and consumed one at a
/// time from `h = H` down, so only one step's `grad M` blocks are held.
pub fn fpg_estimate(ds: &Dataset, target: &dyn Policy, phi: &FeatureMap, lambda: f64, xi: &[f64]) -> Result<GradientEstimate> {
    let start = Instant::now();
    check_inputs(ds, target, phi, lambda)?;
    let (d, m, hz) = (phi.dim(), target.n_params(), ds.horizon());
    let mut w = DVector::zeros(d);
    let mut big_w = DMatrix::zeros(d, m);
    let mut max_q = 0.0_f64;
    for h in (0..hz).rev() {
        let layer = fit_layer(ds, target, phi, lambda, h)?;
        let (a, b) = recursion_step(&layer, &w, &big_w);
        w = a;
        big_w = b;
        max_q = max_q.max(max_abs_q(phi, &w));
    }
    let grad = gradient_from_weights(target, phi, xi, &w, &big_w)?;
    let mut est = GradientEstimate::new(grad, Method::Fpg, ds, Some(lambda), start);
    if max_q > 2.0 * hz as f64 {
        est.warnings.push(format!("fitted |Q| reaches {max_q:.3e} > 2H; severe extrapolation"));
    }
    if let Some(bad) = est.grad.iter().find(|g| !g.is_finite()) {
        return Err(crate::FpgError::Input(format!("non-finite gradient component {bad}")));
    }
    Ok(est)
}

/// The fitted regression operator `P_hat_h` and reward `r_hat_h`, applied to
/// tables over `(s, a)` rather than to weight vectors.
struct PlugInModel<'a> {
    phi: &'a FeatureMap,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    records: Vec<crate::dataset::Step>,
    h: usize,
    k: f64,
}

impl<'a> PlugInModel<'a> {
    fn new(ds: &Dataset, phi: &'a FeatureMap, lambda: f64, h: usize) -> Result<Self> {
        let d = phi.dim();
        let mut sigma = DMatrix::<f64>::identity(d, d) * lambda;
        let records: Vec<_> = ds.step_records(h).copied().collect();
        for st in &records {
            add_outer(&mut sigma, phi.phi_sparse(st.s, st.a), 1.0);
        }
        let k = ds.len() as f64;
        let sigma = sigma / k;
        if lambda == 0.0 {
            factor_covariance(&sigma, h, lambda)?;
        }
        Ok(Self { phi, lu: sigma.lu(), records, h, k })
    }

    /// Regress per-record targets `y_k` (`c` columns) onto the features and
    /// evaluate the fit as a `(s, a) x c` table.
    fn regress(&self, y: impl Fn(&crate::dataset::Step) -> Vec<f64>, c: usize) -> Result<Vec<f64>> {
        let d = self.phi.dim();
        let mut rhs = DMatrix::<f64>::zeros(d, c);
        for st in &self.records {
            let yk = y(st);
            for &(i, x) in self.phi.phi_sparse(st.s, st.a) {
                for (j, v) in yk.iter().enumerate() {
                    rhs[(i, j)] += x * v;
                }
            }
        }
        let coef = self
            .lu
            .solve(&(rhs / self.k))
            .ok_or_else(|| crate::FpgError::SingularCovariance { h: self.h, direction: Vec::new() })?;
        let (ns, na) = (self.phi.n_states(), self.phi.n_actions());
        let mut out = vec![0.0; ns * na * c];
        for s in 0..ns {
            for a in 0..na {
                for &(i, x) in self.phi.phi_sparse(s, a) {
                    for j in 0..c {
                        out[(s * na + a) * c + j] += x * coef[(i, j)];
                    }
                }
            }
        }
        Ok(out)
    }

    fn r_hat(&self) -> Result<Vec<f64>> {
        self.regress(|st| vec![st.r], 1)
    }

    /// `(P_hat f)(s, a)` given the action integral
    /// `g(s') = sum_a' pi_{h+1}(a'|s') f(s', a')` as a `s' x c` table.
    fn p_hat(&self, g: &[f64], c: usize) -> Result<Vec<f64>> {
        self.regress(|st| g[st.s_next * c..(st.s_next + 1) * c].to_vec(), c)
    }
}

/// `sum_a pi(a|s) f(s, a)` for a `(s, a) x c` table, with `f` optionally
/// multiplied by the score (then `f` has one column and the result `m`).
fn action_integral(target: &dyn Policy, h: usize, f: &[f64], c: usize, with_score: bool) -> Vec<f64> {
    let (ns, na, m) = (target.n_states(), target.n_actions(), target.n_params());
    let out_c = if with_score { m } else { c };
    let mut out = vec![0.0; ns * out_c];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for s in 0..ns {
        target.probs_into(h, s, &mut probs);
        for a in 0..na {
            let row = &mut out[s * out_c..(s + 1) * out_c];
            if with_score {
                target.score_into(h, s, a, &mut score);
                let q = f[s * na + a];
                for j in 0..m {
                    row[j] += probs[a] * score[j] * q;
                }
            } else {
                for j in 0..c {
                    row[j] += probs[a] * f[(s * na + a) * c + j];
                }
            }
        }
    }
    out
}

/// Certainty-equivalent plug-in: runs the Bellman and policy-gradient
/// Bellman recursions `Q_h = r_hat + P_hat Q_{h+1}`,
/// `grad Q_h = P_hat (score Q_{h+1}) + P_hat grad Q_{h+1}` on function
/// tables, each regression solved from scratch.
pub fn model_based_estimate(
    ds: &Dataset,
    target: &dyn Policy,
    phi: &FeatureMap,
    lambda: f64,
    xi: &[f64],
) -> Result<GradientEstimate> {
    let start = Instant::now();
    check_inputs(ds, target, phi, lambda)?;
    let (ns, na, m) = (target.n_states(), target.n_actions(), target.n_params());
    if xi.len() != ns {
        return Err(config(format!("initial distribution has {} entries for {ns} states", xi.len())));
    }
    let mut q = vec![0.0; ns * na];
    let mut gq = vec![0.0; ns * na * m];
    for h in (0..ds.horizon()).rev() {
        let model = PlugInModel::new(ds, phi, lambda, h)?;
        let r_hat = model.r_hat()?;
        let pq = model.p_hat(&action_integral(target, h + 1, &q, 1, false), 1)?;
        let p_score_q = model.p_hat(&action_integral(target, h + 1, &q, 1, true), m)?;
        let p_gq = model.p_hat(&action_integral(target, h + 1, &gq, m, false), m)?;
        q = r_hat.iter().zip(&pq).map(|(a, b)| a + b).collect();
        gq = p_score_q.iter().zip(&p_gq).map(|(a, b)| a + b).collect();
    }
    let mut grad = vec![0.0; m];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for s in 0..ns {
        target.probs_into(0, s, &mut probs);
        for a in 0..na {
            target.score_into(0, s, a, &mut score);
            let wgt = xi[s] * probs[a];
            for j in 0..m {
                grad[j] += wgt * (gq[(s * na + a) * m + j] + q[s * na + a] * score[j]);
            }
        }
    }
    Ok(GradientEstimate::new(grad, Method::ModelBased, ds, Some(lambda), start))
}

/// Initial-state frequencies of a dataset, for when `xi` is not known.
pub fn empirical_initial(ds: &Dataset, n_states: usize) -> Vec<f64> {
    let mut xi = vec![0.0; n_states];
    for ep in &ds.episodes {
        xi[ep.steps[0].s] += 1.0;
    }
    let k = ds.len() as f64;
    xi.iter_mut().for_each(|x| *x /= k);
    xi
}
