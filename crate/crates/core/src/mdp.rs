//! Finite-horizon tabular MDPs and exact dynamic-programming oracles.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::policy::{ActionPolicy, Policy};

const PROB_TOL: f64 = 1e-12;

/// Time-inhomogeneous tabular MDP `(S, A, p_h, r_h, xi, H)`.
///
/// Transition rows are stored densely per step: `p[h][s][a][s']` flattened
/// in that order, `r[h][s][a]` likewise.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpSpec {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial: Vec<f64>,
}

/// Nested-array JSON document for [`MdpSpec`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `[h][s][a][s']`
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[h][s][a]`
    pub reward: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
}

impl MdpSpec {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(config("MDP needs at least one state, action and step"));
        }
        let sa = n_states * n_actions;
        if transition.len() != horizon * sa * n_states {
            return Err(config("transition array has the wrong length"));
        }
        if reward.len() != horizon * sa {
            return Err(config("reward array has the wrong length"));
        }
        if initial.len() != n_states {
            return Err(config("initial distribution has the wrong length"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_prob(row).map_err(|e| {
                let (h, rest) = (i / sa, i % sa);
                config(format!("transition row h={} s={} a={}: {e}", h + 1, rest / n_actions, rest % n_actions))
            })?;
        }
        check_prob(&initial).map_err(|e| config(format!("initial distribution: {e}")))?;
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(config(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self { n_states, n_actions, horizon, transition, reward, initial })
    }

    /// Builds a time-homogeneous MDP by replicating one layer `horizon` times.
    pub fn homogeneous(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        transition: &[f64],
        reward: &[f64],
        initial: Vec<f64>,
    ) -> Result<Self> {
        let p = transition.iter().copied().cycle().take(transition.len() * horizon).collect();
        let r = reward.iter().copied().cycle().take(reward.len() * horizon).collect();
        Self::new(n_states, n_actions, horizon, p, r, initial)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    /// `p_h(.|s, a)`.
    pub fn p(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let i = ((h * self.n_states + s) * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn r(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward[(h * self.n_states + s) * self.n_actions + a]
    }

    /// Same dynamics with a different horizon; layers are repeated from the
    /// last one when extending.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let layer_p = self.n_states * self.n_actions * self.n_states;
        let layer_r = self.n_states * self.n_actions;
        let mut p = Vec::with_capacity(horizon * layer_p);
        let mut r = Vec::with_capacity(horizon * layer_r);
        for h in 0..horizon {
            let src = h.min(self.horizon - 1);
            p.extend_from_slice(&self.transition[src * layer_p..(src + 1) * layer_p]);
            r.extend_from_slice(&self.reward[src * layer_r..(src + 1) * layer_r]);
        }
        Self::new(self.n_states, self.n_actions, horizon, p, r, self.initial.clone())
    }

    /// Rewards scaled by `gamma^h` at step `h`, which turns a homogeneous
    /// MDP into the finite-horizon truncation of its discounted version.
    pub fn discounted_truncation(&self, gamma: f64, horizon: usize) -> Result<Self> {
        let mut out = self.with_horizon(horizon)?;
        let layer = self.n_states * self.n_actions;
        for h in 0..horizon {
            let g = gamma.powi(h as i32);
            for x in &mut out.reward[h * layer..(h + 1) * layer] {
                *x *= g;
            }
        }
        Ok(out)
    }

    pub fn to_document(&self) -> MdpDocument {
        let (s_n, a_n) = (self.n_states, self.n_actions);
        let transition = (0..self.horizon)
            .map(|h| (0..s_n).map(|s| (0..a_n).map(|a| self.p(h, s, a).to_vec()).collect()).collect())
            .collect();
        let reward = (0..self.horizon)
            .map(|h| (0..s_n).map(|s| (0..a_n).map(|a| self.r(h, s, a)).collect()).collect())
            .collect();
        MdpDocument {
            n_states: s_n,
            n_actions: a_n,
            horizon: self.horizon,
            transition,
            reward,
            initial_dist: self.initial.clone(),
        }
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        let shape_err = || config("MDP document arrays do not match the declared dimensions");
        if doc.transition.len() != doc.horizon || doc.reward.len() != doc.horizon {
            return Err(shape_err());
        }
        let mut p = Vec::new();
        for layer in &doc.transition {
            if layer.len() != doc.n_states {
                return Err(shape_err());
            }
            for row in layer {
                if row.len() != doc.n_actions || row.iter().any(|x| x.len() != doc.n_states) {
                    return Err(shape_err());
                }
                row.iter().for_each(|x| p.extend_from_slice(x));
            }
        }
        let mut r = Vec::new();
        for layer in &doc.reward {
            if layer.len() != doc.n_states || layer.iter().any(|x| x.len() != doc.n_actions) {
                return Err(shape_err());
            }
            layer.iter().for_each(|x| r.extend_from_slice(x));
        }
        Self::new(doc.n_states, doc.n_actions, doc.horizon, p, r, doc.initial_dist)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    /// FNV-1a hash of the JSON document, recorded in dataset metadata.
    pub fn content_hash(&self) -> u64 {
        fnv1a(self.to_json().expect("MDP serializes").as_bytes())
    }

    fn check_policy(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if n_states != self.n_states || n_actions != self.n_actions {
            return Err(config(format!(
                "policy is {}x{} but MDP is {}x{}",
                n_states, n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn check_prob(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = row.iter().find(|x| !(**x >= 0.0)) {
        return Err(format!("negative or NaN entry {x}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Exact `Q_h`, `v`, and (when computed) `grad Q_h`, `grad v` for one policy.
#[derive(Clone, Debug)]
pub struct ExactEvaluation {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `q[h][s][a]`, flattened.
    pub q: Vec<f64>,
    pub v: f64,
    /// `grad_q[h][s][a][j]`, flattened; empty when only values were requested.
    pub grad_q: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub n_params: usize,
}

impl ExactEvaluation {
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn grad_q(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let i = ((h * self.n_states + s) * self.n_actions + a) * self.n_params;
        &self.grad_q[i..i + self.n_params]
    }
}

/// Backward Bellman pass for `Q_h` and the value `v = sum_s xi(s) sum_a pi(a|s) Q_1(s, a)`.
pub fn exact_q_and_value(mdp: &MdpSpec, policy: &dyn ActionPolicy) -> Result<ExactEvaluation> {
    mdp.check_policy(policy.n_states(), policy.n_actions())?;
    let (ns, na, hz) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut q = vec![0.0; hz * ns * na];
    // next_v[s'] = sum_a' pi_{h+1}(a'|s') Q_{h+1}(s', a')
    let mut next_v = vec![0.0; ns];
    let mut probs = vec![0.0; na];
    for h in (0..hz).rev() {
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp.p(h, s, a).iter().zip(&next_v).map(|(p, v)| p * v).sum();
                q[(h * ns + s) * na + a] = mdp.r(h, s, a) + cont;
            }
        }
        for (s, nv) in next_v.iter_mut().enumerate() {
            policy.probs_into(h, s, &mut probs);
            *nv = probs.iter().enumerate().map(|(a, p)| p * q[(h * ns + s) * na + a]).sum();
        }
    }
    let mut v = 0.0;
    for s in 0..ns {
        policy.probs_into(0, s, &mut probs);
        let mut vs = 0.0;
        for a in 0..na {
            vs += probs[a] * q[s * na + a];
        }
        v += mdp.initial[s] * vs;
    }
    Ok(ExactEvaluation { n_states: ns, n_actions: na, horizon: hz, q, v, grad_q: Vec::new(), grad_v: Vec::new(), n_params: 0 })
}

/// Full evaluation including `grad Q_h` from the policy gradient Bellman
/// equation `grad Q_h = P_h (score * Q_{h+1} + grad Q_{h+1})`.
pub fn exact_evaluation(mdp: &MdpSpec, policy: &dyn Policy) -> Result<ExactEvaluation> {
    let mut ev = exact_q_and_value(mdp, policy)?;
    let (ns, na, hz, m) = (mdp.n_states, mdp.n_actions, mdp.horizon, policy.n_params());
    let mut grad_q = vec![0.0; hz * ns * na * m];
    // next_g[s'] = sum_a' pi(a'|s') (score(s',a') Q_{h+1}(s',a') + grad Q_{h+1}(s',a'))
    let mut next_g = vec![0.0; ns * m];
    let mut probs = vec![0.0; na];
    let mut score = vec![0.0; m];
    for h in (0..hz).rev() {
        for s in 0..ns {
            for a in 0..na {
                let base = ((h * ns + s) * na + a) * m;
                let out = &mut grad_q[base..base + m];
                for (sp, &p) in mdp.p(h, s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, g) in out.iter_mut().zip(&next_g[sp * m..(sp + 1) * m]) {
                        *o += p * g;
                    }
                }
            }
        }
        next_g.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..ns {
            policy.probs_into(h, s, &mut probs);
            for a in 0..na {
                if probs[a] == 0.0 {
                    continue;
                }
                policy.score_into(h, s, a, &mut score);
                let qv = ev.q[(h * ns + s) * na + a];
                let gq = &grad_q[((h * ns + s) * na + a) * m..][..m];
                let out = &mut next_g[s * m..(s + 1) * m];
                for j in 0..m {
                    out[j] += probs[a] * (score[j] * qv + gq[j]);
                }
            }
        }
    }
    // next_g now holds the h = 0 layer
    let mut grad_v = vec![0.0; m];
    for s in 0..ns {
        for (g, x) in grad_v.iter_mut().zip(&next_g[s * m..(s + 1) * m]) {
            *g += mdp.initial[s] * x;
        }
    }
    ev.grad_q = grad_q;
    ev.grad_v = grad_v;
    ev.n_params = m;
    Ok(ev)
}

/// Exact `grad_theta v_theta`.
pub fn exact_policy_gradient(mdp: &MdpSpec, policy: &dyn Policy) -> Result<Vec<f64>> {
    Ok(exact_evaluation(mdp, policy)?.grad_v)
}

/// State-action occupancy `mu[h][s][a]` of a policy started from `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub mu: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn at(&self, h: usize, s: usize, a: usize) -> f64 {
        self.mu[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        let n = self.n_states * self.n_actions;
        &self.mu[h * n..(h + 1) * n]
    }

    /// State marginal at step `h`.
    pub fn state_marginal(&self, h: usize) -> Vec<f64> {
        self.layer(h).chunks(self.n_actions).map(|c| c.iter().sum()).collect()
    }
}

/// Forward push of `xi` through `p_h` and `pi`.
pub fn occupancy(mdp: &MdpSpec, policy: &dyn ActionPolicy) -> Result<OccupancyMeasure> {
    mdp.check_policy(policy.n_states(), policy.n_actions())?;
    let (ns, na, hz) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut mu = vec![0.0; hz * ns * na];
    let mut state = mdp.initial.clone();
    let mut probs = vec![0.0; na];
    for h in 0..hz {
        for s in 0..ns {
            policy.probs_into(h, s, &mut probs);
            for a in 0..na {
                mu[(h * ns + s) * na + a] = state[s] * probs[a];
            }
        }
        if h + 1 < hz {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let w = mu[(h * ns + s) * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(mdp.p(h, s, a)) {
                        *n += w * p;
                    }
                }
            }
            state = next;
        }
    }
    Ok(OccupancyMeasure { n_states: ns, n_actions: na, horizon: hz, mu })
}

/// Optimal `Q*_h(s, a)` by backward value iteration, flattened `[h][s][a]`.
pub fn optimal_q(mdp: &MdpSpec) -> Vec<f64> {
    let (ns, na, hz) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut q = vec![0.0; hz * ns * na];
    let mut next_v = vec![0.0; ns];
    for h in (0..hz).rev() {
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp.p(h, s, a).iter().zip(&next_v).map(|(p, v)| p * v).sum();
                q[(h * ns + s) * na + a] = mdp.r(h, s, a) + cont;
            }
        }
        for (s, nv) in next_v.iter_mut().enumerate() {
            *nv = q[(h * ns + s) * na..(h * ns + s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

/// `v*`, the value of the optimal (possibly non-stationary) policy.
pub fn optimal_value(mdp: &MdpSpec) -> f64 {
    let q = optimal_q(mdp);
    let na = mdp.n_actions;
    (0..mdp.n_states)
        .map(|s| mdp.initial[s] * q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{DeterministicPolicy, SoftmaxTabularPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize, hz: usize) -> MdpSpec {
        let mut p = Vec::new();
        for _ in 0..hz * ns * na {
            let row: Vec<f64> = (0..ns).map(|_| rng.gen::<f64>() + 0.05).collect();
            let z: f64 = row.iter().sum();
            p.extend(row.iter().map(|x| x / z));
        }
        let r = (0..hz * ns * na).map(|_| rng.gen()).collect();
        let xi: Vec<f64> = (0..ns).map(|_| rng.gen::<f64>() + 0.1).collect();
        let z: f64 = xi.iter().sum();
        // exact renormalization keeps the 1e-12 check satisfied
        let mut xi: Vec<f64> = xi.iter().map(|x| x / z).collect();
        let tail: f64 = xi[..ns - 1].iter().sum();
        xi[ns - 1] = 1.0 - tail;
        MdpSpec::new(ns, na, hz, p, r, xi).unwrap()
    }

    fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(MdpSpec::homogeneous(1, 1, 1, &[0.9], &[0.0], vec![1.0]).is_err());
        assert!(MdpSpec::homogeneous(1, 1, 1, &[1.0], &[1.5], vec![1.0]).is_err());
        assert!(MdpSpec::homogeneous(2, 1, 1, &[1.0, 0.0, 0.5, 0.5], &[0.0, 0.0], vec![0.5, 0.5 + 1e-9]).is_err());
    }

    #[test]
    fn constant_reward_single_state() {
        let mdp = MdpSpec::homogeneous(1, 1, 3, &[1.0], &[1.0], vec![1.0]).unwrap();
        let pol = SoftmaxTabularPolicy::uniform(1, 1);
        assert_eq!(exact_q_and_value(&mdp, &pol).unwrap().v, 3.0);
        let zero = MdpSpec::homogeneous(1, 1, 3, &[1.0], &[0.0], vec![1.0]).unwrap();
        let ev = exact_q_and_value(&zero, &pol).unwrap();
        assert_eq!(ev.v, 0.0);
        assert!(ev.q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mdp = MdpSpec::homogeneous(1, 1, 3, &[1.0], &[1.0], vec![1.0]).unwrap();
        let pol = SoftmaxTabularPolicy::uniform(2, 1);
        assert!(matches!(exact_q_and_value(&mdp, &pol), Err(crate::FpgError::Config(_))));
    }

    #[test]
    fn two_state_value_matches_trajectory_enumeration() {
        let p = [0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1];
        let r = [0.1, 0.9, 0.5, 0.3];
        let mdp = MdpSpec::homogeneous(2, 2, 2, &p, &r, vec![0.6, 0.4]).unwrap();
        let pol = SoftmaxTabularPolicy::new(2, 2, vec![0.3, -0.2, 1.0, 0.0]).unwrap();
        let mut brute = 0.0;
        for s1 in 0..2 {
            for a1 in 0..2 {
                for s2 in 0..2 {
                    for a2 in 0..2 {
                        let prob = mdp.initial_dist()[s1] * pol.probs(0, s1)[a1] * mdp.p(0, s1, a1)[s2] * pol.probs(1, s2)[a2];
                        brute += prob * (mdp.r(0, s1, a1) + mdp.r(1, s2, a2));
                    }
                }
            }
        }
        let v = exact_q_and_value(&mdp, &pol).unwrap().v;
        assert!((v - brute).abs() < 1e-14);
    }

    #[test]
    fn bellman_consistency_and_gradient_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(&mut rng, 4, 3, 5);
        let pol = SoftmaxTabularPolicy::new(4, 3, random_theta(&mut rng, 12)).unwrap();
        let ev = exact_evaluation(&mdp, &pol).unwrap();
        for h in 0..5 {
            for s in 0..4 {
                for a in 0..3 {
                    let mut cont = 0.0;
                    if h + 1 < 5 {
                        for sp in 0..4 {
                            let pi = pol.probs(h + 1, sp);
                            for ap in 0..3 {
                                cont += mdp.p(h, s, a)[sp] * pi[ap] * ev.q(h + 1, sp, ap);
                            }
                        }
                    }
                    assert!((ev.q(h, s, a) - mdp.r(h, s, a) - cont).abs() < 1e-10);
                    assert!(ev.q(h, s, a).abs() <= (5 - h) as f64);
                    // remaining steps after h (zero-based) is 5 - h - 1
                    let rem = (5 - h - 1) as f64;
                    assert!(ev.grad_q(h, s, a).iter().all(|g| g.abs() <= pol.score_bound() * rem * rem + 1e-12));
                }
            }
        }
    }

    #[test]
    fn bandit_gradient_closed_form() {
        let mdp = MdpSpec::homogeneous(1, 2, 1, &[1.0, 1.0], &[1.0, 0.0], vec![1.0]).unwrap();
        let pol = SoftmaxTabularPolicy::uniform(1, 2);
        let g = exact_policy_gradient(&mdp, &pol).unwrap();
        // d/dtheta_0 sigma(theta_0 - theta_1) = 1/4 at zero
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mdp_uniform_policy_has_zero_gradient() {
        // both actions share dynamics and reward, so the value is flat in theta
        let p = [0.3, 0.7, 0.3, 0.7, 0.6, 0.4, 0.6, 0.4];
        let r = [0.2, 0.2, 0.9, 0.9];
        let mdp = MdpSpec::homogeneous(2, 2, 4, &p, &r, vec![0.5, 0.5]).unwrap();
        let g = exact_policy_gradient(&mdp, &SoftmaxTabularPolicy::uniform(2, 2)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 3, 2, 4);
            let pol = SoftmaxTabularPolicy::new(3, 2, random_theta(&mut rng, 6)).unwrap();
            let g = exact_policy_gradient(&mdp, &pol).unwrap();
            let fd: Vec<f64> = (0..6)
                .map(|j| {
                    let mut tp = pol.params().to_vec();
                    let mut tm = tp.clone();
                    tp[j] += 1e-5;
                    tm[j] -= 1e-5;
                    let vp = exact_q_and_value(&mdp, &pol.with_params(&tp).unwrap()).unwrap().v;
                    let vm = exact_q_and_value(&mdp, &pol.with_params(&tm).unwrap()).unwrap().v;
                    (vp - vm) / 2e-5
                })
                .collect();
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let nrm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err / nrm <= 1e-4, "rel err {}", err / nrm);
        }
    }

    #[test]
    fn occupancy_first_layer_and_telescoping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(&mut rng, 3, 2, 4);
        let pol = SoftmaxTabularPolicy::new(3, 2, random_theta(&mut rng, 6)).unwrap();
        let occ = occupancy(&mdp, &pol).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(occ.at(0, s, a), mdp.initial_dist()[s] * pol.probs(0, s)[a]);
            }
        }
        for h in 0..4 {
            assert!((occ.layer(h).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        for h in 0..3 {
            let marg = occ.state_marginal(h + 1);
            for (sp, m) in marg.iter().enumerate() {
                let mut push = 0.0;
                for s in 0..3 {
                    for a in 0..2 {
                        push += occ.at(h, s, a) * mdp.p(h, s, a)[sp];
                    }
                }
                assert!((m - push).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn deterministic_chain_has_indicator_occupancy() {
        // 0 -> 1 -> 2 -> 2 regardless of action
        let p = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mdp = MdpSpec::homogeneous(3, 1, 3, &p, &[0.0; 3], vec![1.0, 0.0, 0.0]).unwrap();
        let pol = DeterministicPolicy::new(1, vec![0, 0, 0]).unwrap();
        let occ = occupancy(&mdp, &pol).unwrap();
        assert_eq!(occ.layer(0), &[1.0, 0.0, 0.0]);
        assert_eq!(occ.layer(1), &[0.0, 1.0, 0.0]);
        assert_eq!(occ.layer(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn occupancy_matches_monte_carlo_visits() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mdp = random_mdp(&mut rng, 3, 2, 3);
        let pol = SoftmaxTabularPolicy::new(3, 2, random_theta(&mut rng, 6)).unwrap();
        let occ = occupancy(&mdp, &pol).unwrap();
        let n = 1_000_000usize;
        let mut counts = vec![0usize; 3 * 3 * 2];
        for _ in 0..n {
            let mut s = crate::policy::sample_categorical(mdp.initial_dist(), &mut rng);
            for h in 0..3 {
                let a = pol.sample_action(h, s, &mut rng);
                counts[(h * 3 + s) * 2 + a] += 1;
                s = crate::policy::sample_categorical(mdp.p(h, s, a), &mut rng);
            }
        }
        for (c, mu) in counts.iter().zip(&occ.mu) {
            let f = *c as f64 / n as f64;
            let se = (mu * (1.0 - mu) / n as f64).sqrt();
            assert!((f - mu).abs() <= 3.0 * se + 1e-12, "{f} vs {mu}");
        }
    }

    #[test]
    fn optimal_value_properties() {
        let zero = MdpSpec::homogeneous(2, 2, 3, &[0.5; 8], &[0.0; 4], vec![0.5, 0.5]).unwrap();
        assert_eq!(optimal_value(&zero), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let one = random_mdp(&mut rng, 3, 1, 4);
        let v = exact_q_and_value(&one, &SoftmaxTabularPolicy::uniform(3, 1)).unwrap().v;
        assert!((optimal_value(&one) - v).abs() < 1e-14);

        let mdp = random_mdp(&mut rng, 3, 2, 4);
        let vstar = optimal_value(&mdp);
        for _ in 0..20 {
            let pol = SoftmaxTabularPolicy::new(3, 2, random_theta(&mut rng, 6)).unwrap();
            assert!(exact_q_and_value(&mdp, &pol).unwrap().v <= vstar + 1e-12);
        }
    }

    #[test]
    fn optimal_value_matches_exhaustive_search_on_small_grid() {
        let mdp = crate::envs::GridWorld::deterministic(2, 2, 3).build().unwrap();
        let ns = mdp.n_states();
        let na = mdp.n_actions();
        // enumerate all non-stationary deterministic policies: na^(ns*H)
        let cells = ns * mdp.horizon();
        let mut best = f64::NEG_INFINITY;
        let total = na.pow(cells as u32);
        for code in 0..total {
            let mut c = code;
            let mut table = vec![0usize; cells];
            for t in table.iter_mut() {
                *t = c % na;
                c /= na;
            }
            // evaluate by forward pass
            let mut dist = mdp.initial_dist().to_vec();
            let mut v = 0.0;
            for h in 0..mdp.horizon() {
                let mut next = vec![0.0; ns];
                for s in 0..ns {
                    let a = table[h * ns + s];
                    v += dist[s] * mdp.r(h, s, a);
                    for (n, p) in next.iter_mut().zip(mdp.p(h, s, a)) {
                        *n += dist[s] * p;
                    }
                }
                dist = next;
            }
            best = best.max(v);
        }
        assert!((optimal_value(&mdp) - best).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 2, 3, 2);
        let back = MdpSpec::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(mdp.content_hash(), back.content_hash());
    }
}
