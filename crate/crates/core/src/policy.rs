//! Stochastic policies over finite state and action sets.
//!
//! Steps `h` are zero-based throughout the crate (`h = 0` is the first step).
//! Every policy shipped here is stationary, but the step index is kept in the
//! signatures so time-dependent policies fit the same traits.
//!
//! [`ActionPolicy`] is all a behavior policy needs: probabilities and
//! sampling. [`Policy`] adds a parameter vector and the analytic score
//! `grad_theta log pi(a|s)`, which is what the estimators require of the
//! target. Wrappers such as [`EpsilonGreedy`] only implement the former.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};

pub trait ActionPolicy: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;

    /// Writes `pi_h(.|s)` into `out` (length `n_actions`).
    fn probs_into(&self, h: usize, s: usize, out: &mut [f64]);

    fn probs(&self, h: usize, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions()];
        self.probs_into(h, s, &mut out);
        out
    }

    fn sample_action(&self, h: usize, s: usize, rng: &mut dyn RngCore) -> usize {
        let p = self.probs(h, s);
        sample_categorical(&p, rng)
    }

    fn describe(&self) -> String;
}

/// A differentiable policy `pi_theta`.
pub trait Policy: ActionPolicy {
    fn n_params(&self) -> usize;
    fn params(&self) -> &[f64];

    /// Writes `grad_theta log pi_h(a|s)` into `out` (length `n_params`).
    fn score_into(&self, h: usize, s: usize, a: usize, out: &mut [f64]);

    fn score(&self, h: usize, s: usize, a: usize) -> Result<Vec<f64>> {
        if s >= self.n_states() {
            return Err(input(format!("state {s} out of range ({})", self.n_states())));
        }
        if a >= self.n_actions() {
            return Err(input(format!("action {a} out of range ({})", self.n_actions())));
        }
        let mut out = vec![0.0; self.n_params()];
        self.score_into(h, s, a, &mut out);
        Ok(out)
    }

    /// Sup-norm bound `G` on every score component.
    fn score_bound(&self) -> f64;

    /// Same policy family at a new parameter vector.
    fn with_params(&self, theta: &[f64]) -> Result<Self>
    where
        Self: Sized;
}

pub fn sample_categorical(p: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last action with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Max-subtracted softmax of one row of logits.
pub fn softmax_prob(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) -> Result<()> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(input("non-finite logit"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

/// Tabular softmax `pi(a|s) ∝ exp(theta[s][a])`, `m = n_states * n_actions`,
/// parameters laid out state-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxTabularPolicy {
    n_states: usize,
    n_actions: usize,
    theta: Vec<f64>,
}

impl SoftmaxTabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(config("policy needs at least one state and one action"));
        }
        if theta.len() != n_states * n_actions {
            return Err(config(format!(
                "theta has {} entries, expected {}x{}",
                theta.len(),
                n_states,
                n_actions
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(input("non-finite logit"));
        }
        Ok(Self { n_states, n_actions, theta })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, theta: vec![0.0; n_states * n_actions] }
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.theta[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

impl ActionPolicy for SoftmaxTabularPolicy {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn probs_into(&self, _h: usize, s: usize, out: &mut [f64]) {
        // logits are validated finite at construction
        softmax_into(self.row(s), out).expect("finite logits");
    }
    fn describe(&self) -> String {
        format!("softmax-tabular({}x{})", self.n_states, self.n_actions)
    }
}

impl Policy for SoftmaxTabularPolicy {
    fn n_params(&self) -> usize {
        self.theta.len()
    }
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn score_into(&self, h: usize, s: usize, a: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let base = s * self.n_actions;
        let block = &mut out[base..base + self.n_actions];
        self.probs_into(h, s, block);
        for (b, x) in block.iter_mut().enumerate() {
            *x = if b == a { 1.0 - *x } else { -*x };
        }
    }
    fn score_bound(&self) -> f64 {
        1.0
    }
    fn with_params(&self, theta: &[f64]) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, theta.to_vec())
    }
}

/// Softmax over a linear function of state features:
/// `logit(s, a) = theta[a] . x(s)`, `m = n_actions * p`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxPolicy {
    n_actions: usize,
    n_features: usize,
    state_features: Vec<f64>,
    theta: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    /// `state_features` is `n_states x p`, row-major.
    pub fn new(n_actions: usize, n_features: usize, state_features: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || n_features == 0 || state_features.is_empty() {
            return Err(config("linear softmax needs actions, features and states"));
        }
        if state_features.len() % n_features != 0 {
            return Err(config("state feature table is not a multiple of the feature width"));
        }
        if theta.len() != n_actions * n_features {
            return Err(config(format!("theta has {} entries, expected {}", theta.len(), n_actions * n_features)));
        }
        if theta.iter().chain(&state_features).any(|x| !x.is_finite()) {
            return Err(input("non-finite parameter or feature"));
        }
        Ok(Self { n_actions, n_features, state_features, theta })
    }

    fn x(&self, s: usize) -> &[f64] {
        &self.state_features[s * self.n_features..(s + 1) * self.n_features]
    }

    fn logits(&self, s: usize) -> Vec<f64> {
        let x = self.x(s);
        (0..self.n_actions)
            .map(|a| crate::linalg::dot(&self.theta[a * self.n_features..(a + 1) * self.n_features], x))
            .collect()
    }
}

impl ActionPolicy for LinearSoftmaxPolicy {
    fn n_states(&self) -> usize {
        self.state_features.len() / self.n_features
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn probs_into(&self, _h: usize, s: usize, out: &mut [f64]) {
        softmax_into(&self.logits(s), out).expect("finite logits");
    }
    fn describe(&self) -> String {
        format!("linear-softmax({} actions, {} features)", self.n_actions, self.n_features)
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn n_params(&self) -> usize {
        self.theta.len()
    }
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn score_into(&self, h: usize, s: usize, a: usize, out: &mut [f64]) {
        let p = self.probs(h, s);
        let x = self.x(s);
        for b in 0..self.n_actions {
            let coef = if b == a { 1.0 - p[b] } else { -p[b] };
            for (o, xi) in out[b * self.n_features..(b + 1) * self.n_features].iter_mut().zip(x) {
                *o = coef * xi;
            }
        }
    }
    fn score_bound(&self) -> f64 {
        self.state_features.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
    fn with_params(&self, theta: &[f64]) -> Result<Self> {
        Self::new(self.n_actions, self.n_features, self.state_features.clone(), theta.to_vec())
    }
}

/// `(1 - epsilon) * base + epsilon * uniform`. Sampling only: there is no
/// score, so it cannot be passed where a target policy is required.
#[derive(Clone, Debug)]
pub struct EpsilonGreedy<P> {
    base: P,
    epsilon: f64,
}

impl<P: ActionPolicy> EpsilonGreedy<P> {
    pub fn new(base: P, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(input(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { base, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl<P: ActionPolicy> ActionPolicy for EpsilonGreedy<P> {
    fn n_states(&self) -> usize {
        self.base.n_states()
    }
    fn n_actions(&self) -> usize {
        self.base.n_actions()
    }
    fn probs_into(&self, h: usize, s: usize, out: &mut [f64]) {
        self.base.probs_into(h, s, out);
        let u = self.epsilon / out.len() as f64;
        for x in out.iter_mut() {
            *x = (1.0 - self.epsilon) * *x + u;
        }
    }
    fn describe(&self) -> String {
        format!("epsilon-greedy({}, {})", self.epsilon, self.base.describe())
    }
}

/// Deterministic stationary policy given by one action per state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeterministicPolicy {
    n_actions: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(n_actions: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.iter().any(|&a| a >= n_actions) {
            return Err(input("deterministic policy action out of range"));
        }
        Ok(Self { n_actions, actions })
    }
}

impl ActionPolicy for DeterministicPolicy {
    fn n_states(&self) -> usize {
        self.actions.len()
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn probs_into(&self, _h: usize, s: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        out[self.actions[s]] = 1.0;
    }
    fn sample_action(&self, _h: usize, s: usize, _rng: &mut dyn RngCore) -> usize {
        self.actions[s]
    }
    fn describe(&self) -> String {
        "deterministic".to_string()
    }
}

/// Arbitrary stationary table `pi(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    table: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_states * n_actions || n_actions == 0 {
            return Err(config("policy table has the wrong shape"));
        }
        for row in table.chunks(n_actions) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(input("policy table rows must be probability vectors"));
            }
        }
        Ok(Self { n_actions, table })
    }

    /// Snapshot of another policy's step-0 probabilities.
    pub fn from_policy(p: &dyn ActionPolicy) -> Self {
        let mut table = Vec::with_capacity(p.n_states() * p.n_actions());
        for s in 0..p.n_states() {
            table.extend(p.probs(0, s));
        }
        Self { n_actions: p.n_actions(), table }
    }
}

impl ActionPolicy for TabularPolicy {
    fn n_states(&self) -> usize {
        self.table.len() / self.n_actions
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn probs_into(&self, _h: usize, s: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.table[s * self.n_actions..(s + 1) * self.n_actions]);
    }
    fn describe(&self) -> String {
        "tabular".to_string()
    }
}

/// JSON form of a parameter vector: `{"shape": [..], "theta": [..]}` with
/// `theta` flat and row-major in `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaDocument {
    pub shape: Vec<usize>,
    pub theta: Vec<f64>,
}

impl ThetaDocument {
    pub fn new(shape: Vec<usize>, theta: Vec<f64>) -> Result<Self> {
        let doc = Self { shape, theta };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.theta.len() {
            return Err(config(format!("theta shape {:?} does not match {} values", self.shape, self.theta.len())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn into_softmax_tabular(self) -> Result<SoftmaxTabularPolicy> {
        match self.shape.as_slice() {
            [s, a] => SoftmaxTabularPolicy::new(*s, *a, self.theta),
            _ => Err(config("tabular softmax theta needs shape [n_states, n_actions]")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_softmax(row: &[f64]) -> Vec<f64> {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        row.iter().map(|x| x.exp() / z).collect()
    }

    #[test]
    fn softmax_fixed_values() {
        assert_eq!(softmax_prob(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax_prob(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax_prob(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn softmax_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let a = softmax_prob(&row).unwrap();
            let b = naive_softmax(&row);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_two_action_score() {
        let p = SoftmaxTabularPolicy::uniform(3, 2);
        let sc = p.score(0, 1, 0).unwrap();
        assert_eq!(sc, vec![0.0, 0.0, 0.5, -0.5, 0.0, 0.0]);
        assert!(p.score(0, 0, 2).is_err());
    }

    fn fd_score<P: Policy>(p: &P, h: usize, s: usize, a: usize) -> Vec<f64> {
        let step = 1e-6;
        (0..p.n_params())
            .map(|j| {
                let mut tp = p.params().to_vec();
                let mut tm = tp.clone();
                tp[j] += step;
                tm[j] -= step;
                let lp = p.with_params(&tp).unwrap().probs(h, s)[a].ln();
                let lm = p.with_params(&tm).unwrap().probs(h, s)[a].ln();
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tab = SoftmaxTabularPolicy::new(4, 3, theta).unwrap();
        let feats: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let th2: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lin = LinearSoftmaxPolicy::new(3, 2, feats, th2).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                let an = tab.score(0, s, a).unwrap();
                for (x, y) in an.iter().zip(fd_score(&tab, 0, s, a)) {
                    assert!((x - y).abs() < 1e-6);
                }
                let an = lin.score(0, s, a).unwrap();
                for (x, y) in an.iter().zip(fd_score(&lin, 0, s, a)) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn score_identity_holds(theta in proptest::collection::vec(-4.0f64..4.0, 6), s in 0usize..2, h in 0usize..5) {
            let tab = SoftmaxTabularPolicy::new(2, 3, theta.clone()).unwrap();
            let lin = LinearSoftmaxPolicy::new(3, 2, vec![1.0, -0.5, 0.3, 2.0], theta).unwrap();
            for pol in [&tab as &dyn Policy, &lin as &dyn Policy] {
                let p = pol.probs(h, s);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let mut acc = vec![0.0; pol.n_params()];
                for (a, pa) in p.iter().enumerate() {
                    let sc = pol.score(h, s, a).unwrap();
                    for (x, y) in acc.iter_mut().zip(&sc) {
                        *x += pa * y;
                    }
                    prop_assert!(sc.iter().all(|v| v.abs() <= pol.score_bound() + 1e-12));
                }
                prop_assert!(acc.iter().all(|x| x.abs() < 1e-10));
            }
        }
    }

    fn freq(pol: &dyn ActionPolicy, s: usize, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; pol.n_actions()];
        for _ in 0..draws {
            counts[pol.sample_action(0, s, &mut rng)] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn sampling_frequencies_within_four_sigma() {
        let n = 100_000;
        let det = DeterministicPolicy::new(2, vec![1]).unwrap();
        assert_eq!(freq(&det, 0, 1000, 1), vec![0.0, 1.0]);

        let eps1 = EpsilonGreedy::new(det.clone(), 1.0).unwrap();
        let f = freq(&eps1, 0, n, 2);
        let sd = (0.25f64 / n as f64).sqrt();
        assert!(f.iter().all(|x| (x - 0.5).abs() < 4.0 * sd));

        let greedy0 = DeterministicPolicy::new(2, vec![0]).unwrap();
        let eps = EpsilonGreedy::new(greedy0, 0.3).unwrap();
        let f = freq(&eps, 0, n, 3);
        let p = 0.85;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((f[0] - p).abs() < 4.0 * sd, "{f:?}");

        let sm = SoftmaxTabularPolicy::new(1, 3, vec![0.5, -1.0, 1.0]).unwrap();
        let pr = sm.probs(0, 0);
        let f = freq(&sm, 0, n, 4);
        for (x, p) in f.iter().zip(&pr) {
            assert!((x - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }

    #[test]
    fn theta_document_round_trip() {
        let doc = ThetaDocument::new(vec![2, 2], vec![0.1, -0.2, 0.3, 1e-17]).unwrap();
        let back = ThetaDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(doc, back);
        assert!(ThetaDocument::from_json(r#"{"shape":[2,3],"theta":[1.0]}"#).is_err());
        let pol = back.into_softmax_tabular().unwrap();
        assert_eq!(pol.n_params(), 4);
    }
}
