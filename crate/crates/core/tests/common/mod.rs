#![allow(dead_code)]

use fpg_core::dataset::{Dataset, Episode, Step};
use fpg_core::mdp::MdpSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random MDP whose transition rows are multiples of `1/n`, every entry
/// positive, so data can match it exactly.
pub fn rational_mdp(ns: usize, na: usize, hz: usize, n: usize, seed: u64) -> MdpSpec {
    assert!(n >= ns);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Vec::with_capacity(hz * ns * na * ns);
    let mut r = Vec::with_capacity(hz * ns * na);
    for _ in 0..hz * ns * na {
        let mut counts = vec![1usize; ns];
        for _ in 0..n - ns {
            counts[rng.gen_range(0..ns)] += 1;
        }
        p.extend(counts.iter().map(|&c| c as f64 / n as f64));
        r.push(rng.gen_range(0.0..1.0));
    }
    let mut xi: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.2..1.0)).collect();
    let t: f64 = xi.iter().sum();
    xi.iter_mut().for_each(|x| *x /= t);
    MdpSpec::new(ns, na, hz, p, r, xi).unwrap()
}

/// Every start state, every action sequence, and `n p(s'|s,a)` copies of
/// each branch: the empirical model of the result equals `mdp` exactly.
pub fn exact_proportion_dataset(mdp: &MdpSpec, n: usize) -> Dataset {
    fn grow(mdp: &MdpSpec, n: usize, h: usize, s: usize, prefix: &mut Vec<Step>, out: &mut Vec<Episode>) {
        if h == mdp.horizon() {
            out.push(Episode { steps: prefix.clone() });
            return;
        }
        for a in 0..mdp.n_actions() {
            for (sp, &p) in mdp.p(h, s, a).iter().enumerate() {
                let copies = (p * n as f64).round() as usize;
                for _ in 0..copies {
                    prefix.push(Step { s, a, r: mdp.r(h, s, a), s_next: sp });
                    grow(mdp, n, h + 1, sp, prefix, out);
                    prefix.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    for s in 0..mdp.n_states() {
        grow(mdp, n, 0, s, &mut Vec::new(), &mut out);
    }
    Dataset::new(out).unwrap()
}

/// One-step episodes from every `(s, a)` with `n p(s'|s,a)` copies of each
/// transition of a time-homogeneous MDP.
pub fn exact_transition_dataset(mdp: &MdpSpec, n: usize) -> Dataset {
    let mut out = Vec::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            for (sp, &p) in mdp.p(0, s, a).iter().enumerate() {
                for _ in 0..(p * n as f64).round() as usize {
                    out.push(Episode { steps: vec![Step { s, a, r: mdp.r(0, s, a), s_next: sp }] });
                }
            }
        }
    }
    Dataset::new(out).unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Time-homogeneous random MDP: the first layer of `random_mdp` repeated.
pub fn homogeneous_random_mdp(ns: usize, na: usize, hz: usize, seed: u64) -> MdpSpec {
    let doc = fpg_core::envs::random_mdp(ns, na, 1, seed).unwrap().to_document();
    let p: Vec<f64> = doc.transition[0].iter().flatten().flatten().copied().collect();
    let r: Vec<f64> = doc.reward[0].iter().flatten().copied().collect();
    MdpSpec::homogeneous(ns, na, hz, &p, &r, doc.initial_dist.clone()).unwrap()
}
