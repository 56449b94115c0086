mod common;

use common::*;
use fpg_core::dataset::{simulate, Dataset};
use fpg_core::discounted::discounted_fit;
use fpg_core::envs::{random_mdp, GridWorld};
use fpg_core::error::FpgError;
use fpg_core::features::{empirical_covariance, max_leverage, FeatureMap};
use fpg_core::fpg::{fit_model, fpg_estimate, fpg_recursion, DEFAULT_LAMBDA};
use fpg_core::inference::{plug_in_covariance, QTables};
use fpg_core::linalg::sym_eigenvalues;
use fpg_core::mdp::{exact_evaluation, occupancy, MdpSpec};
use fpg_core::optimize::{ascend, Ascent, AscentConfig};
use fpg_core::policy::{ActionPolicy, LinearSoftmaxPolicy, Policy, SoftmaxTabularPolicy};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

fn instance() -> impl Strategy<Value = (MdpSpec, SoftmaxTabularPolicy)> {
    (2usize..5, 2usize..4, 1usize..6, any::<u64>()).prop_flat_map(|(ns, na, hz, seed)| {
        prop::collection::vec(-2.0f64..2.0, ns * na).prop_map(move |theta| {
            (random_mdp(ns, na, hz, seed).unwrap(), SoftmaxTabularPolicy::new(ns, na, theta).unwrap())
        })
    })
}

fn scale_rewards(ds: &Dataset, c: f64) -> Dataset {
    let mut out = ds.clone();
    out.episodes.iter_mut().flat_map(|e| e.steps.iter_mut()).for_each(|st| st.r *= c);
    out
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn exact_q_satisfies_bellman((mdp, pol) in instance()) {
        let ev = exact_evaluation(&mdp, &pol).unwrap();
        let (ns, na, hz) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
        let v_at = |h: usize, s: usize| -> f64 {
            if h == hz { return 0.0; }
            pol.probs(h, s).iter().enumerate().map(|(a, p)| p * ev.q(h, s, a)).sum()
        };
        for h in 0..hz {
            for s in 0..ns {
                for a in 0..na {
                    let cont: f64 = mdp.p(h, s, a).iter().enumerate().map(|(sp, p)| p * v_at(h + 1, sp)).sum();
                    prop_assert!((ev.q(h, s, a) - mdp.r(h, s, a) - cont).abs() < 1e-12);
                }
            }
        }
        let v: f64 = (0..ns).map(|s| mdp.initial_dist()[s] * v_at(0, s)).sum();
        prop_assert!((v - ev.v).abs() < 1e-12);
    }

    #[test]
    fn occupancy_is_a_distribution_and_recovers_value((mdp, pol) in instance()) {
        let occ = occupancy(&mdp, &pol).unwrap();
        let ev = exact_evaluation(&mdp, &pol).unwrap();
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut v = 0.0;
        for h in 0..mdp.horizon() {
            prop_assert!((occ.layer(h).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for s in 0..ns {
                for a in 0..na {
                    v += occ.at(h, s, a) * mdp.r(h, s, a);
                }
            }
        }
        prop_assert!((v - ev.v).abs() < 1e-10);
    }

    #[test]
    fn linear_softmax_score_has_zero_mean_and_bound(
        states in prop::collection::vec(-2.0f64..2.0, 3 * 2),
        theta in prop::collection::vec(-3.0f64..3.0, 4 * 2),
    ) {
        let pol = LinearSoftmaxPolicy::new(4, 2, states, theta).unwrap();
        let g = pol.score_bound();
        for s in 0..3 {
            let p = pol.probs(0, s);
            let mut mean = vec![0.0; pol.n_params()];
            for (a, pa) in p.iter().enumerate() {
                let sc = pol.score(0, s, a).unwrap();
                for (m, x) in mean.iter_mut().zip(&sc) {
                    prop_assert!(x.abs() <= g + 1e-12);
                    *m += pa * x;
                }
            }
            prop_assert!(mean.iter().all(|m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn one_hot_covariance_is_visit_frequencies((mdp, pol) in instance(), k in 5usize..60, seed in any::<u64>()) {
        let ds = simulate(&mdp, &pol, k, seed).unwrap();
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let phi = FeatureMap::one_hot(ns, na);
        let sigma = empirical_covariance(&ds, &phi, 0.0).unwrap();
        let lev = max_leverage(&phi, &sigma);
        for h in 0..ds.horizon() {
            let mut freq = vec![0.0; ns * na];
            for st in ds.step_records(h) {
                freq[st.s * na + st.a] += 1.0 / k as f64;
            }
            for i in 0..ns * na {
                for j in 0..ns * na {
                    let want = if i == j { freq[i] } else { 0.0 };
                    prop_assert!((sigma[h][(i, j)] - want).abs() < 1e-12);
                }
            }
            let min_visited = freq.iter().cloned().filter(|&f| f > 0.0).fold(f64::INFINITY, f64::min);
            prop_assert!((lev[h] - 1.0 / min_visited).abs() < 1e-8 * lev[h]);
        }
    }

    #[test]
    fn estimate_ignores_episode_order_and_scales_with_rewards(
        (mdp, pol) in instance(), seed in any::<u64>(), c in 0.1f64..5.0,
    ) {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let ds = simulate(&mdp, &SoftmaxTabularPolicy::uniform(ns, na), 40, seed).unwrap();
        let phi = FeatureMap::one_hot(ns, na);
        let xi = mdp.initial_dist();
        let base = fpg_estimate(&ds, &pol, &phi, 0.1, xi).unwrap().grad;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = fpg_estimate(&ds.select(&order), &pol, &phi, 0.1, xi).unwrap().grad;
        let scaled = fpg_estimate(&scale_rewards(&ds, c), &pol, &phi, 0.1, xi).unwrap().grad;
        let tol = 1e-10 * (1.0 + l2(&base));
        prop_assert!(diff_norm(&base, &shuffled) < tol);
        let expect: Vec<f64> = base.iter().map(|g| c * g).collect();
        prop_assert!(diff_norm(&expect, &scaled) < c * tol);
    }

    #[test]
    fn tabular_fitted_values_are_bounded((mdp, pol) in instance(), seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let ds = simulate(&mdp, &SoftmaxTabularPolicy::uniform(ns, na), 30, seed).unwrap();
        let phi = FeatureMap::one_hot(ns, na);
        let q = QTables::from_fitted(&fpg_recursion(&fit_model(&ds, &pol, &phi, lambda).unwrap()), &phi);
        let hz = mdp.horizon() as f64;
        for h in 0..mdp.horizon() {
            for s in 0..ns {
                for a in 0..na {
                    let v = q.q(h, s, a);
                    prop_assert!(v >= -1e-12 && v <= hz + 1e-9, "Q = {v}");
                }
            }
        }
    }

    #[test]
    fn discounted_tabular_values_are_bounded(seed in any::<u64>(), gamma in 0.5f64..0.95) {
        let mdp = random_mdp(3, 2, 1, seed).unwrap();
        let pol = SoftmaxTabularPolicy::uniform(3, 2);
        let ds = simulate(&mdp, &pol, 200, seed).unwrap();
        let fit = discounted_fit(&ds, &pol, &FeatureMap::one_hot(3, 2), 1e-6, gamma).unwrap();
        let cap = 1.0 / (1.0 - gamma);
        prop_assert!(fit.w.iter().all(|&w| w >= -1e-9 && w <= cap + 1e-9));
    }

    #[test]
    fn plug_in_covariance_is_psd((mdp, pol) in instance(), seed in any::<u64>()) {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let ds = simulate(&mdp, &SoftmaxTabularPolicy::uniform(ns, na), 30, seed).unwrap();
        let phi = FeatureMap::one_hot(ns, na);
        let cov = plug_in_covariance(&ds, &pol, &phi, DEFAULT_LAMBDA, mdp.initial_dist()).unwrap().lambda_hat;
        let scale = cov.diagonal().amax().max(1e-300);
        prop_assert!(sym_eigenvalues(&cov).iter().all(|&e| e >= -1e-10 * scale));
    }

    #[test]
    fn malformed_transition_rows_are_rejected(seed in any::<u64>(), bump in 0.01f64..0.5) {
        let mut doc = random_mdp(3, 2, 2, seed).unwrap().to_document();
        doc.transition[1][2][0][1] += bump;
        prop_assert!(matches!(MdpSpec::from_document(doc), Err(FpgError::Config(_))));
    }
}

#[test]
fn simulation_does_not_depend_on_thread_count() {
    let mdp = GridWorld::frozenlake_like(10).build().unwrap();
    let pol = SoftmaxTabularPolicy::uniform(16, 4);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate(&mdp, &pol, 500, 42).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn ascent_is_deterministic() {
    let mdp = random_mdp(3, 2, 4, 1).unwrap();
    let init = SoftmaxTabularPolicy::uniform(3, 2);
    for est in [Ascent::Fpg, Ascent::Reinforce] {
        let cfg = AscentConfig::new(est, 15, 20, 9);
        let (a, _) = ascend(&mdp, &init, &cfg).unwrap();
        let (b, _) = ascend(&mdp, &init, &cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_theta, b.final_theta);
        assert!(a.rows.windows(2).all(|w| w[0].iter < w[1].iter && w[0].episodes <= w[1].episodes));
    }
}

#[test]
fn invalid_grids_are_config_errors() {
    let mut g = GridWorld::deterministic(4, 4, 10);
    g.slip = 0.7;
    assert!(matches!(g.build(), Err(FpgError::Config(_))));
    let mut g = GridWorld::deterministic(4, 4, 10);
    g.holes = vec![99];
    assert!(matches!(g.build(), Err(FpgError::Config(_))));
    assert!(matches!(GridWorld::deterministic(4, 4, 0).build(), Err(FpgError::Config(_))));
}
