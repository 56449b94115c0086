//! Episodic off-policy datasets: simulation, JSONL persistence, validation,
//! and the certainty-equivalent tabular model.
//!
//! File format: JSON Lines. An optional first line `{"meta": {...}}` carries
//! provenance; every other line is one episode
//! `{"k": 0, "steps": [[h, s, a, r, s_next], ...]}` with `h` starting at 1.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, FpgError, Result};
use crate::mdp::MdpSpec;
use crate::policy::{sample_categorical, ActionPolicy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub behavior: String,
    /// Hex FNV-1a hash of the generating MDP document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_hash: Option<String>,
}

/// `K` episodes of length `H`; the only input the estimators see.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    k: usize,
    steps: Vec<(usize, usize, usize, f64, usize)>,
}

/// Independent per-episode stream: the seed picks the key, the episode
/// index picks the ChaCha stream.
pub fn episode_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

pub fn simulate_episode(mdp: &MdpSpec, behavior: &dyn ActionPolicy, rng: &mut ChaCha8Rng) -> Episode {
    let mut s = sample_categorical(mdp.initial_dist(), rng);
    let steps = (0..mdp.horizon())
        .map(|h| {
            let a = behavior.sample_action(h, s, rng);
            let s_next = sample_categorical(mdp.p(h, s, a), rng);
            let st = Step { s, a, r: mdp.r(h, s, a), s_next };
            s = s_next;
            st
        })
        .collect();
    Episode { steps }
}

/// `k` episodes under `behavior`; episode `i` uses stream `i` of `seed`, so
/// the result does not depend on scheduling.
pub fn simulate(mdp: &MdpSpec, behavior: &dyn ActionPolicy, k: usize, seed: u64) -> Result<Dataset> {
    simulate_range(mdp, behavior, 0..k, seed)
}

/// Episodes with stream indices in `range`; lets callers extend a dataset
/// without reusing streams.
pub fn simulate_range(
    mdp: &MdpSpec,
    behavior: &dyn ActionPolicy,
    range: std::ops::Range<usize>,
    seed: u64,
) -> Result<Dataset> {
    if range.is_empty() {
        return Err(input("need at least one episode"));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(crate::error::config("behavior policy dimensions do not match the MDP"));
    }
    let episodes = range
        .into_par_iter()
        .map(|k| simulate_episode(mdp, behavior, &mut episode_rng(seed, k)))
        .collect();
    Ok(Dataset {
        episodes,
        meta: DatasetMeta {
            seed: Some(seed),
            behavior: behavior.describe(),
            env_hash: Some(format!("{:016x}", mdp.content_hash())),
        },
    })
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        let ds = Self { episodes, meta: DatasetMeta::default() };
        ds.validate_shape()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.steps.len())
    }

    /// Records of step `h` across episodes, in episode order.
    pub fn step_records(&self, h: usize) -> impl Iterator<Item = &Step> + '_ {
        self.episodes.iter().map(move |e| &e.steps[h])
    }

    fn validate_shape(&self) -> Result<()> {
        let hz = self.horizon();
        if hz == 0 {
            return Err(FpgError::Validation("dataset has no steps".into()));
        }
        for (k, ep) in self.episodes.iter().enumerate() {
            if ep.steps.len() != hz {
                return Err(FpgError::Validation(format!(
                    "episode {k} has {} steps, expected {hz}",
                    ep.steps.len()
                )));
            }
            for (h, w) in ep.steps.windows(2).enumerate() {
                if w[0].s_next != w[1].s {
                    return Err(FpgError::Validation(format!(
                        "episode {k}: next state of step {} does not match state of step {}",
                        h + 1,
                        h + 2
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full validation against declared dimensions.
    pub fn validate(&self, n_states: usize, n_actions: usize, bounded_rewards: bool) -> Result<()> {
        self.validate_shape()?;
        for (k, ep) in self.episodes.iter().enumerate() {
            for (h, st) in ep.steps.iter().enumerate() {
                if st.s >= n_states || st.s_next >= n_states || st.a >= n_actions {
                    return Err(FpgError::Validation(format!("episode {k} step {}: index out of range", h + 1)));
                }
                if bounded_rewards && !(0.0..=1.0).contains(&st.r) {
                    return Err(FpgError::Validation(format!("episode {k} step {}: reward {} outside [0, 1]", h + 1, st.r)));
                }
                if !st.r.is_finite() {
                    return Err(FpgError::Validation(format!("episode {k} step {}: non-finite reward", h + 1)));
                }
            }
        }
        Ok(())
    }

    /// New dataset made of the given episode indices (with repetition).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            episodes: indices.iter().map(|&i| self.episodes[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Concatenation of several datasets with equal horizon.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut episodes = Vec::new();
        let mut meta = DatasetMeta::default();
        for p in parts {
            if meta.behavior.is_empty() {
                meta = p.meta.clone();
            }
            episodes.extend(p.episodes.iter().cloned());
        }
        if episodes.is_empty() {
            return Err(input("need at least one episode"));
        }
        let ds = Dataset { episodes, meta };
        ds.validate_shape()?;
        Ok(ds)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &MetaLine { meta: self.meta.clone() })?;
        w.write_all(b"\n")?;
        for (k, ep) in self.episodes.iter().enumerate() {
            let line = EpisodeLine {
                k,
                steps: ep.steps.iter().enumerate().map(|(h, st)| (h + 1, st.s, st.a, st.r, st.s_next)).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset> {
        let mut meta = DatasetMeta::default();
        let mut episodes = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 && line.trim_start().starts_with("{\"meta\"") {
                let m: MetaLine = serde_json::from_str(&line).map_err(|e| FpgError::Parse { line: lineno, msg: e.to_string() })?;
                meta = m.meta;
                continue;
            }
            let ep: EpisodeLine =
                serde_json::from_str(&line).map_err(|e| FpgError::Parse { line: lineno, msg: e.to_string() })?;
            let mut steps = Vec::with_capacity(ep.steps.len());
            for (j, (h, s, a, r, s_next)) in ep.steps.into_iter().enumerate() {
                if h != j + 1 {
                    return Err(FpgError::Parse { line: lineno, msg: format!("step {} carries h = {h}", j + 1) });
                }
                steps.push(Step { s, a, r, s_next });
            }
            episodes.push(Episode { steps });
        }
        if episodes.is_empty() {
            return Err(FpgError::Validation("file contains no episodes".into()));
        }
        let ds = Dataset { episodes, meta };
        ds.validate_shape()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Count-based tabular model estimated from a dataset.
#[derive(Clone, Debug)]
pub struct EmpiricalModel {
    /// Unvisited `(h, s, a)` cells get a self-loop and zero reward.
    pub mdp: MdpSpec,
    /// `visited[h][s][a]`, flattened.
    pub visited: Vec<bool>,
    pub counts: Vec<usize>,
}

impl EmpiricalModel {
    pub fn is_visited(&self, h: usize, s: usize, a: usize) -> bool {
        self.visited[(h * self.mdp.n_states() + s) * self.mdp.n_actions() + a]
    }
}

pub fn empirical_model(ds: &Dataset, n_states: usize, n_actions: usize) -> Result<EmpiricalModel> {
    ds.validate(n_states, n_actions, false)?;
    let hz = ds.horizon();
    let sa = n_states * n_actions;
    let mut counts = vec![0usize; hz * sa];
    let mut next = vec![0usize; hz * sa * n_states];
    let mut rsum = vec![0.0; hz * sa];
    let mut init = vec![0usize; n_states];
    for ep in &ds.episodes {
        init[ep.steps[0].s] += 1;
        for (h, st) in ep.steps.iter().enumerate() {
            let c = (h * n_states + st.s) * n_actions + st.a;
            counts[c] += 1;
            rsum[c] += st.r;
            next[c * n_states + st.s_next] += 1;
        }
    }
    let mut p = vec![0.0; hz * sa * n_states];
    let mut r = vec![0.0; hz * sa];
    for c in 0..hz * sa {
        if counts[c] == 0 {
            p[c * n_states + (c % sa) / n_actions] = 1.0;
            continue;
        }
        let n = counts[c] as f64;
        r[c] = (rsum[c] / n).clamp(0.0, 1.0);
        for sp in 0..n_states {
            p[c * n_states + sp] = next[c * n_states + sp] as f64 / n;
        }
        fix_sum(&mut p[c * n_states..(c + 1) * n_states]);
    }
    let mut xi: Vec<f64> = init.iter().map(|&c| c as f64 / ds.len() as f64).collect();
    fix_sum(&mut xi);
    let mdp = MdpSpec::new(n_states, n_actions, hz, p, r, xi)?;
    Ok(EmpiricalModel { mdp, visited: counts.iter().map(|&c| c > 0).collect(), counts })
}

// puts the rounding residue of a count ratio on the largest entry
fn fix_sum(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if let Some((i, _)) = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()) {
        row[i] += 1.0 - sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::occupancy;
    use crate::policy::{DeterministicPolicy, SoftmaxTabularPolicy};
    use proptest::prelude::*;

    fn chain() -> MdpSpec {
        // 2 states, 2 actions, deterministic: action a moves to state a
        let p = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        MdpSpec::homogeneous(2, 2, 3, &p, &[0.0, 0.5, 1.0, 0.25], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn deterministic_mdp_and_policy_give_identical_episodes() {
        let pol = DeterministicPolicy::new(2, vec![1, 0]).unwrap();
        let ds = simulate(&chain(), &pol, 10, 4).unwrap();
        assert!(ds.episodes.iter().all(|e| e == &ds.episodes[0]));
        assert!(simulate(&chain(), &pol, 0, 4).is_err());
    }

    #[test]
    fn simulation_is_reproducible_and_prefix_stable() {
        let pol = SoftmaxTabularPolicy::new(2, 2, vec![0.3, -0.3, 0.0, 1.0]).unwrap();
        let a = simulate(&chain(), &pol, 50, 9).unwrap();
        let b = simulate(&chain(), &pol, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate(&chain(), &pol, 20, 9).unwrap();
        assert_eq!(&a.episodes[..20], &c.episodes[..]);
        let tail = simulate_range(&chain(), &pol, 20..50, 9).unwrap();
        assert_eq!(&a.episodes[20..], &tail.episodes[..]);
    }

    #[test]
    fn visit_frequencies_match_occupancy() {
        let mdp = crate::envs::random_mdp(3, 2, 3, 17).unwrap();
        let pol = SoftmaxTabularPolicy::new(3, 2, vec![0.4, -0.4, 1.0, 0.0, -0.5, 0.2]).unwrap();
        let k = 100_000;
        let ds = simulate(&mdp, &pol, k, 1).unwrap();
        let occ = occupancy(&mdp, &pol).unwrap();
        let mut counts = vec![0usize; occ.mu.len()];
        for ep in &ds.episodes {
            for (h, st) in ep.steps.iter().enumerate() {
                counts[(h * 3 + st.s) * 2 + st.a] += 1;
            }
        }
        for (c, mu) in counts.iter().zip(&occ.mu) {
            let f = *c as f64 / k as f64;
            assert!((f - mu).abs() <= 4.0 * (mu * (1.0 - mu) / k as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn truncated_file_reports_line() {
        let pol = SoftmaxTabularPolicy::uniform(2, 2);
        let ds = simulate(&chain(), &pol, 3, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 10];
        match Dataset::read_jsonl(cut.as_bytes()) {
            Err(FpgError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_fixture_parses() {
        let text = "{\"meta\":{\"seed\":3,\"behavior\":\"hand\"}}\n\
                    {\"k\":0,\"steps\":[[1,0,1,0.5,1],[2,1,0,1.0,0]]}\n";
        let ds = Dataset::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ds.meta.seed, Some(3));
        assert_eq!(ds.meta.behavior, "hand");
        assert_eq!(ds.horizon(), 2);
        assert_eq!(ds.episodes[0].steps[0], Step { s: 0, a: 1, r: 0.5, s_next: 1 });
        assert_eq!(ds.episodes[0].steps[1], Step { s: 1, a: 0, r: 1.0, s_next: 0 });
    }

    #[test]
    fn horizon_mismatch_and_broken_chain_are_validation_errors() {
        let text = "{\"k\":0,\"steps\":[[1,0,1,0.5,1],[2,1,0,1.0,0]]}\n{\"k\":1,\"steps\":[[1,0,1,0.5,1]]}\n";
        assert!(matches!(Dataset::read_jsonl(text.as_bytes()), Err(FpgError::Validation(_))));
        let text = "{\"k\":0,\"steps\":[[1,0,1,0.5,1],[2,0,0,1.0,0]]}\n";
        assert!(matches!(Dataset::read_jsonl(text.as_bytes()), Err(FpgError::Validation(_))));
        let text = "{\"k\":0,\"steps\":[[2,0,1,0.5,1]]}\n";
        assert!(matches!(Dataset::read_jsonl(text.as_bytes()), Err(FpgError::Parse { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(seed in 0u64..1000, k in 1usize..20, rewards in proptest::collection::vec(0.0f64..1.0, 8)) {
            let mdp = MdpSpec::homogeneous(2, 2, 2, &[0.3, 0.7, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9], &rewards[..4], vec![0.5, 0.5]).unwrap();
            let pol = SoftmaxTabularPolicy::uniform(2, 2);
            let ds = simulate(&mdp, &pol, k, seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            ds.save(&path).unwrap();
            let back = Dataset::load(&path).unwrap();
            prop_assert_eq!(&back, &ds);
            for (x, y) in back.episodes.iter().flat_map(|e| &e.steps).zip(ds.episodes.iter().flat_map(|e| &e.steps)) {
                prop_assert_eq!(x.r.to_bits(), y.r.to_bits());
            }
        }
    }

    #[test]
    fn empirical_model_recovers_deterministic_mdp() {
        let p = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let mdp = MdpSpec::homogeneous(2, 2, 3, &p, &[0.0, 0.5, 1.0, 0.25], vec![0.5, 0.5]).unwrap();
        let ds = simulate(&mdp, &SoftmaxTabularPolicy::uniform(2, 2), 200, 3).unwrap();
        let em = empirical_model(&ds, 2, 2).unwrap();
        assert!(em.visited.iter().all(|&v| v));
        for h in 0..3 {
            for s in 0..2 {
                for a in 0..2 {
                    assert_eq!(em.mdp.p(h, s, a), mdp.p(h, s, a));
                    assert_eq!(em.mdp.r(h, s, a), mdp.r(h, s, a));
                }
            }
        }
    }

    #[test]
    fn empirical_model_masks_unvisited_and_matches_tally() {
        let mdp = crate::envs::random_mdp(3, 2, 2, 5).unwrap();
        let pol = DeterministicPolicy::new(2, vec![0, 0, 0]).unwrap();
        let ds = simulate(&mdp, &pol, 300, 2).unwrap();
        let em = empirical_model(&ds, 3, 2).unwrap();
        for h in 0..2 {
            for s in 0..3 {
                assert!(!em.is_visited(h, s, 1));
                assert_eq!(em.mdp.p(h, s, 1)[s], 1.0);
            }
        }
        // naive tally for one cell
        let mut n = 0;
        let mut to = [0usize; 3];
        for ep in &ds.episodes {
            let st = ep.steps[1];
            if st.s == 0 && st.a == 0 {
                n += 1;
                to[st.s_next] += 1;
            }
        }
        assert_eq!(em.counts[(3 + 0) * 2 + 0], n);
        for sp in 0..3 {
            assert!((em.mdp.p(1, 0, 0)[sp] - to[sp] as f64 / n as f64).abs() < 1e-15);
        }
    }
}
