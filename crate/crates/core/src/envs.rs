//! Built-in environments and target-policy construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::mdp::{optimal_q, MdpSpec};
use crate::policy::SoftmaxTabularPolicy;

pub const LEFT: usize = 0;
pub const DOWN: usize = 1;
pub const RIGHT: usize = 2;
pub const UP: usize = 3;

/// Rectangular gridworld with four moves, an absorbing goal that pays 1 on
/// every step spent in it, absorbing holes that pay nothing, and cliff cells
/// that send the agent back to the start.
///
/// Motion noise comes in two flavors: `slip` moves to each lateral
/// direction with that probability, `random_action` replaces the action by
/// a uniformly drawn one.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    pub rows: usize,
    pub cols: usize,
    pub horizon: usize,
    pub start: usize,
    pub goal: usize,
    pub holes: Vec<usize>,
    pub cliff: Vec<usize>,
    pub slip: f64,
    pub random_action: f64,
}

impl GridWorld {
    /// Noise-free grid, start top-left, goal bottom-right.
    pub fn deterministic(rows: usize, cols: usize, horizon: usize) -> Self {
        Self {
            rows,
            cols,
            horizon,
            start: 0,
            goal: rows * cols - 1,
            holes: Vec::new(),
            cliff: Vec::new(),
            slip: 0.0,
            random_action: 0.0,
        }
    }

    /// 4x4 lake `SFFF / FHFH / FFFH / HFFG` with slip 1/3 to each side.
    pub fn frozenlake_like(horizon: usize) -> Self {
        Self {
            holes: vec![5, 7, 11, 12],
            slip: 1.0 / 3.0,
            ..Self::deterministic(4, 4, horizon)
        }
    }

    /// 4x12 cliff along the bottom row between start and goal, random
    /// action with probability 0.1.
    pub fn cliffwalk_like(horizon: usize) -> Self {
        Self {
            rows: 4,
            cols: 12,
            horizon,
            start: 36,
            goal: 47,
            holes: Vec::new(),
            cliff: (37..47).collect(),
            slip: 0.0,
            random_action: 0.1,
        }
    }

    pub fn n_states(&self) -> usize {
        self.rows * self.cols
    }

    fn step(&self, s: usize, dir: usize) -> usize {
        let (r, c) = (s / self.cols, s % self.cols);
        let (r, c) = match dir {
            LEFT => (r, c.saturating_sub(1)),
            DOWN => ((r + 1).min(self.rows - 1), c),
            RIGHT => (r, (c + 1).min(self.cols - 1)),
            _ => (r.saturating_sub(1), c),
        };
        let next = r * self.cols + c;
        if self.cliff.contains(&next) {
            self.start
        } else {
            next
        }
    }

    pub fn build(&self) -> Result<MdpSpec> {
        if self.rows == 0 || self.cols == 0 || self.horizon == 0 {
            return Err(config("grid needs positive dimensions and horizon"));
        }
        if !(0.0..=0.5).contains(&self.slip) || !(0.0..=1.0).contains(&self.random_action) {
            return Err(config("slip must lie in [0, 1/2] and random_action in [0, 1]"));
        }
        let ns = self.n_states();
        if self.start >= ns || self.goal >= ns || self.holes.iter().chain(&self.cliff).any(|&c| c >= ns) {
            return Err(config("grid cell index out of range"));
        }
        let mut p = vec![0.0; ns * 4 * ns];
        let mut r = vec![0.0; ns * 4];
        for s in 0..ns {
            for a in 0..4 {
                let row = &mut p[(s * 4 + a) * ns..(s * 4 + a + 1) * ns];
                if s == self.goal || self.holes.contains(&s) {
                    row[s] = 1.0;
                    r[s * 4 + a] = if s == self.goal { 1.0 } else { 0.0 };
                    continue;
                }
                // distribution over the executed direction
                let mut dir = [0.0; 4];
                dir[a] += 1.0 - 2.0 * self.slip;
                dir[(a + 1) % 4] += self.slip;
                dir[(a + 3) % 4] += self.slip;
                for (d, w) in dir.iter().enumerate() {
                    let w = w * (1.0 - self.random_action) + self.random_action / 4.0;
                    if w > 0.0 {
                        row[self.step(s, d)] += w;
                    }
                }
            }
        }
        let mut xi = vec![0.0; ns];
        xi[self.start] = 1.0;
        MdpSpec::homogeneous(ns, 4, self.horizon, &p, &r, xi)
    }
}

/// Random time-inhomogeneous MDP: transition rows and `xi` are normalized
/// exponential draws (a flat Dirichlet), rewards uniform on `[0, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, horizon: usize, seed: u64) -> Result<MdpSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let simplex = |n: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3).collect();
        let sum: f64 = v.iter().sum();
        let mut v: Vec<f64> = v.iter().map(|x| x / sum).collect();
        // push the rounding residue onto the largest entry
        let resid = 1.0 - v.iter().sum::<f64>();
        let imax = (0..n).max_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap()).unwrap();
        v[imax] += resid;
        v
    };
    let mut p = Vec::with_capacity(horizon * n_states * n_actions * n_states);
    for _ in 0..horizon * n_states * n_actions {
        p.extend(simplex(n_states, &mut rng));
    }
    let r = (0..horizon * n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
    let xi = simplex(n_states, &mut rng);
    MdpSpec::new(n_states, n_actions, horizon, p, r, xi)
}

/// Near-optimal target: softmax over `beta * Q*_1 / max|Q*_1|`. The scaling
/// makes `beta` comparable across environments with different reward scales.
pub fn target_policy(mdp: &MdpSpec, beta: f64) -> Result<SoftmaxTabularPolicy> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let q = optimal_q(mdp);
    let q1 = &q[..ns * na];
    let scale = q1.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let theta = if scale > 0.0 { q1.iter().map(|x| beta * x / scale).collect() } else { vec![0.0; ns * na] };
    SoftmaxTabularPolicy::new(ns, na, theta)
}

/// Environment selection as read from the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    FrozenlakeLike { horizon: usize },
    CliffwalkLike { horizon: usize },
    Gridworld { rows: usize, cols: usize, horizon: usize },
    RandomMdp { n_states: usize, n_actions: usize, horizon: usize, seed: u64 },
    File { path: String },
}

impl EnvConfig {
    /// Parses `frozenlake`, `cliffwalk`, `grid:RxC`, `random:SxA` (the
    /// horizon and seed are supplied separately).
    pub fn parse(name: &str, horizon: Option<usize>, seed: u64) -> Result<Self> {
        let h = |default: usize| horizon.unwrap_or(default);
        let dims = |spec: &str| -> Result<(usize, usize)> {
            let (a, b) = spec
                .split_once('x')
                .ok_or_else(|| config(format!("expected AxB dimensions, got '{spec}'")))?;
            let parse = |t: &str| t.parse::<usize>().map_err(|_| config(format!("bad dimension '{t}' in '{name}'")));
            Ok((parse(a)?, parse(b)?))
        };
        match name.split_once(':') {
            None => match name {
                "frozenlake" | "frozenlake_like" => Ok(Self::FrozenlakeLike { horizon: h(20) }),
                "cliffwalk" | "cliffwalk_like" => Ok(Self::CliffwalkLike { horizon: h(20) }),
                "grid" | "gridworld" => Ok(Self::Gridworld { rows: 4, cols: 4, horizon: h(10) }),
                _ => Err(config(format!("unknown environment '{name}'"))),
            },
            Some(("grid", d)) => {
                let (rows, cols) = dims(d)?;
                Ok(Self::Gridworld { rows, cols, horizon: h(10) })
            }
            Some(("random", d)) => {
                let (n_states, n_actions) = dims(d)?;
                Ok(Self::RandomMdp { n_states, n_actions, horizon: h(5), seed })
            }
            _ => Err(config(format!("unknown environment '{name}'"))),
        }
    }

    pub fn build(&self) -> Result<MdpSpec> {
        match self {
            Self::FrozenlakeLike { horizon } => GridWorld::frozenlake_like(*horizon).build(),
            Self::CliffwalkLike { horizon } => GridWorld::cliffwalk_like(*horizon).build(),
            Self::Gridworld { rows, cols, horizon } => GridWorld::deterministic(*rows, *cols, *horizon).build(),
            Self::RandomMdp { n_states, n_actions, horizon, seed } => random_mdp(*n_states, *n_actions, *horizon, *seed),
            Self::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| config(format!("{path}: {e}")))?;
                MdpSpec::from_json(&text).map_err(|e| config(format!("{path}: {e}")))
            }
        }
    }
}
