use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fpg_core::dataset::{simulate, Dataset};
use fpg_core::envs::{target_policy, EnvConfig};
use fpg_core::error::FpgError;
use fpg_core::estimator::{estimate, EstimatorConfig};
use fpg_core::features::FeatureMap;
use fpg_core::fpg::{Method, DEFAULT_LAMBDA};
use fpg_core::inference::{bootstrap, bound_report, oracle_covariance, plug_in_covariance, BoundReport};
use fpg_core::mdp::{exact_policy_gradient, optimal_value, MdpSpec};
use fpg_core::metrics::{metric_cos_and_rel, save_rows, sweep_k, sweep_shift, write_rows, SweepSpec, DEFAULT_EPSILONS};
use fpg_core::optimize::{ascend, offline_ascend, Ascent, AscentConfig, OfflineConfig, OptimizationTrace};
use fpg_core::policy::{ActionPolicy, EpsilonGreedy, Policy, SoftmaxTabularPolicy, ThetaDocument};
use fpg_core::Result;

#[derive(Parser)]
#[command(name = "fpg", version, about = "Off-policy policy gradient estimation with fitted PG iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the gradient of the target policy from one dataset.
    Estimate(EstimateArgs),
    /// Accuracy against the exact gradient as the dataset grows.
    SweepK(SweepKArgs),
    /// Accuracy as the behavior policy moves away from the target.
    SweepShift(SweepShiftArgs),
    /// Episode bootstrap of an estimator; one CSV row per replicate.
    Bootstrap(BootstrapArgs),
    /// Policy optimization with REINFORCE, windowed FPG, or offline FPG.
    Optimize(OptimizeArgs),
    /// Write a simulated dataset as JSONL.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct EnvArgs {
    /// frozenlake, cliffwalk, grid, grid:RxC or random:SxA.
    #[arg(long, default_value = "frozenlake")]
    env: String,
    /// MDP JSON document; overrides --env.
    #[arg(long)]
    env_file: Option<PathBuf>,
    /// Episode length (defaults depend on the environment).
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target policy parameters as {"shape": [S, A], "theta": [..]}.
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Inverse temperature of the default target, softmax(beta Q* / max|Q*|).
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Episodes as JSONL; simulated under the epsilon-greedy target when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Mixing weight of the uniform policy in the behavior.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Use the discounted time-homogeneous estimator with this discount.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "fpg", value_parser = parse_method)]
    method: Method,
    /// Also report the plug-in error covariance.
    #[arg(long)]
    covariance: bool,
    /// Substitute exact quantities in the covariance.
    #[arg(long, requires = "covariance")]
    oracle: bool,
    /// Also report the bound constants (needs full behavior coverage).
    #[arg(long)]
    bounds: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepKArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated dataset sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100, 200, 400, 800, 1600, 3200])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Fpg, Method::Is], value_parser = parse_method)]
    method: Vec<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepShiftArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EPSILONS.to_vec())]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Fpg, Method::Is], value_parser = parse_method)]
    method: Vec<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "fpg", value_parser = parse_method)]
    method: Method,
    /// Number of bootstrap replicates.
    #[arg(long, short = 'B', default_value_t = 100)]
    replicates: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptMethod {
    Reinforce,
    Fpg,
    Offline,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, value_enum, default_value = "fpg")]
    method: OptMethod,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Replay window in iterations for online FPG.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Episodes per iteration (online) or dataset size (offline).
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Offline behavior: epsilon-greedy around the target.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Offline dataset; simulated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Start from the uniform policy instead of the target.
    #[arg(long)]
    from_uniform: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

struct Setup {
    mdp: MdpSpec,
    target: SoftmaxTabularPolicy,
}

fn setup(env: &EnvArgs) -> Result<Setup> {
    let cfg = match &env.env_file {
        Some(p) => EnvConfig::File { path: p.display().to_string() },
        None => EnvConfig::parse(&env.env, env.horizon, env.seed)?,
    };
    let mdp = cfg.build()?;
    let target = match &env.theta {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| FpgError::Config(format!("{}: {e}", p.display())))?;
            ThetaDocument::from_json(&text)
                .map_err(|e| FpgError::Config(format!("{}: {e}", p.display())))?
                .into_softmax_tabular()?
        }
        None => target_policy(&mdp, env.beta)?,
    };
    if target.n_states() != mdp.n_states() || target.n_actions() != mdp.n_actions() {
        return Err(FpgError::Config("target policy does not match the environment".into()));
    }
    Ok(Setup { mdp, target })
}

fn load_or_simulate(s: &Setup, data: &DataArgs, seed: u64) -> Result<(Dataset, EpsilonGreedy<SoftmaxTabularPolicy>)> {
    let beh = EpsilonGreedy::new(s.target.clone(), data.epsilon)?;
    let ds = match &data.data {
        Some(p) => load_dataset(p)?,
        None => simulate(&s.mdp, &beh, data.episodes, seed)?,
    };
    ds.validate(s.mdp.n_states(), s.mdp.n_actions(), false)?;
    Ok((ds, beh))
}

fn load_dataset(p: &Path) -> Result<Dataset> {
    Dataset::load(p).map_err(|e| match e {
        FpgError::Io(io) => FpgError::Config(format!("{}: {io}", p.display())),
        FpgError::Parse { line, msg } => FpgError::Config(format!("{}:{line}: {msg}", p.display())),
        other => other,
    })
}

fn estimator_config(s: &Setup, fit: &FitArgs, method: Method) -> EstimatorConfig {
    EstimatorConfig {
        method,
        lambda: fit.lambda,
        phi: FeatureMap::one_hot(s.mdp.n_states(), s.mdp.n_actions()),
        xi: s.mdp.initial_dist().to_vec(),
        gamma: fit.gamma,
    }
}

fn emit(out: &Option<PathBuf>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            write(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateReport {
    gradient: Vec<f64>,
    method: Method,
    #[serde(rename = "K")]
    k: usize,
    horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    wall_time: f64,
    exact: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cos_angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bounds: Option<BoundReport>,
    warnings: Vec<String>,
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let s = setup(&a.env)?;
    let (ds, beh) = load_or_simulate(&s, &a.data, a.env.seed)?;
    let cfg = estimator_config(&s, &a.fit, a.method);
    let est = estimate(&ds, &s.target, Some(&beh), &cfg)?;
    let exact = if a.fit.gamma.is_some() {
        Vec::new()
    } else {
        exact_policy_gradient(&s.mdp, &s.target)?
    };
    let metrics = if exact.is_empty() { None } else { metric_cos_and_rel(&est.grad, &exact).ok() };
    let covariance = if a.covariance {
        let cov = if a.oracle {
            oracle_covariance(&ds, &s.mdp, &beh, &s.target, &cfg.phi)?
        } else {
            plug_in_covariance(&ds, &s.target, &cfg.phi, cfg.lambda, &cfg.xi)?
        };
        let l = cov.lambda_hat;
        Some((0..l.nrows()).map(|i| l.row(i).iter().copied().collect()).collect())
    } else {
        None
    };
    let bounds = if a.bounds { Some(bound_report(&s.mdp, &beh, &s.target, &cfg.phi)?) } else { None };
    let report = EstimateReport {
        gradient: est.grad,
        method: est.method,
        k: est.k,
        horizon: ds.horizon(),
        lambda: est.lambda,
        gamma: a.fit.gamma,
        seed: est.seed,
        wall_time: est.wall_time,
        exact,
        cos_angle: metrics.map(|m| m.0),
        rel_err: metrics.map(|m| m.1),
        covariance,
        bounds,
        warnings: est.warnings,
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(&a.out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })
}

fn sweep_spec(s: Setup, fit: &FitArgs) -> SweepSpec {
    let mut spec = SweepSpec::new(s.mdp, s.target);
    spec.lambda = fit.lambda;
    spec.gamma = fit.gamma;
    spec
}

fn seed_list(start: u64, n: u64) -> Vec<u64> {
    (start..start + n).collect()
}

fn cmd_sweep_k(a: SweepKArgs) -> Result<()> {
    let seeds = seed_list(a.env.seed, a.seeds);
    let spec = sweep_spec(setup(&a.env)?, &a.fit);
    let rows = sweep_k(&spec, a.epsilon, &a.ks, &seeds, &a.method)?;
    match &a.out {
        Some(p) => save_rows(&rows, p),
        None => write_rows(&rows, std::io::stdout().lock()),
    }
}

fn cmd_sweep_shift(a: SweepShiftArgs) -> Result<()> {
    let seeds = seed_list(a.env.seed, a.seeds);
    let spec = sweep_spec(setup(&a.env)?, &a.fit);
    let rows = sweep_shift(&spec, &a.epsilon, a.episodes, &seeds, &a.method)?;
    match &a.out {
        Some(p) => save_rows(&rows, p),
        None => write_rows(&rows, std::io::stdout().lock()),
    }
}

fn cmd_bootstrap(a: BootstrapArgs) -> Result<()> {
    let s = setup(&a.env)?;
    let (ds, beh) = load_or_simulate(&s, &a.data, a.env.seed)?;
    let cfg = estimator_config(&s, &a.fit, a.method);
    let reps = bootstrap(&ds, &s.target, Some(&beh), &cfg, a.replicates, a.env.seed)?;
    let m = s.target.n_params();
    emit(&a.out, |w| {
        writeln!(w, "# schema: fpg-bootstrap v1")?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record((1..=m).map(|j| format!("g{j}")))?;
        for r in &reps {
            out.write_record(r.grad.iter().map(|g| g.to_string()))?;
        }
        out.flush()?;
        Ok(())
    })
}

fn cmd_optimize(a: OptimizeArgs) -> Result<()> {
    let s = setup(&a.env)?;
    let init = if a.from_uniform {
        SoftmaxTabularPolicy::uniform(s.mdp.n_states(), s.mdp.n_actions())
    } else {
        s.target.clone()
    };
    let trace: OptimizationTrace = match a.method {
        OptMethod::Offline => {
            let ds = match &a.data {
                Some(p) => load_dataset(p)?,
                None => simulate(&s.mdp, &EpsilonGreedy::new(s.target.clone(), a.epsilon)?, a.episodes, a.env.seed)?,
            };
            let cfg = OfflineConfig {
                step: a.step,
                iters: a.iters,
                lambda: a.lambda,
                phi: FeatureMap::one_hot(s.mdp.n_states(), s.mdp.n_actions()),
                xi: s.mdp.initial_dist().to_vec(),
            };
            offline_ascend(&ds, &s.mdp, &init, &cfg)?.0
        }
        OptMethod::Reinforce | OptMethod::Fpg => {
            let est = if matches!(a.method, OptMethod::Fpg) { Ascent::Fpg } else { Ascent::Reinforce };
            let mut cfg = AscentConfig::new(est, a.iters, a.episodes, a.env.seed);
            cfg.step = a.step;
            cfg.window = a.window;
            cfg.lambda = a.lambda;
            ascend(&s.mdp, &init, &cfg)?.0
        }
    };
    if let Some(msg) = &trace.stopped {
        eprintln!("warning: {msg}");
    }
    eprintln!("final value {:.6} (optimal {:.6})", trace.final_value, optimal_value(&s.mdp));
    emit(&a.out, |w| trace.write_csv(w))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let s = setup(&a.env)?;
    let beh = EpsilonGreedy::new(s.target.clone(), a.epsilon)?;
    simulate(&s.mdp, &beh, a.episodes, a.env.seed)?.save(&a.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::SweepK(a) => cmd_sweep_k(a),
        Command::SweepShift(a) => cmd_sweep_shift(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
