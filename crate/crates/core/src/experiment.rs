//! Experiment orchestration: configuration loading, multi-run multi-method
//! execution, policy evaluation, and plot-ready result emission.
//!
//! Everything here is concrete at `f64`; the numeric layers below stay
//! generic.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{point_estimate_with, upgma_cluster, PointEstimateMethod};
use crate::envs::{make_linear_gaussian, make_repellers, LinearGaussianSpec, RepellerSpec};
use crate::error::{Error, Result};
use crate::eval::{default_eval_horizon, estimate_expected_reward};
use crate::model::{
    draw_noise_sequence, rollout_from_noise, CountingEnv, Environment, PolicyParams, Trajectory,
};
use crate::pegasus::{pegasus_search, PegasusConfig};
use crate::sampler::{run_chain, SampleLog, SamplerConfig};
use crate::statespace::{statespace_chain, StateSpaceConfig};
use crate::target::{Parameterization, RewardVariant, TargetKind, ThetaPrior};

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Evaluation settings for the per-run expected-reward estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub num_rollouts: usize,
    /// Defaults to the horizon with tail weight below 0.1%.
    #[serde(default)]
    pub horizon: Option<usize>,
    pub discount: f64,
    pub seed: u64,
}

/// Method selector tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sampler,
    StateSpace,
    Pegasus,
}

/// One method entry: a tag plus the matching payload section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub kind: MethodKind,
    /// Reward statistic for the chain methods.
    #[serde(default)]
    pub variant: Option<RewardVariant>,
    /// Point-estimate method for the chain methods; defaults to the largest
    /// cluster.
    #[serde(default)]
    pub estimate: Option<PointEstimateMethod>,
    /// Clustering cut; defaults to 10% of the prior-box diagonal.
    #[serde(default)]
    pub merge_threshold: Option<f64>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig<f64>>,
    #[serde(default)]
    pub statespace: Option<StateSpaceConfig<f64>>,
    #[serde(default)]
    pub pegasus: Option<PegasusConfig<f64>>,
    /// Initialization box for the gradient method.
    #[serde(default)]
    pub init_box: Option<ThetaPrior<f64>>,
}

/// Environment selector plus the matching payload section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub kind: EnvironmentKind,
    #[serde(default)]
    pub linear_gaussian: Option<LinearGaussianSpec<f64>>,
    #[serde(default)]
    pub repellers: Option<RepellerSpec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    LinearGaussian,
    Repellers,
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<Box<dyn Environment<f64>>> {
        match self.kind {
            EnvironmentKind::LinearGaussian => {
                let spec = self.linear_gaussian.as_ref().ok_or_else(|| {
                    Error::config("missing [environment.linear_gaussian] section".to_string())
                })?;
                Ok(Box::new(make_linear_gaussian(spec)?))
            }
            EnvironmentKind::Repellers => {
                let spec = self.repellers.as_ref().ok_or_else(|| {
                    Error::config("missing [environment.repellers] section".to_string())
                })?;
                Ok(Box::new(make_repellers(spec)?))
            }
        }
    }
}

/// Top-level experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub runs: usize,
    pub seed: u64,
    pub eval: EvalConfig,
    pub environment: EnvironmentConfig,
    #[serde(rename = "method")]
    pub methods: Vec<MethodConfig>,
}

/// One executed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub run: usize,
    pub seed: u64,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub theta_hat: Option<Vec<f64>>,
    #[serde(default)]
    pub j_mean: Option<f64>,
    #[serde(default)]
    pub j_std_err: Option<f64>,
    #[serde(default)]
    pub samples_consumed: Option<u64>,
}

/// Per-method aggregate over successful runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub runs_ok: usize,
    pub j_mean_mean: f64,
    pub j_mean_std: f64,
}

/// Experiment summary; serialized to `summary.json`. Wall times live in a
/// separate sidecar so the summary stays byte-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<MethodAggregate>,
}

impl EvalReport {
    /// Recomputes the aggregates from the run rows.
    pub fn aggregates_from_runs(runs: &[RunRecord], methods: &[String]) -> Vec<MethodAggregate> {
        methods
            .iter()
            .map(|name| {
                let values: Vec<f64> = runs
                    .iter()
                    .filter(|r| &r.method == name && r.ok)
                    .filter_map(|r| r.j_mean)
                    .collect();
                let n = values.len();
                let mean = if n == 0 {
                    0.0
                } else {
                    values.iter().sum::<f64>() / n as f64
                };
                let std = if n < 2 {
                    0.0
                } else {
                    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (n - 1) as f64)
                        .sqrt()
                };
                MethodAggregate {
                    method: name.clone(),
                    runs_ok: n,
                    j_mean_mean: mean,
                    j_mean_std: std,
                }
            })
            .collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation for independent streams.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ t))
}

/// Reads and parses a TOML experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    Ok(config)
}

fn method_name_ok(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Validates the whole config, including every method against the
/// environment.
pub fn validate_config(config: &ExperimentConfig) -> Result<()> {
    if config.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "schema version {} unsupported (expected {})",
            config.schema_version, SCHEMA_VERSION
        )));
    }
    if config.runs == 0 {
        return Err(Error::config("runs must be at least 1".to_string()));
    }
    if config.methods.is_empty() {
        return Err(Error::EmptyInput("method list"));
    }
    if config.eval.num_rollouts == 0 {
        return Err(Error::config(
            "evaluation needs at least one rollout".to_string(),
        ));
    }
    if !(config.eval.discount > 0.0 && config.eval.discount < 1.0) {
        return Err(Error::config(
            "evaluation discount must lie in (0, 1)".to_string(),
        ));
    }
    let env = config.environment.build()?;
    let mut names = std::collections::HashSet::new();
    for method in &config.methods {
        if !method_name_ok(&method.name) {
            return Err(Error::config(format!(
                "method name {:?} is not filesystem-safe",
                method.name
            )));
        }
        if !names.insert(&method.name) {
            return Err(Error::config(format!(
                "duplicate method name {:?}",
                method.name
            )));
        }
        if let Some(t) = method.merge_threshold {
            if !(t > 0.0) {
                return Err(Error::config("merge threshold must be positive".to_string()));
            }
        }
        match method.kind {
            MethodKind::Sampler => {
                let sampler = method.sampler.as_ref().ok_or_else(|| {
                    Error::config(format!("method {:?} needs a [method.sampler]", method.name))
                })?;
                if method.variant.is_none() {
                    return Err(Error::config(format!(
                        "method {:?} needs a reward variant",
                        method.name
                    )));
                }
                sampler.validate(env.as_ref())?;
                if sampler.plateau_len == 0 {
                    return Err(Error::config(format!(
                        "method {:?} needs a nonempty plateau for the point estimate",
                        method.name
                    )));
                }
            }
            MethodKind::StateSpace => {
                let statespace = method.statespace.as_ref().ok_or_else(|| {
                    Error::config(format!(
                        "method {:?} needs a [method.statespace]",
                        method.name
                    ))
                })?;
                if method.variant.is_none() {
                    return Err(Error::config(format!(
                        "method {:?} needs a reward variant",
                        method.name
                    )));
                }
                statespace.validate(env.as_ref())?;
                if statespace.base.plateau_len == 0 {
                    return Err(Error::config(format!(
                        "method {:?} needs a nonempty plateau for the point estimate",
                        method.name
                    )));
                }
            }
            MethodKind::Pegasus => {
                let pegasus = method.pegasus.as_ref().ok_or_else(|| {
                    Error::config(format!("method {:?} needs a [method.pegasus]", method.name))
                })?;
                pegasus.validate()?;
                let init_box = method.init_box.as_ref().ok_or_else(|| {
                    Error::config(format!("method {:?} needs an init_box", method.name))
                })?;
                init_box.validate()?;
                if init_box.dim() != env.theta_dim() {
                    return Err(Error::dimension(format!(
                        "init box dimension {} vs policy dimension {}",
                        init_box.dim(),
                        env.theta_dim()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-run seeds, as printed by the `seeds` CLI verb: `(method, run, seed)`.
pub fn run_seeds(config: &ExperimentConfig) -> Vec<(String, usize, u64)> {
    let mut out = Vec::new();
    for (m, method) in config.methods.iter().enumerate() {
        for run in 0..config.runs {
            out.push((
                method.name.clone(),
                run,
                derive_seed(config.seed, &[m as u64, run as u64, 0]),
            ));
        }
    }
    out
}

fn write_trajectory_snapshot<W: Write>(mut w: W, trajectories: &[Trajectory<f64>]) -> Result<()> {
    let (state_dim, action_dim) = trajectories
        .first()
        .map(|t| (t.states[0].len(), t.actions[0].len()))
        .unwrap_or((0, 0));
    write!(w, "traj,step")?;
    for d in 0..state_dim {
        write!(w, ",x_{}", d)?;
    }
    for d in 0..action_dim {
        write!(w, ",u_{}", d)?;
    }
    writeln!(w, ",reward")?;
    for (i, traj) in trajectories.iter().enumerate() {
        for n in 0..traj.len() {
            write!(w, "{},{}", i, n)?;
            for v in &traj.states[n] {
                write!(w, ",{}", v)?;
            }
            for v in &traj.actions[n] {
                write!(w, ",{}", v)?;
            }
            writeln!(w, ",{}", traj.rewards[n])?;
        }
    }
    Ok(())
}

struct RunOutput {
    record: RunRecord,
    seconds: f64,
}

fn eval_horizon(config: &ExperimentConfig) -> usize {
    config
        .eval
        .horizon
        .unwrap_or_else(|| default_eval_horizon(config.eval.discount))
}

/// Snapshot rollouts under the estimated policy, for plotting.
fn snapshot_trajectories(
    env: &dyn Environment<f64>,
    theta: &PolicyParams<f64>,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|_| {
            let noise = draw_noise_sequence(env, theta, horizon, &mut rng);
            rollout_from_noise(env, theta, noise)
        })
        .collect()
}

fn chain_point_estimate(
    env: &dyn Environment<f64>,
    config: &ExperimentConfig,
    method: &MethodConfig,
    prior: &ThetaPrior<f64>,
    log: &SampleLog<f64>,
    run_dir: &Path,
    tie_seed: u64,
) -> Result<PolicyParams<f64>> {
    let plateau = log.plateau_thetas();
    let threshold = method
        .merge_threshold
        .unwrap_or_else(|| 0.1 * prior.diagonal());
    let cluster = upgma_cluster(&plateau, threshold)?;
    let file = fs::File::create(run_dir.join("cluster.json"))?;
    serde_json::to_writer_pretty(file, &cluster)?;
    let estimate = method.estimate.unwrap_or(PointEstimateMethod::LargestCluster);
    let horizon = eval_horizon(config);
    let tie_rollouts = config.eval.num_rollouts.min(500).max(1);
    let values = point_estimate_with(&plateau, estimate, threshold, |theta| {
        let params = match PolicyParams::new(theta.to_vec(), env.policy_blocks()) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
        estimate_expected_reward(
            env,
            &params,
            tie_rollouts,
            horizon,
            config.eval.discount,
            &mut rng,
        )
        .map(|(mean, _)| mean)
        .unwrap_or(f64::NEG_INFINITY)
    })?;
    PolicyParams::new(values, env.policy_blocks())
}

fn execute_run(
    config: &ExperimentConfig,
    method_index: usize,
    run: usize,
) -> Result<(RunRecord, PathBuf)> {
    let method = &config.methods[method_index];
    let run_dir = config
        .output_dir
        .join(&method.name)
        .join(format!("run_{}", run));
    fs::create_dir_all(&run_dir)?;
    let env = config.environment.build()?;
    let chain_seed = derive_seed(config.seed, &[method_index as u64, run as u64, 0]);
    let init_seed = derive_seed(config.seed, &[method_index as u64, run as u64, 1]);
    let tie_seed = derive_seed(config.seed, &[method_index as u64, run as u64, 2]);
    let eval_seed = derive_seed(config.eval.seed, &[method_index as u64, run as u64]);
    let snapshot_seed = derive_seed(config.eval.seed, &[method_index as u64, run as u64, 7]);

    let (theta_hat, samples_consumed) = match method.kind {
        MethodKind::Sampler => {
            let mut sampler = method.sampler.clone().expect("validated");
            sampler.seed = chain_seed;
            let kind = TargetKind {
                variant: method.variant.expect("validated"),
                parameterization: Parameterization::NoiseSpace,
            };
            let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
            let theta0 =
                PolicyParams::new(sampler.prior.sample(&mut init_rng), env.policy_blocks())?;
            let counting = CountingEnv::new(env.as_ref());
            let log = run_chain(&counting, &sampler, kind, theta0)?;
            let consumed = counting.transitions();
            let file = fs::File::create(run_dir.join("samples.csv"))?;
            log.write_csv(std::io::BufWriter::new(file))?;
            let theta_hat = chain_point_estimate(
                env.as_ref(),
                config,
                method,
                &sampler.prior,
                &log,
                &run_dir,
                tie_seed,
            )?;
            (theta_hat, consumed)
        }
        MethodKind::StateSpace => {
            let mut statespace = method.statespace.clone().expect("validated");
            statespace.base.seed = chain_seed;
            let kind = TargetKind {
                variant: method.variant.expect("validated"),
                parameterization: Parameterization::StateSpace,
            };
            let counting = CountingEnv::new(env.as_ref());
            let log = statespace_chain(&counting, &statespace, kind)?;
            let consumed = counting.transitions();
            let file = fs::File::create(run_dir.join("samples.csv"))?;
            log.write_csv(std::io::BufWriter::new(file))?;
            let theta_hat = chain_point_estimate(
                env.as_ref(),
                config,
                method,
                &statespace.base.prior,
                &log,
                &run_dir,
                tie_seed,
            )?;
            (theta_hat, consumed)
        }
        MethodKind::Pegasus => {
            let mut pegasus = method.pegasus.clone().expect("validated");
            pegasus.seed = chain_seed;
            let init_box = method.init_box.as_ref().expect("validated");
            let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
            let theta0 =
                PolicyParams::new(init_box.sample(&mut init_rng), env.policy_blocks())?;
            let trace = pegasus_search(env.as_ref(), &pegasus, &theta0)?;
            let file = fs::File::create(run_dir.join("trace.csv"))?;
            trace.write_csv(std::io::BufWriter::new(file))?;
            let consumed = trace.iterates.last().map(|it| it.samples_consumed).unwrap_or(0);
            let theta_hat =
                PolicyParams::new(trace.final_theta().to_vec(), env.policy_blocks())?;
            (theta_hat, consumed)
        }
    };

    let horizon = eval_horizon(config);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let (j_mean, j_std_err) = estimate_expected_reward(
        env.as_ref(),
        &theta_hat,
        config.eval.num_rollouts,
        horizon,
        config.eval.discount,
        &mut eval_rng,
    )?;
    let snaps = snapshot_trajectories(env.as_ref(), &theta_hat, horizon, snapshot_seed)?;
    let file = fs::File::create(run_dir.join("trajectories.csv"))?;
    write_trajectory_snapshot(std::io::BufWriter::new(file), &snaps)?;

    Ok((
        RunRecord {
            method: method.name.clone(),
            run,
            seed: chain_seed,
            ok: true,
            error: None,
            theta_hat: Some(theta_hat.values().to_vec()),
            j_mean: Some(j_mean),
            j_std_err: Some(j_std_err),
            samples_consumed: Some(samples_consumed),
        },
        run_dir,
    ))
}

/// Executes every method x run cell, writes per-run artifacts plus
/// `summary.json` and a `timings.json` sidecar, and returns the report.
/// Failing runs are recorded and do not stop the experiment.
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<EvalReport> {
    validate_config(config)?;
    fs::create_dir_all(&config.output_dir)?;
    let cells: Vec<(usize, usize)> = (0..config.methods.len())
        .flat_map(|m| (0..config.runs).map(move |r| (m, r)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {}", e)))?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(m, r)| {
                let start = Instant::now();
                let record = match execute_run(config, m, r) {
                    Ok((record, _)) => record,
                    Err(e) => RunRecord {
                        method: config.methods[m].name.clone(),
                        run: r,
                        seed: derive_seed(config.seed, &[m as u64, r as u64, 0]),
                        ok: false,
                        error: Some(e.to_string()),
                        theta_hat: None,
                        j_mean: None,
                        j_std_err: None,
                        samples_consumed: None,
                    },
                };
                RunOutput {
                    record,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    });

    let runs: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let names: Vec<String> = config.methods.iter().map(|m| m.name.clone()).collect();
    let aggregates = EvalReport::aggregates_from_runs(&runs, &names);
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        runs,
        aggregates,
    };
    let file = fs::File::create(config.output_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(file, &report)?;

    #[derive(Serialize)]
    struct Timing<'a> {
        method: &'a str,
        run: usize,
        seconds: f64,
    }
    let timings: Vec<Timing> = outputs
        .iter()
        .map(|o| Timing {
            method: &o.record.method,
            run: o.record.run,
            seconds: o.seconds,
        })
        .collect();
    let file = fs::File::create(config.output_dir.join("timings.json"))?;
    serde_json::to_writer_pretty(file, &timings)?;

    Ok(report)
}

/// Evaluates an explicit parameter vector under the config's environment and
/// evaluation settings (the `eval` CLI verb).
pub fn evaluate_theta(config: &ExperimentConfig, theta: &[f64]) -> Result<(f64, f64)> {
    let env = config.environment.build()?;
    let params = PolicyParams::new(theta.to_vec(), env.policy_blocks())?;
    let horizon = eval_horizon(config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.eval.seed, &[u64::MAX]));
    estimate_expected_reward(
        env.as_ref(),
        &params,
        config.eval.num_rollouts,
        horizon,
        config.eval.discount,
        &mut rng,
    )
}
