//! Command-line entry point: simulate, train, construct-data,
//! audit-contamination, report, replay.
//!
//! Flag resolution order is explicit flag, then config-file key (same name
//! as the long flag), then the built-in default. Every run writes a
//! `manifest.json` next to its outputs recording the resolved config, root
//! seed, and output hashes; `replay` re-derives any run from its manifest
//! and verifies the bytes. Exit codes: 0 ok, 1 runtime failure, 2
//! usage/input error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contamination::{audit_lexical, cosine_screen, CosineRow, LexicalRow, PoolIndex};
use crate::datagen::{construct_dataset, ConstructionParams, MixtureProposer};
use crate::env::{run_episode, SimEnv, SimEnvConfig};
use crate::logio;
use crate::manifest::{hash_file, RunManifest, MANIFEST_FILE};
use crate::metrics::{
    self, AgreementPair, HumanChoice, LatencyCost,
};
use crate::policy::{
    preference_reference, DuelOutcome, FixedWorkflow, HeuristicNavigator, HeuristicThresholds,
    Navigator, PolicyParams, SoftmaxNavigator,
};
use crate::reward::{RewardVariant, RewardWeights};
use crate::rng::SeedTree;
use crate::trainer::{self, PolicyInit, TrainConfig};
use crate::trajectory::Trajectory;

#[derive(Debug)]
enum CliError {
    /// Bad flags, bad config values: exit 2.
    Usage(String),
    /// Missing or malformed input files: exit 2.
    Input(String),
    /// Failures during execution: exit 1.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<crate::logio::LogError> for CliError {
    fn from(e: crate::logio::LogError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<crate::manifest::ManifestError> for CliError {
    fn from(e: crate::manifest::ManifestError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<crate::trainer::TrainError> for CliError {
    fn from(e: crate::trainer::TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::env::EnvironmentError> for CliError {
    fn from(e: crate::env::EnvironmentError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::env::EpisodeError> for CliError {
    fn from(e: crate::env::EpisodeError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::datagen::DatagenError> for CliError {
    fn from(e: crate::datagen::DatagenError) -> Self {
        match e {
            crate::datagen::DatagenError::InvalidParams(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::contamination::ContaminationError> for CliError {
    fn from(e: crate::contamination::ContaminationError) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "navigator",
    version,
    about = "Multi-turn generate/review agent testbed: simulation, training, data construction, auditing"
)]
struct Cli {
    /// Config file (key = value lines) merged under explicit flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel episodes (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a policy against the simulated environment
    Simulate(SimulateArgs),
    /// Optimize the softmax navigator with group-relative updates
    Train(TrainArgs),
    /// Branch-and-select exploration, filtering, conversational export
    ConstructData(ConstructDataArgs),
    /// N-gram and cosine overlap audit between corpora
    AuditContamination(AuditArgs),
    /// Metrics report over a trajectory log
    Report(ReportArgs),
    /// Re-derive a previous run from its manifest and verify the bytes
    Replay(ReplayArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// heuristic | zeros | softmax | preference | refine-only | regenerate-only | one-shot
    #[arg(long)]
    policy: Option<String>,
    /// Policy weights file (required for --policy softmax)
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    tmax: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Preference-reference tie margin on the raw score scale
    #[arg(long)]
    tie_margin: Option<f64>,
    /// Heuristic stop threshold (raw scale)
    #[arg(long)]
    stop_threshold: Option<f64>,
    /// Heuristic refine threshold (raw scale)
    #[arg(long)]
    refine_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    reward_variant: Option<RewardVariant>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Rollout group size
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tmax: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_epsilon: Option<f64>,
    #[arg(long)]
    prompts_per_step: Option<usize>,
    /// zeros | heuristic-fit
    #[arg(long)]
    init: Option<PolicyInit>,
    /// Training prompt pool size
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConstructDataArgs {
    /// Branch factor
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tmax: Option<usize>,
    /// Stop threshold on the raw score scale
    #[arg(long)]
    rho_thr: Option<f64>,
    /// Filter: minimum best score a kept trajectory must exceed
    #[arg(long)]
    min_best: Option<f64>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that a proposed branch refines instead of regenerating
    #[arg(long)]
    refine_prob: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Benchmark corpus, one prompt per line
    #[arg(long)]
    bench: PathBuf,
    /// Training pool corpus, one prompt per line
    #[arg(long)]
    pool: PathBuf,
    /// Benchmark embedding vectors, one comma-separated row per prompt
    #[arg(long)]
    vectors_bench: Option<PathBuf>,
    /// Pool embedding vectors, row-aligned with the pool corpus
    #[arg(long)]
    vectors_pool: Option<PathBuf>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Trajectory log (JSONL)
    #[arg(long)]
    logs: PathBuf,
    /// Optional pairwise preference file: rho_a,rho_b,choice per line
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    cost_gen: Option<f64>,
    #[arg(long)]
    cost_review: Option<f64>,
    #[arg(long)]
    cost_decision: Option<f64>,
    /// Threshold for the correct-stop diagnostic (raw scale)
    #[arg(long)]
    stop_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest of the run to reproduce
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the replayed outputs (default: <manifest dir>/replay)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by `main`; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };

    let run = || match run_command(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    };

    match cli.workers {
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers.max(1))
                .build();
            match pool {
                Ok(pool) => pool.install(run),
                Err(e) => {
                    eprintln!("error: cannot build worker pool: {e}");
                    1
                }
            }
        }
        None => run(),
    }
}

fn run_command(cli: &Cli) -> Result<(), CliError> {
    let file_config = load_config_map(cli.config.as_deref())?;
    let resolver = Resolver { map: file_config };
    match &cli.command {
        Command::Simulate(args) => {
            let spec = resolve_simulate(args, &resolver)?;
            execute_into(&args.out, "simulate", spec.seed, &spec, &[], |out| {
                execute_simulate(&spec, out)
            })
        }
        Command::Train(args) => {
            let spec = resolve_train(args, &resolver)?;
            execute_into(&args.out, "train", spec.train.seed, &spec, &[], |out| {
                execute_train(&spec, out)
            })
        }
        Command::ConstructData(args) => {
            let spec = resolve_construct(args, &resolver)?;
            execute_into(&args.out, "construct-data", spec.seed, &spec, &[], |out| {
                execute_construct(&spec, out)
            })
        }
        Command::AuditContamination(args) => {
            let spec = resolve_audit(args, &resolver)?;
            let inputs = spec.input_paths();
            execute_into(&args.report, "audit-contamination", 0, &spec, &inputs, |out| {
                execute_audit(&spec, out)
            })
        }
        Command::Report(args) => {
            let spec = resolve_report(args, &resolver)?;
            let inputs = spec.input_paths();
            execute_into(&args.out, "report", 0, &spec, &inputs, |out| {
                execute_report(&spec, out)
            })
        }
        Command::Replay(args) => run_replay(args),
    }
}

// ---------------------------------------------------------------------------
// config file and flag resolution
// ---------------------------------------------------------------------------

fn load_config_map(path: Option<&Path>) -> Result<BTreeMap<String, String>, CliError> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                idx + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    map: BTreeMap<String, String>,
}

impl Resolver {
    /// Explicit flag > config-file key > default.
    fn get<V: FromStr>(&self, flag: Option<V>, key: &str, default: V) -> Result<V, CliError>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| CliError::Usage(format!("config key '{key}': {e}"))),
            None => Ok(default),
        }
    }

    fn env_config(&self) -> Result<SimEnvConfig, CliError> {
        let mut env = SimEnvConfig::default();
        macro_rules! field {
            ($name:literal, $field:ident) => {
                env.$field = self.get(None, $name, env.$field)?;
            };
        }
        field!("env.base-quality-intercept", base_quality_intercept);
        field!("env.base-quality-slope", base_quality_slope);
        field!("env.regen-std", regen_std);
        field!("env.refine-gain-at-zero", refine_gain_at_zero);
        field!("env.refine-mid-quality", refine_mid_quality);
        field!("env.refine-gain-peak", refine_gain_peak);
        field!("env.refine-knee", refine_knee);
        field!("env.refine-gain-at-one", refine_gain_at_one);
        field!("env.refine-std", refine_std);
        field!("env.reviewer-noise-std", reviewer_noise_std);
        field!("env.seed", seed);
        env.validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(env)
    }
}

// ---------------------------------------------------------------------------
// resolved run specs (stored in manifests, self-contained for replay)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub policy: String,
    pub params_text: Option<String>,
    pub n_prompts: usize,
    pub t_max: usize,
    pub seed: u64,
    pub tie_margin: f64,
    pub stop_threshold: f64,
    pub refine_threshold: f64,
    pub env: SimEnvConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub train: TrainConfig,
    pub n_prompts: usize,
    pub env: SimEnvConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenSpec {
    pub k: usize,
    pub t_max: usize,
    pub rho_thr: f64,
    pub min_best: f64,
    pub n_prompts: usize,
    pub seed: u64,
    pub refine_prob: f64,
    pub env: SimEnvConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditSpec {
    pub bench: String,
    pub pool: String,
    pub vectors_bench: Option<String>,
    pub vectors_pool: Option<String>,
    pub cosine_threshold: f64,
}

impl AuditSpec {
    fn input_paths(&self) -> Vec<PathBuf> {
        let mut paths = vec![PathBuf::from(&self.bench), PathBuf::from(&self.pool)];
        if let Some(p) = &self.vectors_bench {
            paths.push(PathBuf::from(p));
        }
        if let Some(p) = &self.vectors_pool {
            paths.push(PathBuf::from(p));
        }
        paths
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSpec {
    pub logs: String,
    pub pairs: Option<String>,
    pub costs: LatencyCost,
    pub stop_threshold: f64,
}

impl ReportSpec {
    fn input_paths(&self) -> Vec<PathBuf> {
        let mut paths = vec![PathBuf::from(&self.logs)];
        if let Some(p) = &self.pairs {
            paths.push(PathBuf::from(p));
        }
        paths
    }
}

const POLICIES: [&str; 7] = [
    "heuristic",
    "zeros",
    "softmax",
    "preference",
    "refine-only",
    "regenerate-only",
    "one-shot",
];

fn resolve_simulate(args: &SimulateArgs, r: &Resolver) -> Result<SimulateSpec, CliError> {
    let policy = r.get(args.policy.clone(), "policy", "heuristic".to_string())?;
    if !POLICIES.contains(&policy.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown policy '{policy}' (expected one of {})",
            POLICIES.join(", ")
        )));
    }
    let params_text = match (&args.params, policy.as_str()) {
        (Some(path), _) => Some(std::fs::read_to_string(path).map_err(|e| {
            CliError::Input(format!("cannot read params {}: {e}", path.display()))
        })?),
        (None, "softmax") => {
            return Err(CliError::Usage(
                "--policy softmax requires --params FILE".into(),
            ))
        }
        _ => None,
    };
    if let Some(text) = &params_text {
        PolicyParams::from_text(text).map_err(|e| CliError::Input(e.to_string()))?;
    }
    Ok(SimulateSpec {
        policy,
        params_text,
        n_prompts: r.get(args.n_prompts, "n-prompts", 100)?,
        t_max: r.get(args.tmax, "tmax", 3)?,
        seed: r.get(args.seed, "seed", 0)?,
        tie_margin: r.get(args.tie_margin, "tie-margin", 0.0)?,
        stop_threshold: r.get(args.stop_threshold, "stop-threshold", 4.5)?,
        refine_threshold: r.get(args.refine_threshold, "refine-threshold", 3.0)?,
        env: r.env_config()?,
    })
}

fn resolve_train(args: &TrainArgs, r: &Resolver) -> Result<TrainSpec, CliError> {
    let defaults = TrainConfig::default();
    let weight_defaults = RewardWeights::default();
    let weights = RewardWeights {
        alpha: r.get(args.alpha, "alpha", weight_defaults.alpha)?,
        beta: r.get(args.beta, "beta", weight_defaults.beta)?,
        gamma: r.get(args.gamma, "gamma", weight_defaults.gamma)?,
        rho_max: r.get(None, "rho-max", weight_defaults.rho_max)?,
        t_max: r.get(args.tmax, "tmax", weight_defaults.t_max)?,
        epsilon: r.get(None, "epsilon", weight_defaults.epsilon)?,
    };
    let train = TrainConfig {
        group_size: r.get(args.k, "k", defaults.group_size)?,
        steps: r.get(args.steps, "steps", defaults.steps)?,
        learning_rate: r.get(args.lr, "lr", defaults.learning_rate)?,
        clip_epsilon: r.get(args.clip_epsilon, "clip-epsilon", defaults.clip_epsilon)?,
        reward_variant: r.get(args.reward_variant, "reward-variant", defaults.reward_variant)?,
        weights,
        seed: r.get(args.seed, "seed", defaults.seed)?,
        prompts_per_step: r.get(args.prompts_per_step, "prompts-per-step", defaults.prompts_per_step)?,
        init: r.get(args.init, "init", defaults.init)?,
    };
    if train.group_size < 2 {
        return Err(CliError::Usage("k must be >= 2".into()));
    }
    if !(train.clip_epsilon > 0.0 && train.clip_epsilon < 1.0) {
        return Err(CliError::Usage("clip-epsilon must be in (0,1)".into()));
    }
    Ok(TrainSpec {
        train,
        n_prompts: r.get(args.n_prompts, "n-prompts", 64)?,
        env: r.env_config()?,
    })
}

fn resolve_construct(args: &ConstructDataArgs, r: &Resolver) -> Result<DatagenSpec, CliError> {
    Ok(DatagenSpec {
        k: r.get(args.k, "k", 3)?,
        t_max: r.get(args.tmax, "tmax", 3)?,
        rho_thr: r.get(args.rho_thr, "rho-thr", 4.5)?,
        min_best: r.get(args.min_best, "min-best", 4.5)?,
        n_prompts: r.get(args.n_prompts, "n-prompts", 100)?,
        seed: r.get(args.seed, "seed", 0)?,
        refine_prob: r.get(args.refine_prob, "refine-prob", 0.5)?,
        env: r.env_config()?,
    })
}

fn resolve_audit(args: &AuditArgs, r: &Resolver) -> Result<AuditSpec, CliError> {
    let path_str = |p: &PathBuf| p.display().to_string();
    match (&args.vectors_bench, &args.vectors_pool) {
        (Some(_), None) | (None, Some(_)) => {
            return Err(CliError::Usage(
                "--vectors-bench and --vectors-pool must be given together".into(),
            ))
        }
        _ => {}
    }
    Ok(AuditSpec {
        bench: path_str(&args.bench),
        pool: path_str(&args.pool),
        vectors_bench: args.vectors_bench.as_ref().map(path_str),
        vectors_pool: args.vectors_pool.as_ref().map(path_str),
        cosine_threshold: r.get(args.cosine_threshold, "cosine-threshold", 0.8)?,
    })
}

fn resolve_report(args: &ReportArgs, r: &Resolver) -> Result<ReportSpec, CliError> {
    Ok(ReportSpec {
        logs: args.logs.display().to_string(),
        pairs: args.pairs.as_ref().map(|p| p.display().to_string()),
        costs: LatencyCost {
            per_generation: r.get(args.cost_gen, "cost-gen", 1.0)?,
            per_review: r.get(args.cost_review, "cost-review", 1.0)?,
            per_decision: r.get(args.cost_decision, "cost-decision", 1.0)?,
        },
        stop_threshold: r.get(args.stop_threshold, "stop-threshold", 4.5)?,
    })
}

// ---------------------------------------------------------------------------
// output tracking and manifest writing
// ---------------------------------------------------------------------------

struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| {
            CliError::Runtime(format!("cannot create output dir {}: {e}", dir.display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<(), CliError> {
        let mut body = String::new();
        for record in records {
            body.push_str(&logio::encode_line(record));
            body.push('\n');
        }
        self.write(name, body)
    }

    fn cleanup(&self) {
        for name in &self.files {
            let _ = std::fs::remove_file(self.dir.join(name));
        }
    }
}

/// Run a command body into `dir`, then write the manifest; on failure remove
/// the partial outputs.
fn execute_into<C, F>(
    dir: &Path,
    subcommand: &str,
    seed: u64,
    config: &C,
    inputs: &[PathBuf],
    body: F,
) -> Result<(), CliError>
where
    C: Serialize,
    F: FnOnce(&mut OutputDir) -> Result<(), CliError>,
{
    let mut manifest = RunManifest::new(subcommand, seed, config);
    for input in inputs {
        if !input.exists() {
            return Err(CliError::Input(format!(
                "input file not found: {}",
                input.display()
            )));
        }
        manifest.record_input(input)?;
    }
    let mut out = OutputDir::create(dir)?;
    match body(&mut out) {
        Ok(()) => {
            for name in &out.files {
                manifest.record_output(name, &out.dir.join(name))?;
            }
            manifest.write(&out.dir)?;
            Ok(())
        }
        Err(e) => {
            out.cleanup();
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn execute_simulate(spec: &SimulateSpec, out: &mut OutputDir) -> Result<(), CliError> {
    let env = SimEnv::new(spec.env.clone());
    env.config.validate()?;
    let pool = crate::env::synthetic_pool(spec.n_prompts, spec.seed);
    let base = SeedTree::from_root(spec.env.seed)
        .child("simulate")
        .child_idx("run", spec.seed);

    let mut duel_counts = (0usize, 0usize, 0usize); // refine, regenerate, tie
    let trajectories: Vec<Trajectory> = if spec.policy == "preference" {
        let rollouts = pool
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                preference_reference(
                    &env,
                    prompt,
                    spec.t_max,
                    spec.tie_margin,
                    &base.child_idx("prompt", i as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        for rollout in &rollouts {
            for duel in &rollout.duels {
                match duel.outcome {
                    DuelOutcome::RefineWin => duel_counts.0 += 1,
                    DuelOutcome::RegenerateWin => duel_counts.1 += 1,
                    DuelOutcome::Tie => duel_counts.2 += 1,
                }
            }
        }
        rollouts.into_iter().map(|r| r.trajectory).collect()
    } else {
        let nav: Box<dyn Navigator + Sync> = match spec.policy.as_str() {
            "heuristic" => Box::new(HeuristicNavigator {
                thresholds: HeuristicThresholds {
                    stop: spec.stop_threshold,
                    refine: spec.refine_threshold,
                },
            }),
            "zeros" => Box::new(SoftmaxNavigator {
                params: PolicyParams::zeros(),
            }),
            "softmax" => Box::new(SoftmaxNavigator {
                params: PolicyParams::from_text(spec.params_text.as_deref().unwrap_or_default())
                    .map_err(|e| CliError::Input(e.to_string()))?,
            }),
            "refine-only" => Box::new(FixedWorkflow::refine_only()),
            "regenerate-only" => Box::new(FixedWorkflow::regenerate_only()),
            "one-shot" => Box::new(FixedWorkflow::one_shot()),
            other => return Err(CliError::Usage(format!("unknown policy '{other}'"))),
        };
        pool.par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                run_episode(
                    nav.as_ref(),
                    &env,
                    prompt,
                    spec.t_max,
                    &base.child_idx("prompt", i as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?
    };

    out.write_jsonl("trajectories.jsonl", &trajectories)?;

    let mut summary = String::new();
    summary.push_str(&format!("policy: {}\n", spec.policy));
    summary.push_str(&format!("episodes: {}\n", trajectories.len()));
    if let Ok(bvf) = metrics::best_vs_final(&trajectories) {
        summary.push_str(&format!(
            "mean_best_score: {:.6}\nmean_final_score: {:.6}\nbest_final_delta: {:.6}\n",
            bvf.mean_best, bvf.mean_final, bvf.delta
        ));
    }
    if let Ok(avg) = metrics::avg_turns(&trajectories) {
        summary.push_str(&format!("avg_turns: {avg:.6}\n"));
    }
    if let Ok(shares) = metrics::action_distribution(&trajectories) {
        summary.push_str(&format!(
            "action_shares: stop={:.6} refine={:.6} regenerate={:.6} (decisions={})\n",
            shares.stop, shares.refine, shares.regenerate, shares.decisions
        ));
    }
    if let Ok(rate) = metrics::correct_stop_rate(&trajectories, spec.stop_threshold) {
        summary.push_str(&format!("correct_stop_rate@{}: {rate:.6}\n", spec.stop_threshold));
    }
    for (turn, mean) in metrics::per_turn_curve(&trajectories) {
        summary.push_str(&format!("per_turn_mean[{turn}]: {mean:.6}\n"));
    }
    if spec.policy == "preference" {
        let total = (duel_counts.0 + duel_counts.1 + duel_counts.2).max(1) as f64;
        summary.push_str(&format!(
            "duels: refine_win={:.6} regenerate_win={:.6} tie={:.6} (n={})\n",
            duel_counts.0 as f64 / total,
            duel_counts.1 as f64 / total,
            duel_counts.2 as f64 / total,
            duel_counts.0 + duel_counts.1 + duel_counts.2
        ));
    }
    out.write("summary.txt", summary)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn execute_train(spec: &TrainSpec, out: &mut OutputDir) -> Result<(), CliError> {
    let env = SimEnv::new(spec.env.clone());
    env.config.validate()?;
    let pool = crate::env::synthetic_pool(spec.n_prompts, spec.train.seed);
    let outcome = trainer::train(&spec.train, &env, &pool)?;
    out.write("policy.txt", outcome.params.to_text())?;
    out.write_jsonl("curve.jsonl", &outcome.curve)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// construct-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FilterStatsOut {
    stats: crate::datagen::RejectionStats,
    verdicts: Vec<crate::datagen::FilterVerdict>,
}

fn execute_construct(spec: &DatagenSpec, out: &mut OutputDir) -> Result<(), CliError> {
    let env = SimEnv::new(spec.env.clone());
    env.config.validate()?;
    let pool = crate::env::synthetic_pool(spec.n_prompts, spec.seed);
    let proposer = MixtureProposer {
        refine_prob: spec.refine_prob,
    };
    let tree = SeedTree::from_root(spec.env.seed)
        .child("construct")
        .child_idx("run", spec.seed);
    let (logs, report, conversations) = construct_dataset(
        &proposer,
        &env,
        &pool,
        &ConstructionParams {
            k: spec.k,
            t_max: spec.t_max,
            rho_thr: spec.rho_thr,
            min_best: spec.min_best,
        },
        &tree,
    )?;
    out.write_jsonl("branch_logs.jsonl", &logs)?;
    out.write_jsonl("conversations.jsonl", &conversations)?;
    let stats = FilterStatsOut {
        stats: report.stats,
        verdicts: report.verdicts,
    };
    out.write(
        "filter_stats.json",
        serde_json::to_string_pretty(&stats).expect("stats serialization"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// audit-contamination
// ---------------------------------------------------------------------------

fn read_lines(path: &str) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {path}: {e}")))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_vectors(path: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let lines = read_lines(path)?;
    lines
        .iter()
        .enumerate()
        .map(|(idx, line)| {
            line.split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|e| {
                        CliError::Input(format!("{path}:{}: bad number '{cell}': {e}", idx + 1))
                    })
                })
                .collect()
        })
        .collect()
}

fn quantiles(values: &[f64]) -> String {
    if values.is_empty() {
        return "n=0".into();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    format!(
        "n={} min={:.6} p50={:.6} mean={:.6} p90={:.6} max={:.6}",
        sorted.len(),
        sorted[0],
        q(0.5),
        mean,
        q(0.9),
        sorted[sorted.len() - 1]
    )
}

fn execute_audit(spec: &AuditSpec, out: &mut OutputDir) -> Result<(), CliError> {
    let bench = read_lines(&spec.bench)?;
    let pool_texts = read_lines(&spec.pool)?;
    let index = PoolIndex::build(&pool_texts);
    let rows: Vec<LexicalRow> = audit_lexical(&bench, &index);

    let cosine: Option<Vec<CosineRow>> = match (&spec.vectors_bench, &spec.vectors_pool) {
        (Some(vb), Some(vp)) => {
            let bench_vecs = read_vectors(vb)?;
            let pool_vecs = read_vectors(vp)?;
            if bench_vecs.len() != bench.len() {
                return Err(CliError::Input(format!(
                    "{vb}: {} rows, expected {} (one per benchmark prompt)",
                    bench_vecs.len(),
                    bench.len()
                )));
            }
            if pool_vecs.len() != pool_texts.len() {
                return Err(CliError::Input(format!(
                    "{vp}: {} rows, expected {} (one per pool prompt)",
                    pool_vecs.len(),
                    pool_texts.len()
                )));
            }
            Some(cosine_screen(&bench_vecs, &pool_vecs, spec.cosine_threshold)?)
        }
        _ => None,
    };

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "bench_index,max_jaccard5,max_containment5,max_containment8,flag_8gram,collide_13gram,max_cosine,cosine_flag\n",
    );
    for (i, row) in rows.iter().enumerate() {
        let (max_cos, cos_flag) = match &cosine {
            Some(cos) => (cos[i].max_similarity.to_string(), cos[i].flagged.to_string()),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.bench_index,
            row.max_jaccard5,
            fmt_opt(row.max_containment5),
            fmt_opt(row.max_containment8),
            row.flag_8gram,
            row.collide_13gram,
            max_cos,
            cos_flag
        ));
    }
    out.write("metrics.csv", csv)?;

    let mut flags = String::from("bench_index,metric,value,nearest_pool_index\n");
    for row in &rows {
        if row.flag_8gram {
            flags.push_str(&format!(
                "{},containment8,{},{}\n",
                row.bench_index,
                fmt_opt(row.max_containment8),
                row.nearest_8gram.map(|i| i.to_string()).unwrap_or_default()
            ));
        }
        if row.collide_13gram {
            flags.push_str(&format!("{},collision13,1,\n", row.bench_index));
        }
    }
    if let Some(cos) = &cosine {
        for (i, row) in cos.iter().enumerate() {
            if row.flagged {
                flags.push_str(&format!(
                    "{},cosine,{},{}\n",
                    i, row.max_similarity, row.nearest
                ));
            }
        }
    }
    out.write("flags.csv", flags)?;

    let mut summary = String::new();
    summary.push_str(&format!(
        "benchmark prompts: {}\npool prompts: {}\n",
        bench.len(),
        pool_texts.len()
    ));
    summary.push_str(&format!(
        "jaccard5: {}\n",
        quantiles(&rows.iter().map(|r| r.max_jaccard5).collect::<Vec<_>>())
    ));
    summary.push_str(&format!(
        "containment5: {}\n",
        quantiles(&rows.iter().filter_map(|r| r.max_containment5).collect::<Vec<_>>())
    ));
    summary.push_str(&format!(
        "containment8: {}\n",
        quantiles(&rows.iter().filter_map(|r| r.max_containment8).collect::<Vec<_>>())
    ));
    summary.push_str(&format!(
        "flagged_8gram: {}\n13gram_collisions: {}\n",
        rows.iter().filter(|r| r.flag_8gram).count(),
        rows.iter().filter(|r| r.collide_13gram).count()
    ));
    if let Some(cos) = &cosine {
        summary.push_str(&format!(
            "cosine: {}\ncosine_flags(>= {}): {}\n",
            quantiles(&cos.iter().map(|c| c.max_similarity).collect::<Vec<_>>()),
            spec.cosine_threshold,
            cos.iter().filter(|c| c.flagged).count()
        ));
    }
    out.write("summary.txt", summary)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn read_pairs(path: &str) -> Result<Vec<AgreementPair>, CliError> {
    let mut pairs = Vec::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(CliError::Input(format!(
                "{path}:{}: expected rho_a,rho_b,choice",
                idx + 1
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| CliError::Input(format!("{path}:{}: bad score '{s}': {e}", idx + 1)))
        };
        let human = match cells[2].to_ascii_lowercase().as_str() {
            "a" => HumanChoice::A,
            "b" => HumanChoice::B,
            "tie" => HumanChoice::Tie,
            other => {
                return Err(CliError::Input(format!(
                    "{path}:{}: choice must be a|b|tie, got '{other}'",
                    idx + 1
                )))
            }
        };
        pairs.push(AgreementPair {
            rho_a: parse(cells[0])?,
            rho_b: parse(cells[1])?,
            human,
        });
    }
    Ok(pairs)
}

fn execute_report(spec: &ReportSpec, out: &mut OutputDir) -> Result<(), CliError> {
    let logs = logio::read_trajectories(Path::new(&spec.logs))?;
    let mut report = String::new();
    report.push_str(&format!("trajectories: {}\n", logs.len()));

    match metrics::action_distribution(&logs) {
        Ok(shares) => {
            out.write(
                "action_distribution.csv",
                format!(
                    "action,share\nstop,{}\nrefine,{}\nregenerate,{}\n",
                    shares.stop, shares.refine, shares.regenerate
                ),
            )?;
            report.push_str(&format!(
                "action_shares: stop={:.6} refine={:.6} regenerate={:.6} (decisions={})\n",
                shares.stop, shares.refine, shares.regenerate, shares.decisions
            ));
        }
        Err(e) => report.push_str(&format!("action_shares: unavailable ({e})\n")),
    }

    let curve = metrics::per_turn_curve(&logs);
    let mut curve_csv = String::from("turn,mean_score\n");
    for (turn, mean) in &curve {
        curve_csv.push_str(&format!("{turn},{mean}\n"));
        report.push_str(&format!("per_turn_mean[{turn}]: {mean:.6}\n"));
    }
    out.write("per_turn_curve.csv", curve_csv)?;

    let avg = metrics::avg_turns(&logs).map_err(|e| CliError::Input(e.to_string()))?;
    let bvf = metrics::best_vs_final(&logs).map_err(|e| CliError::Input(e.to_string()))?;
    let stop_rate = metrics::correct_stop_rate(&logs, spec.stop_threshold)
        .map_err(|e| CliError::Input(e.to_string()))?;
    report.push_str(&format!("avg_turns: {avg:.6}\n"));
    report.push_str(&format!(
        "mean_best: {:.6}\nmean_final: {:.6}\nbest_final_delta: {:.6}\n",
        bvf.mean_best, bvf.mean_final, bvf.delta
    ));
    report.push_str(&format!(
        "correct_stop_rate@{}: {stop_rate:.6}\n",
        spec.stop_threshold
    ));
    out.write(
        "summary.csv",
        format!(
            "metric,value\navg_turns,{avg}\nmean_best,{}\nmean_final,{}\nbest_final_delta,{}\ncorrect_stop_rate,{stop_rate}\n",
            bvf.mean_best, bvf.mean_final, bvf.delta
        ),
    )?;

    let latency = metrics::latency_account(&logs, &spec.costs);
    let mut latency_csv = String::from("turn,total_seconds\n");
    for (turn, cost) in &latency.per_turn {
        latency_csv.push_str(&format!("{turn},{cost}\n"));
    }
    latency_csv.push_str(&format!("total,{}\n", latency.total));
    out.write("latency.csv", latency_csv)?;
    report.push_str(&format!(
        "latency_total: {:.6}\nlatency_mean_per_trajectory: {:.6}\n",
        latency.total, latency.mean_per_trajectory
    ));

    if let Some(pairs_path) = &spec.pairs {
        let pairs = read_pairs(pairs_path)?;
        match metrics::reviewer_human_agreement(&pairs, 0.3) {
            Ok(agreement) => {
                out.write(
                    "agreement.csv",
                    format!(
                        "decisive,agreements,rate,reviewer_ties\n{},{},{},{}\n",
                        agreement.decisive,
                        agreement.agreements,
                        agreement.rate,
                        agreement.reviewer_ties
                    ),
                )?;
                report.push_str(&format!(
                    "reviewer_human_agreement: {:.6} ({} of {} decisive, {} reviewer ties)\n",
                    agreement.rate,
                    agreement.agreements,
                    agreement.decisive,
                    agreement.reviewer_ties
                ));
            }
            Err(e) => report.push_str(&format!("reviewer_human_agreement: unavailable ({e})\n")),
        }
    }

    out.write("report.txt", report)
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

fn run_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&args.manifest)?;
    for (path, recorded_hash) in &manifest.inputs {
        let current = hash_file(Path::new(path))
            .map_err(|e| CliError::Input(format!("replay input {path}: {e}")))?;
        if &current != recorded_hash {
            return Err(CliError::Runtime(format!(
                "input {path} changed since the original run (hash mismatch)"
            )));
        }
    }

    let out_dir = args.out.clone().unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join("replay")
    });

    let spec_value = manifest.config.clone();
    let parse = |e: serde_json::Error| {
        CliError::Input(format!("manifest config does not parse: {e}"))
    };
    let inputs: Vec<PathBuf> = manifest.inputs.keys().map(PathBuf::from).collect();
    match manifest.subcommand.as_str() {
        "simulate" => {
            let spec: SimulateSpec = serde_json::from_value(spec_value).map_err(parse)?;
            execute_into(&out_dir, "simulate", spec.seed, &spec, &inputs, |out| {
                execute_simulate(&spec, out)
            })?;
        }
        "train" => {
            let spec: TrainSpec = serde_json::from_value(spec_value).map_err(parse)?;
            execute_into(&out_dir, "train", spec.train.seed, &spec, &inputs, |out| {
                execute_train(&spec, out)
            })?;
        }
        "construct-data" => {
            let spec: DatagenSpec = serde_json::from_value(spec_value).map_err(parse)?;
            execute_into(&out_dir, "construct-data", spec.seed, &spec, &inputs, |out| {
                execute_construct(&spec, out)
            })?;
        }
        "audit-contamination" => {
            let spec: AuditSpec = serde_json::from_value(spec_value).map_err(parse)?;
            execute_into(&out_dir, "audit-contamination", 0, &spec, &inputs, |out| {
                execute_audit(&spec, out)
            })?;
        }
        "report" => {
            let spec: ReportSpec = serde_json::from_value(spec_value).map_err(parse)?;
            execute_into(&out_dir, "report", 0, &spec, &inputs, |out| {
                execute_report(&spec, out)
            })?;
        }
        other => {
            return Err(CliError::Input(format!(
                "manifest subcommand '{other}' is not replayable"
            )))
        }
    }

    let replayed = RunManifest::read(&out_dir.join(MANIFEST_FILE))?;
    let mut all_ok = true;
    for (name, original_hash) in &manifest.outputs {
        match replayed.outputs.get(name) {
            Some(new_hash) if new_hash == original_hash => println!("OK       {name}"),
            Some(_) => {
                println!("MISMATCH {name}");
                all_ok = false;
            }
            None => {
                println!("MISSING  {name}");
                all_ok = false;
            }
        }
    }
    for name in replayed.outputs.keys() {
        if !manifest.outputs.contains_key(name) {
            println!("EXTRA    {name}");
            all_ok = false;
        }
    }
    if all_ok {
        println!(
            "replay of '{}' reproduced {} outputs bit-exactly",
            manifest.subcommand,
            manifest.outputs.len()
        );
        Ok(())
    } else {
        Err(CliError::Runtime(
            "replay outputs differ from the manifest".into(),
        ))
    }
}
