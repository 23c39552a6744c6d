//! Command implementations behind the `swarmcbf` binary.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 1 anything else (I/O).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use swarmcbf_core::config::{Config, ScenarioConfig};
use swarmcbf_core::eval::{self, aggregate_metrics, cell_scenario, run_cell, run_episode, SweepRow, SweepSpec};
use swarmcbf_core::models::{Checkpoint, Models};
use swarmcbf_core::sim::{ControlParams, Mode};
use swarmcbf_core::training::{initial_models, run_training, LogRow};
use swarmcbf_core::Error as CoreError;

pub const SEED_ENV: &str = "SWARMCBF_SEED";

#[derive(Debug, Parser)]
#[command(name = "swarmcbf", version, about = "Train and evaluate safe distributed multi-robot controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the barrier, controller and predictor networks.
    Train(TrainArgs),
    /// Evaluate one controller mode over Monte Carlo episodes.
    Eval(EvalArgs),
    /// Evaluate the cross product of team sizes, delays and modes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Not needed for nominal-only and analytic-baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub mode: String,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long)]
    pub robots: Option<usize>,
    /// Overrides the delay coefficient; zero means perfect information.
    #[arg(long = "c-del")]
    pub c_del: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every robot state and input as JSON lines.
    #[arg(long)]
    pub dump_trajectories: bool,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: 2, error: anyhow::anyhow!(msg.into()) }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            e if e.is_numeric() => 3,
            CoreError::Config(_) | CoreError::Checkpoint(_) | CoreError::VariantMismatch { .. } => 2,
            _ => 1,
        };
        CliError { code, error: e.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: 1, error: e.into() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError { code: 1, error: e.into() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { code: 1, error: e.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `SWARMCBF_SEED`, when set, wins over `--seed`.
pub fn effective_seed(flag: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub code_version: String,
    pub start_time_unix: u64,
    /// Canonical configuration text (TOML for train/eval, JSON for sweeps).
    pub config: String,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    fn new(command: &str, config: String, seed: u64, outputs: BTreeMap<String, PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config.as_bytes()),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            start_time_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config,
            outputs,
        }
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: &Path) -> CliResult<Config> {
    if !path.exists() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    Ok(Config::load(path)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(usage("--workers must be positive"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError { code: 1, error: e.into() })
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let seed = effective_seed(args.seed)?;
    prepare_out(&args.out)?;
    let text = cfg.to_toml()?;
    let outputs = BTreeMap::from([
        ("config".to_string(), args.out.join("config.toml")),
        ("checkpoint".to_string(), args.out.join("checkpoint_final.json")),
        ("log".to_string(), args.out.join("train_log.csv")),
    ]);
    RunManifest::new("train", text.clone(), seed, outputs).write(&args.out)?;
    fs::write(args.out.join("config.toml"), &text)?;
    let models = initial_models(&cfg, seed)?;
    let out_dir = args.out.clone();
    let mut save = |m: &Models<f64>, event: u64, step: u64| {
        Checkpoint::from_models(m, step).save(&out_dir.join(format!("checkpoint_event{event:05}.json")))
    };
    let result = run_training(&cfg, models, seed, &mut save)?;
    write_csv::<LogRow>(&args.out.join("train_log.csv"), &result.log)?;
    Checkpoint::from_models(&result.models, result.steps).save(&args.out.join("checkpoint_final.json"))?;
    log::info!(
        "trained {} steps over {} episodes, {} update events",
        result.steps,
        result.episodes,
        result.log.len()
    );
    Ok(())
}

fn load_models(path: &Path, scenario: &ScenarioConfig) -> CliResult<Models<f64>> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    ck.check_kind(scenario.dynamics)?;
    Ok(ck.to_models()?)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let mode: Mode = args.mode.parse()?;
    let seed = effective_seed(args.seed)?;
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let mut scenario = cfg.scenario.clone();
    if let Some(r) = args.robots {
        scenario.robots = r;
    }
    if let Some(c) = args.c_del {
        scenario = cell_scenario(&scenario, scenario.robots, c);
    }
    scenario.validate()?;
    mode.check(scenario.dynamics)?;
    let models = match (&args.checkpoint, mode.needs_models()) {
        (Some(p), true) => Some(load_models(p, &scenario)?),
        (None, true) => return Err(usage(format!("mode {mode} needs --checkpoint"))),
        (_, false) => None,
    };
    let ctl = ControlParams { alpha: cfg.train.alpha, eps: cfg.train.eps, phi: cfg.train.phi };
    prepare_out(&args.out)?;
    let mut outputs = BTreeMap::from([("metrics".to_string(), args.out.join("metrics.csv"))]);
    if args.dump_trajectories {
        outputs.insert("trajectories".into(), args.out.join("trajectories.jsonl"));
    }
    let text = Config { scenario: scenario.clone(), ..cfg.clone() }.to_toml()?;
    RunManifest::new("eval", text, seed, outputs).write(&args.out)?;
    let results = pool(args.workers)?
        .install(|| run_cell(models.as_ref(), &scenario, mode, &ctl, seed, 0, args.episodes, true))?;
    let m = aggregate_metrics(&results)?;
    let row = SweepRow {
        mode: mode.name().to_string(),
        robots: scenario.robots,
        c_del: scenario.c_del,
        episodes: m.episodes,
        safety_rate: m.safety_rate,
        mean_traj_len: m.mean_traj_len,
        mean_goal_dist: m.mean_goal_dist,
        mean_min_dist: m.mean_min_dist,
        seed,
    };
    write_csv(&args.out.join("metrics.csv"), &[row])?;
    if args.dump_trajectories {
        let mut text = String::new();
        for e in 0..args.episodes as u64 {
            let mut recs = Vec::new();
            run_episode(models.as_ref(), &scenario, mode, &ctl, seed, eval::episode_key(0, e), Some(&mut recs))?;
            for r in recs {
                let mut v = serde_json::to_value(&r)?;
                v["episode"] = e.into();
                text.push_str(&serde_json::to_string(&v)?);
                text.push('\n');
            }
        }
        fs::write(args.out.join("trajectories.jsonl"), text)?;
    }
    println!("{mode}: safety rate {:.3} over {} episodes", m.safety_rate, m.episodes);
    Ok(())
}

/// One `(mode, c_del)` to checkpoint mapping; `c_del` absent matches any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub mode: Mode,
    #[serde(default)]
    pub c_del: Option<f64>,
    pub path: PathBuf,
}

/// Sweep file: the cell lists plus an optional base configuration and the
/// checkpoint mapping. Relative paths are resolved against the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub config: Option<PathBuf>,
    pub robots: Vec<usize>,
    pub c_del: Vec<f64>,
    pub modes: Vec<Mode>,
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoints: Vec<CheckpointEntry>,
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| usage(format!("cannot read sweep spec {}: {e}", args.spec.display())))?;
    let file: SweepFile = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", args.spec.display())))?;
    let dir = args.spec.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_relative() { dir.join(p) } else { p.to_path_buf() };
    let cfg = match &file.config {
        Some(p) => load_config(&resolve(p))?,
        None => Config::default(),
    };
    let seed = effective_seed(file.seed)?;
    let spec = SweepSpec {
        robots: file.robots.clone(),
        c_del: file.c_del.clone(),
        modes: file.modes.clone(),
        episodes: file.episodes,
        seed,
    };
    spec.validate()?;
    // Load each referenced checkpoint once.
    let mut loaded: BTreeMap<PathBuf, Models<f64>> = BTreeMap::new();
    let mut mapping: Vec<(Mode, f64, PathBuf)> = Vec::new();
    for &c in &spec.c_del {
        for &m in spec.modes.iter().filter(|m| m.needs_models()) {
            let entry = file
                .checkpoints
                .iter()
                .find(|e| e.mode == m && e.c_del.map_or(true, |x| x == c))
                .ok_or_else(|| usage(format!("no checkpoint mapped for mode {m} at c_del {c}")))?;
            let path = resolve(&entry.path);
            if !loaded.contains_key(&path) {
                let m = load_models(&path, &cfg.scenario)?;
                loaded.insert(path.clone(), m);
            }
            mapping.push((m, c, path));
        }
    }
    prepare_out(&args.out)?;
    let canonical = serde_json::to_string(&(&file, &cfg))?;
    RunManifest::new("sweep", canonical, seed, BTreeMap::from([("metrics".to_string(), args.out.join("sweep.csv"))]))
        .write(&args.out)?;
    let ctl = ControlParams { alpha: cfg.train.alpha, eps: cfg.train.eps, phi: cfg.train.phi };
    let lookup = |m: Mode, c: f64| -> swarmcbf_core::Result<Option<&Models<f64>>> {
        Ok(mapping
            .iter()
            .find(|(mm, cc, _)| *mm == m && *cc == c)
            .map(|(_, _, p)| &loaded[p]))
    };
    let parallel = args.workers != Some(1);
    let rows = pool(args.workers)?.install(|| eval::sweep(&spec, &cfg.scenario, &ctl, &lookup, parallel))?;
    write_csv(&args.out.join("sweep.csv"), &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.join("sweep.csv").display());
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
