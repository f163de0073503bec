//! Command-line flags and the JSON config file that mirrors them.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Sets the default output root when `--out` is not given.
pub const OUT_ENV: &str = "QCOORD_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "qcoord",
    version,
    about = "Train, evaluate and certify entangled multi-agent policies"
)]
pub struct Cli {
    /// JSON file whose keys mirror the flags; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train entangled policies on a nonlocal game with REINFORCE.
    TrainGame(TrainGameArgs),
    /// Train router policies on the queueing task, optionally over a sweep of wait limits.
    TrainQueueing(TrainQueueingArgs),
    /// Evaluate a saved policy.
    Eval(EvalArgs),
    /// Print the best shared-randomness win probability of a game.
    Oracle(OracleArgs),
    /// Test whether a saved policy lies in the shared-randomness polytope.
    BellCheck(BellCheckArgs),
    /// Worst-run learned advantage for every game with and without entropy regularization.
    ReproduceTable1(Table1Args),
    /// Train both coordinator kinds at one wait limit and compare them.
    CompareCoordinators(CompareArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainGame(_) => "train-game",
            Command::TrainQueueing(_) => "train-queueing",
            Command::Eval(_) => "eval",
            Command::Oracle(_) => "oracle",
            Command::BellCheck(_) => "bell-check",
            Command::ReproduceTable1(_) => "reproduce-table1",
            Command::CompareCoordinators(_) => "compare-coordinators",
        }
    }
}

pub const COMMANDS: [&str; 7] = [
    "train-game",
    "train-queueing",
    "eval",
    "oracle",
    "bell-check",
    "reproduce-table1",
    "compare-coordinators",
];

#[derive(Debug, Clone, Args)]
pub struct GameSelect {
    /// chsh, ghz, rendezvous-tetra, rendezvous-cube, or any rendezvous-* name with --graph.
    #[arg(long)]
    pub game: String,
    /// Edge list (`u v` per line) for a custom rendezvous graph.
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GameTrainFlags {
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    /// Anneal the entropy coefficient linearly to zero at this fraction of the steps.
    #[arg(long, value_name = "FRACTION")]
    pub entropy_decay: Option<f64>,
    /// Keep the entropy coefficient constant even where the game default anneals it.
    #[arg(long)]
    pub constant_entropy: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub local_dim: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub conditioning_coef: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainGameArgs {
    #[command(flatten)]
    pub select: GameSelect,
    #[command(flatten)]
    pub train: GameTrainFlags,
    /// Number of seeds, run as first-seed, first-seed + 1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CoordinatorArg {
    Quantum,
    #[value(alias = "shared")]
    Classical,
}

#[derive(Debug, Clone, Args)]
pub struct QueueFlags {
    /// Arrival rate of request pairs.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Rate of the exponential request sizes.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Exponent p of the baseline throughput t^p.
    #[arg(long)]
    pub throughput_exponent: Option<f64>,
    /// Steps per training episode.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Average wait per step instead of per request.
    #[arg(long)]
    pub per_step_wait: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MappoFlags {
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub envs: Option<usize>,
    #[arg(long)]
    pub rollout_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub gae_lambda: Option<f64>,
    #[arg(long)]
    pub lr_net: Option<f64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub lr_critic: Option<f64>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[arg(long)]
    pub conditioning_coef: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub kp: Option<f64>,
    #[arg(long)]
    pub ki: Option<f64>,
    #[arg(long)]
    pub kd: Option<f64>,
    #[arg(long)]
    pub integral_bound: Option<f64>,
    /// Hidden layer sizes of the policy networks, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub critic_hidden: Option<Vec<usize>>,
    /// Advice values of the shared-randomness coordinator.
    #[arg(long)]
    pub shared_values: Option<usize>,
    /// Put learned actors behind the quantum coordinator.
    #[arg(long)]
    pub learned_actors: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub eval_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainQueueingArgs {
    #[arg(long, value_enum, default_value = "quantum")]
    pub coordinator: CoordinatorArg,
    #[arg(long, default_value_t = 5.5)]
    pub wait_limit: f64,
    /// Wait limits `start:stop:step`, trained in order with warm starts.
    #[arg(long, value_name = "START:STOP:STEP")]
    pub sweep: Option<String>,
    /// Seeds trained at the first limit; the best is kept.
    #[arg(long, default_value_t = 1)]
    pub initial_runs: usize,
    #[arg(long, default_value_t = 16)]
    pub final_episodes: usize,
    #[arg(long, default_value_t = 20_000)]
    pub final_steps: usize,
    #[command(flatten)]
    pub queue: QueueFlags,
    #[command(flatten)]
    pub mappo: MappoFlags,
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CHECKPOINT")]
    pub policy: PathBuf,
    /// Game for entangled policies.
    #[arg(long)]
    pub game: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
    /// Queueing evaluation episodes.
    #[arg(long, default_value_t = 16)]
    pub episodes: usize,
    /// Queueing steps per episode.
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub wait_limit: Option<f64>,
    #[command(flatten)]
    pub queue: QueueFlags,
    /// Also write a trajectory of this many steps (queueing policies).
    #[arg(long)]
    pub dump_steps: Option<usize>,
    /// Directory for the distribution or trajectory CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub select: GameSelect,
    /// Also print the optimal deterministic strategy.
    #[arg(long)]
    pub strategy: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BellCheckArgs {
    #[arg(long, value_name = "CHECKPOINT")]
    pub policy: PathBuf,
    #[command(flatten)]
    pub select: GameSelect,
}

#[derive(Debug, Clone, Args)]
pub struct Table1Args {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Override the per-game step counts.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "chsh,ghz,rendezvous-tetra,rendezvous-cube"
    )]
    pub games: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 5.5)]
    pub wait_limit: f64,
    /// Training seeds per coordinator kind.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Train against `wait-limit − margin`.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub final_episodes: Option<usize>,
    #[arg(long)]
    pub final_steps: Option<usize>,
    #[command(flatten)]
    pub queue: QueueFlags,
    #[command(flatten)]
    pub mappo: MappoFlags,
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// A flag and its value (`None` for a bare switch).
pub type FlagToken = (String, Option<String>);

/// Flags for one config object. `true` becomes a bare switch, `false` and
/// `null` are dropped, arrays become comma-separated lists.
pub fn config_tokens(config: &Value) -> Result<(Option<String>, Vec<FlagToken>)> {
    let Value::Object(map) = config else {
        return Err(CliError::Config(
            "config file must hold a JSON object".into(),
        ));
    };
    let mut command = None;
    let mut tokens = Vec::new();
    for (key, value) in map {
        if key == "command" {
            command = Some(
                scalar(value)
                    .ok_or_else(|| CliError::Config("`command` must be a string".into()))?,
            );
            continue;
        }
        if key == "config" {
            return Err(CliError::Config("config files cannot nest".into()));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let bad = || CliError::Config(format!("config key `{key}` has an unsupported value"));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => tokens.push((flag, None)),
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(scalar)
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                tokens.push((flag, Some(parts.join(","))));
            }
            Value::Object(_) => return Err(bad()),
            v => tokens.push((flag, Some(scalar(v).ok_or_else(bad)?))),
        }
    }
    Ok((command, tokens))
}

fn load_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Splices config-file flags after the subcommand, skipping any flag that
/// also appears on the command line.
pub fn merged_argv(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let (command, tokens) = config_tokens(&load_config(&path)?)?;
    let mut out = argv;
    let position = out
        .iter()
        .position(|a| COMMANDS.contains(&a.to_string_lossy().as_ref()));
    let insert_at = match (position, command) {
        (Some(p), Some(c)) if out[p].to_string_lossy() != c => {
            return Err(CliError::Config(format!(
                "config names command `{c}` but `{}` was given",
                out[p].to_string_lossy()
            )));
        }
        (Some(p), _) => p + 1,
        (None, Some(c)) => {
            out.insert(1.min(out.len()), c.into());
            2.min(out.len())
        }
        (None, None) => return Ok(out),
    };
    let given: Vec<String> = out
        .iter()
        .filter_map(|a| {
            let s = a.to_string_lossy();
            s.starts_with("--")
                .then(|| s.split('=').next().unwrap_or_default().to_string())
        })
        .collect();
    let spliced: Vec<OsString> = tokens
        .into_iter()
        .filter(|(flag, _)| !given.contains(flag))
        .flat_map(|(flag, value)| std::iter::once(flag.into()).chain(value.map(OsString::from)))
        .collect();
    out.splice(insert_at..insert_at, spliced);
    Ok(out)
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Config(format!("sweep `{text}` is not start:stop:step"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    if n > 10_000 {
        return Err(CliError::Config("sweep has too many points".into()));
    }
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("5.5:6.5:0.5").unwrap(), vec![5.5, 6.0, 6.5]);
        assert_eq!(parse_sweep("5.5:9.0:0.25").unwrap().len(), 15);
        assert_eq!(parse_sweep("2:2:1").unwrap(), vec![2.0]);
        for bad in ["1:2", "1:0:1", "1:2:0", "a:b:c", "1:2:-1"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_tokens_mirror_flags() {
        let (cmd, tokens) = config_tokens(&json!({
            "command": "train-game", "game": "chsh", "entropy_coef": 0.2, "plot": true,
            "constant-entropy": false, "hidden": [8, 8]
        }))
        .unwrap();
        assert_eq!(cmd.as_deref(), Some("train-game"));
        let flat: Vec<OsString> = tokens
            .into_iter()
            .flat_map(|(f, v)| std::iter::once(f.into()).chain(v.map(OsString::from)))
            .collect();
        assert_eq!(
            flat,
            os(&[
                "--entropy-coef",
                "0.2",
                "--game",
                "chsh",
                "--hidden",
                "8,8",
                "--plot"
            ])
        );
        assert!(config_tokens(&json!([1])).is_err());
        assert!(config_tokens(&json!({"game": {"x": 1}})).is_err());
    }

    #[test]
    fn command_line_flags_override_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"command": "oracle", "game": "ghz"}"#).unwrap();
        let p = path.to_str().unwrap();
        let argv = merged_argv(os(&["qcoord", "--config", p, "--game", "chsh"])).unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        match cli.command {
            Command::Oracle(a) => assert_eq!(a.select.game, "chsh"),
            other => panic!("unexpected {other:?}"),
        }
        let argv = merged_argv(os(&["qcoord", "oracle", "--config", p])).unwrap();
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Oracle(a) => assert_eq!(a.select.game, "ghz"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(merged_argv(os(&["qcoord", "eval", "--config", p])).is_err());
    }
}
