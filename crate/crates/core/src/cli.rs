//! Command-line front end. The binary only parses arguments and maps errors
//! to exit codes; everything else lives here so it can be driven in-process.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::actor::{ActorModel, Request};
use crate::checkpoint::{load_checkpoint, param_fingerprint, save_checkpoint, Checkpoint};
use crate::data::{generate_dataset, generate_world, load_dataset, save_dataset, WorldConfig};
use crate::error::{io_err, Error, Result};
use crate::evaluator::{gather_rows, EvaluatorModel};
use crate::harness::{run_benchmark, run_sweep, write_sweep_csv, BenchSetup, RewardKind, SweepParam};
use crate::last::{serve, LastConfig, Policy};
use crate::net::ModelDims;
use crate::training::{train_actor, train_evaluator, Curve, Reward, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "lastrank", version, about = "Re-ranking with serving-time list search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and train/test interaction logs.
    GenData(GenDataArgs),
    /// Train the evaluator or the actor and write a checkpoint.
    Train(TrainArgs),
    /// Benchmark serving policies on a test split at equal list budget.
    Eval(EvalArgs),
    /// Sweep the step-set size or α for parallel LAST.
    Sweep(SweepArgs),
    /// Serve JSONL requests from stdin, one response line per request.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000)]
    pub train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test: usize,
    /// Candidates per request.
    #[arg(short = 'm', long, default_value_t = 8)]
    pub candidates: usize,
    /// Served list length.
    #[arg(short = 'n', long, default_value_t = 5)]
    pub list_len: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2_000)]
    pub users: usize,
    #[arg(long, default_value_t = 4_000)]
    pub items: usize,
    /// Per-position examination decay.
    #[arg(long, default_value_t = 0.95)]
    pub rho: f64,
    /// Similarity penalty strength.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Evaluator,
    Actor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Ndcg,
    Learned,
}

impl From<RewardArg> for RewardKind {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Ndcg => RewardKind::Ndcg,
            RewardArg::Learned => RewardKind::Learned,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    /// Reward for actor training.
    #[arg(long, value_enum, default_value = "learned")]
    pub reward: RewardArg,
    /// Training records (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Curve CSV; defaults to `<out>.curve.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Evaluator checkpoint, required for `--reward learned`.
    #[arg(long)]
    pub evaluator: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 5)]
    pub list_len: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Lists sampled per request for actor training.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub entropy_bonus: Option<f64>,
}

impl TrainFlags {
    fn config(&self, target: Target) -> TrainConfig {
        let d = match target {
            Target::Evaluator => TrainConfig::for_evaluator(),
            Target::Actor => TrainConfig::for_actor(),
        };
        TrainConfig {
            seed: self.seed.unwrap_or(d.seed),
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            samples_per_request: self.samples.unwrap_or(d.samples_per_request),
            entropy_bonus: self.entropy_bonus.unwrap_or(d.entropy_bonus),
            ..d
        }
    }
}

/// Models and serving knobs shared by eval, sweep and serve.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub actor: PathBuf,
    #[arg(long)]
    pub evaluator: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Test records (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "greedy,sampling,last,cascade")]
    pub policies: Vec<String>,
    /// Lists each policy may generate per request.
    #[arg(long, default_value_t = 7)]
    pub budget: usize,
    /// Function the multi-list policies maximize.
    #[arg(long, value_enum, default_value = "learned")]
    pub reward: RewardArg,
    /// Report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
    #[arg(long, value_enum, default_value = "learned")]
    pub reward: RewardArg,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value = "last")]
    pub mode: String,
    /// Step sizes for parallel LAST (lists per request for sampling).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub step_sizes: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct ServeRequest {
    user: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    n: usize,
}

#[derive(Debug, Serialize)]
struct ServeResponse {
    order: Vec<usize>,
    eta_star: f64,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ErrorResponse {
    error: String,
}

/// Runs a parsed command. Human-readable output goes to `stdout`; `stdin`
/// is only read by `serve`.
pub fn run(cli: Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, stdout),
        Command::Train(a) => train(&a, stdout),
        Command::Eval(a) => eval(&a, stdout),
        Command::Sweep(a) => sweep(&a, stdout),
        Command::Serve(a) => serve_stream(&a, stdin, stdout),
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn gen_data(a: &GenDataArgs, stdout: &mut dyn Write) -> Result<()> {
    if a.list_len == 0 || a.candidates < a.list_len {
        return Err(Error::Config(format!(
            "need 1 <= n <= m, got m = {}, n = {}",
            a.candidates, a.list_len
        )));
    }
    let config = WorldConfig {
        factor_dim: a.dim,
        n_users: a.users,
        n_items: a.items,
        rho: a.rho,
        lambda_sim: a.lambda,
    };
    let world = generate_world(&config, a.seed)?;
    // distinct streams for the two splits
    let train = generate_dataset(&world, a.train, a.candidates, a.list_len, a.seed.wrapping_add(1))?;
    let test = generate_dataset(&world, a.test, a.candidates, a.list_len, a.seed.wrapping_add(2))?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    save_dataset(a.out.join("train.jsonl"), &train)?;
    save_dataset(a.out.join("test.jsonl"), &test)?;
    let world_path = a.out.join("world.json");
    let text = serde_json::to_string(&world)? + "\n";
    fs::write(&world_path, text).map_err(io_err(&world_path))?;
    writeln!(
        stdout,
        "wrote {} train and {} test records to {}",
        train.len(),
        test.len(),
        a.out.display()
    )
    .map_err(out_err)
}

fn write_curve(path: &Path, column: &str, curve: &Curve) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["epoch", column]).map_err(csv_err)?;
    for (i, v) in curve.epochs.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{v:.9}")]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn feature_dims(records: &[crate::data::InteractionRecord], hidden: usize) -> Result<ModelDims> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("training data is empty".into()))?;
    let item_dim = first
        .items
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Config("record without items".into()))?;
    Ok(ModelDims {
        user_dim: first.user.len(),
        item_dim,
        hidden,
    })
}

fn train(a: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = a.train.config(a.target);
    config.validate()?;
    // check the prerequisite before doing any work
    let evaluator = match (a.target, a.reward) {
        (Target::Actor, RewardArg::Learned) => {
            let path = a.evaluator.as_ref().ok_or_else(|| {
                Error::Config("actor training with the learned reward needs --evaluator <checkpoint>".into())
            })?;
            Some(load_checkpoint(path)?.into_evaluator()?)
        }
        _ => None,
    };
    let records = load_dataset(&a.data)?;
    let dims = feature_dims(&records, a.hidden)?;
    let curve_path = a
        .curve
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.curve.csv", a.out.display())));
    let (ckpt, curve, column) = match a.target {
        Target::Evaluator => {
            let (model, curve) = train_evaluator(&records, dims, a.list_len, &config)?;
            (Checkpoint::from_evaluator(&model), curve, "bce")
        }
        Target::Actor => {
            let reward = match &evaluator {
                Some(e) => Reward::Learned {
                    evaluator: e,
                    n: a.list_len,
                },
                None => Reward::Ndcg { k: a.list_len },
            };
            let (model, curve) = train_actor(&records, dims, a.list_len, reward, &config)?;
            (Checkpoint::from_actor(&model, a.list_len), curve, "heldout_reward")
        }
    };
    save_checkpoint(&a.out, &ckpt)?;
    write_curve(&curve_path, column, &curve)?;
    writeln!(
        stdout,
        "{column}: {:.6} -> {:.6} over {} epochs; wrote {}",
        curve.initial,
        curve.last(),
        curve.epochs.len(),
        a.out.display()
    )
    .map_err(out_err)
}

struct Loaded {
    actor: ActorModel,
    evaluator: EvaluatorModel,
    list_len: usize,
}

fn load_models(m: &ModelArgs) -> Result<Loaded> {
    let ck = load_checkpoint(&m.actor)?;
    let list_len = ck.dims.list_len;
    let actor = ck.into_actor()?;
    let evaluator = load_checkpoint(&m.evaluator)?.into_evaluator()?;
    if actor.dims().user_dim != evaluator.dims().user_dim || actor.dims().item_dim != evaluator.dims().item_dim {
        return Err(Error::Config("actor and evaluator feature sizes differ".into()));
    }
    Ok(Loaded {
        actor,
        evaluator,
        list_len,
    })
}

fn last_config(actor: &ActorModel, m: &ModelArgs) -> Result<LastConfig> {
    let mut cfg = LastConfig::for_actor(actor);
    cfg.alpha = m.alpha;
    cfg.seed = m.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_policies(names: &[String]) -> Result<Vec<Policy>> {
    if names.is_empty() {
        return Err(Error::Config("no policies given".into()));
    }
    names.iter().map(|n| n.trim().parse()).collect()
}

fn eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let policies = parse_policies(&a.policies)?;
    let loaded = load_models(&a.models)?;
    let records = load_dataset(&a.data)?;
    let mut setup = BenchSetup::new(&loaded.actor, &loaded.evaluator, &records, loaded.list_len);
    setup.reward = a.reward.into();
    setup.last = last_config(&loaded.actor, &a.models)?;
    let report = run_benchmark(&setup, &policies, a.budget)?;
    write!(stdout, "{}", report.to_table()).map_err(out_err)?;
    if let Some(path) = &a.out {
        let file = File::create(path).map_err(io_err(path))?;
        report.write_csv(BufWriter::new(file))?;
    }
    Ok(())
}

fn sweep(a: &SweepArgs, stdout: &mut dyn Write) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    if a.values.is_empty() {
        return Err(Error::Config("--values needs at least one value".into()));
    }
    let loaded = load_models(&a.models)?;
    let records = load_dataset(&a.data)?;
    let mut setup = BenchSetup::new(&loaded.actor, &loaded.evaluator, &records, loaded.list_len);
    setup.reward = a.reward.into();
    setup.last = last_config(&loaded.actor, &a.models)?;
    let rows = run_sweep(&setup, param, &a.values)?;
    match &a.out {
        Some(path) => {
            let file = File::create(path).map_err(io_err(path))?;
            write_sweep_csv(param, &rows, BufWriter::new(file))
        }
        None => write_sweep_csv(param, &rows, stdout),
    }
}

fn serve_one(
    line: &str,
    policy: Policy,
    loaded: &Loaded,
    config: &LastConfig,
) -> Result<ServeResponse> {
    let req: ServeRequest = serde_json::from_str(line)?;
    let (ud, id) = (loaded.actor.dims().user_dim, loaded.actor.dims().item_dim);
    if req.user.len() != ud {
        return Err(Error::Contract(format!("user has {} features, expected {ud}", req.user.len())));
    }
    if let Some(c) = req.candidates.iter().find(|c| c.len() != id) {
        return Err(Error::Contract(format!("candidate has {} features, expected {id}", c.len())));
    }
    let request = Request::new(req.user, &req.candidates, req.n)?;
    let eval = &loaded.evaluator;
    let served = serve(
        policy,
        &loaded.actor,
        &request,
        |order| {
            let items = gather_rows(request.candidates(), order)?;
            eval.evaluator_at_n(request.user(), &items, order.len())
        },
        config,
    )?;
    Ok(ServeResponse {
        order: served.list.order,
        eta_star: served.eta_star,
        score: served.score,
    })
}

fn serve_stream(a: &ServeArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    let policy: Policy = a.mode.parse()?;
    let loaded = load_models(&a.models)?;
    let mut config = last_config(&loaded.actor, &a.models)?;
    if let Some(steps) = &a.step_sizes {
        config.step_sizes = steps.clone();
        config.validate()?;
    }
    let before = param_fingerprint(loaded.actor.params());
    let mut line = String::new();
    loop {
        line.clear();
        let read = stdin.read_line(&mut line).map_err(|e| Error::Io {
            path: PathBuf::from("<stdin>"),
            source: e,
        })?;
        if read == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let out = match serve_one(text, policy, &loaded, &config) {
            Ok(resp) => serde_json::to_string(&resp)?,
            Err(e) => serde_json::to_string(&ErrorResponse { error: e.to_string() })?,
        };
        writeln!(stdout, "{out}").map_err(out_err)?;
    }
    stdout.flush().map_err(out_err)?;
    if param_fingerprint(loaded.actor.params()) != before {
        return Err(Error::Contract("actor parameters changed while serving".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn policy_list_parsing() {
        let p = parse_policies(&["greedy".into(), " last".into()]).unwrap();
        assert_eq!(p, vec![Policy::Greedy, Policy::Last]);
        assert!(parse_policies(&["best".into()]).is_err());
        assert!(parse_policies(&[]).is_err());
    }
}
