//! Command-line entry points: train, eval, play, gradcheck.
//!
//! Configuration precedence per field: command flag > config file >
//! built-in default. The seed additionally falls back to the TEMPLAR_SEED
//! environment variable. Every training run directory is self-describing:
//! `config.json` (the resolved run config) plus `model.ckpt` and
//! `metrics.csv`, so `eval` can reproduce the training-time final score
//! from the directory alone.

mod play;

pub use play::{play_loop, PlayAdvisor};

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::agent::{self, LossKind, TrainConfig, METRICS_HEADER};
use crate::rcmodel::{gradsuite, ModelConfig, RcModel, RcModelParams};
use crate::text::EmbeddingTable;
use crate::world;

/// Fixed seed for out-of-vocabulary embedding vectors; part of the run
/// definition so checkpoints replay identically.
pub const EMBED_OOV_SEED: u64 = 0x7465_6d70_6c61_72;

pub const DEFAULT_EMBEDDINGS: &str = "data/embeddings_100d.txt";

#[derive(Debug, Parser)]
#[command(name = "templar", about = "Template-action Q-learning for text games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent and write metrics, checkpoint and config sidecar.
    Train(CommonArgs),
    /// Evaluate a trained run directory with the greedy policy.
    Eval(CommonArgs),
    /// Play a game interactively (optionally with Q-value advice).
    Play(PlayArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// Game spec JSON path.
    #[arg(long)]
    pub game: Option<PathBuf>,
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output (run) directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed (falls back to $TEMPLAR_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// History retrieval window.
    #[arg(long)]
    pub k: Option<usize>,
    /// Retrieve the latest K observations regardless of shared objects.
    #[arg(long)]
    pub recency_only: bool,
    /// Disable the residual self-attention block.
    #[arg(long)]
    pub no_self_att: bool,
    /// Disable the placeholder-specific argument embeddings.
    #[arg(long)]
    pub no_arg_emb: bool,
    /// Total training updates.
    #[arg(long)]
    pub updates: Option<usize>,
    /// Evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Embedding file (defaults to the bundled one).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Discount factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Target network sync period (updates).
    #[arg(long)]
    pub target_sync: Option<usize>,
    /// Replay buffer capacity.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Fraction of each batch drawn from prioritized transitions.
    #[arg(long)]
    pub pri_frac: Option<f64>,
    /// Decay of the episode-score moving average.
    #[arg(long)]
    pub ema_beta: Option<f64>,
    /// TD-error norm: "squared" or "absolute".
    #[arg(long)]
    pub loss: Option<String>,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory whose checkpoint provides Q-value suggestions.
    #[arg(long)]
    pub advise: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Finite-difference step.
    #[arg(long, default_value_t = gradsuite::DEFAULT_STEP)]
    pub h: f64,
    /// Restrict to one block.
    #[arg(long)]
    pub block: Option<String>,
}

/// Fully resolved run definition; written verbatim as the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub game: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn sidecar_path(out: &Path) -> PathBuf {
        out.join("config.json")
    }

    pub fn checkpoint_path(out: &Path) -> PathBuf {
        out.join("model.ckpt")
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(Self::sidecar_path(out), text + "\n")?;
        Ok(())
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = Self::sidecar_path(out);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading run sidecar {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("expected a boolean, found {other:?}"),
    }
}

fn parse_loss(v: &str) -> Result<LossKind> {
    match v {
        "squared" => Ok(LossKind::Squared),
        "absolute" => Ok(LossKind::Absolute),
        other => bail!("unknown loss kind {other:?} (use squared|absolute)"),
    }
}

/// Overlay from a `key = value` config file onto defaults.
fn apply_config_file(path: &Path, cfg: &mut RunConfig, out: &mut Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let err = |e: anyhow::Error| anyhow!("{}:{}: {e}", path.display(), lineno + 1);
        match key {
            "game" => cfg.game = PathBuf::from(value),
            "embeddings" => cfg.embeddings = Some(PathBuf::from(value)),
            "out" => *out = Some(PathBuf::from(value)),
            "seed" => cfg.train.seed = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "k" => cfg.train.k = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "recency_only" => cfg.train.recency_only = parse_bool(value).map_err(err)?,
            "self_attention" => cfg.model.use_self_attention = parse_bool(value).map_err(err)?,
            "arg_embeddings" => cfg.model.use_arg_embeddings = parse_bool(value).map_err(err)?,
            "updates" => cfg.train.total_updates = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "episodes" => cfg.train.eval_episodes = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "batch_size" => cfg.train.batch_size = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "gamma" => cfg.train.gamma = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "lr" => cfg.train.lr = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "eps_start" => cfg.train.eps_start = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "eps_end" => cfg.train.eps_end = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "target_sync" => cfg.train.target_sync = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "capacity" => cfg.train.capacity = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "pri_frac" => cfg.train.pri_frac = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "ema_beta" => cfg.train.ema_beta = value.parse().map_err(|e| err(anyhow!("{e}")))?,
            "loss" => cfg.train.loss_kind = parse_loss(value).map_err(err)?,
            other => bail!("{}:{}: unknown key {other:?}", path.display(), lineno + 1),
        }
    }
    Ok(())
}

fn env_seed() -> Option<u64> {
    std::env::var("TEMPLAR_SEED").ok().and_then(|v| v.parse().ok())
}

/// Resolve flags + config file + defaults into a run config and out dir.
pub fn resolve(args: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig {
        game: PathBuf::new(),
        embeddings: None,
        model: ModelConfig::default(),
        train: TrainConfig::default(),
    };
    if let Some(seed) = env_seed() {
        cfg.train.seed = seed;
    }
    let mut out: Option<PathBuf> = None;
    if let Some(path) = &args.config {
        apply_config_file(path, &mut cfg, &mut out)?;
    }
    if let Some(g) = &args.game {
        cfg.game = g.clone();
    }
    if let Some(e) = &args.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    if let Some(o) = &args.out {
        out = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = args.k {
        cfg.train.k = k;
    }
    if args.recency_only {
        cfg.train.recency_only = true;
    }
    if args.no_self_att {
        cfg.model.use_self_attention = false;
    }
    if args.no_arg_emb {
        cfg.model.use_arg_embeddings = false;
    }
    if let Some(u) = args.updates {
        cfg.train.total_updates = u;
    }
    if let Some(e) = args.episodes {
        cfg.train.eval_episodes = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(g) = args.gamma {
        cfg.train.gamma = g;
    }
    if let Some(l) = args.lr {
        cfg.train.lr = l;
    }
    if let Some(t) = args.target_sync {
        cfg.train.target_sync = t;
    }
    if let Some(c) = args.capacity {
        cfg.train.capacity = c;
    }
    if let Some(p) = args.pri_frac {
        cfg.train.pri_frac = p;
    }
    if let Some(b) = args.ema_beta {
        cfg.train.ema_beta = b;
    }
    if let Some(l) = &args.loss {
        cfg.train.loss_kind = parse_loss(l)?;
    }
    if cfg.game.as_os_str().is_empty() {
        bail!("no game specified (use --game or a config file)");
    }
    let out = out.ok_or_else(|| anyhow!("no output directory specified (use --out)"))?;
    Ok((cfg, out))
}

/// Load the run's embedding table (bundled file when unset).
pub fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let path = cfg
        .embeddings
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_EMBEDDINGS));
    EmbeddingTable::load(&path, cfg.model.embed_dim, EMBED_OOV_SEED)
        .with_context(|| format!("loading embeddings from {}", path.display()))
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let (cfg, out) = resolve(args)?;
    let game = world::load_game_file(&cfg.game)
        .with_context(|| format!("loading game {}", cfg.game.display()))?;
    let embeds = load_embeddings(&cfg)?;
    fs::create_dir_all(&out)?;

    let outcome = agent::run_training(&game, cfg.model, &cfg.train, &embeds)?;

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for row in &outcome.metrics {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), csv)?;
    outcome.params.save(&RunConfig::checkpoint_path(&out))?;
    cfg.save(&out)?;
    println!(
        "trained {} for {} updates ({} episodes, {} env steps)",
        game.name, cfg.train.total_updates, outcome.episodes, outcome.env_steps
    );
    println!("final eval score: {}", outcome.final_eval);
    Ok(())
}

pub fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let run_dir = args
        .out
        .clone()
        .ok_or_else(|| anyhow!("eval needs --out pointing at a run directory"))?;
    let mut cfg = RunConfig::load(&run_dir)?;
    if let Some(g) = &args.game {
        cfg.game = g.clone();
    }
    if let Some(e) = &args.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    if let Some(k) = args.k {
        cfg.train.k = k;
    }
    if args.recency_only {
        cfg.train.recency_only = true;
    }
    let episodes = args.episodes.unwrap_or(cfg.train.eval_episodes);
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let game = world::load_game_file(&cfg.game)
        .with_context(|| format!("loading game {}", cfg.game.display()))?;
    let embeds = load_embeddings(&cfg)?;
    let params = RcModelParams::load(&RunConfig::checkpoint_path(&run_dir), cfg.model)?;
    let model = RcModel::new(params);

    let mut rows = String::from("episode,score\n");
    let mut total = 0.0;
    for ep in 0..episodes {
        let score = agent::evaluate(&model, &game, &embeds, 1, cfg.train.k, cfg.train.recency_only)?;
        rows.push_str(&format!("{},{}\n", ep + 1, score));
        total += score;
    }
    let mean = total / episodes as f64;
    fs::write(run_dir.join("eval.csv"), rows)?;
    println!("mean score over {episodes} episodes: {mean}");
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if let Some(block) = &args.block {
        if !gradsuite::block_names().contains(&block.as_str()) {
            bail!(
                "unknown block {:?}; available: {}",
                block,
                gradsuite::block_names().join(", ")
            );
        }
    }
    let results = gradsuite::run_suite(args.h, args.block.as_deref(), gradsuite::DEFAULT_TOLERANCE);
    let mut all_pass = true;
    for r in &results {
        println!(
            "{}: max_rel_err={:.3e} {}",
            r.name,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    if !all_pass {
        bail!("gradient check failed");
    }
    Ok(())
}

pub fn cmd_play(args: &PlayArgs) -> Result<()> {
    let game_path = args
        .common
        .game
        .clone()
        .ok_or_else(|| anyhow!("play needs --game"))?;
    let game = world::load_game_file(&game_path)
        .with_context(|| format!("loading game {}", game_path.display()))?;
    let advisor = match &args.advise {
        None => None,
        Some(run_dir) => {
            let cfg = RunConfig::load(run_dir)?;
            let embeds = load_embeddings(&cfg)?;
            let params = RcModelParams::load(&RunConfig::checkpoint_path(run_dir), cfg.model)?;
            Some(PlayAdvisor {
                model: RcModel::new(params),
                embeds,
                k: cfg.train.k,
                recency_only: cfg.train.recency_only,
            })
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    play_loop(&game, advisor, stdin.lock(), stdout.lock())?;
    Ok(())
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Play(args) => cmd_play(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
