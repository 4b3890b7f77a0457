//! Command-line verbs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mug_core::agent::Variant;
use mug_core::eval::{
    append_episodes, evaluate, f1_at, replay_offline, EvalOptions, EvalReport, GammaFilter, Mode, ModelAgent,
};
use mug_core::generator::{generate_corpus, generate_screen, split_corpus, CorpusConfig, GeneratorConfig};
use mug_core::io::{load_corpus, read_sessions, save_corpus};
use mug_core::report::{aggregate, aggregate_csv, render_table};
use mug_core::screen::{Corpus, Screen, SplitTag, MAX_TURNS};
use mug_core::train::{train, Checkpoint, TrainConfig};
use mug_core::usersim::UserKind;
use mug_core::vocab::Vocab;

use crate::service::{router, AppState, OwnedModelAgent};

#[derive(Debug, Parser)]
#[command(name = "mug", version, about = "Multi-turn UI grounding: corpora, training, evaluation and live sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with app-wise splits.
    GenCorpus(GenCorpusArgs),
    /// Train one agent variant and save the best-dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint offline or online on one split.
    Eval(EvalArgs),
    /// Serve live sessions over HTTP.
    Serve(ServeArgs),
    /// Replay recorded sessions through a checkpoint.
    Replay(ReplayArgs),
    /// Aggregate evaluation reports from several seeds into mean ± std.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub screens: usize,
    /// Mean sessions per screen.
    #[arg(long, default_value_t = 2.5)]
    pub sessions_per_screen: f64,
    /// Only 1-turn sessions whose opening command is unambiguous.
    #[arg(long)]
    pub unique_one_turn: bool,
    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub variant: Variant,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub dev_limit: Option<usize>,
    /// Receives `best/`, `last/` and `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "online")]
    pub mode: Mode,
    #[arg(long, default_value = "heuristic")]
    pub user: UserKind,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Let the agent re-select earlier picks (stress testing Γ only).
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long, default_value = "exactly_once")]
    pub gamma_filter: GammaFilter,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Receives `report.json`, `report.csv`; episodes are appended to `episodes.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose screens are served; synthetic screens when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Terminal transcripts are appended under this directory.
    #[arg(long, env = "MUG_DATA_DIR", default_value = "mug-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Session JSONL file.
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus holding the referenced screens.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` files or directories containing one.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Writes `aggregate.csv` and `aggregate.txt` here when given.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay(a),
        Command::Report(a) => report(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = CorpusConfig {
        seed: a.seed,
        num_screens: a.screens,
        sessions_per_screen: a.sessions_per_screen,
        unique_one_turn_only: a.unique_one_turn,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg)?;
    let corpus = split_corpus(corpus, [a.split[0], a.split[1], a.split[2]])?;
    save_corpus(&a.out, &corpus)?;
    println!("{} screens, {} sessions -> {}", corpus.screens.len(), corpus.sessions.len(), a.out.display());
    Ok(())
}

fn load_checked_corpus(dir: &Path) -> Result<(Corpus, Vocab)> {
    let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    let vocab = if corpus.vocab.is_empty() {
        Vocab::bundled()
    } else {
        Vocab::from_lines(&corpus.vocab.join("\n")).map_err(anyhow::Error::msg)?
    };
    Ok((corpus, vocab))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (corpus, vocab) = load_checked_corpus(&a.corpus)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.variant = a.variant;
    if let Some(v) = a.steps {
        cfg.total_steps = v;
        if a.warmup.is_none() && cfg.warmup_steps >= v {
            cfg.warmup_steps = v / 10;
        }
    }
    if let Some(v) = a.warmup {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if a.dev_limit.is_some() {
        cfg.dev_limit = a.dev_limit;
    }
    fs::create_dir_all(&a.out)?;
    let out = train(&corpus, &vocab, &cfg, Some(&a.out.join("metrics.csv")))?;
    out.best.save(&a.out.join("best"))?;
    out.last.save(&a.out.join("last"))?;
    println!(
        "best dev F1@{} {:.4} at step {} -> {}",
        MAX_TURNS - 1,
        out.best.manifest.dev_metric.unwrap_or(f64::NAN),
        out.best.manifest.step,
        a.out.join("best").display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<SplitTag> {
    Ok(match s {
        "train" => SplitTag::Train,
        "dev" => SplitTag::Dev,
        "test" => SplitTag::Test,
        "none" => SplitTag::None,
        other => bail!("unknown split {other:?}"),
    })
}

/// Accepts a checkpoint directory or a training output directory with `best/`.
fn load_checkpoint(path: &Path, vocab: Option<&Vocab>) -> Result<Checkpoint> {
    let dir = if path.join("best").join(mug_core::train::MANIFEST_FILE).exists() { path.join("best") } else { path.to_owned() };
    Ok(Checkpoint::load(&dir, vocab)?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (corpus, vocab) = load_checked_corpus(&a.corpus)?;
    let ck = load_checkpoint(&a.checkpoint, Some(&vocab))?;
    let split = parse_split(&a.split)?;
    let sessions = corpus.sessions_in(split);
    if sessions.is_empty() {
        bail!("split {split} is empty");
    }
    let agent = ModelAgent::new(&ck.model, ck.manifest.variant, &vocab);
    let opts = EvalOptions {
        mode: a.mode,
        user: a.user,
        seed: a.seed,
        mask: !a.no_mask,
        gamma_filter: a.gamma_filter,
        max_turns: MAX_TURNS,
        workers: a.workers,
    };
    let (report, episodes) = evaluate(&agent, &corpus, &sessions, &opts)?;
    report.write(&a.out)?;
    append_episodes(&a.out.join("episodes.jsonl"), &episodes)?;
    print!("{}", render_table(&aggregate(std::slice::from_ref(&report))));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let (screens, vocab): (BTreeMap<String, Screen>, Vocab) = match &a.corpus {
        Some(dir) => {
            let (c, v) = load_checked_corpus(dir)?;
            (c.screens, v)
        }
        None => {
            let cfg = GeneratorConfig::default();
            let screens = (0..64u64)
                .map(|k| generate_screen(a.seed.wrapping_mul(1_000_003).wrapping_add(k), &cfg).map(|s| (s.screen_id.clone(), s)))
                .collect::<Result<_, _>>()?;
            (screens, Vocab::bundled())
        }
    };
    if vocab.digest() != ck.manifest.vocab_digest {
        bail!("checkpoint vocabulary does not match the corpus vocabulary");
    }
    fs::create_dir_all(&a.data_dir).with_context(|| format!("creating {}", a.data_dir.display()))?;
    let agent = OwnedModelAgent { model: ck.model, variant: ck.manifest.variant, vocab };
    let state = Arc::new(AppState::new(Arc::new(agent), screens, Some(a.data_dir.clone()), a.seed));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}

fn replay(a: ReplayArgs) -> Result<()> {
    let (corpus, vocab) = load_checked_corpus(&a.corpus)?;
    let ck = load_checkpoint(&a.checkpoint, Some(&vocab))?;
    let sessions = read_sessions(&a.sessions)?;
    if sessions.is_empty() {
        bail!("{} has no sessions", a.sessions.display());
    }
    let agent = ModelAgent::new(&ck.model, ck.manifest.variant, &vocab);
    let mut success = Vec::with_capacity(sessions.len());
    for s in &sessions {
        let screen = corpus.screen(&s.screen_id).with_context(|| format!("session {}: unknown screen {}", s.session_id, s.screen_id))?;
        let rec = replay_offline(&agent, s, screen, !a.no_mask).with_context(|| format!("session {}", s.session_id))?;
        println!("{}", serde_json::to_string(&rec)?);
        success.push(rec.success_turn);
    }
    let f1: Vec<String> = (0..MAX_TURNS).map(|t| format!("F1@{t}={:.4}", f1_at(&success, t).expect("non-empty"))).collect();
    eprintln!("{} sessions: {}", sessions.len(), f1.join(" "));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.runs.len());
    for p in &a.runs {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        reports.push(EvalReport::read(&file)?);
    }
    let rows = aggregate(&reports);
    let table = render_table(&rows);
    print!("{table}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("aggregate.csv"), aggregate_csv(&rows))?;
        fs::write(out.join("aggregate.txt"), table)?;
    }
    Ok(())
}
