//! Command-line front end for data generation, training and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use ape_core::corpus::{
    build_vocab, load_triplets, oversample_merge, save_triplets, Triplet, Vocabulary,
};
use ape_core::editalign::{hter, qe_tags};
use ape_core::models::k_max;
use ape_core::pipeline::{
    evaluate, infer, pretraining_pairs, sweep_tau, synthetic_splits, Config, Outputs, RunLog, Session,
};

#[derive(Parser, Debug)]
#[command(name = "ape", version, about = "Quality-estimation-routed automatic post-editing")]
#[command(after_long_help = config_help())]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Defaults to runs/<unix-time>-seed<seed>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the vocabulary and synthetic train/dev/test splits.
    GenData,
    /// Prints oracle tags and HTER for every triplet of a file.
    TagOracle {
        /// Triplet file (`src \t mt \t pe [\t ref]`).
        input: PathBuf,
    },
    /// Masked-fill pretraining of the shared encoders.
    Pretrain,
    /// Joint training, optionally starting from `infer.checkpoint`.
    Train,
    /// Post-edits `infer.input` (or the test split) with `infer.checkpoint`.
    Infer,
    /// Evaluates `infer.checkpoint` on the test split and prints JSON.
    Eval,
    /// Picks the routing threshold with the lowest development TER.
    SweepTau {
        /// Comma-separated thresholds in [0, 1].
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        grid: String,
    },
}

fn config_help() -> String {
    format!("Configuration keys:\n{}", Config::help_text())
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ape_core::ApeError> for Failure {
    fn from(e: ape_core::ApeError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                bail!("config file {} does not exist", path.display());
            }
            Config::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_run_dir(seed: u64) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    PathBuf::from("runs").join(format!("{secs}-seed{seed}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli).map_err(Failure::Usage)?;
    if let Command::SweepTau { grid } = &cli.command {
        parse_grid(grid).map_err(Failure::Usage)?;
    }
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| default_run_dir(cfg.seed));
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.txt"), cfg.to_text())
        .with_context(|| format!("writing config into {}", run_dir.display()))?;
    let mut log = RunLog::append_to(run_dir.join("log.ndjson"))?;
    log.record(
        "config",
        &json!({"command": command_name(&cli.command), "config": cfg.to_text()}),
    )?;
    info!("run directory {}", run_dir.display());

    match &cli.command {
        Command::GenData => gen_data(&cfg, &run_dir, &mut log),
        Command::TagOracle { input } => tag_oracle(input),
        Command::Pretrain => pretrain(&cfg, &run_dir, &mut log),
        Command::Train => train(&cfg, &run_dir, &mut log),
        Command::Infer => run_infer(&cfg, &run_dir, &mut log),
        Command::Eval => eval(&cfg, &run_dir, &mut log),
        Command::SweepTau { grid } => sweep(&cfg, grid, &run_dir, &mut log),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::TagOracle { .. } => "tag-oracle",
        Command::Pretrain => "pretrain",
        Command::Train => "train",
        Command::Infer => "infer",
        Command::Eval => "eval",
        Command::SweepTau { .. } => "sweep-tau",
    }
}

fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("grid value `{v}`: {e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("grid must be a nonempty list of values in [0, 1]");
    }
    Ok(grid)
}

/// Corpus splits and vocabulary named by the `data.*` keys. Splits whose
/// path is empty are generated synthetically.
struct Data {
    vocab: Vocabulary,
    train: Vec<Triplet>,
    dev: Vec<Triplet>,
    test: Vec<Triplet>,
}

fn load_data(cfg: &Config) -> anyhow::Result<Data> {
    let d = &cfg.data;
    let vocab = if d.vocab.is_empty() {
        Vocabulary::synthetic(d.vocab_size)?
    } else {
        Vocabulary::load(&d.vocab)?
    };
    let synthetic = synthetic_splits(cfg)?;
    let load = |path: &str, fallback: Vec<Triplet>| -> anyhow::Result<Vec<Triplet>> {
        if path.is_empty() {
            Ok(fallback)
        } else {
            Ok(load_triplets(path, &vocab)?.triplets)
        }
    };
    let mut train = load(&d.train, synthetic.train)?;
    if !d.real.is_empty() {
        let real = load_triplets(&d.real, &vocab)?.triplets;
        train = oversample_merge(&real, &train, d.oversample, cfg.seed)?;
    }
    let dev = load(&d.dev, synthetic.dev)?;
    let test = load(&d.test, synthetic.test)?;
    Ok(Data {
        vocab,
        train,
        dev,
        test,
    })
}

fn load_session(cfg: &Config) -> anyhow::Result<Session> {
    if cfg.infer.checkpoint.is_empty() {
        bail!("infer.checkpoint is not set");
    }
    let mut session = Session::load(&cfg.infer.checkpoint)
        .with_context(|| format!("loading {}", cfg.infer.checkpoint))?;
    session.cfg.infer = cfg.infer.clone();
    Ok(session)
}

fn check_vocab(session: &Session, vocab: &Vocabulary) -> anyhow::Result<()> {
    let expected = session.net.cfg.vocab_size;
    if vocab.len() != expected {
        bail!("vocabulary has {} ids but the checkpoint expects {expected}", vocab.len());
    }
    Ok(())
}

fn gen_data(cfg: &Config, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let data = load_data(cfg)?;
    data.vocab.save(run_dir.join("vocab.txt"))?;
    for (name, set) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        save_triplets(run_dir.join(format!("{name}.tsv")), set, &data.vocab)?;
        log.record("split", &json!({"name": name, "triplets": set.len()}))?;
    }
    Ok(())
}

fn tag_oracle(input: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let sentences = text
        .lines()
        .flat_map(|line| line.split('\t').take(3))
        .map(|field| field.split_whitespace().collect::<Vec<_>>());
    let vocab = build_vocab(sentences, usize::MAX)?;
    let triplets = load_triplets(input, &vocab)?.triplets;
    let mut out = std::io::stdout().lock();
    for t in &triplets {
        let q = qe_tags(&t.mt, &t.pe);
        writeln!(out, "{}\t{:.4}", q.to_line(), hter(&q).value).context("writing tags")?;
    }
    Ok(())
}

fn pretrain(cfg: &Config, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let data = load_data(cfg)?;
    let mut session = Session::new(cfg.clone(), data.vocab.len())?;
    session.pretrain(&pretraining_pairs(&data.train), log)?;
    session.save(run_dir.join("pretrain.bin"))?;
    Ok(())
}

fn train(cfg: &Config, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let data = load_data(cfg)?;
    let mut session = if cfg.infer.checkpoint.is_empty() {
        Session::new(cfg.clone(), data.vocab.len())?
    } else {
        let mut s = load_session(cfg)?;
        check_vocab(&s, &data.vocab)?;
        s.cfg = cfg.clone();
        s
    };
    let outputs = Outputs {
        run_dir: Some(run_dir.to_path_buf()),
        vocab: Some(data.vocab.clone()),
    };
    let summary = session.train(&data.train, &data.dev, log, &outputs)?;
    log.record("summary", &summary)?;
    session.save(run_dir.join("model.bin"))?;
    Ok(())
}

fn run_infer(cfg: &Config, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let session = load_session(cfg)?;
    let data = load_data(cfg)?;
    check_vocab(&session, &data.vocab)?;
    let input = if cfg.infer.input.is_empty() {
        data.test
    } else {
        load_triplets(&cfg.infer.input, &data.vocab)?.triplets
    };
    let mut lines = String::new();
    for (i, t) in input.iter().enumerate() {
        let r = infer(&session.net, &t.src, &t.mt, cfg.infer.tau, cfg.infer.iterations)?;
        lines.push_str(&data.vocab.decode(&r.output.tokens).join(" "));
        lines.push('\n');
        log.record(
            "infer",
            &json!({
                "index": i,
                "route": format!("{:?}", r.output.source_model),
                "hter": r.qe.hter.value,
                "iterations": r.output.iterations_used,
                "converged": r.output.converged,
                "truncated": r.output.truncated,
            }),
        )?;
    }
    let path = run_dir.join("output.txt");
    fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn eval(cfg: &Config, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let session = load_session(cfg)?;
    let data = load_data(cfg)?;
    check_vocab(&session, &data.vocab)?;
    let ev = evaluate(&session.net, &data.test, cfg.infer.tau, cfg.infer.iterations, k_max(&session.net))?;
    let text = serde_json::to_string(&ev).context("serializing the evaluation")?;
    fs::write(run_dir.join("eval.json"), &text).context("writing eval.json")?;
    log.record("eval", &ev)?;
    println!("{text}");
    Ok(())
}

fn sweep(cfg: &Config, grid: &str, run_dir: &Path, log: &mut RunLog) -> Result<(), Failure> {
    let grid = parse_grid(grid).map_err(Failure::Usage)?;
    let session = load_session(cfg)?;
    let data = load_data(cfg)?;
    check_vocab(&session, &data.vocab)?;
    let result = sweep_tau(&session.net, &data.dev, &grid, cfg.infer.iterations, k_max(&session.net))?;
    let text = serde_json::to_string(&result).context("serializing the sweep")?;
    fs::write(run_dir.join("sweep.json"), &text).context("writing sweep.json")?;
    log.record("sweep", &result)?;
    println!("{text}");
    Ok(())
}
