//! `gatelora` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 integrity
//! failure, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gatelora::corpus::{self, Corpus, CorpusConfig, Truncation};
use gatelora::evaluator::{self, EchoOracle, Generator, RandomTokens};
use gatelora::experiments::{self, ExperimentName, ExperimentSpec, Scale};
use gatelora::trainer::{self, PretrainConfig, TrainConfig};
use gatelora::{checkpoint, gating, Error, Model, SamplingConfig};

#[derive(Parser, Debug)]
#[command(name = "gatelora", version, about = "Aspect-gated LoRA mixtures on a toy controllable-generation corpus")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test corpus.
    GenData {
        /// Corpus config JSON (fields of CorpusConfig).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training samples per aspect before truncation.
        #[arg(long)]
        per_aspect: Option<usize>,
        /// Truncate some aspects, e.g. `sent,keyword,multi:1000`.
        #[arg(long)]
        truncate: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the frozen base model on instruction-free texts.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining config JSON (fields of PretrainConfig).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters (or fine-tune everything) on top of a base checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Training config JSON (fields of TrainConfig; missing ones default).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a reference oracle on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        oracle: Option<Oracle>,
        /// Sampling config JSON (fields of SamplingConfig).
        #[arg(long)]
        sampling: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted experiment over several seeds.
    Experiment {
        #[arg(long, value_parser = parse_experiment)]
        name: ExperimentName,
        /// ExperimentSpec JSON; `name` on the command line wins.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum, default_value_t = ScaleArg::Toy)]
        scale: ScaleArg,
        /// Directory for memoized models shared across invocations.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump gate weights or pooled hidden states as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        /// Corpus directory; required for hidden states.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Oracle {
    /// Echoes each reference target.
    Echo,
    /// Uniform random tokens.
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Toy,
    Smoke,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportKind {
    GateTable,
    HiddenStates,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn parse_experiment(s: &str) -> Result<ExperimentName, String> {
    ExperimentName::parse(s).map_err(|e| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 2;
    };
    match e {
        Error::Integrity(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::Divergence { .. } => 4,
        Error::Dimension { .. } => 1,
        _ => 2,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e)).with_context(|| format!("reading config {}", path.display()))?;
    let v = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(v)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Record the fully resolved inputs of a command next to its outputs.
fn snapshot(out: &Path, command: &str, resolved: Value) -> anyhow::Result<()> {
    write_json(
        &out.join("config.json"),
        &json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "resolved": resolved }),
    )
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    corpus::read_corpus(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let (model, _) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn cmd_gen_data(
    config: Option<&Path>,
    seed: Option<u64>,
    per_aspect: Option<usize>,
    truncate: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg: CorpusConfig = match config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = per_aspect {
        cfg.train_per_aspect = vec![n; corpus::N_ASPECTS];
    }
    if let Some(t) = truncate {
        cfg.truncate = Some(Truncation::parse(t)?);
    }
    let c = corpus::generate_corpus(&cfg)?;
    corpus::write_corpus(out, &c)?;
    snapshot(out, "gen-data", serde_json::to_value(&cfg)?)?;
    println!(
        "wrote {} train and {} test samples to {}",
        c.train.len(),
        c.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let mut cfg: PretrainConfig = match config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = corpus.vocab.len();
    }
    let samples = corpus::pretraining_samples(&corpus, cfg.toxic_samples, cfg.seed);
    let (model, mut report) = trainer::pretrain_base(&samples, &cfg)?;
    make_dir(out)?;
    let ckpt = out.join("base.ckpt");
    checkpoint::save(&model, &ckpt, &Default::default())?;
    report.checkpoint = Some(ckpt.display().to_string());
    write_json(&out.join("report.json"), &report)?;
    snapshot(out, "pretrain", json!({ "data": data, "pretrain": cfg }))?;
    let last = report.epochs.last().map_or(f64::NAN, |e| e.lp);
    println!("base model: final L_p {last:.4}, checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_train(data: &Path, base: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let base = load_model(base)?;
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (model, mut report) = trainer::train_adapters(&base, &corpus.train, &cfg)?;
    make_dir(out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&model, &ckpt, &Default::default())?;
    report.checkpoint = Some(ckpt.display().to_string());
    write_json(&out.join("report.json"), &report)?;
    snapshot(out, "train", json!({ "data": data, "train": cfg }))?;
    println!(
        "trained {:?}: {} of {} parameters ({}%), checkpoint {}",
        cfg.mode,
        report.trainable_params,
        report.total_params,
        report.trainable_percent,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(
    data: &Path,
    checkpoint: Option<&Path>,
    oracle: Option<Oracle>,
    sampling: Option<&Path>,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let sampling: SamplingConfig = match sampling {
        Some(p) => read_json(p)?,
        None => SamplingConfig::default(),
    };
    let model;
    let echo = EchoOracle;
    let random = RandomTokens {
        vocab_size: corpus.vocab.len(),
        length: sampling.max_new_tokens,
    };
    let (generator, label): (&dyn Generator, String) = match (checkpoint, oracle) {
        (Some(p), _) => {
            model = load_model(p)?;
            (&model, p.display().to_string())
        }
        (None, Some(Oracle::Echo)) => (&echo, "echo".into()),
        (None, Some(Oracle::Random)) => (&random, "random".into()),
        (None, None) => bail!(Error::Config("need --checkpoint or --oracle".into())),
    };
    let (table, records) = evaluator::evaluate_model(generator, &corpus.vocab, &corpus.test, &sampling, seed)?;
    make_dir(out)?;
    write_json(&out.join("scores.json"), &table)?;
    let text = evaluator::render_table(&[(label.clone(), table)]);
    std::fs::write(out.join("table.txt"), &text).map_err(|e| Error::io(out.join("table.txt"), e))?;
    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    std::fs::write(out.join("records.jsonl"), lines).map_err(|e| Error::io(out.join("records.jsonl"), e))?;
    snapshot(
        out,
        "eval",
        json!({ "data": data, "generator": label, "sampling": sampling, "seed": seed }),
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_experiment(
    name: ExperimentName,
    config: Option<&Path>,
    seeds: Option<Vec<u64>>,
    scale: ScaleArg,
    cache: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut spec = match config {
        Some(p) => read_json::<ExperimentSpec>(p)?,
        None => {
            let mut s = ExperimentSpec::new(name);
            if let ScaleArg::Smoke = scale {
                s.scale = Scale::smoke();
            }
            s
        }
    };
    spec.name = name;
    if let Some(s) = seeds {
        spec.seeds = s;
    }
    let result = experiments::run_experiment(&spec, cache)?;
    let dir = out.join(name.as_str());
    experiments::emit_report(&result, &dir)?;
    snapshot(&dir, "experiment", serde_json::to_value(&spec)?)?;
    print!("{}", experiments::render_report(&result));
    if let Some(failed) = result.seeds.iter().find(|s| s.error.is_some()) {
        bail!(
            "seed {} failed: {}",
            failed.seed,
            failed.error.as_deref().unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_export(checkpoint: &Path, what: ExportKind, data: Option<&Path>, split: Split, out: &Path) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    make_dir(out)?;
    match what {
        ExportKind::GateTable => {
            let gate = model
                .gate_params()
                .ok_or_else(|| Error::Config("checkpoint has no gate".into()))?;
            let rows = gating::export_gate_table(&gate)?;
            let path = out.join("gate_table.csv");
            std::fs::write(&path, gating::gate_table_csv(&rows)).map_err(|e| Error::io(&path, e))?;
            println!("wrote {} gate rows to {}", rows.len(), path.display());
        }
        ExportKind::HiddenStates => {
            let data = data.ok_or_else(|| Error::Config("--data is required for hidden states".into()))?;
            let corpus = load_corpus(data)?;
            let samples = match split {
                Split::Train => &corpus.train,
                Split::Test => &corpus.test,
            };
            let path = out.join("hidden_states.csv");
            let rows = evaluator::export_hidden_states(&model, samples, &path)?;
            println!("wrote {} pooled hidden states to {}", rows.len(), path.display());
        }
    }
    snapshot(
        out,
        "export",
        json!({ "checkpoint": checkpoint, "what": format!("{what:?}"), "data": data, "split": format!("{split:?}") }),
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            per_aspect,
            truncate,
            out,
        } => cmd_gen_data(config.as_deref(), seed, per_aspect, truncate.as_deref(), &out),
        Command::Pretrain { data, config, seed, out } => cmd_pretrain(&data, config.as_deref(), seed, &out),
        Command::Train {
            data,
            base,
            config,
            seed,
            out,
        } => cmd_train(&data, &base, config.as_deref(), seed, &out),
        Command::Eval {
            data,
            checkpoint,
            oracle,
            sampling,
            seed,
            out,
        } => cmd_eval(&data, checkpoint.as_deref(), oracle, sampling.as_deref(), seed, &out),
        Command::Experiment {
            name,
            config,
            seeds,
            scale,
            cache,
            out,
        } => cmd_experiment(name, config.as_deref(), seeds, scale, cache.as_deref(), &out),
        Command::Export {
            checkpoint,
            what,
            data,
            split,
            out,
        } => cmd_export(&checkpoint, what, data.as_deref(), split, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
