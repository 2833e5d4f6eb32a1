//! `ctvqa`: generate synthetic CT-VQA data, train, evaluate, answer and
//! export graph attention.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctvqa::checkpoint;
use ctvqa::data::io::{generate_dataset, load_dataset, read_volume, write_dataset};
use ctvqa::decoder::probabilities;
use ctvqa::eval::{evaluate_split, worker_threads};
use ctvqa::{
    AttentionNorm, Error, GraphVariant, PromptMode, RunConfig, Split, SynthConfig, VqaModel, Vocabulary,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ctvqa", version, about = "Cross-modal graph question answering over synthetic CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (volumes, QA JSONL, manifest).
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Greedy-decode a split and score it.
    Evaluate(EvaluateArgs),
    /// Answer one question about one volume.
    Answer(AnswerArgs),
    /// Export graph attention for one question as JSON or CSV.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training volumes; dev and test get a tenth each (at least one).
    #[arg(long)]
    volumes: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (falls back to `paths.data` in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path (falls back to `paths.out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<GraphVariant>,
    #[arg(long)]
    prompt_mode: Option<PromptMode>,
    #[arg(long)]
    attention_norm: Option<AttentionNorm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for report.json, report.txt and predictions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnswerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    question: String,
    /// Also print the k most likely tokens at each step.
    #[arg(long, default_value_t = 0)]
    top_k: usize,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    question: String,
    /// `.csv` writes `layer,j,k,w` rows; anything else writes JSON.
    #[arg(long)]
    out: PathBuf,
}

/// A refusal that is the caller's fault rather than the data's.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::NoTrace(_) => EXIT_USAGE,
                Error::NonFinite(_) | Error::DegenerateRow { .. } | Error::Shape { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Answer(a) => answer(a),
        Command::DumpAttention(a) => dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty {
            return Err(usage(format!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    let mut cfg = SynthConfig::default();
    if let Some(k) = a.volumes {
        if k == 0 {
            return Err(usage("--volumes must be positive"));
        }
        cfg.train_volumes = k;
        cfg.dev_volumes = (k / 10).max(1);
        cfg.test_volumes = (k / 10).max(1);
    }
    let ds = generate_dataset(a.seed, &cfg)?;
    write_dataset(&a.out, &ds).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    for (split, data) in &ds.splits {
        println!("{split}: {} volumes, {} questions", data.volumes.len(), data.items.len());
    }
    Ok(())
}

/// Flag over file over default.
fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.graph.variant = v;
    }
    if let Some(m) = a.prompt_mode {
        cfg.decoder.prompt_mode = m;
    }
    if let Some(n) = a.attention_norm {
        cfg.graph.attention_norm = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(d) = &a.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.paths.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn loss_curve_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.json");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let data_dir = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| usage("no dataset: pass --data or set paths.data"))?;
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| usage("no checkpoint path: pass --out or set paths.out"))?;
    let ds = load_dataset(&data_dir, &[Split::Train])
        .with_context(|| format!("loading {}", data_dir.display()))?;
    let mut model = VqaModel::new(cfg.model(), cfg.train.seed)?;
    let report = ctvqa::train::train_with(&mut model, ds.split(Split::Train), &cfg.train, |e| {
        println!("epoch {} loss {:.6} ({} batches)", e.epoch + 1, e.mean_loss, e.batches);
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(&out, &model, &cfg.train)?;
    fs::write(loss_curve_path(&out), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let ds = load_dataset(&a.data, &[a.split]).with_context(|| format!("loading {}", a.data.display()))?;
    let ev = evaluate_split(&model, ds.split(a.split), worker_threads())?;
    let table = ev.report.to_table();
    print!("{table}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), ev.report.to_json()?)?;
        fs::write(dir.join("report.txt"), &table)?;
        let mut lines = String::new();
        for p in &ev.predictions {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        fs::write(dir.join("predictions.jsonl"), lines)?;
    }
    Ok(())
}

fn answer(a: AnswerArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let volume = read_volume(&a.volume).with_context(|| format!("reading {}", a.volume.display()))?;
    let ans = model.answer(&volume, &a.question)?;
    for w in &ans.unknown_words {
        eprintln!("warning: '{w}' is not in the vocabulary and was read as UNK");
    }
    println!("{}", ans.text);
    if a.top_k > 0 {
        let vocab = Vocabulary::synthetic();
        for (step, logits) in ans.decoded.step_logits.iter().enumerate() {
            let probs = probabilities(logits);
            let mut ranked: Vec<usize> = (0..probs.len()).collect();
            // stable sort keeps the lower id first on ties
            ranked.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]));
            let top: Vec<String> = ranked
                .iter()
                .take(a.top_k)
                .map(|&id| format!("{}={:.4}", vocab.word(id).unwrap_or("?"), probs[id]))
                .collect();
            println!("step {}: {}", step + 1, top.join(" "));
        }
    }
    Ok(())
}

fn dump_attention(a: DumpArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let volume = read_volume(&a.volume).with_context(|| format!("reading {}", a.volume.display()))?;
    if a.question.trim().is_empty() {
        bail!(Error::Input("question is empty".into()));
    }
    let trace = model.volume_attention_trace(&volume, &a.question)?;
    let is_csv = a
        .out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let text = if is_csv { trace.to_csv() } else { trace.to_json()? + "\n" };
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    let importance: Vec<String> = trace.slice_importance.iter().map(|v| format!("{v:.4}")).collect();
    println!("slice importance: {}", importance.join(" "));
    Ok(())
}
