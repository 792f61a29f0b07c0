use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qsan::checkpoint;
use qsan::data::{self, write_atomic, CorpusExample, Embeddings};
use qsan::explain::report;
use qsan::gradcheck::GradCheckConfig;
use qsan::synth::separable_corpus;
use qsan::trainer::{self, train_test_split, write_loss_history};
use qsan::{AttentionMode, EmbeddingMode, QsanModel, TrainConfig};

/// Train, evaluate and explain a signed-attention false-information detector.
#[derive(Parser, Debug)]
#[command(name = "qsan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write a checkpoint plus its loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Write one explanation record per post.
    Explain(ExplainArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Drop duplicate and short comments, then posts with too few comments.
    Preprocess(PreprocessArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttentionFlag {
    Signed,
    Co,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmbeddingFlag {
    Complex,
    Real,
}

/// Hyperparameters from an optional JSON file, then flag overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON object with any subset of: d (8), k (8), z (16), max_tokens (32),
    /// max_sentences (8), max_comments (32), learning_rate (0.001), epochs (20),
    /// seed (0), attention_mode ("signed"), embedding_mode ("complex"),
    /// optimizer ("adam" | "sgd").
    #[arg(long, verbatim_doc_comment)]
    config: Option<PathBuf>,
    /// Overrides `seed` [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `epochs` [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `attention_mode` [default: signed].
    #[arg(long, value_enum)]
    attention: Option<AttentionFlag>,
    /// Overrides `embedding_mode` [default: complex].
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingFlag>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
                TrainConfig::from_json(&text).with_context(|| format!("{}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(a) = self.attention {
            cfg.attention_mode = match a {
                AttentionFlag::Signed => AttentionMode::Signed,
                AttentionFlag::Co => AttentionMode::Co,
            };
        }
        if let Some(e) = self.embedding {
            cfg.embedding_mode = match e {
                EmbeddingFlag::Complex => EmbeddingMode::Complex,
                EmbeddingFlag::Real => EmbeddingMode::Real,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss history (TSV); defaults to `<out>.loss.tsv`.
    #[arg(long)]
    loss_history: Option<PathBuf>,
    /// Hold out a seeded 25% split, written here as JSONL, and train on the rest.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Pretrained word vectors (`token v1 .. vd` per line).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics record (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Explanation records (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Length of each ranked comment list.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Corpus to check on; defaults to two synthetic posts.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fail when the worst relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    /// Filtered corpus (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Drop counts (JSON); defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_examples(path: &Path) -> Result<Vec<CorpusExample>> {
    let loaded = data::load_corpus(path)?;
    if loaded.examples.is_empty() {
        bail!("{}: no valid examples", path.display());
    }
    Ok(loaded.examples)
}

fn check_writable(path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        bail!("{}: output directory does not exist", path.display());
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record serializes")
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let loss_path = args.loss_history.clone().unwrap_or_else(|| with_suffix(&args.out, ".loss.tsv"));
    for p in [Some(&args.out), Some(&loss_path), args.test_out.as_ref()].into_iter().flatten() {
        check_writable(p)?;
    }
    let corpus = load_examples(&args.data)?;
    let embeddings: Option<Embeddings> = args
        .embeddings
        .as_ref()
        .map(|p| data::load_embeddings(p, cfg.d))
        .transpose()?;
    let (train_set, test_set) = match &args.test_out {
        Some(_) => train_test_split(&corpus, cfg.seed),
        None => (corpus, Vec::new()),
    };
    if train_set.is_empty() {
        bail!("{}: training split is empty", args.data.display());
    }
    let (model, history) = trainer::fit(&train_set, &cfg, embeddings.as_ref())?;
    checkpoint::save(&model, &args.out)?;
    write_loss_history(&loss_path, &history)?;
    if let Some(p) = &args.test_out {
        data::write_corpus(p, &test_set)?;
    }
    log::info!(
        "trained on {} posts; final loss {}",
        train_set.len(),
        history.last().map_or(f64::NAN, |l| *l)
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    if let Some(p) = &args.out {
        check_writable(p)?;
    }
    let model = checkpoint::load(&args.model)?;
    let corpus = load_examples(&args.data)?;
    let metrics = trainer::evaluate(&model, &corpus)?;
    let line = json_line(&metrics);
    if let Some(p) = &args.out {
        write_atomic(p, format!("{line}\n").as_bytes())?;
    }
    println!("{line}");
    Ok(())
}

fn explain(args: &ExplainArgs) -> Result<()> {
    if args.k == 0 {
        bail!("--k must be positive");
    }
    check_writable(&args.out)?;
    let model = checkpoint::load(&args.model)?;
    let corpus = load_examples(&args.data)?;
    let mut out = String::new();
    for ex in &corpus {
        let rec = report(ex, &model, args.k).with_context(|| format!("post `{}`", ex.id))?;
        out.push_str(&json_line(&rec));
        out.push('\n');
    }
    write_atomic(&args.out, out.as_bytes())?;
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.step > 0.0 && args.tolerance > 0.0) {
        bail!("--step and --tolerance must be positive");
    }
    let cfg = args.config.resolve()?;
    let corpus = match &args.data {
        Some(p) => load_examples(p)?,
        None => separable_corpus(2, cfg.seed),
    };
    let model = QsanModel::new(cfg, &corpus, None)?;
    let prepared = corpus.iter().map(|ex| model.prepare(ex)).collect::<qsan::Result<Vec<_>>>()?;
    let report = model.grad_check(
        &prepared,
        GradCheckConfig {
            step: args.step,
            ..GradCheckConfig::default()
        },
    )?;
    for p in &report.params {
        log::info!("{}: {:.3e} over {} entries", p.name, p.max_rel_error, p.entries_checked);
    }
    let worst = report.worst().context("model has no trainable parameters")?;
    let entries: usize = report.params.iter().map(|p| p.entries_checked).sum();
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": worst.max_rel_error,
            "param": worst.name,
            "groups": report.params.len(),
            "entries": entries,
        })
    );
    if worst.max_rel_error.is_nan() || worst.max_rel_error >= args.tolerance {
        bail!(
            "gradient check failed: `{}` has relative error {:e} >= {:e}",
            worst.name,
            worst.max_rel_error,
            args.tolerance
        );
    }
    Ok(())
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let report_path = args.report.clone().unwrap_or_else(|| with_suffix(&args.out, ".report.json"));
    check_writable(&args.out)?;
    check_writable(&report_path)?;
    let loaded = data::load_corpus(&args.data)?;
    let (kept, report) = data::preprocess(&loaded.examples);
    data::write_corpus(&args.out, &kept)?;
    write_atomic(&report_path, format!("{}\n", json_line(&report)).as_bytes())?;
    println!("{}", json_line(&report));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Preprocess(a) => preprocess(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}
