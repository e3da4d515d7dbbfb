//! `itersrl`: synthetic data, two-stage training, prediction, scoring and
//! error analysis for dependency SRL.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use itersrl::bundle::{BaselineBundle, Predictor, RefinerBundle};
use itersrl::checkpoint::Checkpoint;
use itersrl::conll::{extract_instances, parse_corpus, write_predictions, Prediction, Sentence};
use itersrl::encoder::WordVectors;
use itersrl::eval::{confusion_and_correction, constraint_violations, labeled_f1};
use itersrl::refiner::RefineMode;
use itersrl::synth::{generate, split, write_generated, GrammarConfig};
use itersrl::train::{train_baseline, train_refiner, Stage, TrainConfig};
use itersrl::vocab::Vocabulary;

const BASELINE_CKPT: &str = "baseline.ckpt";
const REFINER_CKPT: &str = "refiner.ckpt";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser, Debug)]
#[command(
    name = "itersrl",
    version,
    about = "Dependency SRL with iterative structured refinement"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with train/dev/test splits.
    GenSynth(GenSynth),
    /// Train the factorized baseline.
    TrainBaseline(TrainBaseline),
    /// Train a refiner on top of a trained baseline.
    TrainRefiner(TrainRefiner),
    /// Label a CoNLL-2009 file.
    Predict(Predict),
    /// Score predictions against gold.
    Evaluate(Evaluate),
    /// Constraint violations and role confusion of baseline vs refined output.
    Analyze(Analyze),
}

#[derive(Args, Debug)]
struct GenSynth {
    /// File of `key = value` grammar settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sentences: Option<usize>,
    /// Train/dev/test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    split: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Grammar overrides, `key=value`.
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainCommon {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// File of `key = value` training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training overrides, `key=value`.
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainBaseline {
    #[command(flatten)]
    common: TrainCommon,
    /// Pretrained word vectors, one `word v1 v2 ...` per line.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RefinerKind {
    #[value(name = "self")]
    SelfRefine,
    Structured,
}

#[derive(Args, Debug)]
struct TrainRefiner {
    #[command(flatten)]
    common: TrainCommon,
    /// Directory written by `train-baseline`.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<RefinerKind>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Separate encoder and decoder weights.
    #[arg(long)]
    untied: bool,
    /// Train on clean baseline distributions.
    #[arg(long)]
    no_gumbel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictMode {
    Baseline,
    #[value(name = "self")]
    SelfRefine,
    Structured,
}

#[derive(Args, Debug)]
struct Predict {
    /// Directory written by `train-baseline`.
    #[arg(long)]
    baseline: PathBuf,
    /// Directory written by `train-refiner`; required unless the mode is
    /// `baseline`.
    #[arg(long)]
    refiner: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "structured")]
    mode: PredictMode,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// CoNLL-2009 input.
    #[arg(long)]
    input: PathBuf,
    /// CoNLL-2009 output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct Evaluate {
    gold: PathBuf,
    predicted: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Analyze {
    gold: PathBuf,
    baseline: PathBuf,
    refined: PathBuf,
    /// Labels of the confusion matrices.
    #[arg(long, default_value = "A0,A1,A2,AM")]
    labels: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainBaseline(a) => cmd_train_baseline(a),
        Command::TrainRefiner(a) => cmd_train_refiner(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_corpus(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Config file first, then `key=value` overrides.
fn configure(
    config: Option<&Path>,
    overrides: &[String],
    mut set: impl FnMut(&str, &str) -> itersrl::Result<()>,
) -> Result<()> {
    if let Some(path) = config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
            set(k.trim(), v.trim()).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not key=value"))?;
        set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let mut cfg = GrammarConfig::default();
    configure(a.config.as_deref(), &a.overrides, |k, v| cfg.set(k, v))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.sentences {
        cfg.sentences = n;
    }
    cfg.validate()?;
    let fractions = a
        .split
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .with_context(|| format!("bad split fraction `{f}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    if fractions.len() != 3 {
        bail!("--split needs three fractions (train, dev, test)");
    }
    write_generated(&cfg, &a.out)?;
    let parts = split(&generate(&cfg)?, &fractions, cfg.seed)?;
    for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
        write_file(
            &a.out.join(format!("{name}.conll")),
            itersrl::conll::write_corpus(part),
        )?;
    }
    log::info!(
        "wrote {} sentences ({}/{}/{}) to {}",
        cfg.sentences,
        parts[0].len(),
        parts[1].len(),
        parts[2].len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(stage: Stage, c: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_stage(stage);
    configure(c.config.as_deref(), &c.overrides, |k, v| cfg.set(k, v))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_run(out: &Path, cfg: &TrainConfig, log_text: &str) -> Result<()> {
    write_file(&out.join("config.txt"), cfg.to_text())?;
    write_file(&out.join("train.log"), log_text)
}

fn cmd_train_baseline(a: TrainBaseline) -> Result<()> {
    let mut cfg = train_config(Stage::Baseline, &a.common)?;
    if let Some(p) = &a.vectors {
        cfg.word_vectors = Some(p.display().to_string());
    }
    cfg.validate()?;
    let vectors = match &cfg.word_vectors {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
            Some(WordVectors::parse(&text).with_context(|| format!("parsing {p}"))?)
        }
        None => None,
    };
    let train = read_corpus(&a.common.train)?;
    let dev = read_corpus(&a.common.dev)?;
    let (bundle, report) = train_baseline(&train, &dev, &cfg, vectors.as_ref())?;
    let out = &a.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(VOCAB_FILE);
    bundle
        .vocab
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let path = out.join(BASELINE_CKPT);
    let hash = bundle
        .checkpoint()?
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    write_run(out, &cfg, &report.log_text())?;
    log::info!(
        "baseline best epoch {} dev F1 {:.4}, checkpoint {hash}",
        report.best_epoch,
        report.best_f1
    );
    Ok(())
}

fn load_baseline(dir: &Path) -> Result<BaselineBundle> {
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))
        .with_context(|| format!("loading the vocabulary in {}", dir.display()))?;
    let ckpt = Checkpoint::load(dir.join(BASELINE_CKPT))
        .with_context(|| format!("loading the baseline in {}", dir.display()))?;
    Ok(BaselineBundle::from_checkpoint(&ckpt, vocab)?)
}

fn load_refiner(dir: &Path, baseline: &BaselineBundle) -> Result<RefinerBundle> {
    let ckpt = Checkpoint::load(dir.join(REFINER_CKPT))
        .with_context(|| format!("loading the refiner in {}", dir.display()))?;
    RefinerBundle::from_checkpoint(&ckpt, baseline)
        .with_context(|| format!("refiner in {}", dir.display()))
}

fn cmd_train_refiner(a: TrainRefiner) -> Result<()> {
    let mut cfg = train_config(Stage::Refiner, &a.common)?;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            RefinerKind::SelfRefine => RefineMode::SelfRefine,
            RefinerKind::Structured => RefineMode::Structured,
        };
    }
    if let Some(t) = a.iterations {
        cfg.iterations = t;
    }
    if a.untied {
        cfg.tied = false;
    }
    if a.no_gumbel {
        cfg.gumbel = false;
    }
    cfg.validate()?;
    let baseline = load_baseline(&a.baseline)?;
    cfg.dims = baseline.dims().clone();
    let train = read_corpus(&a.common.train)?;
    let dev = read_corpus(&a.common.dev)?;
    let (bundle, report) = train_refiner(&train, &dev, &baseline, &cfg)?;
    let out = &a.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(REFINER_CKPT);
    let hash = bundle
        .checkpoint()?
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    write_run(out, &cfg, &report.log_text())?;
    log::info!(
        "{} refiner best epoch {} dev F1 {:.4}, checkpoint {hash}",
        cfg.mode,
        report.best_epoch,
        report.best_f1
    );
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let baseline = load_baseline(&a.baseline)?;
    let refiner = match (a.mode, &a.refiner) {
        (PredictMode::Baseline, _) => None,
        (_, None) => bail!("--refiner is required unless --mode baseline"),
        (mode, Some(dir)) => {
            let r = load_refiner(dir, &baseline)?;
            let want = if mode == PredictMode::SelfRefine {
                RefineMode::SelfRefine
            } else {
                RefineMode::Structured
            };
            if r.model.mode != want {
                bail!(
                    "the refiner in {} was trained in {} mode, not {want}",
                    dir.display(),
                    r.model.mode
                );
            }
            Some(r)
        }
    };
    let sentences = read_corpus(&a.input)?;
    let iterations = if refiner.is_some() { a.iterations } else { 0 };
    let predictions =
        Predictor::new(&baseline, refiner.as_ref(), iterations).predict(&sentences)?;
    write_file(&a.out, write_predictions(&sentences, &predictions)?)?;
    log::info!(
        "labeled {} predicates in {} sentences",
        predictions.len(),
        sentences.len()
    );
    Ok(())
}

/// Gold and predicted instances of two files over the same sentences.
fn instances(gold: &Path, predicted: &Path) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    let gold = extract_instances(&read_corpus(gold)?)
        .iter()
        .map(|i| i.gold())
        .collect();
    let predicted = extract_instances(&read_corpus(predicted)?)
        .iter()
        .map(|i| i.gold())
        .collect();
    Ok((gold, predicted))
}

fn evaluate(a: Evaluate) -> Result<()> {
    let (gold, predicted) = instances(&a.gold, &a.predicted)?;
    let report = labeled_f1(&gold, &predicted)?;
    let text = match a.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Json => report.to_json_lines()?,
    };
    write_file(&a.out, text)?;
    log::info!("labeled F1 {:.4}", report.f1());
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    let (gold, baseline) = instances(&a.gold, &a.baseline)?;
    let (_, refined) = instances(&a.gold, &a.refined)?;
    let labels: Vec<&str> = a
        .labels
        .split(',')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let matrices = confusion_and_correction(&gold, &baseline, &refined, &labels)?;
    let violations = serde_json::json!({
        "baseline": constraint_violations(&baseline),
        "refined": constraint_violations(&refined),
    });
    let out = &a.out;
    write_file(
        &out.join("violations.json"),
        serde_json::to_string_pretty(&violations)? + "\n",
    )?;
    write_file(&out.join("confusion.csv"), matrices.confusion_csv())?;
    write_file(&out.join("correction.csv"), matrices.correction_csv())?;
    write_file(&out.join("summary.txt"), matrices.to_table())?;
    log::info!("analysis written to {}", out.display());
    Ok(())
}
