mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vinter::corpus::{
    build_vocab, generate_corpus, read_corpus, split_dataset, write_corpus, Corpus, CORPUS_FILE, FEATURES_FILE,
};
use vinter::emotion::{arc_frequency_table, EmotionArc, Lexicon};
use vinter::eval::{evaluate_model, generated_arc, EchoNarrator, ModelNarrator, Narrator};
use vinter::model::{gradient_check, Example, Model, Variant};
use vinter::train::{load_checkpoint, save_checkpoint, write_atomic, Trainer};

use config::RunConfig;

const RESOLVED_FILE: &str = "resolved.toml";
const CHECKPOINT_FILE: &str = "checkpoint.vntr";
const METRICS_FILE: &str = "metrics.tsv";
const REPORT_FILE: &str = "report.json";
const EXAMPLES_FILE: &str = "examples.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Threshold(String),
    #[error(transparent)]
    Core(#[from] vinter::Error),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(vinter::Error::Config(_)) => 1,
            CliError::Threshold(_) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Emotion-arc-conditioned image narrative generation.
#[derive(Debug, Parser)]
#[command(name = "vinter", version)]
struct Cli {
    /// Directory for outputs of commands without `--out`.
    #[arg(long, global = true, env = "VINTER_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Worker threads for corpus generation and evaluation.
    #[arg(long, global = true, env = "VINTER_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create or inspect a synthetic corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Narrate one scene.
    Generate(GenerateArgs),
    /// Score a checkpoint on a corpus split.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients of a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    Generate(CorpusGenerateArgs),
    /// Print per-segment emotion counts.
    Stats(CorpusStatsArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LexiconArg {
    /// Emotion lexicon as `emotion<TAB>word` lines.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl LexiconArg {
    fn load(&self) -> Result<Lexicon> {
        match &self.lexicon {
            None => Ok(Lexicon::default()),
            Some(path) => {
                let file = File::open(path)
                    .map_err(|e| CliError::Usage(format!("cannot read lexicon {}: {e}", path.display())))?;
                Ok(Lexicon::from_reader(BufReader::new(file))?)
            }
        }
    }
}

#[derive(Debug, Args)]
struct CorpusGenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    lexicon: LexiconArg,
    /// Corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes, one narrative each.
    #[arg(long)]
    scenes: Option<usize>,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorpusStatsArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory; split into train and eval scenes.
    #[arg(long)]
    corpus: PathBuf,
    /// Emotion input variant; a resumed run keeps its own.
    #[arg(long)]
    variant: Option<Variant>,
    /// Directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Linear warmup steps.
    #[arg(long)]
    warmup: Option<u64>,
    /// Seed of the model initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum generated tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Exponent of the beam length normalization.
    #[arg(long)]
    length_penalty: Option<f64>,
}

impl DecodeArgs {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(b) = self.beam {
            run.decode.beam_width = b;
        }
        if let Some(m) = self.max_len {
            run.decode.max_len = m;
        }
        if let Some(a) = self.length_penalty {
            run.decode.length_penalty = a;
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    lexicon: LexiconArg,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus holding the scene.
    #[arg(long)]
    corpus: PathBuf,
    /// Scene to narrate.
    #[arg(long)]
    scene_id: u64,
    /// `begin,body,end`, e.g. `neutral,joy,joy`.
    #[arg(long)]
    arc: Option<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Oracle {
    Echo,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    lexicon: LexiconArg,
    /// Trained checkpoint.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Scenes to score.
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Directory for report.json, examples.jsonl and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Test fixture: score a fixed narrator instead of a checkpoint.
    #[arg(long, value_enum, hide = true)]
    oracle: Option<Oracle>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Seed of the parameters and synthetic batch.
    #[arg(long)]
    seed: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Test fixture: scale one parameter's analytic gradient by 1.5.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// Attaches the path to I/O failures.
fn at_path(path: &Path) -> impl FnOnce(vinter::Error) -> CliError + '_ {
    move |e| match e {
        vinter::Error::Io(source) => CliError::File {
            path: path.to_path_buf(),
            source,
        },
        e => CliError::Core(e),
    }
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).map_err(at_path(path))
}

fn open_checkpoint(path: &Path) -> Result<vinter::train::Checkpoint> {
    load_checkpoint(path).map_err(at_path(path))
}

fn out_dir(out: &Option<PathBuf>, run_dir: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone()
        .or_else(|| run_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set VINTER_RUN_DIR".into()))
}

fn echo_config(dir: &Path, run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(RESOLVED_FILE), run.to_toml().as_bytes())?;
    Ok(())
}

fn corpus_generate(args: &CorpusGenerateArgs, run_dir: &Option<PathBuf>) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    if let Some(s) = args.seed {
        run.corpus.seed = s;
    }
    if let Some(n) = args.scenes {
        run.corpus.scenes = n;
    }
    run.corpus.validate()?;
    let lexicon = args.lexicon.load()?;
    let out = out_dir(&args.out, run_dir)?;
    let corpus = generate_corpus(&run.corpus, &lexicon)?;

    std::fs::create_dir_all(&out)?;
    let staging = tempfile::tempdir_in(&out)?;
    write_corpus(&corpus, staging.path())?;
    for name in [FEATURES_FILE, CORPUS_FILE] {
        std::fs::rename(staging.path().join(name), out.join(name))?;
    }
    echo_config(&out, &run)?;
    println!("wrote {} narratives to {}", corpus.len(), out.display());
    Ok(())
}

fn corpus_stats(args: &CorpusStatsArgs) -> Result<()> {
    let corpus = open_corpus(&args.corpus)?;
    let lexicon = args.lexicon.load()?;
    let table = arc_frequency_table(corpus.narratives.iter().map(|n| n.sentences.as_slice()), &lexicon)?;
    print!("{table}");
    println!("narratives {}", corpus.len());
    Ok(())
}

fn load_split(path: &Path, run: &RunConfig, split: SplitArg) -> Result<(Corpus, Corpus)> {
    let corpus = open_corpus(path)?;
    if split == SplitArg::All {
        return Ok((corpus.clone(), corpus));
    }
    Ok(split_dataset(&corpus, run.data.eval_fraction, run.data.split_seed)?)
}

fn examples_of(
    corpus: &Corpus,
    vocab: &vinter::corpus::Vocab,
    model: &vinter::model::ModelConfig,
) -> Result<Vec<Example>> {
    Ok(corpus
        .examples()
        .map(|(s, n)| Example::new(s, n, vocab, model))
        .collect::<vinter::Result<Vec<_>>>()?)
}

fn train(args: &TrainArgs, run_dir: &Option<PathBuf>) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    if let Some(v) = args.variant {
        run.model.variant = v;
    }
    if let Some(s) = args.steps {
        run.train.total_steps = s;
    }
    if let Some(w) = args.warmup {
        run.train.warmup_steps = w;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
        run.model.seed = s;
    }
    if let Some(lr) = args.lr {
        run.train.base_lr = lr;
    }
    run.train.validate()?;
    let out = out_dir(&args.out, run_dir)?;
    let (train_set, eval_set) = load_split(&args.corpus, &run, SplitArg::Eval)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = open_checkpoint(path)?;
            if args.variant.is_none() {
                run.model.variant = ckpt.model.variant;
            }
            if ckpt.model.variant != run.model.variant {
                return Err(CliError::Usage(format!(
                    "checkpoint variant {} differs from requested variant {}",
                    ckpt.model.variant, run.model.variant
                )));
            }
            Trainer::resume(ckpt, run.train.clone())?
        }
        None => {
            let vocab = build_vocab(train_set.narratives.iter().map(|n| n.text()))?;
            let config = run.model.resolve(train_set.feature_dim, vocab.len());
            let model = Model::new(config, run.model.seed)?;
            Trainer::new(model, vocab, run.train.clone())?
        }
    };
    let model_config = trainer.model.config.clone();
    let train_examples = examples_of(&train_set, &trainer.vocab, &model_config)?;
    let eval_examples = examples_of(&eval_set, &trainer.vocab, &model_config)?;

    echo_config(&out, &run)?;
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(out.join(METRICS_FILE))?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let stop = trainer.run(
        &train_examples,
        &eval_examples,
        &mut |record| {
            writeln!(metrics, "{record}")?;
            if record.split == vinter::train::Split::Eval {
                eprintln!("{record}");
            }
            Ok(())
        },
        &mut |ckpt| save_checkpoint(ckpt, &checkpoint_path),
    )?;
    metrics.flush()?;
    println!(
        "{stop:?} at step {}; checkpoint {}",
        trainer.step,
        checkpoint_path.display()
    );
    Ok(())
}

fn generate(args: &GenerateArgs, run_dir: &Option<PathBuf>) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    args.decode.apply(&mut run);
    let arc: Option<EmotionArc> = match &args.arc {
        Some(text) => Some(
            text.parse()
                .map_err(|e: vinter::Error| CliError::Usage(e.to_string()))?,
        ),
        None => None,
    };
    let lexicon = args.lexicon.load()?;
    let (model, vocab) = open_checkpoint(&args.checkpoint)?.into_model()?;
    if model.config.variant.needs_arc() && arc.is_none() {
        return Err(CliError::Usage(format!(
            "variant {} needs --arc begin,body,end",
            model.config.variant
        )));
    }
    let corpus = open_corpus(&args.corpus)?;
    let scene = corpus
        .scene(args.scene_id)
        .ok_or_else(|| CliError::Usage(format!("scene {} is not in the corpus", args.scene_id)))?;
    let narrator = ModelNarrator::new(&model, &vocab, run.decode)?;
    let arc_input = if model.config.variant == Variant::ImageOnly {
        None
    } else {
        arc.as_ref()
    };
    let sentences = narrator.sentences(scene, arc_input)?;
    if let Some(dir) = run_dir {
        echo_config(dir, &run)?;
    }
    println!("{}", sentences.join(" "));
    println!("arc {}", generated_arc(&sentences, &lexicon));
    Ok(())
}

fn evaluate(args: &EvaluateArgs, run_dir: &Option<PathBuf>) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    args.decode.apply(&mut run);
    let out = out_dir(&args.out, run_dir)?;
    let lexicon = args.lexicon.load()?;
    let (train_set, eval_set) = load_split(&args.corpus, &run, args.split)?;
    let data = if args.split == SplitArg::Train {
        train_set
    } else {
        eval_set
    };

    let loaded = match (&args.oracle, &args.checkpoint) {
        (Some(Oracle::Echo), _) => None,
        (None, Some(path)) => Some(open_checkpoint(path)?.into_model()?),
        (None, None) => return Err(CliError::Usage("--checkpoint is required".into())),
    };
    let model_narrator;
    let narrator: &dyn Narrator = match &loaded {
        None => &EchoNarrator,
        Some((model, vocab)) => {
            model_narrator = ModelNarrator::new(model, vocab, run.decode)?;
            &model_narrator
        }
    };
    let report = evaluate_model(narrator, &data, &lexicon)?;

    echo_config(&out, &run)?;
    write_atomic(
        &out.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let mut lines = Vec::new();
    for record in &report.examples {
        serde_json::to_writer(&mut lines, record)?;
        lines.push(b'\n');
    }
    write_atomic(&out.join(EXAMPLES_FILE), &lines)?;
    println!("{report}");
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, run_dir: &Option<PathBuf>) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    if let Some(s) = args.seed {
        run.gradcheck.seed = s;
    }
    if let Some(e) = args.eps {
        run.gradcheck.eps = e;
    }
    let g = &run.gradcheck;
    let corrupt = args.corrupt.as_deref().map(|name| (name, 1.5));
    let report = gradient_check(&g.model, g.seed, g.eps, corrupt)?;
    if let Some(dir) = run_dir {
        echo_config(dir, &run)?;
    }
    let (name, index) = report.worst.clone().unwrap_or_default();
    println!(
        "worst relative error {:.3e} at {name}[{index}] (analytic {:.6e}, numeric {:.6e}) over {} scalars",
        report.max_rel_error, report.analytic, report.numeric, report.checked
    );
    if report.max_rel_error.is_nan() || report.max_rel_error >= g.tolerance {
        return Err(CliError::Threshold(format!(
            "gradient check failed: {:.3e} is not below {:.1e}",
            report.max_rel_error, g.tolerance
        )));
    }
    println!("pass (tolerance {:.1e})", g.tolerance);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::Corpus(CorpusCommand::Generate(a)) => corpus_generate(a, &cli.run_dir),
        Command::Corpus(CorpusCommand::Stats(a)) => corpus_stats(a),
        Command::Train(a) => train(a, &cli.run_dir),
        Command::Generate(a) => generate(a, &cli.run_dir),
        Command::Evaluate(a) => evaluate(a, &cli.run_dir),
        Command::Gradcheck(a) => gradcheck(a, &cli.run_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
