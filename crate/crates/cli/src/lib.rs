//! Command-line front end: `generate`, `detect`, `certify`, `attack`,
//! `train` and `bench`.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures. Diagnostics go to standard error; results go to standard output
//! or to `--out`, written only once the whole result is available.

pub mod input;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use dipmark::bench::{render_outputs, split_seed, Experiment, ExperimentConfig};
use dipmark::cipher::CIPHER_ENCODING_VERSION;
use dipmark::detector::{DetectionReport, Detector, DetectorConfig, TailMode, ThresholdMode};
use dipmark::generator::{generate, GenerationConfig, StepRecord};
use dipmark::lm::{default_model, Corpus, DistributionProvider, Model, TopK};
use dipmark::reweight::ReweightStrategy;
use dipmark::robustness::{attack, certified_radius, certified_radius_fixed_length, AttackMode, AttackSpec, CertifiedRadius};
use dipmark::types::{SecretKey, TokenId, Vocabulary, WatermarkParams};
use serde::Serialize;

use crate::input::{read_reports, read_tokens, write_atomic, InputError};

#[derive(Debug, Parser)]
#[command(name = "dipmark", about = "Distribution-preserving watermarking for token sequences", disable_version_flag = true)]
struct Cli {
    /// Print the cipher encoding version and exit.
    #[arg(long, global = true)]
    version: bool,

    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// Secret key as hex (at least 16 bytes).
    #[arg(long, global = true, value_name = "HEX")]
    key: Option<String>,

    /// Red-list fraction.
    #[arg(long, global = true, default_value_t = 0.5)]
    gamma: f64,

    /// Reweight quantile used when no --strategy is given.
    #[arg(long, global = true, default_value_t = 0.45)]
    alpha: f64,

    /// Texture-key length in tokens.
    #[arg(long, global = true, default_value_t = 1)]
    window: usize,

    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output format for `detect` and `bench`.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample watermarked sequences from a model.
    Generate(GenerateArgs),
    /// Score token sequences for the watermark.
    Detect(DetectArgs),
    /// Compute the certified edit radius for a score.
    Certify(CertifyArgs),
    /// Apply random edits to token sequences.
    Attack(AttackArgs),
    /// Train an n-gram model from a whitespace-tokenized corpus.
    Train(TrainArgs),
    /// Run a benchmark experiment.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model file; the bundled n-gram model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VocabArgs {
    /// Vocabulary size; taken from --model (or the bundled model) when absent.
    #[arg(long)]
    vocab_size: Option<usize>,

    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// `identity`, `dip:alpha=A`, `pw:alpha=A` or `soft:gamma=G,delta=D`.
    #[arg(long)]
    strategy: Option<String>,

    /// Tokens to generate per sequence.
    #[arg(long, default_value_t = 260)]
    len: usize,

    /// Prompt token ids, inline ("1 2 3" or "1,2,3") or a file holding one sequence.
    #[arg(long)]
    prompt_ids: Option<String>,

    /// Number of sequences.
    #[arg(long, default_value_t = 1)]
    count: usize,

    /// Restrict sampling to the k most likely tokens.
    #[arg(long)]
    top_k: Option<usize>,

    /// Include per-step trace records.
    #[arg(long)]
    trace: bool,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    vocab: VocabArgs,

    /// Target false-positive rate.
    #[arg(long, default_value_t = 0.01)]
    fpr: f64,

    /// Tail used to turn the FPR target into a threshold: exact, kl or approx.
    #[arg(long, default_value = "exact")]
    mode: String,

    /// Fixed score threshold; overrides --fpr.
    #[arg(long)]
    threshold: Option<f64>,

    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("score").required(true).args(["phi", "report"])))]
struct CertifyArgs {
    /// Detection score.
    #[arg(long)]
    phi: Option<f64>,

    /// Reports written by `detect`, one per line.
    #[arg(long)]
    report: Option<PathBuf>,

    /// Detection threshold; defaults to each report's threshold.
    #[arg(long)]
    z: Option<f64>,

    /// Use the fixed-length radius (phi - z) / (window + 1).
    #[arg(long)]
    fixed_length: bool,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    vocab: VocabArgs,

    /// Fraction of the sequence length to edit.
    #[arg(long)]
    eps: f64,

    /// substitute, insert or delete.
    #[arg(long, default_value = "substitute")]
    mode: String,

    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Text file, one sequence per line, tokens separated by whitespace.
    #[arg(long)]
    corpus: PathBuf,

    #[arg(long, default_value_t = dipmark::lm::DEFAULT_ORDER)]
    order: usize,

    /// Additive smoothing.
    #[arg(long, default_value_t = dipmark::lm::DEFAULT_LAMBDA)]
    lambda: f64,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Experiment name, e.g. calibrate or detectability.
    experiment: String,

    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Trials; overrides the configuration.
    #[arg(long)]
    trials: Option<usize>,

    /// Directory for metrics.csv, metrics.json and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error classes mapped to exit codes.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Validation(anyhow::Error),
    #[error(transparent)]
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        if is_validation(&err) {
            Failure::Validation(err)
        } else {
            Failure::Runtime(err)
        }
    }
}

impl From<dipmark::Error> for Failure {
    fn from(err: dipmark::Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn is_validation(err: &anyhow::Error) -> bool {
    use dipmark::Error as E;
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<E>() {
            return !matches!(e, E::Provider(_) | E::ModelFormat(_) | E::Io(_) | E::NoContext);
        }
        if let Some(e) = cause.downcast_ref::<InputError>() {
            return !matches!(e, InputError::Io { .. });
        }
        cause.downcast_ref::<serde_json::Error>().is_some_and(|e| !e.is_io())
    })
}

type CmdResult = Result<Output, Failure>;

/// Result of a command: text for standard output or a file.
enum Output {
    Text { text: String, out: Option<PathBuf> },
    Files { dir: PathBuf, files: Vec<(&'static str, String)> },
}

fn respond(text: String, out: Option<PathBuf>) -> CmdResult {
    Ok(Output::Text { text, out })
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            print_subcommand_help(&argv);
            return 1;
        }
    };
    if cli.version {
        println!("{CIPHER_ENCODING_VERSION}");
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required\n");
        eprint!("{}", Cli::command().render_help());
        return 1;
    };
    let name = subcommand_name(&command);
    let result = dispatch(command, &cli.global).and_then(emit);
    match result {
        Ok(()) => 0,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => {
                    eprintln!("error: {msg}\n");
                    if let Some(sub) = Cli::command().find_subcommand_mut(name) {
                        eprint!("{}", sub.render_help());
                    }
                }
                Failure::Validation(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            failure.code()
        }
    }
}

fn print_subcommand_help(argv: &[OsString]) {
    let mut cmd = Cli::command();
    let name = argv
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some());
    if let Some(sub) = name.and_then(|n| cmd.find_subcommand_mut(n)) {
        eprintln!();
        eprint!("{}", sub.render_help());
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Generate(_) => "generate",
        Command::Detect(_) => "detect",
        Command::Certify(_) => "certify",
        Command::Attack(_) => "attack",
        Command::Train(_) => "train",
        Command::Bench(_) => "bench",
    }
}

fn dispatch(command: Command, global: &GlobalArgs) -> CmdResult {
    match command {
        Command::Generate(args) => cmd_generate(args, global),
        Command::Detect(args) => cmd_detect(args, global),
        Command::Certify(args) => cmd_certify(args, global),
        Command::Attack(args) => cmd_attack(args, global),
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args, global),
    }
}

fn emit(output: Output) -> Result<(), Failure> {
    match output {
        Output::Text { text, out: None } => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
                .context("writing standard output")?;
        }
        Output::Text { text, out: Some(path) } => {
            write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        }
        Output::Files { dir, files } => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, contents) in files {
                let path = dir.join(name);
                write_atomic(&path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn require_key(global: &GlobalArgs) -> Result<SecretKey, Failure> {
    let hex = global
        .key
        .as_deref()
        .ok_or_else(|| Failure::Usage("--key is required".into()))?;
    SecretKey::from_hex(hex).map_err(|e| Failure::Validation(e.into()))
}

fn validation(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(err.into())
}

fn load_model(path: Option<&Path>) -> Result<Model, Failure> {
    match path {
        Some(p) => Ok(Model::load(p).with_context(|| format!("loading model {}", p.display()))?),
        None => Ok(Model::NGram(default_model())),
    }
}

fn vocab_size(args: &VocabArgs) -> Result<usize, Failure> {
    if let Some(n) = args.vocab_size {
        Vocabulary::new(n).map_err(validation)?;
        return Ok(n);
    }
    Ok(load_model(args.model.model.as_deref())?.vocab_size())
}

fn parse_prompt(spec: &str) -> Result<Vec<TokenId>, Failure> {
    let path = Path::new(spec);
    if path.is_file() {
        let mut seqs = read_tokens(path, None).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        return match seqs.len() {
            0 => Ok(Vec::new()),
            1 => Ok(seqs.remove(0)),
            n => Err(validation(anyhow!("prompt file holds {n} sequences, expected one"))),
        };
    }
    let normalized = spec.replace(',', " ");
    let ids = input::parse_line(&normalized, 1).map_err(validation)?;
    Ok(ids.into_iter().map(TokenId).collect())
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    tokens: Vec<TokenId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [StepRecord]>,
}

fn cmd_generate(args: GenerateArgs, global: &GlobalArgs) -> CmdResult {
    let key = require_key(global)?;
    let strategy: ReweightStrategy = match &args.strategy {
        Some(s) => s.parse().map_err(validation)?,
        None => ReweightStrategy::Dip { alpha: global.alpha },
    };
    let params = WatermarkParams::new(global.alpha, global.gamma, global.window).map_err(validation)?;
    let prompt = match &args.prompt_ids {
        Some(spec) => parse_prompt(spec)?,
        None => Vec::new(),
    };
    if args.count == 0 {
        return Err(validation(anyhow!("--count must be at least 1")));
    }
    let mut config = GenerationConfig::new(key, strategy, args.len);
    config.params = params;
    config.prompt = prompt.clone();
    config.validate().map_err(validation)?;

    let model = load_model(args.model.model.as_deref())?;
    let provider: Box<dyn DistributionProvider> = match args.top_k {
        Some(k) => Box::new(TopK::new(model, k).map_err(validation)?),
        None => Box::new(model),
    };

    let mut text = String::new();
    for i in 0..args.count {
        config.rng_seed = split_seed(global.seed, "generate", i as u64);
        let trace = generate(provider.as_ref(), &config).context("generation failed")?;
        let line = GeneratedLine {
            tokens: prompt.iter().chain(&trace.tokens).copied().collect(),
            prompt_len: (!prompt.is_empty()).then_some(prompt.len()),
            trace: args.trace.then_some(trace.step_records.as_slice()),
        };
        text.push_str(&serde_json::to_string(&line).expect("generated line serializes"));
        text.push('\n');
    }
    respond(text, args.out)
}

fn render_reports(reports: &[DetectionReport], format: Format) -> anyhow::Result<String> {
    match format {
        Format::Json => Ok(reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect()),
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            for r in reports {
                writer.serialize(r)?;
            }
            Ok(String::from_utf8(writer.into_inner()?)?)
        }
    }
}

fn cmd_detect(args: DetectArgs, global: &GlobalArgs) -> CmdResult {
    let key = require_key(global)?;
    let mode: TailMode = args.mode.parse().map_err(validation)?;
    let n = vocab_size(&args.vocab)?;
    let mut config = DetectorConfig::new(key, n);
    config.params = WatermarkParams::new(global.alpha, global.gamma, global.window).map_err(validation)?;
    config.threshold_mode = match args.threshold {
        Some(z) => ThresholdMode::Fixed(z),
        None => ThresholdMode::Fpr { target: args.fpr, mode },
    };
    let detector = Detector::new(config).map_err(validation)?;
    let sequences = read_tokens(&args.input, Some(n)).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    let reports: Vec<DetectionReport> = detector
        .detect_batch(&sequences)
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("sequence {}", i + 1)))
        .collect::<anyhow::Result<_>>()?;
    respond(render_reports(&reports, global.format)?, args.out)
}

#[derive(Serialize)]
struct CertifyLine {
    #[serde(flatten)]
    radius: CertifiedRadius,
    #[serde(skip_serializing_if = "Option::is_none")]
    scored: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_edits: Option<usize>,
}

fn cmd_certify(args: CertifyArgs, global: &GlobalArgs) -> CmdResult {
    if global.window == 0 {
        return Err(validation(anyhow!("window must be at least 1")));
    }
    let inputs: Vec<(f64, Option<f64>, Option<usize>)> = match (args.phi, &args.report) {
        (Some(phi), _) => vec![(phi, None, None)],
        (None, Some(path)) => read_reports(path)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?
            .into_iter()
            .map(|r| (r.phi, Some(r.threshold), Some(r.scored)))
            .collect(),
        (None, None) => return Err(Failure::Usage("one of --phi or --report is required".into())),
    };
    let mut text = String::new();
    for (phi, report_z, scored) in inputs {
        let z = args
            .z
            .or(report_z)
            .ok_or_else(|| Failure::Usage("--z is required with --phi".into()))?;
        if !phi.is_finite() || !z.is_finite() {
            return Err(validation(anyhow!("phi and z must be finite")));
        }
        let radius = if args.fixed_length {
            certified_radius_fixed_length(phi, z, global.window)
        } else {
            certified_radius(phi, z, global.gamma, global.window)
        };
        let line = CertifyLine {
            radius,
            scored,
            max_edits: scored.map(|m| radius.max_edits(m)),
        };
        text.push_str(&serde_json::to_string(&line).expect("radius serializes"));
        text.push('\n');
    }
    respond(text, args.out)
}

fn cmd_attack(args: AttackArgs, global: &GlobalArgs) -> CmdResult {
    let mode: AttackMode = args.mode.parse().map_err(validation)?;
    if !(0.0..=1.0).contains(&args.eps) {
        return Err(validation(anyhow!("--eps must lie in [0, 1], got {}", args.eps)));
    }
    let n = vocab_size(&args.vocab)?;
    let vocab = Vocabulary::new(n).map_err(validation)?;
    let sequences = read_tokens(&args.input, Some(n)).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    let mut text = String::new();
    for (i, seq) in sequences.iter().enumerate() {
        let spec = AttackSpec {
            mode,
            epsilon: args.eps,
            rng_seed: split_seed(global.seed, "attack", i as u64),
        };
        let tokens = attack(seq, &spec, &vocab).with_context(|| format!("sequence {}", i + 1))?;
        text.push_str(&serde_json::to_string(&serde_json::json!({ "tokens": tokens })).expect("tokens serialize"));
        text.push('\n');
    }
    respond(text, args.out)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let corpus = Corpus::load(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let model = corpus.train(args.order, args.lambda).map_err(validation)?;
    respond(Model::NGram(model).to_json(), args.out)
}

fn cmd_bench(args: BenchArgs, global: &GlobalArgs) -> CmdResult {
    let experiment: Experiment = args.experiment.parse().map_err(validation)?;
    let mut config = match &args.config {
        Some(path) => {
            let json = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&json).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let mut c = ExperimentConfig::for_experiment(experiment);
            c.rng_seed = global.seed;
            c.gamma = global.gamma;
            c.window = global.window;
            c.alpha = global.alpha;
            c.key = global.key.clone();
            c
        }
    };
    config.experiment = experiment;
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    let table = config.run()?;
    match args.out {
        Some(dir) => Ok(Output::Files {
            dir,
            files: render_outputs(&config, &table)?,
        }),
        None => {
            let body = match global.format {
                Format::Json => table.to_json() + "\n",
                Format::Csv => table.to_csv()?,
            };
            respond(body, None)
        }
    }
}
