use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nerscribe::augment::{self, AugmentConfig, AugmentError, DropoutScope, NegativeSource, NegativeStrategy};
use nerscribe::codec::{self, CodecError, ParseMode, TagScheme};
use nerscribe::dataset::{self, DatasetError};
use nerscribe::decode::{self, DecodeError, DecodeOptions, GrammarMode, ToyTableModel, TokenModel};
use nerscribe::manifest::{manifest_path, FileDigest, RunManifest};
use nerscribe::metrics::{self, MetricsError, Normalizer, Prediction, WordMarkerCounter};
use nerscribe::plot::{self, PlotError, PlotSource};
use nerscribe::{PromptEntry, PromptSpec};

/// Entity-tagged transcript toolkit: codecs, datasets, prompt augmentation,
/// metrics and biased decoding.
#[derive(Parser, Serialize)]
#[command(name = "nerscribe", version)]
struct Cli {
    /// Base seed for every randomized step.
    #[arg(long, global = true, env = "NERSCRIBE_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, env = "NERSCRIBE_JOBS")]
    jobs: Option<usize>,
    /// Suppress progress notes on stderr.
    #[arg(long, global = true, env = "NERSCRIBE_QUIET")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Convert a file of tagged transcripts between schemes, one per line.
    Convert(ConvertArgs),
    /// Check that every line of a file parses under a scheme.
    Validate(ValidateArgs),
    /// Import a BIO column corpus as JSONL records.
    ImportBio(ImportBioArgs),
    /// Entity-type inventory statistics.
    Stats(StatsArgs),
    /// Build prompted training or evaluation records.
    Augment(AugmentArgs),
    /// Score predictions against gold records.
    Evaluate(EvaluateArgs),
    /// Token counts of plain, span-marker and BIO serializations.
    SeqLength(SeqLengthArgs),
    /// Greedy-decode one output per prompt with a toy table model.
    Decode(DecodeArgs),
    /// Precision/recall across a grid of entity-start biases.
    Sweep(SweepArgs),
    /// Teacher-forced negative log-likelihood of target strings.
    Nll(NllArgs),
}

#[derive(Args, Serialize)]
struct ConvertArgs {
    input: PathBuf,
    #[arg(long)]
    from: TagScheme,
    #[arg(long)]
    to: TagScheme,
    /// Reject dangling I- tags instead of repairing them.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    input: PathBuf,
    #[arg(long)]
    scheme: TagScheme,
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Serialize)]
struct ImportBioArgs {
    input: PathBuf,
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct StatsArgs {
    dataset: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StrategyArg {
    RandomType,
    RandomSample,
    HardNegative,
    /// As many negative types as positive ones.
    Balanced,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScopeArg {
    All,
    Positives,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    dataset: PathBuf,
    /// Donor dataset for negatives (defaults to the input dataset).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, required_if_eq_any([
        ("strategy", "random-type"),
        ("strategy", "random-sample"),
        ("strategy", "hard-negative"),
    ]))]
    k: Option<usize>,
    /// Per-label dropout probability.
    #[arg(long)]
    dropout: f64,
    #[arg(long, value_enum, default_value = "all")]
    dropout_scope: ScopeArg,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, default_value = "span")]
    scheme: TagScheme,
    #[arg(long, default_value = augment::DEFAULT_SEPARATOR)]
    separator: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Plain text, one prediction per line, or JSONL of {"id"?, "prediction"}.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "span")]
    scheme: TagScheme,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    keep_punct: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SeqLengthArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// SVG bar chart.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DecodingFlags {
    /// Mask label continuations that are not in the prompt.
    #[arg(long)]
    constrain: bool,
    /// Also bias the `<` that opens a closing marker.
    #[arg(long)]
    bias_everywhere: bool,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl DecodingFlags {
    fn options(&self, bias: f64, scheme: TagScheme) -> DecodeOptions {
        DecodeOptions {
            bias,
            grammar: if self.constrain { GrammarMode::Prompt } else { GrammarMode::Off },
            bias_everywhere: self.bias_everywhere,
            max_steps: self.max_steps,
            scheme,
        }
    }
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL with a "prompt" field per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    bias: f64,
    #[arg(long, default_value = "span")]
    scheme: TagScheme,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: DecodingFlags,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSONL whose records carry prompts.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    biases: Vec<f64>,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    keep_punct: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    /// SVG precision-recall curve.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[command(flatten)]
    flags: DecodingFlags,
}

#[derive(Args, Serialize)]
struct NllArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL of {"prompt", "target"} or {"prompt", "target_tokens"}.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptItem {
    Entry(PromptEntry),
    Label(String),
}

fn prompt_from(items: Vec<PromptItem>, seed: u64) -> PromptSpec {
    let entries = items
        .into_iter()
        .map(|i| match i {
            PromptItem::Entry(e) => e,
            PromptItem::Label(l) => PromptEntry::positive(l),
        })
        .collect();
    PromptSpec::new(entries, seed)
}

#[derive(Deserialize)]
struct PromptLine {
    prompt: Vec<PromptItem>,
    #[serde(default)]
    prompt_seed: u64,
}

#[derive(Deserialize)]
struct NllPair {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    prompt: Vec<PromptItem>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    target_tokens: Option<Vec<String>>,
}

#[derive(Serialize)]
struct NllLine {
    id: String,
    tokens: usize,
    nll: f64,
}

#[derive(Serialize)]
struct NllReport {
    schema_version: u32,
    pairs: Vec<NllLine>,
    total_nll: f64,
    total_tokens: usize,
}

#[derive(Serialize)]
struct SweepReport {
    schema_version: u32,
    normalizer: Normalizer,
    records: usize,
    points: Vec<decode::BiasSweepPoint>,
}

#[derive(Serialize)]
struct ValidateSummary {
    valid: bool,
    lines: usize,
    entities: usize,
}

struct Run {
    manifest: RunManifest,
    quiet: bool,
    seed: u64,
}

impl Run {
    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = FileDigest::of(path).with_context(|| format!("{}", path.display()))?;
        self.manifest.inputs.insert(role.to_string(), digest);
        Ok(())
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&mut self, role: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).with_context(|| format!("{}", path.display()))?;
        self.manifest.outputs.insert(role.to_string(), FileDigest::of(path)?);
        self.note(format!("wrote {}", path.display()));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, role: &str, path: Option<&Path>, value: &T) -> Result<()> {
        let mut json = serde_json::to_string_pretty(value)?;
        json.push('\n');
        match path {
            Some(p) => self.write(role, p, json.as_bytes()),
            None => {
                io::stdout().write_all(json.as_bytes())?;
                Ok(())
            }
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("{}", path.display()))?;
    BufReader::new(file)
        .lines()
        .collect::<io::Result<Vec<_>>>()
        .with_context(|| format!("{}", path.display()))
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<ToyTableModel> {
    let json = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    Ok(ToyTableModel::from_json(&json).with_context(|| format!("{}", path.display()))?)
}

fn normalizer(no_lowercase: bool, keep_punct: bool) -> Normalizer {
    Normalizer {
        lowercase: !no_lowercase,
        strip_punctuation: !keep_punct,
        collapse_whitespace: true,
    }
}

fn parse_mode(strict: bool) -> ParseMode {
    if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn convert(run: &mut Run, a: &ConvertArgs) -> Result<Option<PathBuf>> {
    run.input("input", &a.input)?;
    let mut out = String::new();
    for (i, line) in read_lines(&a.input)?.iter().enumerate() {
        let converted = codec::convert(line, a.from, a.to, parse_mode(a.strict))
            .with_context(|| format!("line {}", i + 1))?;
        out.push_str(&converted);
        out.push('\n');
    }
    match &a.out {
        Some(p) => {
            run.write("output", p, out.as_bytes())?;
            Ok(Some(p.clone()))
        }
        None => {
            io::stdout().write_all(out.as_bytes())?;
            Ok(None)
        }
    }
}

fn validate(run: &mut Run, a: &ValidateArgs) -> Result<Option<PathBuf>> {
    let lines = read_lines(&a.input)?;
    let mut entities = 0;
    for (i, line) in lines.iter().enumerate() {
        let t = codec::parse(line, a.scheme, parse_mode(a.strict)).with_context(|| format!("line {}", i + 1))?;
        entities += t.entities().len();
    }
    let summary = ValidateSummary {
        valid: true,
        lines: lines.len(),
        entities,
    };
    if !run.quiet {
        run.write_json("summary", None, &summary)?;
    }
    Ok(None)
}

fn import_bio(run: &mut Run, a: &ImportBioArgs) -> Result<Option<PathBuf>> {
    run.input("input", &a.input)?;
    let d = dataset::import_bio_corpus(&a.input)?;
    let mut buf = Vec::new();
    dataset::write_jsonl(d.records(), &mut buf)?;
    run.write("dataset", &a.out, &buf)?;
    Ok(Some(a.out.clone()))
}

fn stats(run: &mut Run, a: &StatsArgs) -> Result<Option<PathBuf>> {
    run.input("dataset", &a.dataset)?;
    let d = dataset::load_jsonl(&a.dataset)?;
    run.write_json("report", a.report.as_deref(), &dataset::inventory_stats(&d))?;
    Ok(a.report.clone())
}

fn augment_cmd(run: &mut Run, a: &AugmentArgs) -> Result<Option<PathBuf>> {
    run.input("dataset", &a.dataset)?;
    let d = dataset::load_jsonl(&a.dataset)?;
    let pool = match &a.pool {
        Some(p) => {
            run.input("pool", p)?;
            dataset::load_jsonl(p)?
        }
        None => d.clone(),
    };
    let k = a.k.unwrap_or(0);
    let negatives = match a.strategy {
        StrategyArg::RandomType => NegativeSource::Strategy(NegativeStrategy::RandomType { k }),
        StrategyArg::RandomSample => NegativeSource::Strategy(NegativeStrategy::RandomSample { k }),
        StrategyArg::HardNegative => NegativeSource::Strategy(NegativeStrategy::hard_negative(k)),
        StrategyArg::Balanced => NegativeSource::Balanced,
    };
    let mut config = AugmentConfig::new(negatives, a.scheme, run.seed);
    config.dropout_rate = a.dropout;
    config.dropout_scope = match a.dropout_scope {
        ScopeArg::All => DropoutScope::AllLabels,
        ScopeArg::Positives => DropoutScope::PositivesOnly,
    };
    config.shuffle = !a.no_shuffle;
    config.separator = a.separator.clone();
    run.manifest.seeds.insert("seed".into(), run.seed);
    let records = augment::augment_dataset(&d, &pool, &config)?;
    let mut buf = Vec::new();
    dataset::write_jsonl(&records, &mut buf)?;
    run.write("dataset", &a.out, &buf)?;
    Ok(Some(a.out.clone()))
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        read_json_lines(path)
    } else {
        Ok(read_lines(path)?.into_iter().map(Prediction::new).collect())
    }
}

fn evaluate(run: &mut Run, a: &EvaluateArgs) -> Result<Option<PathBuf>> {
    run.input("gold", &a.gold)?;
    run.input("pred", &a.pred)?;
    let gold = dataset::load_jsonl(&a.gold)?;
    let preds = read_predictions(&a.pred)?;
    let norm = normalizer(a.no_lowercase, a.keep_punct);
    let report = metrics::evaluate_corpus(gold.records(), &preds, a.scheme, &norm)?;
    run.write_json("report", a.report.as_deref(), &report)?;
    Ok(a.report.clone())
}

fn seq_length(run: &mut Run, a: &SeqLengthArgs) -> Result<Option<PathBuf>> {
    run.input("dataset", &a.dataset)?;
    let d = dataset::load_jsonl(&a.dataset)?;
    let report = metrics::sequence_length_report(&d, &WordMarkerCounter);
    run.write_json("report", a.report.as_deref(), &report)?;
    if let Some(p) = &a.plot {
        let svg = plot::render(PlotSource::SeqLength(&report))?;
        run.write("plot", p, svg.as_bytes())?;
    }
    Ok(a.report.clone())
}

fn decode_cmd(run: &mut Run, a: &DecodeArgs) -> Result<Option<PathBuf>> {
    run.input("model", &a.model)?;
    run.input("prompts", &a.prompts)?;
    let model = load_model(&a.model)?;
    let lines: Vec<PromptLine> = read_json_lines(&a.prompts)?;
    let prompts: Vec<PromptSpec> = lines
        .into_iter()
        .map(|l| prompt_from(l.prompt, l.prompt_seed))
        .collect();
    let opts = a.flags.options(a.bias, a.scheme);
    let decoded = {
        use rayon::prelude::*;
        let one = |p: &PromptSpec| decode::greedy_decode(&model, p, &opts);
        if model.concurrent_safe() {
            prompts.par_iter().map(one).collect::<Vec<_>>().into_iter().collect::<Result<Vec<_>, _>>()?
        } else {
            prompts.iter().map(one).collect::<Result<Vec<_>, _>>()?
        }
    };
    let overflows = decoded.iter().filter(|d| d.overflow).count();
    if overflows > 0 {
        run.note(format!("{overflows} outputs hit the step cap (DecodeOverflow)"));
    }
    let mut out = String::new();
    for d in &decoded {
        out.push_str(&d.text);
        out.push('\n');
    }
    match &a.out {
        Some(p) => {
            run.write("output", p, out.as_bytes())?;
            Ok(Some(p.clone()))
        }
        None => {
            io::stdout().write_all(out.as_bytes())?;
            Ok(None)
        }
    }
}

fn sweep(run: &mut Run, a: &SweepArgs) -> Result<Option<PathBuf>> {
    run.input("model", &a.model)?;
    run.input("eval", &a.eval)?;
    let model = load_model(&a.model)?;
    let eval = dataset::load_jsonl(&a.eval)?;
    let norm = normalizer(a.no_lowercase, a.keep_punct);
    let base = a.flags.options(0.0, TagScheme::SpanMarker);
    let points = decode::bias_sweep(&model, eval.records(), &a.biases, &norm, &base)?;
    let report = SweepReport {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        normalizer: norm,
        records: eval.len(),
        points,
    };
    run.write_json("report", a.report.as_deref(), &report)?;
    if let Some(p) = &a.plot {
        let svg = plot::render(PlotSource::PrCurve(&report.points))?;
        run.write("plot", p, svg.as_bytes())?;
    }
    Ok(a.report.clone())
}

fn nll(run: &mut Run, a: &NllArgs) -> Result<Option<PathBuf>> {
    run.input("model", &a.model)?;
    run.input("pairs", &a.pairs)?;
    let model = load_model(&a.model)?;
    let pairs: Vec<NllPair> = read_json_lines(&a.pairs)?;
    let mut lines = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.into_iter().enumerate() {
        let id = p.id.unwrap_or_else(|| i.to_string());
        let tokens = match (p.target_tokens, p.target) {
            (Some(toks), _) => decode::token_ids(&model, &toks),
            (None, Some(text)) => decode::tokenize_longest_match(&model, &text),
            (None, None) => bail!("pair {id}: needs \"target\" or \"target_tokens\""),
        }
        .with_context(|| format!("pair {id}"))?;
        let prompt = prompt_from(p.prompt, 0);
        let value = decode::sequence_nll(&model, &prompt, &tokens).with_context(|| format!("pair {id}"))?;
        lines.push(NllLine {
            id,
            tokens: tokens.len(),
            nll: value,
        });
    }
    let report = NllReport {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        total_nll: lines.iter().map(|l| l.nll).sum(),
        total_tokens: lines.iter().map(|l| l.tokens).sum(),
        pairs: lines,
    };
    run.write_json("report", a.report.as_deref(), &report)?;
    Ok(a.report.clone())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let (name, config) = match serde_json::to_value(&cli.command)? {
        serde_json::Value::Object(m) if m.len() == 1 => m.into_iter().next().expect("one entry"),
        other => ("unknown".to_string(), other),
    };
    let config = serde_json::json!({
        "args": config,
        "seed": cli.seed,
        "jobs": cli.jobs,
    });
    let mut run = Run {
        manifest: RunManifest::new(name, config),
        quiet: cli.quiet,
        seed: cli.seed,
    };
    let primary = match &cli.command {
        Command::Convert(a) => convert(&mut run, a)?,
        Command::Validate(a) => validate(&mut run, a)?,
        Command::ImportBio(a) => import_bio(&mut run, a)?,
        Command::Stats(a) => stats(&mut run, a)?,
        Command::Augment(a) => augment_cmd(&mut run, a)?,
        Command::Evaluate(a) => evaluate(&mut run, a)?,
        Command::SeqLength(a) => seq_length(&mut run, a)?,
        Command::Decode(a) => decode_cmd(&mut run, a)?,
        Command::Sweep(a) => sweep(&mut run, a)?,
        Command::Nll(a) => nll(&mut run, a)?,
    };
    if let Some(path) = primary {
        run.manifest.duration_secs = started.elapsed().as_secs_f64();
        let mpath = manifest_path(&path);
        run.manifest
            .save(&mpath)
            .with_context(|| format!("{}", mpath.display()))?;
    }
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CodecError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<AugmentError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<DecodeError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<PlotError>() {
            return e.kind();
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "JsonError";
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return "IoError";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
