//! Command-line interface.
//!
//! A `--config` TOML file can preset any flag. Top-level keys apply to
//! every subcommand that accepts them; keys under a `[evaluate]`,
//! `[metaeval]`, `[report]` or `[compare]` table apply to that subcommand
//! and must be valid there. Flags given on the command line win.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::backend::{HttpProvider, LlmClient, Provider, RecordingProvider, ReplayProvider, RetryPolicy};
use crate::corpus::{ingest_corpus, load_gold, CorpusFormat, HttpScorer, ScoreTable, TableScorer};
use crate::error::{Error, Result};
use crate::pipeline::{Mode, Pipeline, RunArtifact, RunConfig, SegmentScorer};
use crate::prompting::load_few_shots;
use crate::report::{build_report, render_report, MetaEvalOptions, RenderedFile, ReportFormat, ReportInputs};

#[derive(Debug, Parser)]
#[command(name = "mqm-ape", version, about = "LLM-based MQM evaluation with post-edit verification")]
pub struct Cli {
    /// TOML file presetting flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate a corpus and write a run artifact.
    Evaluate(EvaluateArgs),
    /// Meta-evaluate a run against gold judgements.
    Metaeval(MetaevalArgs),
    /// Score tables, usage and error distributions of a run.
    Report(ReportArgs),
    /// Compare a run against a baseline run.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
#[command(group = clap::ArgGroup::new("backend").required(true).args(["backend_url", "replay"]))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus format; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<CorpusFormat>,
    #[arg(long, default_value = "mqm-ape")]
    pub mode: Mode,
    /// OpenAI-compatible chat completions base URL.
    #[arg(long, value_name = "URL")]
    pub backend_url: Option<String>,
    /// Serve responses from a replay file instead of a live backend.
    #[arg(long, value_name = "PATH")]
    pub replay: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Segments (and backend requests) in flight at once.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every backend response to this replay file.
    #[arg(long, value_name = "PATH")]
    pub record_replay: Option<PathBuf>,
    /// External metric scores, used by metric-filter mode.
    #[arg(long, value_name = "PATH", conflicts_with = "scorer_url")]
    pub scores: Option<PathBuf>,
    /// External metric service, used by metric-filter mode.
    #[arg(long, value_name = "URL")]
    pub scorer_url: Option<String>,
    /// Metric used by metric-filter mode.
    #[arg(long)]
    pub filter_metric: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub keep_probability: f64,
    /// Post-edit and verify minor errors only.
    #[arg(long)]
    pub minor_only_ape: bool,
    /// Evaluator examples (JSON lines, exactly three).
    #[arg(long, value_name = "PATH")]
    pub shots: Option<PathBuf>,
    /// Skip malformed corpus lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file, or directory for csv; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
    /// Categories listed in the top-k tables.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    #[arg(long, default_value_t = crate::metaeval::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    /// Seed of the permutation test.
    #[arg(long, default_value_t = 0)]
    pub perm_seed: u64,
    /// Count contrastive verdicts as positive in verifier consistency.
    #[arg(long)]
    pub contrastive_positive: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct MetaevalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Baseline run for significance tests.
    #[arg(long)]
    pub baseline_run: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub significance: SignificanceArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub baseline_run: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub significance: SignificanceArgs,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to stderr.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match apply_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Finds the subcommand name and the `--config` value in raw arguments.
fn locate(argv: &[OsString]) -> (Option<usize>, Option<PathBuf>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && !arg.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

fn toml_flag(key: &str, value: &toml::Value) -> Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag.into()],
        toml::Value::Boolean(false) => Vec::new(),
        toml::Value::String(s) => vec![flag.into(), s.into()],
        toml::Value::Integer(n) => vec![flag.into(), n.to_string().into()],
        toml::Value::Float(x) => vec![flag.into(), x.to_string().into()],
        _ => return Err(Error::invalid(format!("config key `{key}` must be a string, number or boolean"))),
    })
}

/// Inserts flags from the config file right after the subcommand name, so
/// that later command-line flags override them.
fn apply_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let (Some(sub_idx), Some(path)) = locate(&argv) else {
        return Ok(argv);
    };
    let sub_name = argv[sub_idx].to_string_lossy().into_owned();
    let command = Cli::command();
    let Some(sub) = command.find_subcommand(&sub_name) else {
        return Ok(argv);
    };
    let accepts = |key: &str| {
        let long = key.replace('_', "-");
        sub.get_arguments().any(|a| a.get_long() == Some(long.as_str()))
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut preset = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) if key == &sub_name => {
                for (k, v) in section {
                    if !accepts(k) {
                        return Err(Error::invalid(format!(
                            "{}: `{k}` is not a flag of `{sub_name}`",
                            path.display()
                        )));
                    }
                    preset.extend(toml_flag(k, v)?);
                }
            }
            toml::Value::Table(_) => {}
            _ if accepts(key) => preset.extend(toml_flag(key, value)?),
            _ => {}
        }
    }
    argv.splice(sub_idx + 1..sub_idx + 1, preset);
    Ok(argv)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evaluate(args) => evaluate(&args),
        Command::Metaeval(args) => {
            let run = RunArtifact::read(&args.run)?;
            let gold = load_gold(&args.gold)?;
            let scores = args.scores.as_deref().map(ScoreTable::load).transpose()?;
            let baseline = args.baseline_run.as_deref().map(RunArtifact::read).transpose()?;
            let inputs = ReportInputs {
                run: &run,
                gold: Some(&gold),
                scores: scores.as_ref(),
                baseline: baseline.as_ref(),
            };
            emit(inputs, &args.output, Some(&args.significance))
        }
        Command::Report(args) => {
            let run = RunArtifact::read(&args.run)?;
            let gold = args.gold.as_deref().map(load_gold).transpose()?;
            let scores = args.scores.as_deref().map(ScoreTable::load).transpose()?;
            let inputs = ReportInputs {
                run: &run,
                gold: gold.as_ref(),
                scores: scores.as_ref(),
                baseline: None,
            };
            emit(inputs, &args.output, None)
        }
        Command::Compare(args) => {
            let run = RunArtifact::read(&args.run)?;
            let baseline = RunArtifact::read(&args.baseline_run)?;
            let gold = load_gold(&args.gold)?;
            let scores = args.scores.as_deref().map(ScoreTable::load).transpose()?;
            let inputs = ReportInputs {
                run: &run,
                gold: Some(&gold),
                scores: scores.as_ref(),
                baseline: Some(&baseline),
            };
            emit(inputs, &args.output, Some(&args.significance))
        }
    }
}

fn scorer(args: &EvaluateArgs) -> Result<Option<Arc<dyn SegmentScorer>>> {
    if args.mode != Mode::MetricFilter {
        return Ok(None);
    }
    if let Some(url) = &args.scorer_url {
        let metric = args
            .filter_metric
            .clone()
            .ok_or_else(|| Error::invalid("--scorer-url needs --filter-metric"))?;
        return Ok(Some(Arc::new(HttpScorer::new(url, metric))));
    }
    let path = args
        .scores
        .as_deref()
        .ok_or_else(|| Error::invalid("metric-filter mode needs --scores or --scorer-url"))?;
    let table = ScoreTable::load(path)?;
    let metric = match &args.filter_metric {
        Some(m) => m.clone(),
        None => match table.metrics().as_slice() {
            [only] => only.clone(),
            names => {
                return Err(Error::invalid(format!(
                    "{} holds metrics {names:?}; choose one with --filter-metric",
                    path.display()
                )))
            }
        },
    };
    Ok(Some(Arc::new(TableScorer::new(Arc::new(table), metric))))
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let format = match args.format {
        Some(f) => f,
        None => CorpusFormat::from_path(&args.corpus)?,
    };
    let (corpus, warnings) = ingest_corpus(&args.corpus, format, !args.lenient)?;
    for w in &warnings {
        eprintln!("warning: {}:{}: {}", args.corpus.display(), w.line, w.message);
    }
    let scorer = scorer(args)?;

    let base: Arc<dyn Provider> = match (&args.backend_url, &args.replay) {
        (Some(url), None) => {
            let model = args
                .model
                .clone()
                .ok_or_else(|| Error::invalid("--backend-url needs --model"))?;
            Arc::new(HttpProvider::from_env(url, model))
        }
        (None, Some(path)) => Arc::new(ReplayProvider::load(path)?),
        _ => return Err(Error::invalid("give exactly one of --backend-url and --replay")),
    };
    let recorder = args.record_replay.as_ref().map(|_| Arc::new(RecordingProvider::new(base.clone())));
    let provider: Arc<dyn Provider> = match &recorder {
        Some(r) => r.clone(),
        None => base,
    };
    let policy = RetryPolicy {
        max_attempts: args.max_attempts,
        base_temperature: args.temperature,
        ..RetryPolicy::default()
    };
    let config = RunConfig {
        mode: args.mode,
        seed: args.seed,
        keep_probability: args.keep_probability,
        concurrency_limit: args.concurrency,
        retry: policy,
        minor_only_ape: args.minor_only_ape,
        filter_metric: scorer.as_ref().map(|s| s.metric_name().to_string()),
        ..RunConfig::default()
    };
    config.validate()?;
    let client = LlmClient::new(provider, policy).with_max_in_flight(args.concurrency);
    let mut pipeline = Pipeline::new(config, Arc::new(client))?;
    if let Some(path) = &args.shots {
        pipeline = pipeline.with_shots(load_few_shots(path)?)?;
    }
    if let Some(s) = scorer {
        pipeline = pipeline.with_scorer(s);
    }
    if let Some(model) = &args.model {
        pipeline = pipeline.with_model_name(model.clone());
    }
    let run = pipeline.run_corpus(&corpus)?;
    run.write(&args.out)?;
    if let (Some(recorder), Some(path)) = (&recorder, &args.record_replay) {
        recorder.write(path)?;
    }
    let failed = run.failures().count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} segments failed; see the run artifact", corpus.len());
    }
    Ok(())
}

fn emit(inputs: ReportInputs<'_>, output: &OutputArgs, significance: Option<&SignificanceArgs>) -> Result<()> {
    let mut options = MetaEvalOptions {
        top_k: output.top_k,
        ..MetaEvalOptions::default()
    };
    if let Some(s) = significance {
        options.n_resamples = s.resamples;
        options.seed = s.perm_seed;
        options.contrastive_positive = s.contrastive_positive;
    }
    let report = build_report(inputs, &options)?;
    let files = render_report(&report, output.format)?;
    write_files(&files, output.out.as_deref(), output.format)
}

fn write_files(files: &[RenderedFile], out: Option<&Path>, format: ReportFormat) -> Result<()> {
    match out {
        None => {
            let mut stdout = std::io::stdout().lock();
            let stdout_err = |e| Error::io(Path::new("<stdout>"), e);
            for f in files {
                if format == ReportFormat::Csv {
                    writeln!(stdout, "# {}", f.name).map_err(stdout_err)?;
                }
                stdout.write_all(&f.bytes).map_err(stdout_err)?;
            }
            Ok(())
        }
        Some(dir) if format == ReportFormat::Csv => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for f in files {
                let path = dir.join(&f.name);
                std::fs::write(&path, &f.bytes).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Some(path) => {
            let bytes: Vec<u8> = files.iter().flat_map(|f| f.bytes.iter().copied()).collect();
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    }
}
