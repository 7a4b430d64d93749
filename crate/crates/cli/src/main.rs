mod config;
mod review;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmgen_core::batch::{plan_batch, BatchError, BatchEvent, BatchRunner, RunDir, RunManifest, SlotStatus};
use dmgen_core::catalog::{parse_id_ranges, Catalog};
use dmgen_core::client::{
    usage_report, HttpTransport, LlmClient, MockScript, Transport, UsageTotals,
};
use dmgen_core::clock::{Clock, SystemClock};
use dmgen_core::prompts::{default_prompt_bundle, PromptBundle};
use dmgen_core::session::SessionClients;
use dmgen_core::store::{ExportFormat, ReviewVerdict, Selection, Store};

use config::{Overrides, Settings};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 2;
const EXIT_FAILED_SLOTS: u8 = 3;
const EXIT_ABORTED: u8 = 4;

/// Generate research-level math problems with a generator/evaluator model loop.
#[derive(Parser, Debug)]
#[command(name = "dmgen", version)]
struct Cli {
    /// Directions catalog (TSV); defaults to the built-in catalog.
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Directory holding generator.txt and evaluator.txt system prompts.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Run directory: manifest, transcripts, corpus and labels.
    #[arg(long, global = true, default_value = "dmgen-run")]
    run_dir: PathBuf,
    /// TOML config file. See `dmgen config --show-defaults`.
    #[arg(long, global = true, env = "DMGEN_CONFIG")]
    config: Option<PathBuf>,
    /// Chat completions endpoint for both roles.
    #[arg(long, global = true, env = "LLM_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    generator_model: Option<String>,
    #[arg(long, global = true)]
    evaluator_model: Option<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List or verify the directions catalog.
    Catalog(CatalogArgs),
    /// Start a new batch run.
    Run(RunArgs),
    /// Continue the run in --run-dir.
    Resume(ResumeArgs),
    /// Label accepted problems interactively.
    Review(ReviewArgs),
    /// Write accepted problems as JSONL or Markdown.
    Export(ExportArgs),
    /// Summarize the corpus and its labels.
    Stats(StatsArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct CatalogArgs {
    /// Category number, 1-10.
    #[arg(long)]
    category: Option<usize>,
    /// Direction ids, e.g. `1,5,10-12`.
    #[arg(long)]
    id: Option<String>,
    /// Only check the catalog invariants.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Use a scripted mock (JSON) instead of a live endpoint.
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long)]
    max_parallel: Option<u32>,
    #[arg(long)]
    requests_per_minute: Option<u32>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Direction ids to sweep, e.g. `1-2` or `3,58`; default all.
    #[arg(long)]
    directions: Option<String>,
    #[arg(long)]
    per_direction: Option<u32>,
    #[arg(long)]
    run_id: Option<String>,
    /// Print planned slots and first-round messages; make no calls.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args, Debug)]
struct ReviewArgs {
    #[arg(long, env = "USER", default_value = "anonymous")]
    reviewer: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Jsonl,
    Markdown,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerdictArg {
    UnknownToExperts,
    KnownOrOverlapsLiterature,
    IllPosed,
    TrivialOrRoutine,
}

impl From<VerdictArg> for ReviewVerdict {
    fn from(v: VerdictArg) -> Self {
        match v {
            VerdictArg::UnknownToExperts => ReviewVerdict::UnknownToExperts,
            VerdictArg::KnownOrOverlapsLiterature => ReviewVerdict::KnownOrOverlapsLiterature,
            VerdictArg::IllPosed => ReviewVerdict::IllPosed,
            VerdictArg::TrivialOrRoutine => ReviewVerdict::TrivialOrRoutine,
        }
    }
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    #[arg(long)]
    labeled_only: bool,
    #[arg(long, value_enum)]
    verdict: Option<VerdictArg>,
    #[arg(long)]
    directions: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Ignore config file, environment and flags.
    #[arg(long)]
    show_defaults: bool,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_INVALID, error: error.into() }
    }

    fn aborted(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_ABORTED, error: error.into() }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Catalog(args) => cmd_catalog(cli, args),
        Command::Run(args) => cmd_run(cli, args),
        Command::Resume(args) => cmd_resume(cli, args),
        Command::Review(args) => cmd_review(cli, args),
        Command::Export(args) => cmd_export(cli, args),
        Command::Stats(args) => cmd_stats(cli, args),
        Command::Config(args) => cmd_config(cli, args),
    }
}

fn load_catalog(cli: &Cli) -> Result<Catalog, Failure> {
    match &cli.catalog {
        Some(path) => Catalog::from_path(path).map_err(Failure::invalid),
        None => Ok(Catalog::shipped()),
    }
}

fn load_prompts(cli: &Cli) -> Result<PromptBundle, Failure> {
    match &cli.prompts {
        Some(dir) => PromptBundle::from_dir(dir).map_err(Failure::invalid),
        None => Ok(default_prompt_bundle()),
    }
}

fn resolve_settings(cli: &Cli, source: Option<&SourceArgs>, per_direction: Option<u32>) -> Result<Settings, Failure> {
    let mut settings = Settings::load(cli.config.as_deref()).map_err(Failure::invalid)?;
    settings.apply(&Overrides {
        endpoint: cli.endpoint.clone(),
        generator_model: cli.generator_model.clone(),
        evaluator_model: cli.evaluator_model.clone(),
        per_direction,
        max_parallel: source.and_then(|s| s.max_parallel),
        requests_per_minute: source.and_then(|s| s.requests_per_minute),
    });
    settings.validate().map_err(|e| Failure::invalid(anyhow!(e)))?;
    Ok(settings)
}

fn direction_ids(catalog: &Catalog, spec: Option<&str>) -> Result<Vec<u32>, Failure> {
    let Some(spec) = spec else {
        return Ok(catalog.directions().iter().map(|d| d.id).collect());
    };
    let ids = parse_id_ranges(spec).map_err(|e| Failure::invalid(anyhow!(e)))?;
    for &id in &ids {
        catalog.get(id).map_err(Failure::invalid)?;
    }
    Ok(ids)
}

fn cmd_catalog(cli: &Cli, args: &CatalogArgs) -> Outcome {
    let catalog = load_catalog(cli)?;
    if args.verify {
        println!(
            "ok: {} directions in {} categories, checksum {}",
            catalog.directions().len(),
            catalog.category_counts().len(),
            catalog.checksum()
        );
        return Ok(EXIT_OK);
    }
    let mut selected: Vec<_> = match args.category {
        Some(n) => catalog.by_category(n).map_err(Failure::invalid)?,
        None => catalog.directions().iter().collect(),
    };
    if let Some(spec) = &args.id {
        let ids: BTreeSet<u32> = direction_ids(&catalog, Some(spec))?.into_iter().collect();
        selected.retain(|d| ids.contains(&d.id));
    }
    let mut out = std::io::stdout().lock();
    for d in selected {
        let _ = writeln!(out, "{}\t{}\t{}", d.id, d.category, d.title);
    }
    Ok(EXIT_OK)
}

struct Transports {
    generator: Arc<dyn Transport>,
    evaluator: Arc<dyn Transport>,
}

fn build_transports(source: &SourceArgs) -> Result<Transports, Failure> {
    if let Some(path) = &source.mock {
        let script = MockScript::from_path(path).map_err(Failure::invalid)?;
        let (generator, evaluator) = script.build().map_err(Failure::invalid)?;
        return Ok(Transports {
            generator: Arc::new(generator),
            evaluator: Arc::new(evaluator),
        });
    }
    let api_key = std::env::var("LLM_API_KEY")
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Failure::invalid(anyhow!("no credentials: set LLM_API_KEY or pass --mock <script>")))?;
    let http: Arc<dyn Transport> = Arc::new(HttpTransport::new(Some(api_key)).map_err(Failure::invalid)?);
    Ok(Transports {
        generator: http.clone(),
        evaluator: http,
    })
}

fn print_event(event: &BatchEvent) {
    match event {
        BatchEvent::SlotStarted { direction_id, slot, attempt } => {
            log::info!("d{direction_id:03} s{slot}: attempt {attempt} started");
        }
        BatchEvent::SessionFinished { direction_id, slot, attempt, status, duplicate } => {
            let dup = if *duplicate { " (duplicate, discarded)" } else { "" };
            eprintln!("d{direction_id:03} s{slot} attempt {attempt}: {status:?}{dup}");
        }
        BatchEvent::SlotFinished { direction_id, slot, status } => match status {
            SlotStatus::Done { problem_id } => eprintln!("d{direction_id:03} s{slot}: done {problem_id}"),
            SlotStatus::FailedPermanently { reason } => eprintln!("d{direction_id:03} s{slot}: failed ({reason})"),
            SlotStatus::Pending => {}
        },
        BatchEvent::Reconciled { direction_id, slot, problem_id } => {
            eprintln!("d{direction_id:03} s{slot}: recovered record {problem_id} from an interrupted run");
        }
    }
}

fn execute(
    cli: &Cli,
    settings: &Settings,
    source: &SourceArgs,
    directions: Vec<u32>,
    run_id: Option<&str>,
) -> Outcome {
    let catalog = load_catalog(cli)?;
    let prompts = load_prompts(cli)?;
    let transports = build_transports(source)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let rpm = settings.client.requests_per_minute;
    let generator = LlmClient::new(transports.generator, settings.retry.clone(), clock.clone()).with_rate_limit(rpm);
    let evaluator = LlmClient::new(transports.evaluator, settings.retry.clone(), clock.clone()).with_rate_limit(rpm);
    let session = settings.session_config();
    let on_event = print_event;
    let runner = BatchRunner {
        catalog: &catalog,
        directions,
        config: &settings.batch,
        session: &session,
        prompts: &prompts,
        clients: SessionClients {
            generator: &generator,
            evaluator: &evaluator,
        },
        run_dir: RunDir::new(&cli.run_dir),
        faults: None,
        on_event: Some(&on_event),
    };

    let result = match run_id {
        Some(id) => runner.run(id),
        None => runner.resume(),
    };
    let mut usage = generator.usage();
    usage.add(&evaluator.usage());
    let manifest = result.map_err(|e| match e {
        BatchError::ManifestExists(dir) => Failure::aborted(anyhow!(
            "{} already holds a run; use `dmgen resume --run-dir {}` to continue it",
            dir.display(),
            dir.display()
        )),
        BatchError::InvalidConfig(_) => Failure::invalid(e),
        other => Failure::aborted(other),
    })?;
    print_summary(cli, &manifest, &usage, settings);
    Ok(if manifest.failed() > 0 { EXIT_FAILED_SLOTS } else { EXIT_OK })
}

fn print_summary(cli: &Cli, manifest: &RunManifest, usage: &UsageTotals, settings: &Settings) {
    let report = usage_report(usage, &settings.cost);
    println!(
        "run {}: {} done, {} failed, {} pending of {} slots",
        manifest.run_id,
        manifest.done(),
        manifest.failed(),
        manifest.pending(),
        manifest.slots.len()
    );
    println!("manifest: {}", RunDir::new(&cli.run_dir).manifest_path().display());
    println!(
        "usage this invocation: {} calls, {} input tokens, {} output tokens, estimated cost {:.4}",
        report.calls, report.input_tokens, report.output_tokens, report.estimated_cost
    );
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Outcome {
    let settings = resolve_settings(cli, Some(&args.source), args.per_direction)?;
    let catalog = load_catalog(cli)?;
    let directions = direction_ids(&catalog, args.directions.as_deref())?;

    if args.dry_run {
        let prompts = load_prompts(cli)?;
        let plan = plan_batch(&catalog, &directions, &settings.batch, &prompts).map_err(Failure::invalid)?;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{} planned slots; generator system prompt ({}):", plan.len(), prompts.version);
        let _ = writeln!(out, "{}\n", prompts.generator_system);
        for slot in &plan {
            let user = slot.first_messages.last().map(|m| m.content.as_str()).unwrap_or_default();
            let _ = writeln!(out, "d{:03} s{}\tuser: {user}", slot.direction_id, slot.slot);
        }
        return Ok(EXIT_OK);
    }

    let run_id = args.run_id.clone().unwrap_or_else(|| format!("run-{}", SystemClock.now().format("%Y%m%dT%H%M%SZ")));
    execute(cli, &settings, &args.source, directions, Some(&run_id))
}

fn cmd_resume(cli: &Cli, args: &ResumeArgs) -> Outcome {
    let manifest_path = RunDir::new(&cli.run_dir).manifest_path();
    let manifest = RunManifest::load(&manifest_path).map_err(Failure::aborted)?;
    // Batch shape comes from the manifest; everything else must match it.
    let mut settings = resolve_settings(cli, Some(&args.source), Some(manifest.snapshot.problems_per_direction))?;
    settings.batch.distinctness_threshold = manifest.snapshot.distinctness_threshold;
    settings.batch.max_attempts_per_slot = manifest.snapshot.max_attempts_per_slot;
    execute(cli, &settings, &args.source, manifest.snapshot.directions.clone(), None)
}

fn open_store(cli: &Cli) -> Result<Store, Failure> {
    Store::open_read_only(&cli.run_dir).map_err(Failure::aborted)
}

fn cmd_review(cli: &Cli, args: &ReviewArgs) -> Outcome {
    let catalog = load_catalog(cli)?;
    if !cli.run_dir.is_dir() {
        return Err(Failure::invalid(anyhow!("no run directory at {}", cli.run_dir.display())));
    }
    let mut store = Store::open(&cli.run_dir).map_err(Failure::aborted)?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    review::review(&mut store, &catalog, &args.reviewer, &SystemClock, stdin, stdout).map_err(Failure::aborted)?;
    Ok(EXIT_OK)
}

fn cmd_export(cli: &Cli, args: &ExportArgs) -> Outcome {
    let store = open_store(cli)?;
    let direction_ids = match &args.directions {
        Some(spec) => Some(parse_id_ranges(spec).map_err(|e| Failure::invalid(anyhow!(e)))?.into_iter().collect()),
        None => None,
    };
    let selection = Selection {
        direction_ids,
        run_id: args.run_id.clone(),
        labeled_only: args.labeled_only,
        verdict: args.verdict.map(Into::into),
    };
    let format = match args.format {
        Format::Jsonl => ExportFormat::Jsonl,
        Format::Markdown => ExportFormat::Markdown,
    };
    let bytes = store.export(&selection, format);
    match &args.output {
        Some(path) => write_file(path, &bytes).map_err(Failure::aborted)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes).and_then(|_| out.flush()).map_err(Failure::aborted)?;
        }
    }
    Ok(EXIT_OK)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_stats(cli: &Cli, args: &StatsArgs) -> Outcome {
    let store = open_store(cli)?;
    let stats = store.stats();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        return Ok(EXIT_OK);
    }
    println!("total problems: {}", stats.total);
    println!("labeled problems: {}", stats.labeled_problems);
    println!("mean rounds used: {:.2}", stats.mean_rounds_used);
    println!(
        "usage: {} calls, {} input tokens, {} output tokens",
        stats.usage.calls, stats.usage.input_tokens, stats.usage.output_tokens
    );
    if !stats.per_direction.is_empty() {
        println!("per direction:");
        for (d, n) in &stats.per_direction {
            println!("  {d}: {n}");
        }
    }
    if !stats.per_label.is_empty() {
        println!("per label:");
        for (v, n) in &stats.per_label {
            println!("  {}: {n}", v.as_str());
        }
    }
    Ok(EXIT_OK)
}

fn cmd_config(cli: &Cli, args: &ConfigArgs) -> Outcome {
    let settings = if args.show_defaults {
        Settings::default()
    } else {
        resolve_settings(cli, None, None)?
    };
    print!("{}", settings.to_toml());
    Ok(EXIT_OK)
}
