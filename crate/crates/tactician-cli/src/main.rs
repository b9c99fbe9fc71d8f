//! Command-line front end: supervised fitting, reinforcement training over
//! self-play, interactive evaluation, single-case simulation, and report
//! formatting.
//!
//! Every command reads one JSON configuration file plus flag overrides.
//! Commands that produce output create a run directory and write its
//! manifest before anything else, so interrupted runs stay auditable and
//! resumable. Success exits 0; failures exit nonzero with one line of
//! machine-readable error JSON on stderr (`{"error":{"kind",...}}`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tactician::catalog::{builtin_catalog, StrategyCatalog};
use tactician::config::{ConfigError, RunConfig};
use tactician::corpus::{load_corpus, split_cases, CorpusError, CorpusRecord};
use tactician::domain::{CaseProfile, EpisodeRecord, EpisodeStatus, Speaker};
use tactician::eval::{
    emit_report, evaluate_policy, relative_curve, report_csv, summarize, CurveMetric, EvalError,
    EvalRecord, RelativeCurve, ReportFormat, Summary,
};
use tactician::gateway::{BackendKind, Gateway, GatewayError, RequestLog};
use tactician::policy::{load_checkpoint, save_checkpoint, PolicyError, PolicyParameters};
use tactician::reward::RewardError;
use tactician::roleplay::TemplateSet;
use tactician::runlog::{write_transcripts, RunManifest, RunPaths, RunWriter, RunlogError};
use tactician::selfplay::{
    rl_train, run_episode, sft_train, EpisodeContext, EpisodeMode, Planner, SelfplayError,
};

#[derive(Parser)]
#[command(
    name = "tactician",
    version,
    about = "Train and evaluate a plug-in dialogue strategy planner driven by LLM self-play"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the planner to a strategy-annotated corpus (supervised).
    Sft(SftArgs),
    /// Train the planner with policy-gradient updates over self-play episodes.
    RlTrain(RlTrainArgs),
    /// Play every case of a corpus split greedily and report the metrics.
    Evaluate(EvaluateArgs),
    /// Play a single case and print its transcript.
    Simulate(SimulateArgs),
    /// Re-emit the summary or CSV table from a finished evaluation run.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (JSON). Relative paths inside it resolve
    /// against its own directory.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Master seed override for case sampling and episode randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create (default: runs/<command>-seed<seed>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Backend override applied to all three roles.
    #[arg(long, value_name = "KIND")]
    backend: Option<BackendChoice>,
    /// Script file (scripted) or recorded request log (replay) paired with
    /// --backend; applied to all three roles.
    #[arg(long, value_name = "FILE")]
    script: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    HttpChat,
    Scripted,
    Replay,
}

impl BackendChoice {
    fn kind(self) -> BackendKind {
        match self {
            BackendChoice::HttpChat => BackendKind::HttpChat,
            BackendChoice::Scripted => BackendKind::Scripted,
            BackendChoice::Replay => BackendKind::Replay,
        }
    }
}

#[derive(Args)]
struct SftArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Start from these parameters instead of a fresh policy.
    #[arg(long, value_name = "FILE")]
    from_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct RlTrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Episode-count override.
    #[arg(long)]
    episodes: Option<u32>,
    /// Start from these parameters (typically the supervised checkpoint).
    #[arg(long, value_name = "FILE")]
    from_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameters to evaluate (omit for a fresh, untrained policy).
    #[arg(long, value_name = "FILE")]
    from_checkpoint: Option<PathBuf>,
    /// Plan with no strategy instruction at all instead of the policy.
    #[arg(long)]
    standard: bool,
    /// Replay a previous run's request log instead of contacting backends.
    #[arg(long, value_name = "FILE")]
    replay: Option<PathBuf>,
    /// Finished run directory whose records serve as the baseline for
    /// relative per-turn curves in the CSV report.
    #[arg(long, value_name = "DIR")]
    baseline: Option<PathBuf>,
    /// Method label used in the CSV report.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Case id to play (must exist in the corpus).
    #[arg(long)]
    case: String,
    /// Parameters to plan with (omit for a fresh, untrained policy).
    #[arg(long, value_name = "FILE")]
    from_checkpoint: Option<PathBuf>,
    /// Plan with no strategy instruction at all instead of the policy.
    #[arg(long)]
    standard: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Finished run directory (reads its manifest.json and records.json).
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Finished run directory whose records serve as the baseline for
    /// relative per-turn curves.
    #[arg(long, value_name = "DIR")]
    baseline: Option<PathBuf>,
    /// Method label used in the CSV rows.
    #[arg(long, default_value = "policy")]
    method: String,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
    /// Write here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

/// One failure category per exit path. Validation problems (configuration,
/// corpus, flag usage) exit 2; everything that failed while running exits 1.
enum CliError {
    Config { message: String, details: Vec<String> },
    Corpus { message: String, details: Vec<String> },
    Usage { message: String },
    Runtime { message: String },
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError::Usage { message: message.into() }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        CliError::Runtime { message: message.to_string() }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Corpus { .. } => "corpus",
            CliError::Usage { .. } => "usage",
            CliError::Runtime { .. } => "runtime",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime { .. } => 1,
            _ => 2,
        }
    }

    fn to_json(&self) -> String {
        let (message, details) = match self {
            CliError::Config { message, details } | CliError::Corpus { message, details } => {
                (message.as_str(), details.as_slice())
            }
            CliError::Usage { message } | CliError::Runtime { message } => {
                (message.as_str(), &[][..])
            }
        };
        let mut error = json!({ "kind": self.kind(), "message": message });
        if !details.is_empty() {
            error["details"] = json!(details);
        }
        json!({ "error": error }).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        match err {
            ConfigError::Invalid { problems } => CliError::Config {
                message: "configuration is invalid".into(),
                details: problems,
            },
            other => CliError::Config { message: other.to_string(), details: Vec::new() },
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(err: CorpusError) -> Self {
        match err {
            CorpusError::Invalid { path, problems } => CliError::Corpus {
                message: format!("corpus {path} is invalid"),
                details: problems,
            },
            other => CliError::runtime(other),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(err: GatewayError) -> Self {
        // The CLI only constructs gateways; construction failures are
        // configuration problems (missing base_url, unreadable script, ...).
        CliError::Config { message: err.to_string(), details: Vec::new() }
    }
}

impl From<PolicyError> for CliError {
    fn from(err: PolicyError) -> Self {
        CliError::runtime(err)
    }
}

impl From<SelfplayError> for CliError {
    fn from(err: SelfplayError) -> Self {
        CliError::runtime(err)
    }
}

impl From<RunlogError> for CliError {
    fn from(err: RunlogError) -> Self {
        CliError::runtime(err)
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        CliError::runtime(err)
    }
}

impl From<RewardError> for CliError {
    fn from(err: RewardError) -> Self {
        CliError::runtime(err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::runtime(err)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::runtime(err)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sft(args) => cmd_sft(args),
        Command::RlTrain(args) => cmd_rl_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}

/// Validated configuration plus the resolved run directory.
struct Prepared {
    config: RunConfig,
    seed: u64,
    paths: RunPaths,
}

impl Prepared {
    fn run_id(&self) -> String {
        self.paths
            .root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(self.run_id(), command, self.seed, self.config.clone())
    }

    fn catalog(&self) -> &'static StrategyCatalog {
        builtin_catalog(self.config.domain)
    }

    fn templates(&self) -> &'static TemplateSet {
        TemplateSet::builtin(self.config.domain)
    }
}

/// Loads the configuration, applies flag overrides, resolves relative paths
/// against the config file's directory, and validates everything at once.
/// Commands that never contact a completion endpoint pass
/// `needs_backends: false` so an unfilled backend section doesn't block them.
fn prepare(common: &CommonArgs, command: &str, needs_backends: bool) -> Result<Prepared, CliError> {
    let mut config = RunConfig::from_path(&common.config)?;

    let base = common.config.parent().unwrap_or_else(|| Path::new("."));
    if let Some(corpus) = &config.corpus {
        let path = Path::new(corpus);
        if path.is_relative() {
            config.corpus = Some(base.join(path).to_string_lossy().into_owned());
        }
    }

    let kind = common.backend.map(BackendChoice::kind);
    for section in [&mut config.backend_sys, &mut config.backend_usr, &mut config.backend_rwd] {
        if let Some(kind) = kind {
            section.kind = kind;
        }
        if let Some(script) = &common.script {
            section.script_path = Some(script.clone());
        }
        if let Some(path) = &section.script_path {
            if path.is_relative() && common.script.is_none() {
                section.script_path = Some(base.join(path));
            }
        }
    }
    if matches!(kind, Some(BackendKind::Scripted)) && common.script.is_none() {
        return Err(CliError::usage("--backend scripted needs --script <file>"));
    }
    if matches!(kind, Some(BackendKind::Replay)) && common.script.is_none() {
        return Err(CliError::usage(
            "--backend replay needs --script <file> (a previous run's request log)",
        ));
    }

    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if needs_backends {
        config.validate()?;
    } else {
        config.validate_offline()?;
    }

    let seed = config.train.seed;
    let root = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{seed}")));
    Ok(Prepared { config, seed, paths: RunPaths::new(root) })
}

fn load_required_corpus(config: &RunConfig) -> Result<Vec<CorpusRecord>, CliError> {
    let path = config.corpus.as_ref().ok_or_else(|| CliError::Config {
        message: "configuration is invalid".into(),
        details: vec!["corpus: this command needs a corpus path".into()],
    })?;
    Ok(load_corpus(path, config.domain)?)
}

fn initial_params(
    from_checkpoint: Option<&Path>,
    catalog: &StrategyCatalog,
    config: &RunConfig,
) -> Result<PolicyParameters, CliError> {
    match from_checkpoint {
        Some(path) => Ok(load_checkpoint(path, catalog)?),
        None => Ok(PolicyParameters::new(catalog, config.policy.feature_dim)),
    }
}

fn build_gateways(
    config: &RunConfig,
    log: &RequestLog,
) -> Result<(Gateway, Gateway, Gateway), CliError> {
    fn labeled(label: &str) -> impl FnOnce(GatewayError) -> CliError + '_ {
        move |err| CliError::Config {
            message: format!("{label}: {err}"),
            details: Vec::new(),
        }
    }
    let sys = Gateway::from_config(&config.backend_sys, Some(log.clone()))
        .map_err(labeled("backend_sys"))?;
    let usr = Gateway::from_config(&config.backend_usr, Some(log.clone()))
        .map_err(labeled("backend_usr"))?;
    let rwd = Gateway::from_config(&config.backend_rwd, Some(log.clone()))
        .map_err(labeled("backend_rwd"))?;
    Ok((sys, usr, rwd))
}

fn status_label(status: EpisodeStatus) -> &'static str {
    match status {
        EpisodeStatus::OnGoing => "on_going",
        EpisodeStatus::GoalCompleted => "goal_completed",
        EpisodeStatus::GoalFailed => "goal_failed",
    }
}

fn read_records(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Relative per-turn curves against another run's records, labeled by that
/// run's directory name.
fn baseline_curves(
    records: &[EvalRecord],
    baseline_dir: &Path,
    max_turns: u32,
) -> Result<Vec<RelativeCurve>, CliError> {
    let baseline = read_records(&RunPaths::new(baseline_dir).records())?;
    let label = baseline_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| baseline_dir.display().to_string());
    Ok(vec![
        RelativeCurve {
            metric: CurveMetric::Sr,
            baseline: label.clone(),
            points: relative_curve(records, &baseline, CurveMetric::Sr, max_turns),
        },
        RelativeCurve {
            metric: CurveMetric::Sl,
            baseline: label,
            points: relative_curve(records, &baseline, CurveMetric::Sl, max_turns),
        },
    ])
}

fn cmd_sft(args: SftArgs) -> Result<(), CliError> {
    let prep = prepare(&args.common, "sft", false)?;
    let catalog = prep.catalog();
    let corpus = load_required_corpus(&prep.config)?;
    let mut params = initial_params(args.from_checkpoint.as_deref(), catalog, &prep.config)?;

    fs::create_dir_all(&prep.paths.root)?;
    let mut manifest = prep.manifest("sft");
    manifest.write(prep.paths.manifest())?;

    let outcome = sft_train(&mut params, &corpus, &prep.config.policy, &prep.config.train)?;

    let mut epoch_log = String::new();
    for report in &outcome.reports {
        epoch_log.push_str(&serde_json::to_string(report)?);
        epoch_log.push('\n');
    }
    fs::write(prep.paths.root.join("sft_epochs.jsonl"), epoch_log)?;

    let final_path = prep.paths.final_checkpoint();
    save_checkpoint(&params, &final_path)?;
    manifest.checkpoints.push("final.ckpt".into());
    manifest.write(prep.paths.manifest())?;

    println!(
        "fitted {} epoch(s) on {} record(s); kept epoch {} (dev accuracy {:.4}); skipped {} unlabeled system turn(s)",
        outcome.reports.len(),
        corpus.len(),
        outcome.best_epoch,
        outcome.best_dev_accuracy,
        outcome.skipped_unlabeled,
    );
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_rl_train(args: RlTrainArgs) -> Result<(), CliError> {
    let mut prep = prepare(&args.common, "rl-train", true)?;
    if let Some(episodes) = args.episodes {
        prep.config.train.rl_episodes = episodes;
    }
    let catalog = prep.catalog();
    let templates = prep.templates();
    let corpus = load_required_corpus(&prep.config)?;
    let cases = split_cases(&corpus, tactician::corpus::Split::Train);
    let mut params = initial_params(args.from_checkpoint.as_deref(), catalog, &prep.config)?;

    let mut writer = RunWriter::create(&prep.paths.root, prep.manifest("rl-train"))?;
    let log = RequestLog::create(&prep.paths.request_log())?;
    let (sys, usr, rwd) = build_gateways(&prep.config, &log)?;
    let mut ctx = EpisodeContext::new(
        &sys,
        &usr,
        &rwd,
        &prep.config.policy,
        &prep.config.reward,
        catalog,
        templates,
    );
    ctx.gen_max_new_tokens = prep.config.gen_max_new_tokens;

    let rows = rl_train(&mut params, &ctx, &cases, &prep.config.train, &mut writer)?;
    let final_path = writer.save_final(&params)?;

    let invalid = rows.iter().filter(|r| r.invalid.is_some()).count();
    println!(
        "trained {} episode(s) over {} case(s); {} invalid",
        rows.len(),
        cases.len(),
        invalid,
    );
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut prep = prepare(&args.common, "evaluate", true)?;
    if let Some(log_path) = &args.replay {
        for section in
            [&mut prep.config.backend_sys, &mut prep.config.backend_usr, &mut prep.config.backend_rwd]
        {
            section.kind = BackendKind::Replay;
            section.script_path = Some(log_path.clone());
        }
    }
    let catalog = prep.catalog();
    let templates = prep.templates();
    let corpus = load_required_corpus(&prep.config)?;
    let cases = split_cases(&corpus, prep.config.eval.split);
    if cases.is_empty() {
        return Err(CliError::Corpus {
            message: format!("no cases in split '{}'", prep.config.eval.split),
            details: Vec::new(),
        });
    }

    let params = if args.standard {
        None
    } else {
        Some(initial_params(args.from_checkpoint.as_deref(), catalog, &prep.config)?)
    };
    let planner = match &params {
        Some(p) => Planner::Learned(p),
        None => Planner::Standard,
    };

    fs::create_dir_all(&prep.paths.root)?;
    prep.manifest("evaluate").write(prep.paths.manifest())?;
    let log = RequestLog::create(&prep.paths.request_log())?;
    let (sys, usr, rwd) = build_gateways(&prep.config, &log)?;
    let mut ctx = EpisodeContext::new(
        &sys,
        &usr,
        &rwd,
        &prep.config.policy,
        &prep.config.reward,
        catalog,
        templates,
    );
    ctx.gen_max_new_tokens = prep.config.gen_max_new_tokens;

    let run = evaluate_policy(&planner, &ctx, &cases);

    let mut records_json = serde_json::to_string_pretty(&run.records)?;
    records_json.push('\n');
    fs::write(prep.paths.records(), records_json)?;
    write_transcripts(prep.paths.transcripts(), &run.episodes)?;

    let max_turns = prep.config.reward.max_turns;
    let summary = summarize(&run.records, max_turns, prep.config.eval.at_failure_convention);
    let curves = match &args.baseline {
        Some(dir) => baseline_curves(&run.records, dir, max_turns)?,
        None => Vec::new(),
    };
    let method = args
        .method
        .clone()
        .unwrap_or_else(|| if args.standard { "standard".into() } else { "learned".into() });
    emit_report(&method, &summary, &curves, max_turns, prep.paths.summary(), ReportFormat::Json)?;
    emit_report(&method, &summary, &curves, max_turns, prep.paths.report(), ReportFormat::Csv)?;

    print_summary(&summary);
    println!("outputs: {}", prep.paths.root.display());
    Ok(())
}

fn print_summary(summary: &Summary) {
    println!(
        "evaluated {} case(s): sr {:.4}, at {:.4}, sl {:.4}; {} invalid",
        summary.n_cases, summary.sr, summary.at, summary.sl, summary.n_invalid,
    );
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let prep = prepare(&args.common, "simulate", true)?;
    let catalog = prep.catalog();
    let templates = prep.templates();
    let corpus = load_required_corpus(&prep.config)?;
    let case: CaseProfile = corpus
        .iter()
        .find(|record| record.case.id == args.case)
        .map(|record| record.case.clone())
        .ok_or_else(|| CliError::usage(format!("case '{}' not found in the corpus", args.case)))?;

    let params = if args.standard {
        None
    } else {
        Some(initial_params(args.from_checkpoint.as_deref(), catalog, &prep.config)?)
    };
    let planner = match &params {
        Some(p) => Planner::Learned(p),
        None => Planner::Standard,
    };

    fs::create_dir_all(&prep.paths.root)?;
    prep.manifest("simulate").write(prep.paths.manifest())?;
    let log = RequestLog::create(&prep.paths.request_log())?;
    let (sys, usr, rwd) = build_gateways(&prep.config, &log)?;
    let mut ctx = EpisodeContext::new(
        &sys,
        &usr,
        &rwd,
        &prep.config.policy,
        &prep.config.reward,
        catalog,
        templates,
    );
    ctx.gen_max_new_tokens = prep.config.gen_max_new_tokens;

    let episode: EpisodeRecord = run_episode(&planner, &ctx, &case, EpisodeMode::Eval);
    write_transcripts(prep.paths.transcripts(), std::slice::from_ref(&episode))?;

    for turn in &episode.turns {
        match (turn.speaker, &turn.strategy) {
            (Speaker::System, Some(action)) => {
                println!("[{}] system ({}): {}", turn.index, action.name, turn.text)
            }
            (Speaker::System, None) => println!("[{}] system: {}", turn.index, turn.text),
            (Speaker::User, _) => println!("[{}] user: {}", turn.index, turn.text),
        }
    }
    let mut closing = format!("status: {}", status_label(episode.final_status));
    if let Some(turn) = episode.completion_turn {
        closing.push_str(&format!(" (completed at exchange {turn})"));
    }
    if let Some(sl) = episode.sl_ratio {
        closing.push_str(&format!(" (sl {sl:.4})"));
    }
    println!("{closing}");

    if let Some(reason) = &episode.invalid {
        return Err(CliError::runtime(format!("episode aborted: {reason}")));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let paths = RunPaths::new(&args.run);
    let manifest = RunManifest::read(paths.manifest())?;
    let records = read_records(&paths.records())?;

    let max_turns = manifest.config.reward.max_turns;
    let summary = summarize(&records, max_turns, manifest.config.eval.at_failure_convention);
    let curves = match &args.baseline {
        Some(dir) => baseline_curves(&records, dir, max_turns)?,
        None => Vec::new(),
    };

    let body = match args.format {
        OutputFormat::Csv => report_csv(&args.method, &summary, &curves, max_turns),
        OutputFormat::Json => {
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            text
        }
    };
    match &args.out {
        Some(path) => {
            fs::write(path, body)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}
