// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wattflow::accounting::{AccountingOptions, AttributionPolicy, EnergyReport, Method, PolicyKind, RunStatus};
use wattflow::orchestrator::{
    compare_reports, report_cmd, resume, run_wrapped, OrchestratorError, ReportOptions, RunConfig, EXIT_OK,
    EXIT_PARTIAL, EXIT_RUNTIME, EXIT_USAGE,
};
use wattflow::sampler::clock::{wall_now_ns, SystemClock};
use wattflow::sampler::{Agent, AgentError, SamplerConfig};
use wattflow::signal::{signal_start, signal_stop, SessionMarker};
use wattflow::sim::{evaluate_methods, write_outputs, Scenario, SimError};
use wattflow::trace::DEFAULT_SUB_RESOLUTION_S;

#[derive(Parser)]
#[command(name = "wattflow", version, about = "RAPL energy measurement for workflow runs")]
struct Cli {
    /// JSON configuration (agent settings for `agent`, agent list for `run`)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample counters for every session signalled in the signal directory
    Agent,
    /// Measure a workflow command across all configured agents
    Run(RunArgs),
    /// Compute an energy report from collected logs
    Report(ReportArgs),
    /// Compare report totals against the first report
    Compare(CompareArgs),
    /// Evaluate all measurement methods on a synthetic scenario
    Simulate(SimulateArgs),
    /// Create or remove a session marker by hand
    Signal(SignalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Workflow command, run with `sh -c`
    #[arg(long, required_unless_present = "resume")]
    cmd: Option<String>,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop and collect an interrupted run of this session
    #[arg(long, value_name = "SESSION", conflicts_with_all = ["cmd", "session"])]
    resume: Option<String>,
    #[arg(long)]
    poll_interval_s: Option<f64>,
    /// Trace for per-task attribution
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Cputime,
    Walltime,
    Exclusive,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Cputime => PolicyKind::CpuTimeShare,
            PolicyArg::Walltime => PolicyKind::WallTimeShare,
            PolicyArg::Exclusive => PolicyKind::ExclusiveOnly,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding rapl_<node>_<session>.csv logs
    #[arg(long)]
    logs: PathBuf,
    /// Nextflow trace (TSV) or generic JSON trace
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cputime")]
    policy: PolicyArg,
    #[arg(long)]
    idle_baseline_watts: Option<f64>,
    #[arg(long, default_value = "shell_wrap")]
    method: Method,
    /// Runtime assumed for tasks logged with equal start and end
    #[arg(long, default_value_t = DEFAULT_SUB_RESOLUTION_S)]
    sub_resolution_s: f64,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report files; the first is the reference
    #[arg(required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Also write the table as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SignalArgs {
    #[command(subcommand)]
    action: SignalAction,
}

#[derive(Subcommand)]
enum SignalAction {
    Start {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        max_runtime_s: Option<u64>,
    },
    Stop {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        session: String,
    },
}

/// Error that maps to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.is::<Usage>() {
        return EXIT_USAGE;
    }
    if let Some(e) = err.downcast_ref::<OrchestratorError>() {
        return e.exit_code();
    }
    if let Some(AgentError::Config(_)) = err.downcast_ref::<AgentError>() {
        return EXIT_USAGE;
    }
    if let Some(SimError::Invalid(_)) = err.downcast_ref::<SimError>() {
        return EXIT_USAGE;
    }
    EXIT_RUNTIME
}

fn need_config(cli_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    cli_config
        .clone()
        .ok_or_else(|| Usage(format!("{what} needs --config <json>")).into())
}

fn cmd_agent(config: &Option<PathBuf>) -> Result<i32> {
    let path = need_config(config, "agent")?;
    let cfg = SamplerConfig::from_json_file(&path)?;
    log::info!(
        "agent {} watching {} every {} ms",
        cfg.node_id,
        cfg.signal_dir.display(),
        cfg.interval_ms
    );
    let mut agent = Agent::from_config(cfg, SystemClock)?;
    agent.run()?;
    Ok(EXIT_OK)
}

fn cmd_run(config: &Option<PathBuf>, args: RunArgs) -> Result<i32> {
    let path = need_config(config, "run")?;
    let mut cfg = RunConfig::from_json_file(&path)?;
    if let Some(c) = args.cmd {
        cfg.workflow_cmd = c;
    }
    if let Some(s) = args.session.or(args.resume.clone()) {
        cfg.session_id = s;
    }
    if cfg.session_id.is_empty() {
        cfg.session_id = format!("run-{}", wall_now_ns() / 1_000_000_000);
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if let Some(p) = args.poll_interval_s {
        cfg.poll_interval_s = p;
    }
    if let Some(t) = args.trace {
        cfg.trace = Some(t);
    }
    let outcome = if args.resume.is_some() {
        resume(&cfg)?
    } else {
        run_wrapped(&cfg)?
    };
    println!("{}", outcome.report_path.display());
    Ok(status_code(&outcome.report))
}

fn status_code(report: &EnergyReport) -> i32 {
    match report.status {
        RunStatus::Ok | RunStatus::Salvaged => EXIT_OK,
        RunStatus::Failed => EXIT_RUNTIME,
        RunStatus::Partial => EXIT_PARTIAL,
    }
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let mut policy = AttributionPolicy::new(args.policy.into());
    policy.idle_baseline_watts = args.idle_baseline_watts;
    policy.validate().map_err(|e| Usage(e.to_string()))?;
    if !(args.sub_resolution_s > 0.0) {
        return Err(Usage("--sub-resolution-s must be positive".into()).into());
    }
    let report = report_cmd(&ReportOptions {
        logs_dir: args.logs,
        trace: args.trace,
        policy,
        method: args.method,
        accounting: AccountingOptions {
            sub_resolution_s: args.sub_resolution_s,
        },
    })?;
    let json = report.to_json();
    match args.out {
        Some(p) => fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(EXIT_OK)
}

fn load_report(path: &Path) -> Result<EnergyReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    EnergyReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let mut reports = Vec::new();
    for p in &args.reports {
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        reports.push((label, load_report(p)?));
    }
    let table = compare_reports(&reports)?;
    print!("{}", table.to_text());
    if let Some(p) = args.json {
        fs::write(&p, table.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let scenario = Scenario::from_json(&text)?;
    let eval = evaluate_methods(&scenario)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_outputs(&scenario, &eval, &args.out)?;
    print!("{}", eval.coverage_text());
    Ok(EXIT_OK)
}

fn cmd_signal(args: SignalArgs) -> Result<i32> {
    match args.action {
        SignalAction::Start {
            dir,
            session,
            max_runtime_s,
        } => {
            let mut m = SessionMarker::workflow(session, wall_now_ns()).map_err(|e| Usage(e.to_string()))?;
            m.max_runtime_s = max_runtime_s;
            let path = signal_start(&dir, &m)?;
            println!("{}", path.display());
        }
        SignalAction::Stop { dir, session } => {
            if signal_stop(&dir, &session)?.was_absent {
                log::warn!("session {session} was not active");
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Cmd::Agent) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let result = match cli.command {
        Cmd::Agent => cmd_agent(&cli.config),
        Cmd::Run(a) => cmd_run(&cli.config, a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Signal(a) => cmd_signal(a),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("wattflow: {e:#}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
