// SPDX-License-Identifier: Apache-2.0

//! Wrapping-script measurement: start every agent's session, run the
//! workflow, stop the sessions, collect the logs and report.

mod compare;
mod transport;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{
    build_report, AccountingError, AccountingOptions, AttributionPolicy, EnergyReport, Method, NodeEnergyLog,
    NodeInput, PolicyKind, ReportRequest, RunStatus,
};
use crate::sampler::clock::wall_now_ns;
use crate::sampler::logfile::{parse_log, LogError, ParseOptions, ParsedLog};
use crate::signal::{is_fs_safe_id, AckState, AgentAck, SessionMarker, SignalError};
use crate::sim::SimError;
use crate::trace::{parse_trace_auto, TraceError, WorkflowTrace};

pub use compare::{compare_reports, CoverageRow, CoverageTable};
pub use transport::sh_quote;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

pub const STATE_FILE: &str = "run_state.json";
pub const REPORT_FILE: &str = "report.json";

const ACK_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("node {node}: transport failed: {detail}")]
    Transport { node: String, detail: String },
    #[error("node {node}: cannot start measurement: {detail}")]
    AgentStart { node: String, detail: String },
    #[error("node {node}: no `{wanted}` acknowledgement within {waited:?}")]
    AckTimeout {
        node: String,
        wanted: &'static str,
        waited: Duration,
    },
    #[error("cannot launch workflow: {0}")]
    Launch(io::Error),
    #[error("reports belong to different workflows: {expected} and {found}")]
    WorkflowMismatch { expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl OrchestratorError {
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) => EXIT_USAGE,
            OrchestratorError::Accounting(AccountingError::MissingNodeLog(_)) => EXIT_PARTIAL,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OrchestratorError {
    let path = path.to_path_buf();
    move |source| OrchestratorError::Io { path, source }
}

/// How to reach one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEndpoint {
    pub node_id: String,
    /// Shell command with `{cmd}` where the script goes, e.g.
    /// `kubectl exec <pod> -- {cmd}`.
    pub exec_template: String,
    pub signal_dir: PathBuf,
}

impl AgentEndpoint {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !is_fs_safe_id(&self.node_id) {
            return Err(OrchestratorError::Config(format!(
                "node id `{}` is not filesystem-safe",
                self.node_id
            )));
        }
        if self.exec_template.matches("{cmd}").count() != 1 {
            return Err(OrchestratorError::Config(format!(
                "template for {} must contain {{cmd}} exactly once",
                self.node_id
            )));
        }
        Ok(())
    }
}

fn default_poll() -> f64 {
    5.0
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub workflow_cmd: String,
    pub agents: Vec<AgentEndpoint>,
    #[serde(default = "default_poll")]
    pub poll_interval_s: f64,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub output_dir: PathBuf,
    /// How long to wait for agents to confirm they are recording.
    #[serde(default = "default_timeout")]
    pub ack_timeout_s: f64,
    /// How long to wait for agents to close their logs.
    #[serde(default = "default_timeout")]
    pub collect_timeout_s: f64,
    /// Passed to agents so that a lost stop signal is reaped in time.
    #[serde(default)]
    pub max_runtime_s: Option<u64>,
    /// Workflow trace to attribute energy to tasks.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.agents.is_empty() {
            return bad("at least one agent is required");
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.validate()?;
            if self.agents[..i].iter().any(|o| o.node_id == a.node_id) {
                return Err(OrchestratorError::Config(format!("node {} listed twice", a.node_id)));
            }
        }
        if !is_fs_safe_id(&self.session_id) {
            return Err(OrchestratorError::Config(format!(
                "session id `{}` is not filesystem-safe",
                self.session_id
            )));
        }
        if !(self.poll_interval_s > 0.0 && self.poll_interval_s.is_finite()) {
            return bad("poll interval must be positive");
        }
        if !(self.ack_timeout_s >= 0.0 && self.collect_timeout_s >= 0.0) {
            return bad("timeouts must be non-negative");
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("no output directory");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Starting,
    Running,
    Stopping,
    Collected,
}

/// Progress record kept in the output directory so an interrupted run can
/// be salvaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub session_id: String,
    pub phase: Phase,
    pub workflow_cmd: String,
    pub agents: Vec<AgentEndpoint>,
    pub launch_wall_ns: Option<i64>,
    pub exit_wall_ns: Option<i64>,
    pub exit_code: Option<i32>,
}

impl RunState {
    pub fn load(dir: &Path) -> Result<Option<RunState>, OrchestratorError> {
        let path = dir.join(STATE_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn save(&self, dir: &Path) -> Result<(), OrchestratorError> {
        let path = dir.join(STATE_FILE);
        let tmp = dir.join(format!(".{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("serializable") + "\n").map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EnergyReport,
    pub report_path: PathBuf,
    pub logs: Vec<PathBuf>,
    pub state: RunState,
}

fn stop_all(agents: &[AgentEndpoint], session_id: &str) -> Vec<String> {
    let mut errors = Vec::new();
    for a in agents {
        if let Err(e) = a.stop(session_id) {
            log::error!("{e}");
            errors.push(e.to_string());
        }
    }
    errors
}

/// Polls acks until every agent satisfies `done` or the timeout passes.
/// Returns the last ack seen per node.
fn wait_acks(
    agents: &[AgentEndpoint],
    session_id: &str,
    timeout: Duration,
    done: impl Fn(&AgentAck) -> bool,
) -> Result<BTreeMap<String, Option<AgentAck>>, OrchestratorError> {
    let deadline = Instant::now() + timeout;
    let mut seen: BTreeMap<String, Option<AgentAck>> = agents.iter().map(|a| (a.node_id.clone(), None)).collect();
    loop {
        let mut pending = false;
        for a in agents {
            let slot = seen.get_mut(&a.node_id).expect("all nodes present");
            if slot.as_ref().is_some_and(&done) {
                continue;
            }
            *slot = a.read_ack(session_id)?;
            pending |= !slot.as_ref().is_some_and(&done);
        }
        if !pending || Instant::now() >= deadline {
            return Ok(seen);
        }
        thread::sleep(ACK_POLL);
    }
}

/// Starts measurement everywhere, runs the workflow, and reports.
pub fn run_wrapped(config: &RunConfig) -> Result<RunOutcome, OrchestratorError> {
    config.validate()?;
    if config.workflow_cmd.trim().is_empty() {
        return Err(OrchestratorError::Config("no workflow command".into()));
    }
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut state = RunState {
        session_id: config.session_id.clone(),
        phase: Phase::Starting,
        workflow_cmd: config.workflow_cmd.clone(),
        agents: config.agents.clone(),
        launch_wall_ns: None,
        exit_wall_ns: None,
        exit_code: None,
    };
    state.save(out)?;

    let mut marker = SessionMarker::workflow(config.session_id.clone(), wall_now_ns())?;
    marker.max_runtime_s = config.max_runtime_s;
    let started = (|| {
        for a in &config.agents {
            a.clear_ack(&config.session_id)?;
        }
        for a in &config.agents {
            a.start(&marker)?;
        }
        let timeout = Duration::from_secs_f64(config.ack_timeout_s);
        let acks = wait_acks(&config.agents, &config.session_id, timeout, |a| {
            a.state == AckState::Recording
        })?;
        match acks.iter().find(|(_, a)| !a.as_ref().is_some_and(|a| a.state == AckState::Recording)) {
            Some((node, _)) => Err(OrchestratorError::AckTimeout {
                node: node.clone(),
                wanted: "recording",
                waited: timeout,
            }),
            None => Ok(()),
        }
    })();
    if let Err(e) = started {
        // nothing was launched; leave no session behind
        stop_all(&config.agents, &config.session_id);
        return Err(e);
    }

    let launch = wall_now_ns();
    let child = Command::new("sh").arg("-c").arg(&config.workflow_cmd).spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => {
            stop_all(&config.agents, &config.session_id);
            return Err(OrchestratorError::Launch(e));
        }
    };
    log::info!("workflow launched (pid {})", child.id());
    state.phase = Phase::Running;
    state.launch_wall_ns = Some(launch);
    state.save(out)?;

    let poll = Duration::from_secs_f64(config.poll_interval_s);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => thread::sleep(poll),
            Err(e) => {
                stop_all(&config.agents, &config.session_id);
                return Err(OrchestratorError::Launch(e));
            }
        }
    };
    state.exit_wall_ns = Some(wall_now_ns());
    state.exit_code = status.code();
    let run_status = if status.success() {
        RunStatus::Ok
    } else {
        log::warn!("workflow exited with {status}");
        RunStatus::Failed
    };
    finish(config, state, run_status)
}

/// Stops and collects an interrupted run from its saved state.
pub fn resume(config: &RunConfig) -> Result<RunOutcome, OrchestratorError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let state = match RunState::load(out)? {
        Some(s) if s.session_id != config.session_id => {
            return Err(OrchestratorError::Config(format!(
                "{} belongs to session {}, not {}",
                out.join(STATE_FILE).display(),
                s.session_id,
                config.session_id
            )))
        }
        Some(s) => s,
        None => RunState {
            session_id: config.session_id.clone(),
            phase: Phase::Stopping,
            workflow_cmd: config.workflow_cmd.clone(),
            agents: config.agents.clone(),
            launch_wall_ns: None,
            exit_wall_ns: None,
            exit_code: None,
        },
    };
    let status = match (state.phase, state.exit_code) {
        (Phase::Collected | Phase::Stopping, Some(0)) => RunStatus::Ok,
        (Phase::Collected | Phase::Stopping, Some(_)) => RunStatus::Failed,
        _ => RunStatus::Salvaged,
    };
    finish(config, state, status)
}

fn first_wall_ns(log: &NodeEnergyLog) -> Option<i64> {
    log.series_by_domain
        .values()
        .filter_map(|s| s.first_t_ns().map(|t| s.to_wall_ns(t)))
        .max()
}

fn finish(config: &RunConfig, mut state: RunState, status: RunStatus) -> Result<RunOutcome, OrchestratorError> {
    let out = &config.output_dir;
    state.phase = Phase::Stopping;
    state.save(out)?;
    let session = &config.session_id;
    let mut warnings = stop_all(&config.agents, session);
    let timeout = Duration::from_secs_f64(config.collect_timeout_s);
    let acks = wait_acks(&config.agents, session, timeout, |a| matches!(a.state, AckState::Closed(_)))?;

    let log_dir = out.join("logs");
    fs::create_dir_all(&log_dir).map_err(io_err(&log_dir))?;
    let mut inputs = Vec::new();
    let mut missing = Vec::new();
    let mut paths = Vec::new();
    for a in &config.agents {
        let Some(ack) = &acks[&a.node_id] else {
            warnings.push(format!("node {} never acknowledged session {session}", a.node_id));
            missing.push(a.node_id.clone());
            continue;
        };
        if ack.state == AckState::Recording {
            warnings.push(format!("node {} did not close its log in time", a.node_id));
        }
        let name = ack
            .log_path
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(format!("rapl_{}_{session}.csv", a.node_id)));
        let local = log_dir.join(name);
        let parsed = a
            .fetch(&ack.log_path)
            .and_then(|bytes| fs::write(&local, bytes).map_err(io_err(&local)))
            .and_then(|()| Ok(parse_log(&local, ParseOptions::default())?));
        match parsed {
            Ok(p) => {
                paths.push(local);
                inputs.push(node_input(p));
            }
            Err(e) => {
                log::error!("{e}");
                warnings.push(format!("log of node {} could not be collected: {e}", a.node_id));
                missing.push(a.node_id.clone());
            }
        }
    }
    if let Some(launch) = state.launch_wall_ns {
        for n in &inputs {
            if first_wall_ns(&n.log).is_none_or(|t| t >= launch) {
                warnings.push(format!("node {} started recording after the workflow launch", n.log.node_id));
            }
        }
    }
    if inputs.is_empty() {
        return Err(OrchestratorError::Accounting(AccountingError::MissingNodeLog(
            missing.join(", "),
        )));
    }

    let trace = config.trace.as_deref().map(parse_trace_auto).transpose()?;
    let mut req = ReportRequest::new(
        session.clone(),
        Method::ShellWrap,
        AttributionPolicy::new(PolicyKind::CpuTimeShare),
    );
    req.status = status;
    req.trace = trace.as_ref();
    req.missing_nodes = missing;
    let mut report = build_report(&inputs, &req)?;
    // the wrapping script is its own reference
    report.coverage_fraction = Some(1.0);
    report.warnings.extend(warnings);
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, report.to_json()).map_err(io_err(&report_path))?;
    state.phase = Phase::Collected;
    state.save(out)?;
    Ok(RunOutcome {
        report,
        report_path,
        logs: paths,
        state,
    })
}

fn node_input(p: ParsedLog) -> NodeInput {
    let status = p.status;
    NodeInput {
        log: NodeEnergyLog::from_parsed(p),
        status,
    }
}

/// Options of `wattflow report`.
#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub logs_dir: PathBuf,
    pub trace: Option<PathBuf>,
    pub policy: AttributionPolicy,
    pub method: Method,
    pub accounting: AccountingOptions,
}

/// Full accounting over a directory of collected logs.
pub fn report_cmd(opts: &ReportOptions) -> Result<EnergyReport, OrchestratorError> {
    let dir = &opts.logs_dir;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rapl_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(OrchestratorError::Config(format!("no rapl_*.csv logs in {}", dir.display())));
    }
    let mut sessions = Vec::new();
    let mut inputs = Vec::new();
    for f in &files {
        let p = parse_log(f, ParseOptions::default())?;
        sessions.push(p.session_id.clone().unwrap_or_else(|| "unknown".into()));
        inputs.push(node_input(p));
    }
    sessions.sort();
    sessions.dedup();
    let trace: Option<WorkflowTrace> = opts.trace.as_deref().map(parse_trace_auto).transpose()?;
    let workflow_id = match (&trace, sessions.as_slice()) {
        (Some(t), _) => t.workflow_id.clone(),
        (None, [one]) => one.clone(),
        (None, _) => sessions.join("+"),
    };
    let mut req = ReportRequest::new(workflow_id, opts.method, opts.policy);
    req.options = opts.accounting;
    req.trace = trace.as_ref();
    Ok(build_report(&inputs, &req)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path) -> RunConfig {
        RunConfig {
            workflow_cmd: "true".into(),
            agents: vec![AgentEndpoint {
                node_id: "n1".into(),
                exec_template: "{cmd}".into(),
                signal_dir: dir.join("sig"),
            }],
            poll_interval_s: 0.05,
            session_id: "s".into(),
            output_dir: dir.join("out"),
            ack_timeout_s: 0.3,
            collect_timeout_s: 0.3,
            max_runtime_s: None,
            trace: None,
        }
    }

    #[test]
    fn config_validation() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(cfg(tmp.path()).validate().is_ok());
        let mut c = cfg(tmp.path());
        c.agents[0].exec_template = "ssh host".into();
        assert!(matches!(c.validate(), Err(OrchestratorError::Config(_))));
        c.agents[0].exec_template = "{cmd} {cmd}".into();
        assert!(c.validate().is_err());
        let mut c = cfg(tmp.path());
        c.session_id = "../x".into();
        assert!(c.validate().is_err());
        let mut c = cfg(tmp.path());
        c.agents.clear();
        assert_eq!(c.validate().unwrap_err().exit_code(), EXIT_USAGE);
        let json = r#"{"agents":[{"node_id":"a","exec_template":"{cmd}","signal_dir":"/tmp/s"}]}"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.poll_interval_s, 5.0);
    }

    #[test]
    fn silent_agent_aborts_before_launch() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = cfg(tmp.path());
        let flag = tmp.path().join("ran");
        c.workflow_cmd = format!("touch {}", sh_quote(&flag.to_string_lossy()));
        let err = run_wrapped(&c).unwrap_err();
        assert!(matches!(err, OrchestratorError::AckTimeout { .. }), "{err}");
        assert!(!flag.exists(), "workflow ran without measurement");
        // the marker was withdrawn again
        assert!(!crate::signal::marker_path(&tmp.path().join("sig"), "s").exists());
        let state = RunState::load(&c.output_dir).unwrap().unwrap();
        assert_eq!(state.phase, Phase::Starting);
    }
}
