// SPDX-License-Identifier: Apache-2.0

//! Synthetic power profiles with exact ground truth, used to compare
//! measurement methods without hardware.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{
    build_report, interval_estimate, total_of, AccountingError, AttributionPolicy, EnergyReport, JoulesByDomain,
    Method, NodeEnergyLog, NodeInput, PolicyKind, PowerPoint, ReportRequest, RunStatus, WallWindow, REPORT_VERSION,
};
use crate::counter::{CounterError, CounterSpec, RawSample, RaplDomain, SampleSeries};
use crate::sampler::logfile::{log_path, write_log, LogStatus, DEFAULT_MAX_POWER_WATTS};
use crate::signal::is_fs_safe_id;
use crate::trace::{to_generic_json, TaskFlags, TaskRecord, TaskStatus, WorkflowTrace};

pub const DEFAULT_EPOCH_WALL_NS: i64 = 1_700_000_000_000_000_000;
pub const SIM_SESSION: &str = "sim";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("window [{start_s}, {end_s}] s is outside the profile span [0, {span_s}] s")]
    WindowOutOfRange { start_s: f64, end_s: f64, span_s: f64 },
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Extra power drawn by one task while it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoad {
    pub task_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub watts: f64,
}

/// Node power over `[0, span_s]`: idle plus the sum of active task loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub node_id: String,
    pub idle_watts: f64,
    #[serde(default)]
    pub task_loads: Vec<TaskLoad>,
    pub span_s: f64,
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl PowerProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if !is_fs_safe_id(&self.node_id) {
            return Err(SimError::Invalid(format!("node id `{}` is not filesystem-safe", self.node_id)));
        }
        if !(self.span_s > 0.0 && self.span_s.is_finite()) {
            return Err(SimError::Invalid(format!("node {}: span must be positive", self.node_id)));
        }
        if !finite_nonneg(self.idle_watts) {
            return Err(SimError::Invalid(format!("node {}: bad idle power", self.node_id)));
        }
        for l in &self.task_loads {
            if !(finite_nonneg(l.watts) && finite_nonneg(l.start_s) && l.start_s <= l.end_s && l.end_s <= self.span_s)
            {
                return Err(SimError::Invalid(format!(
                    "node {}: load of task {} must lie in [0, {}] s with non-negative power",
                    self.node_id, l.task_id, self.span_s
                )));
            }
        }
        Ok(())
    }

    pub fn power_at(&self, t_s: f64) -> f64 {
        self.idle_watts
            + self
                .task_loads
                .iter()
                .filter(|l| l.start_s <= t_s && t_s < l.end_s)
                .map(|l| l.watts)
                .sum::<f64>()
    }

    pub fn peak_watts(&self) -> f64 {
        let mut points: Vec<f64> = self.task_loads.iter().map(|l| l.start_s).collect();
        points.push(0.0);
        points.into_iter().map(|t| self.power_at(t)).fold(0.0, f64::max)
    }

    fn cumulative_unchecked(&self, t_s: f64) -> f64 {
        self.idle_watts * t_s
            + self
                .task_loads
                .iter()
                .map(|l| l.watts * (t_s.min(l.end_s) - l.start_s).max(0.0))
                .sum::<f64>()
    }
}

/// Exact energy of `profile` over `[start_s, end_s]`.
pub fn analytic_energy(profile: &PowerProfile, start_s: f64, end_s: f64) -> Result<f64, SimError> {
    if !(start_s >= 0.0 && start_s <= end_s && end_s <= profile.span_s) {
        return Err(SimError::WindowOutOfRange {
            start_s,
            end_s,
            span_s: profile.span_s,
        });
    }
    let mut joules = profile.idle_watts * (end_s - start_s);
    for l in &profile.task_loads {
        let overlap = l.end_s.min(end_s) - l.start_s.max(start_s);
        if overlap > 0.0 {
            joules += l.watts * overlap;
        }
    }
    Ok(joules)
}

/// A counter domain and the fraction of node power it sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShare {
    #[serde(flatten)]
    pub spec: CounterSpec,
    pub share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    /// How long the wrapping script measures before and after the workflow.
    #[serde(default)]
    pub shell_lead_s: f64,
    /// Start delay of the plugin-driven method.
    #[serde(default)]
    pub plugin_delay_s: f64,
    /// Start delay of the task-management-driven method.
    #[serde(default)]
    pub taskmethod_delay_s: f64,
    #[serde(default = "default_scrape")]
    pub scrape_interval_s: f64,
}

fn default_scrape() -> f64 {
    30.0
}

impl Default for MethodTiming {
    fn default() -> Self {
        MethodTiming {
            shell_lead_s: 0.0,
            plugin_delay_s: 0.0,
            taskmethod_delay_s: 0.0,
            scrape_interval_s: default_scrape(),
        }
    }
}

fn default_epoch() -> i64 {
    DEFAULT_EPOCH_WALL_NS
}

fn default_agent_interval() -> u64 {
    crate::sampler::DEFAULT_INTERVAL_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub workflow_id: String,
    pub profiles: Vec<PowerProfile>,
    pub domains: Vec<DomainShare>,
    #[serde(default)]
    pub method_timing: MethodTiming,
    #[serde(default = "default_agent_interval")]
    pub agent_interval_ms: u64,
    /// Zero leaves every counter starting at 0.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epoch")]
    pub epoch_wall_ns: i64,
    /// `[start_s, end_s]`; defaults to the span of all task loads.
    #[serde(default)]
    pub workflow_window_s: Option<(f64, f64)>,
    /// Derived from the task loads when absent.
    #[serde(default)]
    pub trace: Option<WorkflowTrace>,
}

impl Scenario {
    /// One node, one task spanning the whole workflow, with `margin_s` of
    /// idle before and after.
    pub fn uniform(
        workflow_id: &str,
        runtime_s: f64,
        load_watts: f64,
        idle_watts: f64,
        margin_s: f64,
        method_timing: MethodTiming,
    ) -> Scenario {
        Scenario {
            workflow_id: workflow_id.into(),
            profiles: vec![PowerProfile {
                node_id: "node-1".into(),
                idle_watts,
                task_loads: vec![TaskLoad {
                    task_id: "main".into(),
                    start_s: margin_s,
                    end_s: margin_s + runtime_s,
                    watts: load_watts,
                }],
                span_s: runtime_s + 2.0 * margin_s,
            }],
            domains: vec![DomainShare {
                spec: CounterSpec::microjoules(RaplDomain::Package, 32).expect("valid spec"),
                share: 1.0,
            }],
            method_timing,
            agent_interval_ms: default_agent_interval(),
            seed: 0,
            epoch_wall_ns: DEFAULT_EPOCH_WALL_NS,
            workflow_window_s: None,
            trace: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Scenario, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        if self.profiles.is_empty() {
            return bad("no profiles".into());
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.validate()?;
            if self.profiles[..i].iter().any(|o| o.node_id == p.node_id) {
                return bad(format!("node {} appears twice", p.node_id));
            }
        }
        if self.domains.is_empty() {
            return bad("no counter domains".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.spec.validate()?;
            if !finite_nonneg(d.share) {
                return bad(format!("domain {} has a bad share", d.spec.domain));
            }
            if self.domains[..i].iter().any(|o| o.spec.domain == d.spec.domain) {
                return bad(format!("domain {} listed twice", d.spec.domain));
            }
        }
        let shares: f64 = self.domains.iter().map(|d| d.share).sum();
        if (shares - 1.0).abs() > 1e-9 {
            return bad(format!("domain shares sum to {shares}, not 1"));
        }
        let t = &self.method_timing;
        if !(finite_nonneg(t.shell_lead_s) && finite_nonneg(t.plugin_delay_s) && finite_nonneg(t.taskmethod_delay_s)) {
            return bad("method delays must be non-negative".into());
        }
        if !(t.scrape_interval_s > 0.0 && t.scrape_interval_s.is_finite()) {
            return bad("scrape interval must be positive".into());
        }
        if self.agent_interval_ms == 0 {
            return bad("agent interval must be positive".into());
        }
        let (ws, we) = self.workflow_window()?;
        if ws + t.plugin_delay_s.max(t.taskmethod_delay_s) > we {
            return bad("a start delay exceeds the workflow runtime".into());
        }
        if let Some(trace) = &self.trace {
            let derived = self.derived_trace()?;
            let key = |tr: &WorkflowTrace| {
                let mut v: Vec<(String, String, i64, i64)> = tr
                    .tasks
                    .iter()
                    .map(|t| (t.task_id.clone(), t.node_id.clone(), t.start_wall_ns, t.end_wall_ns))
                    .collect();
                v.sort();
                v
            };
            if key(trace) != key(&derived) {
                return bad("trace tasks do not match the task loads".into());
            }
        }
        Ok(())
    }

    fn span_s(&self) -> f64 {
        self.profiles.iter().map(|p| p.span_s).fold(f64::INFINITY, f64::min)
    }

    pub fn workflow_window(&self) -> Result<(f64, f64), SimError> {
        let (ws, we) = match self.workflow_window_s {
            Some(w) => w,
            None => {
                let loads = self.profiles.iter().flat_map(|p| &p.task_loads);
                let ws = loads.clone().map(|l| l.start_s).fold(f64::INFINITY, f64::min);
                let we = loads.map(|l| l.end_s).fold(f64::NEG_INFINITY, f64::max);
                if !ws.is_finite() {
                    return Err(SimError::Invalid("no task loads and no workflow window".into()));
                }
                (ws, we)
            }
        };
        if !(ws >= 0.0 && ws < we && we <= self.span_s()) {
            return Err(SimError::WindowOutOfRange {
                start_s: ws,
                end_s: we,
                span_s: self.span_s(),
            });
        }
        Ok((ws, we))
    }

    pub fn wall_ns(&self, t_s: f64) -> i64 {
        self.epoch_wall_ns + (t_s * 1e9).round() as i64
    }

    fn wall_window(&self, a_s: f64, b_s: f64) -> WallWindow {
        WallWindow {
            start_wall_ns: self.wall_ns(a_s),
            end_wall_ns: self.wall_ns(b_s),
        }
    }

    /// Trace matching the task loads. CPU time assumes one CPU second per
    /// 100 J of task load.
    fn derived_trace(&self) -> Result<WorkflowTrace, SimError> {
        let (ws, we) = self.workflow_window()?;
        let mut tasks: Vec<TaskRecord> = self
            .profiles
            .iter()
            .flat_map(|p| {
                p.task_loads.iter().map(move |l| TaskRecord {
                    task_id: l.task_id.clone(),
                    name: l.task_id.clone(),
                    node_id: p.node_id.clone(),
                    start_wall_ns: self.wall_ns(l.start_s),
                    end_wall_ns: self.wall_ns(l.end_s),
                    cpu_time_s: l.watts * (l.end_s - l.start_s) / 100.0,
                    status: TaskStatus::Completed,
                    flags: TaskFlags::default(),
                })
            })
            .collect();
        tasks.sort_by(|a, b| (a.start_wall_ns, &a.task_id).cmp(&(b.start_wall_ns, &b.task_id)));
        let mut trace = WorkflowTrace {
            workflow_id: self.workflow_id.clone(),
            tasks,
            submitted_wall_ns: self.wall_ns(ws),
            finished_wall_ns: self.wall_ns(we),
        };
        trace.refresh_flags();
        Ok(trace)
    }

    pub fn trace(&self) -> Result<WorkflowTrace, SimError> {
        match &self.trace {
            Some(t) => Ok(t.clone()),
            None => self.derived_trace(),
        }
    }
}

/// Exact energies over the workflow window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub total_joules: f64,
    pub per_node_joules: BTreeMap<String, f64>,
    /// Task load energy, idle excluded.
    pub per_task_joules: BTreeMap<String, f64>,
    pub window: WallWindow,
}

pub fn ground_truth(scenario: &Scenario) -> Result<GroundTruth, SimError> {
    let (ws, we) = scenario.workflow_window()?;
    let mut per_node = BTreeMap::new();
    let mut per_task = BTreeMap::new();
    for p in &scenario.profiles {
        per_node.insert(p.node_id.clone(), analytic_energy(p, ws, we)?);
        for l in &p.task_loads {
            per_task.insert(l.task_id.clone(), l.watts * (l.end_s - l.start_s));
        }
    }
    Ok(GroundTruth {
        total_joules: per_node.values().sum(),
        per_node_joules: per_node,
        per_task_joules: per_task,
        window: scenario.wall_window(ws, we),
    })
}

/// Counter logs an agent would have written, sampled over each profile's
/// whole span.
pub fn synthesize_counters(scenario: &Scenario) -> Result<BTreeMap<String, NodeEnergyLog>, SimError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let step_ns = scenario.agent_interval_ms as i64 * 1_000_000;
    let mut out = BTreeMap::new();
    for p in &scenario.profiles {
        let span_ns = (p.span_s * 1e9).round() as i64;
        let mut times: Vec<i64> = (0..=span_ns / step_ns).map(|k| k * step_ns).collect();
        if *times.last().expect("t = 0 present") < span_ns {
            times.push(span_ns);
        }
        let mut series = Vec::new();
        for d in &scenario.domains {
            let modulus = d.spec.wrap_modulus();
            let offset: u128 = if scenario.seed == 0 {
                0
            } else {
                rng.gen::<u64>() as u128 % modulus
            };
            let samples = times
                .iter()
                .map(|&t| {
                    let joules = d.share * p.cumulative_unchecked(t as f64 / 1e9);
                    let counts = (joules / d.spec.energy_unit_joules + 1e-6).floor() as u128;
                    RawSample {
                        t_ns: t,
                        raw: ((offset + counts) % modulus) as u64,
                    }
                })
                .collect();
            series.push(
                SampleSeries::new(p.node_id.clone(), d.spec, scenario.epoch_wall_ns, samples)?
                    .with_power_bound(DEFAULT_MAX_POWER_WATTS),
            );
        }
        out.insert(p.node_id.clone(), NodeEnergyLog::new(p.node_id.clone(), series)?);
    }
    Ok(out)
}

/// Average-power points every scrape interval, each the true mean over the
/// interval that ends at it.
pub fn scrape_points(profile: &PowerProfile, scenario: &Scenario) -> Vec<PowerPoint> {
    let dt = scenario.method_timing.scrape_interval_s;
    let mut out = Vec::new();
    let mut k = 1u64;
    loop {
        let t = k as f64 * dt;
        if t > profile.span_s + 1e-9 {
            break;
        }
        let t = t.min(profile.span_s);
        let mean = (profile.cumulative_unchecked(t) - profile.cumulative_unchecked(t - dt)) / dt;
        out.push(PowerPoint {
            t_wall_ns: scenario.wall_ns(t),
            watts: mean,
        });
        k += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub joules: f64,
    /// Against the exact workflow-window energy.
    pub coverage: f64,
    /// Against the wrapping-script measurement.
    pub relative_to_shell: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ground_truth: GroundTruth,
    pub logs: BTreeMap<String, NodeEnergyLog>,
    pub reports: Vec<EnergyReport>,
    pub outcomes: Vec<MethodOutcome>,
}

impl Evaluation {
    pub fn outcome(&self, method: Method) -> &MethodOutcome {
        self.outcomes
            .iter()
            .find(|o| o.method == method)
            .expect("every method is evaluated")
    }

    pub fn coverage_text(&self) -> String {
        let mut s = format!(
            "{:<16} {:>16} {:>10} {:>10}\n",
            "method", "joules", "truth %", "shell %"
        );
        s.push_str(&format!(
            "{:<16} {:>16.2} {:>10.2} {:>10}\n",
            "ground_truth", self.ground_truth.total_joules, 100.0, "-"
        ));
        for o in &self.outcomes {
            s.push_str(&format!(
                "{:<16} {:>16.2} {:>10.2} {:>10.2}\n",
                o.method.as_str(),
                o.joules,
                o.coverage * 100.0,
                o.relative_to_shell * 100.0
            ));
        }
        s
    }
}

fn split_by_share(joules: f64, domains: &[DomainShare]) -> JoulesByDomain {
    domains.iter().map(|d| (d.spec.domain, joules * d.share)).collect()
}

/// Measures the scenario with every method from the same synthesized logs.
pub fn evaluate_methods(scenario: &Scenario) -> Result<Evaluation, SimError> {
    let logs = synthesize_counters(scenario)?;
    let truth = ground_truth(scenario)?;
    let trace = scenario.trace()?;
    let (ws, we) = scenario.workflow_window()?;
    let t = scenario.method_timing;
    let inputs: Vec<NodeInput> = logs
        .values()
        .map(|log| NodeInput {
            log: log.clone(),
            status: LogStatus::Complete,
        })
        .collect();

    let mut reports = Vec::new();
    for (method, a, b) in [
        (
            Method::ShellWrap,
            (ws - t.shell_lead_s).max(0.0),
            (we + t.shell_lead_s).min(scenario.span_s()),
        ),
        (Method::SignalPlugin, ws + t.plugin_delay_s, we),
        (Method::SignalWorkflow, ws + t.taskmethod_delay_s, we),
    ] {
        let mut req = ReportRequest::new(
            scenario.workflow_id.clone(),
            method,
            AttributionPolicy::new(PolicyKind::CpuTimeShare),
        );
        req.window = Some(scenario.wall_window(a, b));
        if method == Method::ShellWrap {
            req.trace = Some(&trace);
        }
        reports.push(build_report(&inputs, &req)?);
    }

    let window = truth.window;
    let mut per_node = BTreeMap::new();
    for p in &scenario.profiles {
        let e = interval_estimate(&scrape_points(p, scenario), &window, t.scrape_interval_s)?;
        per_node.insert(p.node_id.clone(), split_by_share(e.joules(), &scenario.domains));
    }
    reports.push(EnergyReport {
        report_version: REPORT_VERSION,
        workflow_id: scenario.workflow_id.clone(),
        method: Method::IntervalScrape,
        status: RunStatus::Ok,
        total_joules: per_node.values().map(total_of).sum(),
        coverage_fraction: None,
        unattributed: per_node.clone(),
        node_windows: per_node.keys().map(|n| (n.clone(), window)).collect(),
        per_node,
        per_task: Vec::new(),
        diagnostics: BTreeMap::new(),
        warnings: Vec::new(),
    });

    let shell = reports[0].total_joules;
    if !(shell > 0.0 && truth.total_joules > 0.0) {
        return Err(AccountingError::DivisionByZeroEnergy.into());
    }
    let mut outcomes = Vec::new();
    for r in &mut reports {
        r.coverage_fraction = Some(r.total_joules / shell);
        outcomes.push(MethodOutcome {
            method: r.method,
            joules: r.total_joules,
            coverage: r.total_joules / truth.total_joules,
            relative_to_shell: r.total_joules / shell,
        });
    }
    Ok(Evaluation {
        ground_truth: truth,
        logs,
        reports,
        outcomes,
    })
}

/// Writes logs, trace, reports, ground truth and the coverage table.
pub fn write_outputs(scenario: &Scenario, eval: &Evaluation, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SimError::Io { path, source }
    };
    let log_dir = dir.join("logs");
    fs::create_dir_all(&log_dir).map_err(io_err(&log_dir))?;
    let mut written = Vec::new();
    for (node, log) in &eval.logs {
        let path = log_path(&log_dir, node, SIM_SESSION);
        if path.exists() {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        let series: Vec<&SampleSeries> = log.series_by_domain.values().collect();
        write_log(&path, node, &series, Some(LogStatus::Complete)).map_err(io_err(&path))?;
        written.push(path);
    }
    let mut files: Vec<(PathBuf, String)> = vec![
        (dir.join("trace.json"), to_generic_json(&scenario.trace()?) + "\n"),
        (
            dir.join("ground_truth.json"),
            serde_json::to_string_pretty(&eval.ground_truth).expect("serializable") + "\n",
        ),
        (dir.join("coverage.txt"), eval.coverage_text()),
        (
            dir.join("coverage.json"),
            serde_json::to_string_pretty(&eval.outcomes).expect("serializable") + "\n",
        ),
    ];
    for r in &eval.reports {
        files.push((dir.join(format!("report_{}.json", r.method.as_str())), r.to_json()));
    }
    for (path, body) in files {
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
