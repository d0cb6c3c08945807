// SPDX-License-Identifier: Apache-2.0

//! Energy accounting over node logs and workflow traces.

mod attribution;
mod interval;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::{integrate_window, CounterError, EnergyQuantity, RaplDomain, SampleSeries};
use crate::sampler::logfile::ParsedLog;
use crate::trace::{TaskRecord, DEFAULT_SUB_RESOLUTION_S};

pub use attribution::{attribute_concurrent, Attribution};
pub use interval::{interval_estimate, interval_estimate_clipped, PowerPoint, ScrapeEstimator};
pub use report::{build_report, Diagnostic, EnergyReport, Method, NodeInput, ReportRequest, RunStatus, REPORT_VERSION};

pub type JoulesByDomain = BTreeMap<RaplDomain, f64>;

pub fn total_of(j: &JoulesByDomain) -> f64 {
    j.values().sum()
}

#[derive(Debug, Error)]
pub enum AccountingError {
    #[error("node {node}, domain {domain}: {source}")]
    Counter {
        node: String,
        domain: RaplDomain,
        source: CounterError,
    },
    #[error("task {task} overlaps task {other} on node {node}; use concurrent attribution")]
    Overlap { task: String, other: String, node: String },
    #[error("task {task} ran on {task_node}, not on {log_node}")]
    WrongNode {
        task: String,
        task_node: String,
        log_node: String,
    },
    #[error("no energy log for node {0}")]
    MissingNodeLog(String),
    #[error("no log of node {node} covers task {task}")]
    NoCoveringLog { node: String, task: String },
    #[error("no power points inside the query window")]
    NoPointsInWindow,
    #[error("reference energy is zero")]
    DivisionByZeroEnergy,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Interval on the wall clock, nanoseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WallWindow {
    pub start_wall_ns: i64,
    pub end_wall_ns: i64,
}

impl WallWindow {
    pub fn new(start_wall_ns: i64, end_wall_ns: i64) -> Result<Self, AccountingError> {
        if end_wall_ns < start_wall_ns {
            return Err(AccountingError::Invalid(format!(
                "window ends ({end_wall_ns}) before it starts ({start_wall_ns})"
            )));
        }
        Ok(WallWindow {
            start_wall_ns,
            end_wall_ns,
        })
    }

    pub fn duration_s(&self) -> f64 {
        (self.end_wall_ns - self.start_wall_ns) as f64 / 1e9
    }

    pub fn contains(&self, other: &WallWindow) -> bool {
        self.start_wall_ns <= other.start_wall_ns && other.end_wall_ns <= self.end_wall_ns
    }
}

/// All counter series recorded on one node for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEnergyLog {
    pub node_id: String,
    pub series_by_domain: BTreeMap<RaplDomain, SampleSeries>,
}

impl NodeEnergyLog {
    pub fn new(node_id: impl Into<String>, series: Vec<SampleSeries>) -> Result<Self, AccountingError> {
        let node_id = node_id.into();
        let mut map = BTreeMap::new();
        for s in series {
            if s.node_id != node_id {
                return Err(AccountingError::Invalid(format!(
                    "series of node {} in log of node {node_id}",
                    s.node_id
                )));
            }
            let domain = s.spec.domain;
            if map.insert(domain, s).is_some() {
                return Err(AccountingError::Invalid(format!(
                    "domain {domain} appears twice for node {node_id}"
                )));
            }
        }
        Ok(NodeEnergyLog {
            node_id,
            series_by_domain: map,
        })
    }

    pub fn from_parsed(log: ParsedLog) -> Self {
        NodeEnergyLog {
            node_id: log.node_id,
            series_by_domain: log.series,
        }
    }

    /// Wall interval covered by every domain.
    pub fn span(&self) -> Option<WallWindow> {
        let mut start = i64::MIN;
        let mut end = i64::MAX;
        for s in self.series_by_domain.values() {
            if s.samples().len() < 2 {
                return None;
            }
            start = start.max(s.to_wall_ns(s.first_t_ns()?));
            end = end.min(s.to_wall_ns(s.last_t_ns()?));
        }
        (start <= end && !self.series_by_domain.is_empty()).then_some(WallWindow {
            start_wall_ns: start,
            end_wall_ns: end,
        })
    }

    pub fn covers(&self, window: &WallWindow) -> bool {
        self.span().is_some_and(|s| s.contains(window))
    }

    pub fn has_unsafe_gap_in(&self, window: &WallWindow) -> bool {
        self.series_by_domain.values().any(|s| {
            !s.unsafe_gaps(s.to_mono_ns(window.start_wall_ns), s.to_mono_ns(window.end_wall_ns))
                .is_empty()
        })
    }
}

/// Per-domain energy of a node within a wall window.
pub fn node_window_energy(log: &NodeEnergyLog, window: &WallWindow) -> Result<JoulesByDomain, AccountingError> {
    let mut out = JoulesByDomain::new();
    for (&domain, s) in &log.series_by_domain {
        let joules = if window.start_wall_ns == window.end_wall_ns {
            0.0
        } else {
            integrate_window(
                s,
                s.to_mono_ns(window.start_wall_ns),
                s.to_mono_ns(window.end_wall_ns),
            )
            .map_err(|source| AccountingError::Counter {
                node: log.node_id.clone(),
                domain,
                source,
            })?
            .joules()
        };
        out.insert(domain, joules);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskNote {
    SubResolution,
    SharedWindow,
    UnsafeGap,
    /// All active tasks in a shared segment had zero weight; split equally.
    ZeroWeight,
    /// The idle baseline exceeded a segment's energy.
    BaselineClamped,
    CpuTimeFallback,
}

/// Energy charged to one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnergy {
    pub task_id: String,
    pub joules_by_domain: JoulesByDomain,
    pub estimated: bool,
    pub notes: Vec<TaskNote>,
}

impl TaskEnergy {
    pub fn total_joules(&self) -> f64 {
        total_of(&self.joules_by_domain)
    }

    fn note(&mut self, n: TaskNote) {
        if !self.notes.contains(&n) {
            self.notes.push(n);
            self.notes.sort();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    CpuTimeShare,
    WallTimeShare,
    ExclusiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionPolicy {
    pub kind: PolicyKind,
    /// Node idle draw kept out of task shares. Off by default.
    pub idle_baseline_watts: Option<f64>,
}

impl AttributionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        AttributionPolicy {
            kind,
            idle_baseline_watts: None,
        }
    }

    pub fn with_idle_baseline(mut self, watts: f64) -> Self {
        self.idle_baseline_watts = Some(watts);
        self
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        match self.idle_baseline_watts {
            Some(w) if !(w.is_finite() && w >= 0.0) => Err(AccountingError::Invalid(format!(
                "idle baseline must be finite and non-negative, got {w}"
            ))),
            Some(_) if self.kind == PolicyKind::ExclusiveOnly => Err(AccountingError::Invalid(
                "idle baseline only applies to share policies".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Knobs shared by the accounting operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccountingOptions {
    /// Assumed runtime of sub-resolution tasks.
    pub sub_resolution_s: f64,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        AccountingOptions {
            sub_resolution_s: DEFAULT_SUB_RESOLUTION_S,
        }
    }
}

pub(crate) fn task_window(task: &TaskRecord, opts: &AccountingOptions) -> WallWindow {
    let (a, b) = task.effective_window(opts.sub_resolution_s);
    WallWindow {
        start_wall_ns: a,
        end_wall_ns: b,
    }
}

fn overlaps(a: &WallWindow, b: &WallWindow) -> bool {
    a.start_wall_ns < b.end_wall_ns && b.start_wall_ns < a.end_wall_ns
}

/// Energy of a task that had its node to itself.
pub fn exclusive_task_energy(
    task: &TaskRecord,
    peers: &[TaskRecord],
    log: &NodeEnergyLog,
    opts: &AccountingOptions,
) -> Result<TaskEnergy, AccountingError> {
    if task.node_id != log.node_id {
        return Err(AccountingError::WrongNode {
            task: task.task_id.clone(),
            task_node: task.node_id.clone(),
            log_node: log.node_id.clone(),
        });
    }
    let window = task_window(task, opts);
    if let Some(other) = peers.iter().find(|p| {
        p.node_id == task.node_id && p.task_id != task.task_id && overlaps(&window, &task_window(p, opts))
    }) {
        return Err(AccountingError::Overlap {
            task: task.task_id.clone(),
            other: other.task_id.clone(),
            node: task.node_id.clone(),
        });
    }
    let mut te = TaskEnergy {
        task_id: task.task_id.clone(),
        joules_by_domain: node_window_energy(log, &window)?,
        estimated: task.flags.sub_resolution,
        notes: Vec::new(),
    };
    if task.flags.sub_resolution {
        te.note(TaskNote::SubResolution);
    }
    if task.flags.cpu_time_fallback {
        te.note(TaskNote::CpuTimeFallback);
    }
    if log.has_unsafe_gap_in(&window) {
        te.note(TaskNote::UnsafeGap);
    }
    Ok(te)
}

/// Sum over the listed nodes of their energy in `window`.
pub fn workflow_total(
    logs: &BTreeMap<String, NodeEnergyLog>,
    nodes: &[String],
    window: &WallWindow,
) -> Result<EnergyQuantity, AccountingError> {
    let mut total = 0.0;
    for node in nodes {
        let log = logs
            .get(node)
            .ok_or_else(|| AccountingError::MissingNodeLog(node.clone()))?;
        total += total_of(&node_window_energy(log, window)?);
    }
    EnergyQuantity::new(total).map_err(|e| AccountingError::Invalid(e.to_string()))
}

/// Fraction of the reference energy a method captured.
pub fn coverage_compare(ground_truth: EnergyQuantity, measured: EnergyQuantity) -> Result<f64, AccountingError> {
    if ground_truth.joules() <= 0.0 {
        return Err(AccountingError::DivisionByZeroEnergy);
    }
    Ok(measured.joules() / ground_truth.joules())
}
