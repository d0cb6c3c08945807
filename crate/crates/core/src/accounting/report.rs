// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    attribute_concurrent, exclusive_task_energy, node_window_energy, overlaps, task_window, total_of,
    AccountingError, AccountingOptions, AttributionPolicy, JoulesByDomain, NodeEnergyLog, TaskEnergy, WallWindow,
};
use crate::sampler::logfile::LogStatus;
use crate::trace::{TaskRecord, WorkflowTrace};

pub const REPORT_VERSION: u32 = 1;

/// How the measurement window was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ShellWrap,
    SignalWorkflow,
    SignalPlugin,
    IntervalScrape,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ShellWrap,
        Method::SignalPlugin,
        Method::SignalWorkflow,
        Method::IntervalScrape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ShellWrap => "shell_wrap",
            Method::SignalWorkflow => "signal_workflow",
            Method::SignalPlugin => "signal_plugin",
            Method::IntervalScrape => "interval_scrape",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Ok,
    /// The workflow itself failed; energy up to the failure is reported.
    Failed,
    /// Recovered from an interrupted run.
    Salvaged,
    /// At least one node's log is missing.
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    MissingLog,
    LogTruncated,
    LogReaped,
    UnsafeGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub report_version: u32,
    pub workflow_id: String,
    pub method: Method,
    pub status: RunStatus,
    pub total_joules: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_fraction: Option<f64>,
    pub per_node: BTreeMap<String, JoulesByDomain>,
    pub per_task: Vec<TaskEnergy>,
    /// Node energy not charged to any task.
    #[serde(default)]
    pub unattributed: BTreeMap<String, JoulesByDomain>,
    #[serde(default)]
    pub node_windows: BTreeMap<String, WallWindow>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, Vec<Diagnostic>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EnergyReport {
    pub fn node_total(&self, node: &str) -> Option<f64> {
        self.per_node.get(node).map(total_of)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One node's parsed log and how its session ended.
#[derive(Debug, Clone)]
pub struct NodeInput {
    pub log: NodeEnergyLog,
    pub status: LogStatus,
}

#[derive(Debug, Clone)]
pub struct ReportRequest<'a> {
    pub workflow_id: String,
    pub method: Method,
    pub status: RunStatus,
    pub policy: AttributionPolicy,
    pub options: AccountingOptions,
    pub trace: Option<&'a WorkflowTrace>,
    /// Measurement window; each node's whole log span when absent.
    pub window: Option<WallWindow>,
    /// Nodes whose logs were expected but could not be collected.
    pub missing_nodes: Vec<String>,
}

impl<'a> ReportRequest<'a> {
    pub fn new(workflow_id: impl Into<String>, method: Method, policy: AttributionPolicy) -> Self {
        ReportRequest {
            workflow_id: workflow_id.into(),
            method,
            status: RunStatus::Ok,
            policy,
            options: AccountingOptions::default(),
            trace: None,
            window: None,
            missing_nodes: Vec::new(),
        }
    }
}

fn intersect(a: &WallWindow, b: &WallWindow) -> Option<WallWindow> {
    let s = a.start_wall_ns.max(b.start_wall_ns);
    let e = a.end_wall_ns.min(b.end_wall_ns);
    (s <= e).then_some(WallWindow {
        start_wall_ns: s,
        end_wall_ns: e,
    })
}

/// Groups tasks into runs of transitively overlapping windows.
fn overlap_groups<'t>(tasks: Vec<&'t TaskRecord>, opts: &AccountingOptions) -> Vec<Vec<&'t TaskRecord>> {
    let mut sorted = tasks;
    sorted.sort_by_key(|t| task_window(t, opts));
    let mut groups: Vec<Vec<&'t TaskRecord>> = Vec::new();
    let mut reach = i64::MIN;
    for t in sorted {
        let w = task_window(t, opts);
        match groups.last_mut() {
            Some(g) if w.start_wall_ns < reach || g.iter().any(|o| overlaps(&task_window(o, opts), &w)) => {
                g.push(t)
            }
            _ => groups.push(vec![t]),
        }
        reach = reach.max(w.end_wall_ns);
    }
    groups
}

/// Runs the accounting pipeline over collected node logs.
pub fn build_report(nodes: &[NodeInput], req: &ReportRequest<'_>) -> Result<EnergyReport, AccountingError> {
    req.policy.validate()?;
    let mut per_node = BTreeMap::new();
    let mut node_windows = BTreeMap::new();
    let mut diagnostics: BTreeMap<String, Vec<Diagnostic>> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut logs: BTreeMap<&str, &NodeEnergyLog> = BTreeMap::new();

    for n in nodes {
        let id = n.log.node_id.as_str();
        if logs.insert(id, &n.log).is_some() {
            return Err(AccountingError::Invalid(format!("two logs for node {id}")));
        }
        let span = n.log.span().ok_or_else(|| {
            AccountingError::Invalid(format!("log of node {id} has fewer than two samples in some domain"))
        })?;
        let window = match &req.window {
            Some(w) => {
                let clipped = intersect(w, &span).ok_or_else(|| {
                    AccountingError::Invalid(format!("log of node {id} does not overlap the measurement window"))
                })?;
                if clipped != *w {
                    warnings.push(format!("log of node {id} covers only part of the measurement window"));
                }
                clipped
            }
            None => span,
        };
        let mut diag = Vec::new();
        match n.status {
            LogStatus::Complete => {}
            LogStatus::Truncated => diag.push(Diagnostic::LogTruncated),
            LogStatus::Reaped => diag.push(Diagnostic::LogReaped),
        }
        if n.log.has_unsafe_gap_in(&window) {
            diag.push(Diagnostic::UnsafeGap);
        }
        if !diag.is_empty() {
            diagnostics.insert(id.to_string(), diag);
        }
        per_node.insert(id.to_string(), node_window_energy(&n.log, &window)?);
        node_windows.insert(id.to_string(), window);
    }
    let missing: BTreeSet<&str> = req.missing_nodes.iter().map(String::as_str).collect();
    for m in &missing {
        if logs.contains_key(m) {
            return Err(AccountingError::Invalid(format!("node {m} listed as missing but has a log")));
        }
        diagnostics.insert(m.to_string(), vec![Diagnostic::MissingLog]);
    }

    let mut per_task = Vec::new();
    let mut unattributed: BTreeMap<String, JoulesByDomain> = per_node.clone();
    if let Some(trace) = req.trace {
        let mut by_node: BTreeMap<&str, Vec<&TaskRecord>> = BTreeMap::new();
        for t in &trace.tasks {
            by_node.entry(t.node_id.as_str()).or_default().push(t);
        }
        let mut results: BTreeMap<String, TaskEnergy> = BTreeMap::new();
        for (node, tasks) in by_node {
            let Some(log) = logs.get(node) else {
                if missing.contains(node) {
                    warnings.push(format!("{} task(s) on node {node} have no energy data", tasks.len()));
                    continue;
                }
                return Err(AccountingError::MissingNodeLog(node.to_string()));
            };
            let window = node_windows[node];
            let (inside, outside): (Vec<&TaskRecord>, Vec<&TaskRecord>) = tasks
                .into_iter()
                .partition(|t| window.contains(&task_window(t, &req.options)));
            for t in outside {
                warnings.push(format!(
                    "task {} lies outside the measured window of node {node}; skipped",
                    t.task_id
                ));
            }
            for group in overlap_groups(inside, &req.options) {
                let energies = if group.len() == 1 {
                    vec![exclusive_task_energy(group[0], &[], log, &req.options)?]
                } else {
                    let owned: Vec<TaskRecord> = group.iter().map(|&t| t.clone()).collect();
                    attribute_concurrent(&owned, log, &req.policy, &req.options)?.tasks
                };
                let rest = unattributed.get_mut(node).expect("node has a total");
                for te in energies {
                    for (d, j) in &te.joules_by_domain {
                        *rest.get_mut(d).expect("same domains") -= j;
                    }
                    results.insert(te.task_id.clone(), te);
                }
            }
        }
        // keep trace order
        for t in &trace.tasks {
            if let Some(te) = results.remove(&t.task_id) {
                per_task.push(te);
            }
        }
    }

    let status = if !missing.is_empty() && req.status == RunStatus::Ok {
        RunStatus::Partial
    } else {
        req.status
    };
    Ok(EnergyReport {
        report_version: REPORT_VERSION,
        workflow_id: req.workflow_id.clone(),
        method: req.method,
        status,
        total_joules: per_node.values().map(total_of).sum(),
        coverage_fraction: None,
        per_node,
        per_task,
        unattributed,
        node_windows,
        diagnostics,
        warnings,
    })
}
