// SPDX-License-Identifier: Apache-2.0

//! Workflow execution traces: Nextflow's tab-separated trace file and an
//! engine-agnostic JSON document.

use std::fmt;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// Runtime assumed for tasks whose start and end were logged identically.
pub const DEFAULT_SUB_RESOLUTION_S: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}: row {row}, column `{column}`: {detail}")]
    Row {
        file: String,
        row: usize,
        column: String,
        detail: String,
    },
    #[error("{file}: trace has no tasks")]
    Empty { file: String },
    #[error("{file}: schema violation at {path}: {detail}")]
    Schema {
        file: String,
        path: String,
        detail: String,
    },
    #[error("{file}: {detail}")]
    Read { file: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Completed,
    Failed,
    Cached,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Completed => "completed",
            TaskStatus::Failed => "failed",
            TaskStatus::Cached => "cached",
        }
    }

    fn parse_any(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "completed" => Some(TaskStatus::Completed),
            "failed" | "aborted" => Some(TaskStatus::Failed),
            "cached" => Some(TaskStatus::Cached),
            _ => None,
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Data-quality flags attached while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFlags {
    /// Start and end were logged with the same instant.
    pub sub_resolution: bool,
    /// The trace did not say which host ran the task.
    pub unknown_node: bool,
    /// CPU time was absent; wall time stands in for it.
    pub cpu_time_fallback: bool,
    /// The task interval leaves the workflow's submitted..finished range.
    pub outside_workflow: bool,
}

/// One physical task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub name: String,
    pub node_id: String,
    pub start_wall_ns: i64,
    pub end_wall_ns: i64,
    pub cpu_time_s: f64,
    pub status: TaskStatus,
    #[serde(default)]
    pub flags: TaskFlags,
}

impl TaskRecord {
    pub fn duration_s(&self) -> f64 {
        (self.end_wall_ns - self.start_wall_ns) as f64 / 1e9
    }

    /// Interval used for energy windows. Sub-resolution tasks get
    /// `assumed_s` centred on the logged instant.
    pub fn effective_window(&self, assumed_s: f64) -> (i64, i64) {
        if self.flags.sub_resolution {
            let half = (assumed_s * 1e9 / 2.0).round() as i64;
            (self.start_wall_ns - half, self.start_wall_ns + half)
        } else {
            (self.start_wall_ns, self.end_wall_ns)
        }
    }

    /// Mean CPU rate (CPU seconds per wall second) over the effective window.
    pub fn cpu_rate(&self, assumed_s: f64) -> f64 {
        let (a, b) = self.effective_window(assumed_s);
        let wall = (b - a) as f64 / 1e9;
        if wall > 0.0 {
            self.cpu_time_s / wall
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub workflow_id: String,
    pub tasks: Vec<TaskRecord>,
    pub submitted_wall_ns: i64,
    pub finished_wall_ns: i64,
}

impl WorkflowTrace {
    /// Sets `sub_resolution` and `outside_workflow` flags.
    pub fn refresh_flags(&mut self) {
        for t in &mut self.tasks {
            t.flags.sub_resolution = t.start_wall_ns == t.end_wall_ns;
            t.flags.outside_workflow =
                t.start_wall_ns < self.submitted_wall_ns || t.end_wall_ns > self.finished_wall_ns;
        }
    }

    pub fn nodes(&self) -> Vec<String> {
        let mut nodes: Vec<String> = self.tasks.iter().map(|t| t.node_id.clone()).collect();
        nodes.sort();
        nodes.dedup();
        nodes
    }

    pub fn tasks_on<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a TaskRecord> + 'a {
        self.tasks.iter().filter(move |t| t.node_id == node_id)
    }
}

/// Column names used when reading a Nextflow trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub task_id: String,
    pub name: String,
    pub status: String,
    pub submit: String,
    pub start: String,
    pub complete: String,
    pub realtime: String,
    pub cpu_percent: String,
    pub hostname: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            task_id: "task_id".into(),
            name: "name".into(),
            status: "status".into(),
            submit: "submit".into(),
            start: "start".into(),
            complete: "complete".into(),
            realtime: "realtime".into(),
            cpu_percent: "%cpu".into(),
            hostname: "hostname".into(),
        }
    }
}

/// Parses Nextflow durations such as `2m 10s`, `120ms`, `1h 3m 2.5s`.
/// A bare number is taken as milliseconds (raw trace mode).
pub fn parse_nf_duration(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<f64>() {
        return Ok(ms / 1000.0);
    }
    let mut total = 0.0;
    let mut any = false;
    for token in s.split_whitespace() {
        let split = token
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .ok_or_else(|| format!("duration `{s}` lacks a unit"))?;
        let (num, unit) = token.split_at(split);
        let value: f64 = num.parse().map_err(|_| format!("bad duration `{s}`"))?;
        let scale = match unit {
            "ms" => 1e-3,
            "s" => 1.0,
            "m" => 60.0,
            "h" => 3600.0,
            "d" => 86400.0,
            _ => return Err(format!("unknown duration unit `{unit}` in `{s}`")),
        };
        total += value * scale;
        any = true;
    }
    if any {
        Ok(total)
    } else {
        Err("empty duration".into())
    }
}

/// Parses `2025-04-01 10:22:45.123` (taken as UTC) or epoch milliseconds.
pub fn parse_nf_timestamp(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms * 1_000_000);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return dt
                .and_utc()
                .timestamp_nanos_opt()
                .ok_or_else(|| format!("timestamp `{s}` out of range"));
        }
    }
    Err(format!("unrecognised timestamp `{s}`"))
}

fn parse_percent(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .trim_end_matches('%')
        .parse()
        .map_err(|_| format!("bad percentage `{s}`"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("bad percentage `{s}`"))
    }
}

fn is_missing(s: &str) -> bool {
    let s = s.trim();
    s.is_empty() || s == "-"
}

pub fn parse_nextflow_trace(path: &Path) -> Result<WorkflowTrace, TraceError> {
    parse_nextflow_trace_with(path, &ColumnMap::default())
}

pub fn parse_nextflow_trace_with(path: &Path, columns: &ColumnMap) -> Result<WorkflowTrace, TraceError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Read {
        file: file.clone(),
        detail: e.to_string(),
    })?;
    let workflow_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("workflow")
        .to_string();
    parse_nextflow_str(&text, &file, &workflow_id, columns)
}

pub fn parse_nextflow_str(
    text: &str,
    file: &str,
    workflow_id: &str,
    columns: &ColumnMap,
) -> Result<WorkflowTrace, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| TraceError::Read {
            file: file.to_string(),
            detail: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| TraceError::MissingColumn {
            file: file.to_string(),
            column: name.to_string(),
        })
    };
    let c_id = require(&columns.task_id)?;
    let c_name = require(&columns.name)?;
    let c_status = require(&columns.status)?;
    let c_start = require(&columns.start)?;
    let c_complete = require(&columns.complete)?;
    let c_realtime = require(&columns.realtime)?;
    let c_cpu = require(&columns.cpu_percent)?;
    let c_host = find(&columns.hostname);
    let c_submit = find(&columns.submit);

    let mut tasks = Vec::new();
    let mut submitted: Option<i64> = None;
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| TraceError::Row {
            file: file.to_string(),
            row,
            column: "*".into(),
            detail: e.to_string(),
        })?;
        let row_err = |column: &str, detail: String| TraceError::Row {
            file: file.to_string(),
            row,
            column: column.to_string(),
            detail,
        };
        let field = |c: usize| record.get(c).unwrap_or("").trim();

        let status = TaskStatus::parse_any(field(c_status))
            .ok_or_else(|| row_err(&columns.status, format!("unknown status `{}`", field(c_status))))?;
        let start = parse_nf_timestamp(field(c_start)).map_err(|e| row_err(&columns.start, e))?;
        let end = parse_nf_timestamp(field(c_complete)).map_err(|e| row_err(&columns.complete, e))?;
        if end < start {
            return Err(row_err(&columns.complete, "task completes before it starts".into()));
        }
        let mut flags = TaskFlags::default();
        let realtime = if is_missing(field(c_realtime)) {
            None
        } else {
            Some(parse_nf_duration(field(c_realtime)).map_err(|e| row_err(&columns.realtime, e))?)
        };
        let cpu = if is_missing(field(c_cpu)) {
            None
        } else {
            Some(parse_percent(field(c_cpu)).map_err(|e| row_err(&columns.cpu_percent, e))?)
        };
        let cpu_time_s = match (realtime, cpu) {
            (Some(rt), Some(pct)) => rt * pct / 100.0,
            _ => {
                flags.cpu_time_fallback = true;
                (end - start) as f64 / 1e9
            }
        };
        let node_id = match c_host.map(field) {
            Some(h) if !is_missing(h) => h.to_string(),
            _ => {
                flags.unknown_node = true;
                "unknown".to_string()
            }
        };
        if let Some(c) = c_submit {
            if !is_missing(field(c)) {
                let s = parse_nf_timestamp(field(c)).map_err(|e| row_err(&columns.submit, e))?;
                submitted = Some(submitted.map_or(s, |x| x.min(s)));
            }
        }
        tasks.push(TaskRecord {
            task_id: field(c_id).to_string(),
            name: field(c_name).to_string(),
            node_id,
            start_wall_ns: start,
            end_wall_ns: end,
            cpu_time_s,
            status,
            flags,
        });
    }
    if tasks.is_empty() {
        return Err(TraceError::Empty { file: file.to_string() });
    }
    let first_start = tasks.iter().map(|t| t.start_wall_ns).min().expect("non-empty");
    let last_end = tasks.iter().map(|t| t.end_wall_ns).max().expect("non-empty");
    let mut trace = WorkflowTrace {
        workflow_id: workflow_id.to_string(),
        tasks,
        submitted_wall_ns: submitted.map_or(first_start, |s| s.min(first_start)),
        finished_wall_ns: last_end,
    };
    trace.refresh_flags();
    Ok(trace)
}

fn schema_err(file: &str, path: &str, detail: impl Into<String>) -> TraceError {
    TraceError::Schema {
        file: file.to_string(),
        path: path.to_string(),
        detail: detail.into(),
    }
}

fn get_str(obj: &Map<String, Value>, key: &str, at: &str, file: &str) -> Result<String, TraceError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema_err(file, &format!("{at}.{key}"), "expected a string")),
        None => Err(schema_err(file, &format!("{at}.{key}"), "required field missing")),
    }
}

fn get_i64(obj: &Map<String, Value>, key: &str, at: &str, file: &str) -> Result<i64, TraceError> {
    match obj.get(key) {
        Some(v) => v
            .as_i64()
            .ok_or_else(|| schema_err(file, &format!("{at}.{key}"), "expected an integer")),
        None => Err(schema_err(file, &format!("{at}.{key}"), "required field missing")),
    }
}

pub fn parse_generic_trace(path: &Path) -> Result<WorkflowTrace, TraceError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Read {
        file: file.clone(),
        detail: e.to_string(),
    })?;
    parse_generic_str(&text, &file)
}

pub fn parse_generic_str(text: &str, file: &str) -> Result<WorkflowTrace, TraceError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| schema_err(file, "$", e.to_string()))?;
    let root = doc
        .as_object()
        .ok_or_else(|| schema_err(file, "$", "expected an object"))?;
    let workflow_id = get_str(root, "workflow_id", "$", file)?;
    let submitted_wall_ns = get_i64(root, "submitted_wall_ns", "$", file)?;
    let finished_wall_ns = get_i64(root, "finished_wall_ns", "$", file)?;
    let list = match root.get("tasks") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(schema_err(file, "$.tasks", "expected an array")),
        None => return Err(schema_err(file, "$.tasks", "required field missing")),
    };
    let mut tasks = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let at = format!("$.tasks[{i}]");
        let obj = item
            .as_object()
            .ok_or_else(|| schema_err(file, &at, "expected an object"))?;
        let start = get_i64(obj, "start_wall_ns", &at, file)?;
        let end = get_i64(obj, "end_wall_ns", &at, file)?;
        if end < start {
            return Err(schema_err(file, &format!("{at}.end_wall_ns"), "end precedes start"));
        }
        let status_s = get_str(obj, "status", &at, file)?;
        let status = match status_s.as_str() {
            "completed" => TaskStatus::Completed,
            "failed" => TaskStatus::Failed,
            "cached" => TaskStatus::Cached,
            other => {
                return Err(schema_err(
                    file,
                    &format!("{at}.status"),
                    format!("unknown status `{other}`"),
                ))
            }
        };
        let mut flags = TaskFlags::default();
        let cpu_time_s = match obj.get("cpu_time_s") {
            None | Some(Value::Null) => {
                flags.cpu_time_fallback = true;
                (end - start) as f64 / 1e9
            }
            Some(v) => match v.as_f64() {
                Some(c) if c.is_finite() && c >= 0.0 => c,
                _ => {
                    return Err(schema_err(
                        file,
                        &format!("{at}.cpu_time_s"),
                        "expected a non-negative number",
                    ))
                }
            },
        };
        let node_id = get_str(obj, "node_id", &at, file)?;
        tasks.push(TaskRecord {
            task_id: get_str(obj, "task_id", &at, file)?,
            name: get_str(obj, "name", &at, file)?,
            node_id,
            start_wall_ns: start,
            end_wall_ns: end,
            cpu_time_s,
            status,
            flags,
        });
    }
    let mut trace = WorkflowTrace {
        workflow_id,
        tasks,
        submitted_wall_ns,
        finished_wall_ns,
    };
    trace.refresh_flags();
    Ok(trace)
}

/// Generic JSON form of a trace. Fallback CPU times are omitted so that
/// re-import reproduces the same records.
pub fn to_generic_json(trace: &WorkflowTrace) -> String {
    let tasks: Vec<Value> = trace
        .tasks
        .iter()
        .map(|t| {
            let mut obj = json!({
                "task_id": t.task_id,
                "name": t.name,
                "node_id": t.node_id,
                "start_wall_ns": t.start_wall_ns,
                "end_wall_ns": t.end_wall_ns,
                "status": t.status.as_str(),
            });
            if !t.flags.cpu_time_fallback {
                obj["cpu_time_s"] = json!(t.cpu_time_s);
            }
            obj
        })
        .collect();
    let doc = json!({
        "workflow_id": trace.workflow_id,
        "submitted_wall_ns": trace.submitted_wall_ns,
        "finished_wall_ns": trace.finished_wall_ns,
        "tasks": tasks,
    });
    serde_json::to_string_pretty(&doc).expect("json values always serialize")
}

/// Picks the parser by extension: `.json` is generic, anything else Nextflow.
pub fn parse_trace_auto(path: &Path) -> Result<WorkflowTrace, TraceError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => parse_generic_trace(path),
        _ => parse_nextflow_trace(path),
    }
}
