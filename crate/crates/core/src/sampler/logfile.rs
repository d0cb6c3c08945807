// SPDX-License-Identifier: Apache-2.0

//! Line-oriented session log.
//!
//! ```text
//! #wattflow-v1 node=<id> domain=<name> bit_width=<n> unit_j=<real> epoch_wall_ns=<int>
//! <t_ns>,<domain>,<raw>
//! <t_ns>,<domain>,gap
//! #end status=<complete|reaped|truncated>
//! ```
//!
//! One header per domain block start, records of all domains interleaved.
//! A log without an `#end` line was cut short and parses as truncated.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::{CounterError, CounterSpec, RaplDomain, RawSample, SampleSeries};

pub const HEADER_TAG: &str = "#wattflow-v1";
pub const END_TAG: &str = "#end";

/// Power bound used to derive wrap-safety horizons when none is given.
pub const DEFAULT_MAX_POWER_WATTS: f64 = 400.0;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}:{line}: non-monotonic timestamp for domain {domain}")]
    NonMonotonic {
        path: String,
        line: usize,
        domain: RaplDomain,
    },
    #[error("{path}:{line}: record for domain {domain} before its header")]
    HeaderMismatch {
        path: String,
        line: usize,
        domain: RaplDomain,
    },
    #[error("{path}: no header line")]
    MissingHeader { path: String },
    #[error("{path}: {source}")]
    Counter { path: String, source: CounterError },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStatus {
    /// Session stopped normally; final record written.
    Complete,
    /// Session closed by the stale-session timeout.
    Reaped,
    /// Log ends without a trailer: sink failure, crash, or still open.
    Truncated,
}

impl LogStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LogStatus::Complete => "complete",
            LogStatus::Reaped => "reaped",
            LogStatus::Truncated => "truncated",
        }
    }
}

impl fmt::Display for LogStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "complete" => Ok(LogStatus::Complete),
            "reaped" => Ok(LogStatus::Reaped),
            "truncated" => Ok(LogStatus::Truncated),
            other => Err(format!("unknown log status `{other}`")),
        }
    }
}

pub fn log_file_name(node_id: &str, session_id: &str) -> String {
    format!("rapl_{node_id}_{session_id}.csv")
}

pub fn log_path(log_dir: &Path, node_id: &str, session_id: &str) -> PathBuf {
    log_dir.join(log_file_name(node_id, session_id))
}

pub fn header_line(node_id: &str, spec: &CounterSpec, epoch_wall_ns: i64) -> String {
    format!(
        "{HEADER_TAG} node={node_id} domain={} bit_width={} unit_j={} epoch_wall_ns={epoch_wall_ns}",
        spec.domain, spec.bit_width, spec.energy_unit_joules
    )
}

pub fn record_line(record: &RawSample, domain: RaplDomain) -> String {
    format!("{},{},{}", record.t_ns, domain, record.raw)
}

pub fn gap_line(t_ns: i64, domain: RaplDomain) -> String {
    format!("{t_ns},{domain},gap")
}

pub fn end_line(status: LogStatus) -> String {
    format!("{END_TAG} status={status}")
}

/// Appending writer for one node x session log.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn open_append(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&mut self, node_id: &str, spec: &CounterSpec, epoch_wall_ns: i64) -> io::Result<()> {
        writeln!(self.out, "{}", header_line(node_id, spec, epoch_wall_ns))
    }

    pub fn record(&mut self, record: &RawSample, domain: RaplDomain) -> io::Result<()> {
        writeln!(self.out, "{}", record_line(record, domain))
    }

    pub fn gap(&mut self, t_ns: i64, domain: RaplDomain) -> io::Result<()> {
        writeln!(self.out, "{}", gap_line(t_ns, domain))
    }

    pub fn finish(mut self, status: LogStatus) -> io::Result<()> {
        writeln!(self.out, "{}", end_line(status))?;
        self.flush()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Writes every series of a node into one log, interleaving records by time.
pub fn write_log(
    path: &Path,
    node_id: &str,
    series: &[&SampleSeries],
    status: Option<LogStatus>,
) -> io::Result<()> {
    let mut w = LogWriter::open_append(path)?;
    for s in series {
        w.header(node_id, &s.spec, s.epoch_wall_ns)?;
    }
    let mut lines: Vec<(i64, usize, String)> = Vec::new();
    for (k, s) in series.iter().enumerate() {
        lines.extend(
            s.samples()
                .iter()
                .map(|r| (r.t_ns, k, record_line(r, s.spec.domain))),
        );
        lines.extend(
            s.read_failures()
                .iter()
                .map(|&t| (t, k, gap_line(t, s.spec.domain))),
        );
    }
    lines.sort_by_key(|(t, k, _)| (*t, *k));
    for (_, _, line) in lines {
        writeln!(w.out, "{line}")?;
    }
    match status {
        Some(st) => w.finish(st),
        None => w.flush(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// Upper bound on domain power for the wrap-safety horizon.
    pub max_power_watts: Option<f64>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_power_watts: Some(DEFAULT_MAX_POWER_WATTS),
        }
    }
}

/// A parsed node log.
#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub node_id: String,
    /// Taken from the file name when parsed from disk.
    pub session_id: Option<String>,
    pub status: LogStatus,
    pub series: BTreeMap<RaplDomain, SampleSeries>,
}

impl ParsedLog {
    pub fn series(&self, domain: RaplDomain) -> Option<&SampleSeries> {
        self.series.get(&domain)
    }

    pub fn has_unsafe_gap(&self) -> bool {
        self.series.values().any(SampleSeries::has_unsafe_gap)
    }
}

struct DomainBlock {
    spec: CounterSpec,
    epoch_wall_ns: i64,
    samples: Vec<RawSample>,
    gaps: Vec<i64>,
    last_t: Option<i64>,
}

fn kv<'a>(token: &'a str, key: &str) -> Option<&'a str> {
    token.strip_prefix(key)?.strip_prefix('=')
}

pub fn parse_log(path: &Path, opts: ParseOptions) -> Result<ParsedLog, LogError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| LogError::Io {
        path: name.clone(),
        source,
    })?;
    let mut log = parse_log_str(&text, &name, opts)?;
    if let Some(file) = path.file_name().and_then(|f| f.to_str()) {
        let prefix = format!("rapl_{}_", log.node_id);
        log.session_id = file
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".csv"))
            .map(str::to_string);
    }
    Ok(log)
}

pub fn parse_log_str(text: &str, name: &str, opts: ParseOptions) -> Result<ParsedLog, LogError> {
    let perr = |line: usize, detail: String| LogError::Parse {
        path: name.to_string(),
        line,
        detail,
    };
    let mut node_id: Option<String> = None;
    let mut blocks: BTreeMap<RaplDomain, DomainBlock> = BTreeMap::new();
    let mut status = LogStatus::Truncated;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(HEADER_TAG) {
            let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
            for token in rest.split_whitespace() {
                let (k, v) = token
                    .split_once('=')
                    .ok_or_else(|| perr(line_no, format!("malformed header field `{token}`")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| perr(line_no, format!("header lacks `{k}`")))
            };
            let node = get("node")?;
            let domain: RaplDomain = get("domain")?
                .parse()
                .map_err(|e: CounterError| perr(line_no, e.to_string()))?;
            let bit_width: u32 = get("bit_width")?
                .parse()
                .map_err(|e| perr(line_no, format!("bit_width: {e}")))?;
            let unit: f64 = get("unit_j")?
                .parse()
                .map_err(|e| perr(line_no, format!("unit_j: {e}")))?;
            let epoch: i64 = get("epoch_wall_ns")?
                .parse()
                .map_err(|e| perr(line_no, format!("epoch_wall_ns: {e}")))?;
            let spec = CounterSpec::new(domain, bit_width, unit, 1e-3)
                .map_err(|e| perr(line_no, e.to_string()))?;
            match &node_id {
                Some(n) if n != node => {
                    return Err(perr(line_no, format!("node `{node}` differs from `{n}`")))
                }
                None => node_id = Some(node.to_string()),
                _ => {}
            }
            match blocks.get(&domain) {
                // a restarted agent re-announces the domain
                Some(b) if b.spec.bit_width != bit_width || b.spec.energy_unit_joules != unit => {
                    return Err(perr(line_no, format!("conflicting header for {domain}")));
                }
                Some(_) => {}
                None => {
                    blocks.insert(
                        domain,
                        DomainBlock {
                            spec,
                            epoch_wall_ns: epoch,
                            samples: Vec::new(),
                            gaps: Vec::new(),
                            last_t: None,
                        },
                    );
                }
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix(END_TAG) {
            let st = rest
                .split_whitespace()
                .find_map(|t| kv(t, "status"))
                .ok_or_else(|| perr(line_no, "end line lacks status".into()))?;
            status = st.parse().map_err(|e| perr(line_no, e))?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(t), Some(d), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(perr(line_no, format!("expected `t_ns,domain,raw`, got `{line}`")));
        };
        let t_ns: i64 = t
            .parse()
            .map_err(|e| perr(line_no, format!("t_ns `{t}`: {e}")))?;
        let domain: RaplDomain = d.parse().map_err(|e: CounterError| perr(line_no, e.to_string()))?;
        let block = blocks.get_mut(&domain).ok_or_else(|| LogError::HeaderMismatch {
            path: name.to_string(),
            line: line_no,
            domain,
        })?;
        if block.last_t.is_some_and(|last| t_ns <= last) {
            return Err(LogError::NonMonotonic {
                path: name.to_string(),
                line: line_no,
                domain,
            });
        }
        block.last_t = Some(t_ns);
        if v == "gap" {
            block.gaps.push(t_ns);
            continue;
        }
        let raw: u64 = v
            .parse()
            .map_err(|e| perr(line_no, format!("raw `{v}`: {e}")))?;
        if raw > block.spec.max_raw() {
            return Err(perr(
                line_no,
                format!("raw {raw} exceeds {} bits", block.spec.bit_width),
            ));
        }
        block.samples.push(RawSample { t_ns, raw });
    }

    let node_id = node_id.ok_or_else(|| LogError::MissingHeader {
        path: name.to_string(),
    })?;
    let mut series = BTreeMap::new();
    for (domain, b) in blocks {
        let mut s = SampleSeries::new(node_id.clone(), b.spec, b.epoch_wall_ns, b.samples)
            .map_err(|source| LogError::Counter {
                path: name.to_string(),
                source,
            })?
            .with_read_failures(b.gaps);
        if let Some(w) = opts.max_power_watts {
            s = s.with_power_bound(w);
        }
        series.insert(domain, s);
    }
    Ok(ParsedLog {
        node_id,
        session_id: None,
        status,
        series,
    })
}
