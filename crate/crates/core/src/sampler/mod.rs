// SPDX-License-Identifier: Apache-2.0

//! Per-node sampling agent.
//!
//! The agent polls the signal directory and the counter backend on one tick.
//! Every active session gets one record per domain per tick in its own log;
//! starting and stopping a session each write a record taken after the
//! marker change was seen.

pub mod backend;
pub mod clock;
pub mod logfile;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::{CounterSpec, RaplDomain, RawSample};
use crate::signal::{self, AckState, AgentAck, SessionEvent, SessionMarker, SignalWatcher};
use backend::{read_backend, Backend, BackendError, MockBackend, MockProfile, MsrBackend, PowercapBackend};
use clock::Clock;
use logfile::{LogStatus, LogWriter, DEFAULT_MAX_POWER_WATTS};

pub const DEFAULT_INTERVAL_MS: u64 = 500;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
    #[error("watcher stopped: {0}")]
    Watch(#[from] signal::WatchError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn default_interval() -> u64 {
    DEFAULT_INTERVAL_MS
}

fn default_max_power() -> f64 {
    DEFAULT_MAX_POWER_WATTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockDomainProfile {
    pub domain: RaplDomain,
    pub segments: Vec<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Powercap {
        #[serde(default = "default_powercap_root")]
        root: PathBuf,
        /// Explicit zone directory per domain; discovered when absent.
        #[serde(default)]
        zones: Option<BTreeMap<RaplDomain, PathBuf>>,
    },
    Msr {
        #[serde(default = "default_msr_root")]
        dev_root: PathBuf,
        #[serde(default)]
        cpu: u32,
    },
    Mock { profiles: Vec<MockDomainProfile> },
}

fn default_powercap_root() -> PathBuf {
    PathBuf::from("/sys/class/powercap")
}

fn default_msr_root() -> PathBuf {
    PathBuf::from("/dev/cpu")
}

/// Agent configuration, read from JSON by `wattflow agent --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub node_id: String,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    pub domains: Vec<CounterSpec>,
    pub log_dir: PathBuf,
    pub signal_dir: PathBuf,
    pub backend: BackendConfig,
    /// Overrides the reap timeout declared by markers.
    #[serde(default)]
    pub stale_timeout_s: Option<u64>,
    /// Upper bound on per-domain power, used for the wrap-safety check.
    #[serde(default = "default_max_power")]
    pub max_power_watts: f64,
}

impl SamplerConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: SamplerConfig = serde_json::from_str(&text)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !signal::is_fs_safe_id(&self.node_id) {
            return Err(AgentError::Config(format!(
                "node id `{}` is not filesystem-safe",
                self.node_id
            )));
        }
        if self.interval_ms == 0 {
            return Err(AgentError::Config("interval_ms must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(AgentError::Config("no domains configured".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate().map_err(|e| AgentError::Config(e.to_string()))?;
            if self.domains[..i].iter().any(|o| o.domain == d.domain) {
                return Err(AgentError::Config(format!("domain {} listed twice", d.domain)));
            }
        }
        Ok(())
    }

    /// Shortest wrap period over the configured domains at the power bound.
    pub fn wrap_safety_horizon(&self) -> Duration {
        let secs = self
            .domains
            .iter()
            .map(|d| d.min_wrap_period_s(self.max_power_watts))
            .fold(f64::INFINITY, f64::min);
        Duration::from_secs_f64(secs.min(1e12))
    }

    /// False when the interval could let a wrap go unnoticed.
    pub fn interval_is_wrap_safe(&self) -> bool {
        Duration::from_millis(self.interval_ms) <= self.wrap_safety_horizon() / 2
    }

    pub fn build_backend(&self, origin_ns: i64) -> Result<Backend, AgentError> {
        let backend = match &self.backend {
            BackendConfig::Powercap { root, zones } => Backend::PowercapFs(match zones {
                Some(z) => PowercapBackend::open(z)?,
                None => PowercapBackend::discover(root)?,
            }),
            BackendConfig::Msr { dev_root, cpu } => Backend::MsrDevice(MsrBackend::open(dev_root, *cpu)?),
            BackendConfig::Mock { profiles } => {
                let mut built = Vec::new();
                for p in profiles {
                    let spec = self
                        .domains
                        .iter()
                        .find(|d| d.domain == p.domain)
                        .ok_or_else(|| {
                            AgentError::Config(format!("mock profile for unconfigured domain {}", p.domain))
                        })?;
                    built.push(MockProfile::new(p.segments.clone(), *spec, p.seed)?);
                }
                Backend::Mock(MockBackend::new(origin_ns, built)?)
            }
        };
        for d in &self.domains {
            backend.check_spec(d)?;
        }
        Ok(backend)
    }
}

/// One domain's reading for a tick; `raw` is `None` when the read failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reading {
    pub domain: RaplDomain,
    pub t_ns: i64,
    pub raw: Option<u64>,
}

/// Reads every domain, retrying a failed read once before giving up on it.
pub fn read_all<C: Clock>(backend: &mut Backend, domains: &[CounterSpec], clock: &C) -> Vec<Reading> {
    domains
        .iter()
        .map(|spec| {
            let first = read_backend(backend, spec, clock.mono_ns());
            let result = first.or_else(|e| {
                log::debug!("read of {} failed ({e}); retrying", spec.domain);
                read_backend(backend, spec, clock.mono_ns())
            });
            match result {
                Ok(RawSample { t_ns, raw }) => Reading {
                    domain: spec.domain,
                    t_ns,
                    raw: Some(raw),
                },
                Err(e) => {
                    log::warn!("recording gap for {}: {e}", spec.domain);
                    Reading {
                        domain: spec.domain,
                        t_ns: clock.mono_ns(),
                        raw: None,
                    }
                }
            }
        })
        .collect()
}

/// An open session log on this node.
#[derive(Debug)]
pub struct SessionLog {
    session_id: String,
    path: PathBuf,
    writer: Option<LogWriter>,
    last_t: BTreeMap<RaplDomain, i64>,
    records: usize,
}

impl SessionLog {
    pub fn open(
        log_dir: &Path,
        node_id: &str,
        session_id: &str,
        domains: &[CounterSpec],
        epoch_wall_ns: i64,
    ) -> io::Result<Self> {
        let path = logfile::log_path(log_dir, node_id, session_id);
        let mut writer = LogWriter::open_append(&path)?;
        for d in domains {
            writer.header(node_id, d, epoch_wall_ns)?;
        }
        writer.flush()?;
        Ok(SessionLog {
            session_id: session_id.to_string(),
            path,
            writer: Some(writer),
            last_t: BTreeMap::new(),
            records: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn is_failed(&self) -> bool {
        self.writer.is_none()
    }

    /// Records written so far, gap markers included.
    pub fn records(&self) -> usize {
        self.records
    }

    /// Appends one tick. A write failure leaves the log truncated and
    /// disables further writes.
    pub fn append(&mut self, readings: &[Reading]) -> io::Result<()> {
        let Some(writer) = self.writer.as_mut() else {
            return Ok(());
        };
        let result = (|| {
            for r in readings {
                if self.last_t.get(&r.domain).is_some_and(|&t| r.t_ns <= t) {
                    continue;
                }
                match r.raw {
                    Some(raw) => writer.record(&RawSample { t_ns: r.t_ns, raw }, r.domain)?,
                    None => writer.gap(r.t_ns, r.domain)?,
                }
                self.last_t.insert(r.domain, r.t_ns);
                self.records += 1;
            }
            writer.flush()
        })();
        if result.is_err() {
            self.writer = None;
        }
        result
    }

    /// Writes the trailer. Returns the status the log ends up with.
    pub fn close(mut self, status: LogStatus) -> LogStatus {
        match self.writer.take() {
            Some(w) => match w.finish(status) {
                Ok(()) => status,
                Err(e) => {
                    log::error!("closing {}: {e}", self.path.display());
                    LogStatus::Truncated
                }
            },
            None => LogStatus::Truncated,
        }
    }
}

/// Records one session until `is_active` turns false, then writes a final
/// record and the trailer.
pub fn sampling_loop<C: Clock>(
    config: &SamplerConfig,
    session: &SessionMarker,
    backend: &mut Backend,
    clock: &C,
    mut is_active: impl FnMut() -> bool,
) -> Result<(PathBuf, LogStatus), AgentError> {
    let path = logfile::log_path(&config.log_dir, &config.node_id, &session.session_id);
    let mut log = SessionLog::open(
        &config.log_dir,
        &config.node_id,
        &session.session_id,
        &config.domains,
        clock.epoch_wall_ns(),
    )
    .map_err(|source| AgentError::Io {
        path: path.clone(),
        source,
    })?;
    let interval = config.interval_ms as i64 * 1_000_000;
    let mut next = clock.mono_ns();
    loop {
        let active = is_active();
        let readings = read_all(backend, &config.domains, clock);
        if let Err(e) = log.append(&readings) {
            log::error!("session {} aborted: {e}", session.session_id);
            return Ok((path, LogStatus::Truncated));
        }
        if !active {
            return Ok((path, log.close(LogStatus::Complete)));
        }
        next += interval;
        let now = clock.mono_ns();
        if next <= now {
            next = now + interval - (now - next) % interval;
        }
        clock.sleep_until_mono(next);
    }
}

/// What happened during one agent tick.
#[derive(Debug, Default)]
pub struct TickReport {
    pub events: Vec<SessionEvent>,
    pub closed: Vec<(String, LogStatus)>,
}

/// Watcher-driven agent handling any number of concurrent sessions.
pub struct Agent<C: Clock> {
    config: SamplerConfig,
    backend: Backend,
    clock: C,
    watcher: SignalWatcher,
    epoch_wall_ns: i64,
    sessions: BTreeMap<String, SessionLog>,
}

impl<C: Clock> Agent<C> {
    pub fn new(config: SamplerConfig, backend: Backend, clock: C) -> Result<Self, AgentError> {
        config.validate()?;
        for d in &config.domains {
            backend.check_spec(d)?;
        }
        if !config.interval_is_wrap_safe() {
            log::warn!(
                "interval {} ms exceeds half the wrap-safety horizon ({:?}); wraps may be missed",
                config.interval_ms,
                config.wrap_safety_horizon()
            );
        }
        std::fs::create_dir_all(&config.log_dir).map_err(|source| AgentError::Io {
            path: config.log_dir.clone(),
            source,
        })?;
        let mut watcher = SignalWatcher::new(&config.signal_dir);
        if let Some(s) = config.stale_timeout_s {
            watcher = watcher.with_stale_timeout(Duration::from_secs(s));
        }
        let epoch_wall_ns = clock.epoch_wall_ns();
        Ok(Agent {
            config,
            backend,
            clock,
            watcher,
            epoch_wall_ns,
            sessions: BTreeMap::new(),
        })
    }

    pub fn from_config(config: SamplerConfig, clock: C) -> Result<Self, AgentError> {
        let backend = config.build_backend(clock.mono_ns())?;
        Self::new(config, backend, clock)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn active_sessions(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    fn ack(&self, session_id: &str, path: &Path, state: AckState) {
        let ack = AgentAck {
            session_id: session_id.to_string(),
            node_id: self.config.node_id.clone(),
            state,
            log_path: path.to_path_buf(),
        };
        if let Err(e) = signal::write_ack(&self.config.signal_dir, &ack) {
            log::warn!("cannot publish ack for {session_id}: {e}");
        }
    }

    fn close_session(&mut self, id: &str, status: LogStatus, report: &mut TickReport) {
        if let Some(log) = self.sessions.remove(id) {
            let path = log.path().to_path_buf();
            let final_status = log.close(status);
            self.ack(id, &path, AckState::Closed(final_status));
            report.closed.push((id.to_string(), final_status));
        }
    }

    /// One poll of the signal directory plus one reading per domain.
    pub fn tick(&mut self) -> Result<TickReport, AgentError> {
        let mut report = TickReport::default();
        let events = match self.watcher.poll(self.clock.wall_ns()) {
            Ok(ev) => ev,
            Err(e) => {
                // logs stay without trailer, i.e. truncated
                let ids: Vec<String> = self.sessions.keys().cloned().collect();
                for id in ids {
                    if let Some(log) = self.sessions.remove(&id) {
                        self.ack(&id, log.path(), AckState::Closed(LogStatus::Truncated));
                    }
                }
                return Err(e.into());
            }
        };
        let readings = read_all(&mut self.backend, &self.config.domains, &self.clock);

        let mut closing: Vec<(String, LogStatus)> = Vec::new();
        for ev in &events {
            match ev {
                SessionEvent::Started(m) => {
                    if self.sessions.contains_key(&m.session_id) {
                        continue;
                    }
                    match SessionLog::open(
                        &self.config.log_dir,
                        &self.config.node_id,
                        &m.session_id,
                        &self.config.domains,
                        self.epoch_wall_ns,
                    ) {
                        Ok(log) => {
                            log::info!("session {} started", m.session_id);
                            self.sessions.insert(m.session_id.clone(), log);
                        }
                        Err(e) => log::error!("cannot open log for {}: {e}", m.session_id),
                    }
                }
                SessionEvent::Stopped { session_id } => {
                    closing.push((session_id.clone(), LogStatus::Complete))
                }
                SessionEvent::Reaped { session_id } => {
                    log::warn!("session {session_id} reaped after stale timeout");
                    closing.push((session_id.clone(), LogStatus::Reaped))
                }
                SessionEvent::Fatal(_) => {}
            }
        }

        let mut failed = Vec::new();
        for (id, log) in self.sessions.iter_mut() {
            let first = log.records() == 0;
            if log.append(&readings).is_err() {
                log::error!("session {id}: log write failed, session aborted");
                failed.push(id.clone());
            } else if first {
                let path = log.path().to_path_buf();
                let ack = AgentAck {
                    session_id: id.clone(),
                    node_id: self.config.node_id.clone(),
                    state: AckState::Recording,
                    log_path: path,
                };
                if let Err(e) = signal::write_ack(&self.config.signal_dir, &ack) {
                    log::warn!("cannot publish ack for {id}: {e}");
                }
            }
        }
        for id in failed {
            self.close_session(&id, LogStatus::Truncated, &mut report);
        }
        for (id, status) in closing {
            self.close_session(&id, status, &mut report);
        }
        report.events = events;
        Ok(report)
    }

    /// Ticks every `interval_ms` until `stop` returns true or the watcher fails.
    pub fn run_until(&mut self, mut stop: impl FnMut(&TickReport) -> bool) -> Result<(), AgentError> {
        let interval = self.config.interval_ms as i64 * 1_000_000;
        let mut next = self.clock.mono_ns();
        loop {
            let report = self.tick()?;
            if stop(&report) {
                return Ok(());
            }
            next += interval;
            let now = self.clock.mono_ns();
            if next <= now {
                next = now + interval - (now - next) % interval;
            }
            self.clock.sleep_until_mono(next);
        }
    }

    pub fn run(&mut self) -> Result<(), AgentError> {
        self.run_until(|_| false)
    }
}
