// SPDX-License-Identifier: Apache-2.0

//! Start/stop coordination through marker files on shared storage.
//!
//! A session is active while `start_<session>.txt` exists in the signal
//! directory. Markers are created with write-then-rename so a watcher never
//! sees a half-written file. Agents answer with `ack_<session>_<node>.txt`
//! once they are recording and again once the session log is closed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::clock::Clock;
use crate::sampler::logfile::LogStatus;

/// Reap timeout when a marker declares no maximum runtime.
pub const DEFAULT_STALE_TIMEOUT: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("session `{0}` is already active")]
    AlreadyActive(String),
    #[error("invalid session marker: {0}")]
    InvalidMarker(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum WatchError {
    #[error("signal directory {0} vanished")]
    DirectoryVanished(PathBuf),
    #[error("cannot read signal directory {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Workflow,
    Task,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Workflow => "workflow",
            Scope::Task => "task",
        })
    }
}

/// Session ids end up in file names on every node.
pub fn is_fs_safe_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMarker {
    pub session_id: String,
    pub created_wall_ns: i64,
    pub scope: Scope,
    pub task_id: Option<String>,
    /// Declared upper bound on the run; the stale timeout is twice this.
    pub max_runtime_s: Option<u64>,
}

impl SessionMarker {
    pub fn workflow(session_id: impl Into<String>, created_wall_ns: i64) -> Result<Self, SignalError> {
        let m = SessionMarker {
            session_id: session_id.into(),
            created_wall_ns,
            scope: Scope::Workflow,
            task_id: None,
            max_runtime_s: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn task(
        session_id: impl Into<String>,
        task_id: impl Into<String>,
        created_wall_ns: i64,
    ) -> Result<Self, SignalError> {
        let m = SessionMarker {
            session_id: session_id.into(),
            created_wall_ns,
            scope: Scope::Task,
            task_id: Some(task_id.into()),
            max_runtime_s: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_max_runtime(mut self, seconds: u64) -> Self {
        self.max_runtime_s = Some(seconds);
        self
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !is_fs_safe_id(&self.session_id) {
            return Err(SignalError::InvalidMarker(format!(
                "session id `{}` is not filesystem-safe",
                self.session_id
            )));
        }
        match (self.scope, &self.task_id) {
            (Scope::Task, None) => Err(SignalError::InvalidMarker(
                "task scope requires a task id".into(),
            )),
            (Scope::Workflow, Some(_)) => Err(SignalError::InvalidMarker(
                "workflow scope forbids a task id".into(),
            )),
            (_, Some(t)) if t.is_empty() || t.contains('\n') => {
                Err(SignalError::InvalidMarker("bad task id".into()))
            }
            _ => Ok(()),
        }
    }

    /// `key=value` body of the marker file.
    pub fn to_body(&self) -> String {
        let mut body = format!("session={}\nscope={}\n", self.session_id, self.scope);
        if let Some(task) = &self.task_id {
            body.push_str(&format!("task={task}\n"));
        }
        body.push_str(&format!("created_wall_ns={}\n", self.created_wall_ns));
        if let Some(max) = self.max_runtime_s {
            body.push_str(&format!("max_runtime_s={max}\n"));
        }
        body
    }

    pub fn from_body(text: &str) -> Result<Self, SignalError> {
        let fields: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.trim().split_once('='))
            .collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| SignalError::InvalidMarker(format!("missing `{k}`")))
        };
        let scope = match get("scope")? {
            "workflow" => Scope::Workflow,
            "task" => Scope::Task,
            other => return Err(SignalError::InvalidMarker(format!("unknown scope `{other}`"))),
        };
        let created_wall_ns = get("created_wall_ns")?
            .parse()
            .map_err(|e| SignalError::InvalidMarker(format!("created_wall_ns: {e}")))?;
        let max_runtime_s = match fields.get("max_runtime_s") {
            Some(v) => Some(
                v.parse()
                    .map_err(|e| SignalError::InvalidMarker(format!("max_runtime_s: {e}")))?,
            ),
            None => None,
        };
        let m = SessionMarker {
            session_id: get("session")?.to_string(),
            created_wall_ns,
            scope,
            task_id: fields.get("task").map(|t| t.to_string()),
            max_runtime_s,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn stale_timeout(&self) -> Duration {
        match self.max_runtime_s {
            Some(s) => Duration::from_secs(s.saturating_mul(2)),
            None => DEFAULT_STALE_TIMEOUT,
        }
    }
}

pub fn marker_file_name(session_id: &str) -> String {
    format!("start_{session_id}.txt")
}

pub fn marker_path(signal_dir: &Path, session_id: &str) -> PathBuf {
    signal_dir.join(marker_file_name(session_id))
}

fn session_from_file_name(name: &str) -> Option<&str> {
    name.strip_prefix("start_")?.strip_suffix(".txt")
}

fn write_atomic(dir: &Path, final_name: &str, body: &str, no_clobber: bool) -> Result<bool, SignalError> {
    let target = dir.join(final_name);
    let tmp = dir.join(format!(".{final_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(body.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    let result = if no_clobber {
        // link(2) refuses to replace an existing marker
        match fs::hard_link(&tmp, &target) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
            Err(_) if target.exists() => Ok(false),
            Err(_) => fs::rename(&tmp, &target).map(|_| true).map_err(io_err(&target)),
        }
    } else {
        fs::rename(&tmp, &target).map(|_| true).map_err(io_err(&target))
    };
    let _ = fs::remove_file(&tmp);
    result
}

/// Creates `start_<session>.txt` atomically.
pub fn signal_start(signal_dir: &Path, marker: &SessionMarker) -> Result<PathBuf, SignalError> {
    marker.validate()?;
    let name = marker_file_name(&marker.session_id);
    if !write_atomic(signal_dir, &name, &marker.to_body(), true)? {
        return Err(SignalError::AlreadyActive(marker.session_id.clone()));
    }
    Ok(signal_dir.join(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopOutcome {
    pub was_absent: bool,
}

/// Removes the marker. Stopping an absent session succeeds with `was_absent`.
pub fn signal_stop(signal_dir: &Path, session_id: &str) -> Result<StopOutcome, SignalError> {
    if !is_fs_safe_id(session_id) {
        return Err(SignalError::InvalidMarker(format!(
            "session id `{session_id}` is not filesystem-safe"
        )));
    }
    let path = marker_path(signal_dir, session_id);
    match fs::remove_file(&path) {
        Ok(()) => Ok(StopOutcome { was_absent: false }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(StopOutcome { was_absent: true }),
        Err(e) => Err(SignalError::Io { path, source: e }),
    }
}

/// Agent-side state of a session, published for the orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckState {
    Recording,
    Closed(LogStatus),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentAck {
    pub session_id: String,
    pub node_id: String,
    pub state: AckState,
    pub log_path: PathBuf,
}

pub fn ack_file_name(session_id: &str, node_id: &str) -> String {
    format!("ack_{session_id}_{node_id}.txt")
}

impl AgentAck {
    pub fn to_body(&self) -> String {
        let state = match self.state {
            AckState::Recording => "recording".to_string(),
            AckState::Closed(st) => format!("closed\nstatus={st}"),
        };
        format!(
            "session={}\nnode={}\nstate={state}\nlog={}\n",
            self.session_id,
            self.node_id,
            self.log_path.display()
        )
    }

    pub fn from_body(text: &str) -> Result<Self, SignalError> {
        let fields: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.trim().split_once('='))
            .collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| SignalError::InvalidMarker(format!("ack lacks `{k}`")))
        };
        let state = match get("state")? {
            "recording" => AckState::Recording,
            "closed" => AckState::Closed(get("status")?.parse().map_err(SignalError::InvalidMarker)?),
            other => return Err(SignalError::InvalidMarker(format!("unknown ack state `{other}`"))),
        };
        Ok(AgentAck {
            session_id: get("session")?.to_string(),
            node_id: get("node")?.to_string(),
            state,
            log_path: PathBuf::from(get("log")?),
        })
    }
}

pub fn write_ack(signal_dir: &Path, ack: &AgentAck) -> Result<(), SignalError> {
    write_atomic(
        signal_dir,
        &ack_file_name(&ack.session_id, &ack.node_id),
        &ack.to_body(),
        false,
    )
    .map(|_| ())
}

pub fn read_ack(signal_dir: &Path, session_id: &str, node_id: &str) -> Result<Option<AgentAck>, SignalError> {
    let path = signal_dir.join(ack_file_name(session_id, node_id));
    match fs::read_to_string(&path) {
        Ok(text) => AgentAck::from_body(&text).map(Some),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(SignalError::Io { path, source: e }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Started(SessionMarker),
    Stopped { session_id: String },
    Reaped { session_id: String },
    /// The watcher cannot continue.
    Fatal(String),
}

impl SessionEvent {
    pub fn session_id(&self) -> Option<&str> {
        match self {
            SessionEvent::Started(m) => Some(&m.session_id),
            SessionEvent::Stopped { session_id } | SessionEvent::Reaped { session_id } => {
                Some(session_id)
            }
            SessionEvent::Fatal(_) => None,
        }
    }
}

#[derive(Debug)]
struct Tracked {
    marker: SessionMarker,
    reaped: bool,
}

/// Polls a signal directory and turns marker changes into session events.
#[derive(Debug)]
pub struct SignalWatcher {
    dir: PathBuf,
    stale_override: Option<Duration>,
    known: BTreeMap<String, Tracked>,
}

impl SignalWatcher {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SignalWatcher {
            dir: dir.into(),
            stale_override: None,
            known: BTreeMap::new(),
        }
    }

    /// Uses one reap timeout for every marker instead of the declared one.
    pub fn with_stale_timeout(mut self, timeout: Duration) -> Self {
        self.stale_override = Some(timeout);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn active_sessions(&self) -> impl Iterator<Item = &SessionMarker> {
        self.known.values().filter(|t| !t.reaped).map(|t| &t.marker)
    }

    fn current_markers(&self) -> Result<BTreeMap<String, SessionMarker>, WatchError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(WatchError::DirectoryVanished(self.dir.clone()))
            }
            Err(source) => {
                return Err(WatchError::Io {
                    path: self.dir.clone(),
                    source,
                })
            }
        };
        let mut found = BTreeMap::new();
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(id) = session_from_file_name(name) else { continue };
            // removed between listing and reading: treat as absent
            let Ok(text) = fs::read_to_string(entry.path()) else { continue };
            match SessionMarker::from_body(&text) {
                Ok(m) if m.session_id == id => {
                    found.insert(id.to_string(), m);
                }
                Ok(_) => log::warn!("marker {name} names a different session; ignored"),
                Err(e) => log::warn!("ignoring marker {name}: {e}"),
            }
        }
        Ok(found)
    }

    /// One scan of the directory at wall time `now_wall_ns`.
    pub fn poll(&mut self, now_wall_ns: i64) -> Result<Vec<SessionEvent>, WatchError> {
        let current = self.current_markers()?;
        let mut events = Vec::new();

        let gone: Vec<String> = self
            .known
            .keys()
            .filter(|id| !current.contains_key(*id))
            .cloned()
            .collect();
        for id in gone {
            let tracked = self.known.remove(&id).expect("listed above");
            if !tracked.reaped {
                events.push(SessionEvent::Stopped { session_id: id });
            }
        }

        for (id, marker) in current {
            let replaced = self
                .known
                .get(&id)
                .is_some_and(|t| t.marker.created_wall_ns != marker.created_wall_ns);
            if replaced {
                let old = self.known.remove(&id).expect("checked above");
                if !old.reaped {
                    events.push(SessionEvent::Stopped {
                        session_id: id.clone(),
                    });
                }
            }
            if !self.known.contains_key(&id) {
                events.push(SessionEvent::Started(marker.clone()));
                self.known.insert(
                    id.clone(),
                    Tracked {
                        marker,
                        reaped: false,
                    },
                );
            }
            let tracked = self.known.get_mut(&id).expect("inserted above");
            let timeout = self.stale_override.unwrap_or_else(|| tracked.marker.stale_timeout());
            let age = now_wall_ns.saturating_sub(tracked.marker.created_wall_ns);
            if !tracked.reaped && age > timeout.as_nanos().min(i64::MAX as u128) as i64 {
                tracked.reaped = true;
                events.push(SessionEvent::Reaped { session_id: id });
            }
        }
        Ok(events)
    }

    /// Blocking stream of events, polling every `tick`. Ends after a fatal event.
    pub fn events<C: Clock>(self, clock: C, tick: Duration) -> WatchStream<C> {
        WatchStream {
            watcher: self,
            clock,
            tick_ns: tick.as_nanos() as i64,
            pending: Vec::new(),
            next_tick: None,
            done: false,
        }
    }
}

pub struct WatchStream<C: Clock> {
    watcher: SignalWatcher,
    clock: C,
    tick_ns: i64,
    pending: Vec<SessionEvent>,
    next_tick: Option<i64>,
    done: bool,
}

impl<C: Clock> Iterator for WatchStream<C> {
    type Item = SessionEvent;

    fn next(&mut self) -> Option<SessionEvent> {
        loop {
            if !self.pending.is_empty() {
                return Some(self.pending.remove(0));
            }
            if self.done {
                return None;
            }
            if let Some(t) = self.next_tick {
                self.clock.sleep_until_mono(t);
            }
            let now = self.clock.mono_ns();
            self.next_tick = Some(now + self.tick_ns);
            match self.watcher.poll(self.clock.wall_ns()) {
                Ok(events) => self.pending = events,
                Err(e) => {
                    self.done = true;
                    self.pending = vec![SessionEvent::Fatal(e.to_string())];
                }
            }
        }
    }
}

/// Convenience wrapper over [`SignalWatcher::events`].
pub fn watch_signals<C: Clock>(signal_dir: &Path, tick: Duration, clock: C) -> WatchStream<C> {
    SignalWatcher::new(signal_dir).events(clock, tick)
}
