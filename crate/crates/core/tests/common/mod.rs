// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_wattflow");

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn wattflow(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("wattflow binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Agent process killed on drop.
pub struct AgentProc {
    child: Child,
    pub node_id: String,
    pub signal_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl Drop for AgentProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `wattflow agent` on a mock backend drawing `watts` on the package
/// domain and a fifth of that on dram.
pub fn spawn_mock_agent(root: &Path, node_id: &str, watts: f64, interval_ms: u64) -> AgentProc {
    let signal_dir = root.join(format!("sig-{node_id}"));
    let log_dir = root.join(format!("logs-{node_id}"));
    fs::create_dir_all(&signal_dir).unwrap();
    let cfg = serde_json::json!({
        "node_id": node_id,
        "interval_ms": interval_ms,
        "domains": [
            {"domain": "package", "bit_width": 32, "energy_unit_joules": 1e-6},
            {"domain": "dram", "bit_width": 32, "energy_unit_joules": 1e-6}
        ],
        "log_dir": log_dir,
        "signal_dir": signal_dir,
        "backend": {"kind": "mock", "profiles": [
            {"domain": "package", "segments": [[3600.0, watts]], "seed": 11},
            {"domain": "dram", "segments": [[3600.0, watts / 5.0]], "seed": 12}
        ]}
    });
    let cfg_path = root.join(format!("agent-{node_id}.json"));
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let child = Command::new(BIN)
        .args(["agent", "--config", p(&cfg_path)])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("agent spawns");
    AgentProc {
        child,
        node_id: node_id.into(),
        signal_dir,
        log_dir,
    }
}

/// Writes a `run` configuration addressing the agents through a local shell.
pub fn write_run_config(root: &Path, agents: &[&AgentProc]) -> PathBuf {
    let endpoints: Vec<_> = agents
        .iter()
        .map(|a| {
            serde_json::json!({
                "node_id": a.node_id,
                "exec_template": "{cmd}",
                "signal_dir": a.signal_dir,
            })
        })
        .collect();
    let cfg = serde_json::json!({
        "agents": endpoints,
        "poll_interval_s": 0.2,
        "ack_timeout_s": 10.0,
        "collect_timeout_s": 10.0,
    });
    let path = root.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn wait_for(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    cond()
}
