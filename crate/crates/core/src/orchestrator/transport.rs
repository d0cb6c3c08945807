// SPDX-License-Identifier: Apache-2.0

//! Reaching an agent's filesystem through its command template.
//!
//! Every operation is a short POSIX shell script. The template decides
//! where it runs: `{cmd}` locally, `kubectl exec <pod> -- {cmd}` in a pod,
//! `ssh <host> {cmd}` on a remote node.

use std::path::Path;
use std::process::{Command, Output};

use super::{AgentEndpoint, OrchestratorError};
use crate::signal::{ack_file_name, marker_file_name, AgentAck, SessionMarker};

/// Exit status of the start script when a different marker already exists.
const EXIT_ACTIVE: i32 = 17;

/// Single-quotes `s` for a POSIX shell.
pub fn sh_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn path_str(p: &Path) -> String {
    sh_quote(&p.to_string_lossy())
}

impl AgentEndpoint {
    /// Host-side command that runs `script` wherever the template points.
    pub fn command(&self, script: &str) -> Command {
        let inner = format!("sh -c {}", sh_quote(script));
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(self.exec_template.replacen("{cmd}", &inner, 1));
        cmd
    }

    fn exec(&self, script: &str) -> Result<Output, OrchestratorError> {
        self.command(script)
            .output()
            .map_err(|e| OrchestratorError::Transport {
                node: self.node_id.clone(),
                detail: e.to_string(),
            })
    }

    fn exec_ok(&self, script: &str) -> Result<Output, OrchestratorError> {
        let out = self.exec(script)?;
        if out.status.success() {
            Ok(out)
        } else {
            Err(OrchestratorError::Transport {
                node: self.node_id.clone(),
                detail: format!(
                    "{} ({})",
                    String::from_utf8_lossy(&out.stderr).trim(),
                    out.status
                ),
            })
        }
    }

    /// Deletes an ack left over from an earlier run with the same session id.
    pub fn clear_ack(&self, session_id: &str) -> Result<(), OrchestratorError> {
        let ack = self.signal_dir.join(ack_file_name(session_id, &self.node_id));
        self.exec_ok(&format!("rm -f {}", path_str(&ack))).map(|_| ())
    }

    /// Writes the start marker. An identical marker already in place (shared
    /// signal directory) counts as success.
    pub fn start(&self, marker: &SessionMarker) -> Result<(), OrchestratorError> {
        let dir = path_str(&self.signal_dir);
        let name = marker_file_name(&marker.session_id);
        let script = format!(
            "mkdir -p {dir} && t={dir}/.{name}.$$.tmp && printf '%s' {body} > \"$t\" && \
             if ln \"$t\" {dir}/{name} 2>/dev/null || cmp -s \"$t\" {dir}/{name}; \
             then rm -f \"$t\"; else rm -f \"$t\"; exit {EXIT_ACTIVE}; fi",
            body = sh_quote(&marker.to_body()),
        );
        let out = self.exec(&script)?;
        match out.status.code() {
            Some(0) => Ok(()),
            Some(EXIT_ACTIVE) => Err(OrchestratorError::AgentStart {
                node: self.node_id.clone(),
                detail: format!("session {} is already active", marker.session_id),
            }),
            _ => Err(OrchestratorError::AgentStart {
                node: self.node_id.clone(),
                detail: format!(
                    "{} ({})",
                    String::from_utf8_lossy(&out.stderr).trim(),
                    out.status
                ),
            }),
        }
    }

    /// Removes the start marker; absent markers are fine.
    pub fn stop(&self, session_id: &str) -> Result<(), OrchestratorError> {
        let marker = self.signal_dir.join(marker_file_name(session_id));
        self.exec_ok(&format!("rm -f {}", path_str(&marker))).map(|_| ())
    }

    pub fn read_ack(&self, session_id: &str) -> Result<Option<AgentAck>, OrchestratorError> {
        let ack = self.signal_dir.join(ack_file_name(session_id, &self.node_id));
        let out = self.exec_ok(&format!("cat {} 2>/dev/null || true", path_str(&ack)))?;
        let text = String::from_utf8_lossy(&out.stdout);
        if text.trim().is_empty() {
            return Ok(None);
        }
        // a half-written ack is impossible (atomic rename); a bad one is an error
        AgentAck::from_body(&text)
            .map(Some)
            .map_err(|e| OrchestratorError::Transport {
                node: self.node_id.clone(),
                detail: e.to_string(),
            })
    }

    pub fn fetch(&self, path: &Path) -> Result<Vec<u8>, OrchestratorError> {
        Ok(self.exec_ok(&format!("cat {}", path_str(path)))?.stdout)
    }
}
