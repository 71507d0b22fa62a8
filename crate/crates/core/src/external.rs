//! Driving an out-of-process policy over line-delimited JSON on
//! stdin/stdout.
//!
//! One request line per simulation step carries every agent's observation;
//! the process must answer with one line holding one five-logit vector per
//! agent, within the configured deadline. Channels are serialized row-major;
//! `+inf` cost cells are encoded as the string `"inf"`.
//!
//! Request shape:
//! `{"step": t, "observations": [{"obstacle": [...], "agents": [...],
//! "cost": [...], "window": w, "action_order": ["Wait", ...]}, ...]}`
//!
//! Reply shape: `{"logits": [[w, u, d, l, r], ...]}`.

use crate::grid::Action;
use crate::observation::{LogitVector, Observation};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Why an external-policy exchange failed. These are infrastructure
/// failures, distinct from MAPF failures: an episode hitting one of these
/// is reported as broken, not as unsolved.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("failed to launch external policy {command:?}: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("external policy protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("external policy exceeded the {0} ms reply deadline")]
    PolicyTimeout(u64),
    #[error("external policy process exited")]
    ProcessExited,
}

/// A running external policy process.
pub struct ExternalPolicy {
    child: Child,
    stdin: ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
    deadline: Duration,
}

impl ExternalPolicy {
    /// Launches `command` (argv form) with piped stdin/stdout. A reader
    /// thread forwards stdout lines so replies can be awaited with a
    /// deadline.
    pub fn spawn(command: &[String], deadline: Duration) -> Result<Self, PolicyError> {
        let (program, args) = command.split_first().ok_or_else(|| PolicyError::Spawn {
            command: String::new(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| PolicyError::Spawn { command: program.clone(), source })?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break, // EOF: drop the sender, receiver sees Disconnected
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(ExternalPolicy { child, stdin, lines, deadline })
    }

    /// One request/reply round trip for a full simulation step.
    pub fn query(
        &mut self,
        step: usize,
        observations: &[Observation],
    ) -> Result<Vec<LogitVector>, PolicyError> {
        let mut line = encode_request(step, observations);
        line.push('\n');
        self.stdin.write_all(line.as_bytes()).map_err(|_| PolicyError::ProcessExited)?;
        self.stdin.flush().map_err(|_| PolicyError::ProcessExited)?;

        let deadline_ms = self.deadline.as_millis() as u64;
        let deadline = Instant::now() + self.deadline;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(PolicyError::PolicyTimeout(deadline_ms));
            }
            match self.lines.recv_timeout(remaining) {
                Ok(Ok(raw)) => {
                    let trimmed = raw.trim();
                    if trimmed.is_empty() {
                        continue;
                    }
                    return decode_reply(trimmed, observations.len());
                }
                Ok(Err(e)) => {
                    return Err(PolicyError::ProtocolViolation(format!("stdout read error: {e}")))
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    return Err(PolicyError::PolicyTimeout(deadline_ms))
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(PolicyError::ProcessExited),
            }
        }
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Serialize)]
struct WireRequest {
    step: usize,
    observations: Vec<WireObservation>,
}

#[derive(Serialize)]
struct WireObservation {
    obstacle: Vec<bool>,
    agents: Vec<bool>,
    cost: Vec<serde_json::Value>,
    window: usize,
    action_order: [&'static str; 5],
}

#[derive(Deserialize)]
struct WireReply {
    logits: Vec<[f64; 5]>,
}

/// Serializes one step's observations as a single request line (no
/// trailing newline).
pub(crate) fn encode_request(step: usize, observations: &[Observation]) -> String {
    let action_order = [
        Action::Wait.name(),
        Action::Up.name(),
        Action::Down.name(),
        Action::Left.name(),
        Action::Right.name(),
    ];
    let observations = observations
        .iter()
        .map(|obs| WireObservation {
            obstacle: obs.obstacle.cells().to_vec(),
            agents: obs.agents.cells().to_vec(),
            cost: obs
                .cost
                .cells()
                .iter()
                .map(|&c| {
                    if c.is_finite() {
                        serde_json::Value::from(c)
                    } else {
                        serde_json::Value::from("inf")
                    }
                })
                .collect(),
            window: obs.cost.side(),
            action_order,
        })
        .collect();
    serde_json::to_string(&WireRequest { step, observations }).expect("request serializes")
}

pub(crate) fn decode_reply(line: &str, expected: usize) -> Result<Vec<LogitVector>, PolicyError> {
    let reply: WireReply = serde_json::from_str(line)
        .map_err(|e| PolicyError::ProtocolViolation(e.to_string()))?;
    if reply.logits.len() != expected {
        return Err(PolicyError::ProtocolViolation(format!(
            "expected {expected} logit vectors, got {}",
            reply.logits.len()
        )));
    }
    Ok(reply.logits.into_iter().map(LogitVector).collect())
}
