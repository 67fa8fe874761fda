use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::tree::{DgtTree, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Shared body and root blocks trained on a whole dataset.
    Pretrained,
    NewChild,
    Assigned,
    /// Video taken back from a child after its re-check failed.
    Removed,
    Updated,
    /// Child dropped by the average-score stopping rule.
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: usize,
    pub video: Option<String>,
    pub node: NodeId,
    pub path_name: String,
    pub action: Action,
    pub pre_score: Option<f64>,
    pub post_score: Option<f64>,
    pub full_params: usize,
    pub inference_params: usize,
    pub num_nodes: usize,
    /// Milliseconds since the log was created; the only non-deterministic field.
    pub elapsed_ms: u64,
}

/// Append-only event record of a training run.
#[derive(Debug, Clone)]
pub struct RunLog {
    events: Vec<LogEvent>,
    start: Instant,
}

impl Default for RunLog {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            start: Instant::now(),
        }
    }
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        tree: &DgtTree,
        node: NodeId,
        video: Option<&str>,
        action: Action,
        pre_score: Option<f64>,
        post_score: Option<f64>,
    ) -> Result<()> {
        let path_name = if tree.node(node).is_ok() { tree.path_name(node)? } else { String::new() };
        let (full, inference) = tree.param_count();
        self.events.push(LogEvent {
            seq: self.events.len(),
            video: video.map(str::to_string),
            node,
            path_name,
            action,
            pre_score,
            post_score,
            full_params: full,
            inference_params: inference,
            num_nodes: tree.len(),
            elapsed_ms: self.start.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn extend(&mut self, other: RunLog) {
        for mut e in other.events {
            e.seq = self.events.len();
            self.events.push(e);
        }
    }

    pub fn count(&self, action: Action) -> usize {
        self.events.iter().filter(|e| e.action == action).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            let _ = writeln!(s, "{}", serde_json::to_string(e).expect("plain data serializes"));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| DgtError::validation(format!("bad log line: {e}"))))
            .collect::<Result<Vec<LogEvent>>>()?;
        if events.iter().enumerate().any(|(i, e)| e.seq != i) {
            return Err(DgtError::validation("log sequence numbers are not contiguous"));
        }
        Ok(Self {
            events,
            start: Instant::now(),
        })
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}
