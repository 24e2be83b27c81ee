use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FederationConfig, FederationMode, FederationState};
use crate::aggregation::AggregationMode;
use crate::datamodel::{normalize_answer, QueryRecord, TaskKind};
use crate::error::{Error, Result};

/// Fraction of records whose answer matches its reference.
pub fn accuracy(records: &[QueryRecord], references: &[String], task: TaskKind) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            references
                .get(r.query_id as usize)
                .is_some_and(|want| r.answer == normalize_answer(want, task))
        })
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub accuracy: Option<f64>,
    pub mean_uncertainty: BTreeMap<usize, f64>,
    pub degraded_queries: usize,
    pub server_calls: usize,
    pub unparsed_submissions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationReport {
    pub mode: FederationMode,
    pub aggregation: AggregationMode,
    pub num_rounds: usize,
    pub num_clients: usize,
    pub num_queries: usize,
    /// Accuracy of the zero-shot query set.
    pub initial_accuracy: Option<f64>,
    pub rounds: Vec<RoundReport>,
    pub notes: Vec<String>,
}

impl FederationReport {
    pub fn from_state(state: &FederationState, config: &FederationConfig) -> Self {
        let metric = |m: &BTreeMap<String, f64>, key: &str| m.get(key).copied().unwrap_or(0.0) as usize;
        let rounds = state
            .history
            .iter()
            .map(|snap| RoundReport {
                round: snap.round,
                accuracy: snap.metrics.get("accuracy").copied(),
                mean_uncertainty: snap
                    .metrics
                    .iter()
                    .filter_map(|(k, v)| Some((k.strip_prefix("mean_uncertainty.client_")?.parse().ok()?, *v)))
                    .collect(),
                degraded_queries: metric(&snap.metrics, "degraded_queries"),
                server_calls: metric(&snap.metrics, "server_calls"),
                unparsed_submissions: metric(&snap.metrics, "unparsed_submissions"),
            })
            .collect();
        let mut notes = Vec::new();
        if config.mode == FederationMode::FeraQ {
            notes.push("answer-only run: reasoning steps are empty throughout".to_string());
            if config.aggregation != AggregationMode::UaWa {
                notes.push(format!(
                    "aggregation `{}` replaced by `ua_wa` in answer-only mode",
                    config.aggregation
                ));
            }
        }
        if let Some(p) = config.participation {
            notes.push(format!("{p} of {} clients sampled per round", config.num_clients));
        }
        FederationReport {
            mode: config.mode,
            aggregation: config.effective_aggregation(),
            num_rounds: config.num_rounds,
            num_clients: config.num_clients,
            num_queries: state.server_queryset.len(),
            initial_accuracy: state
                .references
                .as_ref()
                .map(|r| accuracy(&state.initial_queryset, r, config.task)),
            rounds,
            notes,
        }
    }

    /// Accuracy after initialization followed by each round, when
    /// references were given.
    pub fn accuracy_curve(&self) -> Option<Vec<f64>> {
        let mut curve = vec![self.initial_accuracy?];
        for r in &self.rounds {
            curve.push(r.accuracy?);
        }
        Some(curve)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Snapshot {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Snapshot {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Aligned per-round table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "mode {}  aggregation {}  clients {}  queries {}",
            self.mode, self.aggregation, self.num_clients, self.num_queries
        )
        .unwrap();
        for note in &self.notes {
            writeln!(out, "note: {note}").unwrap();
        }
        let clients: Vec<usize> = (0..self.num_clients).collect();
        let mut header = format!("{:>5} {:>8} {:>8} {:>6}", "round", "accuracy", "degraded", "calls");
        for c in &clients {
            write!(header, " {:>9}", format!("u_client{c}")).unwrap();
        }
        writeln!(out, "{header}").unwrap();
        let fmt_acc = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{a:.4}"));
        writeln!(
            out,
            "{:>5} {:>8} {:>8} {:>6}",
            0,
            fmt_acc(self.initial_accuracy),
            "-",
            "-"
        )
        .unwrap();
        for r in &self.rounds {
            let mut line = format!(
                "{:>5} {:>8} {:>8} {:>6}",
                r.round,
                fmt_acc(r.accuracy),
                r.degraded_queries,
                r.server_calls
            );
            for c in &clients {
                let u = r.mean_uncertainty.get(c).map_or("-".to_string(), |u| format!("{u:.4}"));
                write!(line, " {u:>9}").unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
        out
    }
}
