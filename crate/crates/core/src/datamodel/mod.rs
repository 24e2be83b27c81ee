//! Shared domain types, dataset ingestion, answer normalization, non-IID
//! partitioning and round-snapshot persistence.

mod answer;
mod dataset;
mod partition;
mod snapshot;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use answer::{extract_steps, format_answer_sentence, normalize_answer, UNPARSED};
pub use dataset::{load_dataset, load_dataset_str, write_dataset};
pub use partition::dirichlet_partition;
pub use snapshot::{load_round, persist_round, SCHEMA_VERSION};

/// How final answers are expressed and compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Option letters, `The answer is (X).`
    #[default]
    MultipleChoice,
    /// A single canonical number, `The answer is X.`
    Numeric,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiple_choice" | "mc" => Ok(TaskKind::MultipleChoice),
            "numeric" => Ok(TaskKind::Numeric),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::Numeric => "numeric",
        })
    }
}

/// A (query, reasoning steps, answer) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: String,
    #[serde(default)]
    pub steps: Vec<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Demonstration {
    pub fn new(query: impl Into<String>, steps: Vec<String>, answer: impl Into<String>) -> Result<Self> {
        let demo = Demonstration {
            query: query.into(),
            steps,
            answer: answer.into(),
            category: None,
        };
        demo.validate()?;
        Ok(demo)
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::invalid("demonstration query is empty"));
        }
        if self.answer.trim().is_empty() {
            return Err(Error::invalid("demonstration answer is empty"));
        }
        Ok(())
    }

    /// The same demonstration with its reasoning steps dropped.
    pub fn answer_only(&self) -> Self {
        Demonstration {
            steps: Vec::new(),
            ..self.clone()
        }
    }
}

/// One client's private data: the immutable base set plus the pairs
/// regenerated each round from server demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    client_id: usize,
    base: Arc<Vec<Demonstration>>,
    enriched: Vec<Demonstration>,
}

impl ClientDataset {
    pub fn new(client_id: usize, base: Vec<Demonstration>) -> Self {
        ClientDataset {
            client_id,
            base: Arc::new(base),
            enriched: Vec::new(),
        }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn base(&self) -> &[Demonstration] {
        &self.base
    }

    pub fn enriched(&self) -> &[Demonstration] {
        &self.enriched
    }

    /// Replaces the previous round's generated pairs. There must be exactly
    /// one entry per base demonstration, carrying the same query.
    pub fn with_enriched(&self, enriched: Vec<Demonstration>) -> Result<Self> {
        if enriched.len() != self.base.len() {
            return Err(Error::invalid(format!(
                "client {}: {} enriched pairs for {} base demonstrations",
                self.client_id,
                enriched.len(),
                self.base.len()
            )));
        }
        if let Some((b, e)) = self.base.iter().zip(&enriched).find(|(b, e)| b.query != e.query) {
            return Err(Error::invalid(format!(
                "client {}: enriched query `{}` does not match base query `{}`",
                self.client_id, e.query, b.query
            )));
        }
        Ok(ClientDataset {
            client_id: self.client_id,
            base: Arc::clone(&self.base),
            enriched,
        })
    }

    /// `D_k = base ∪ enriched`, base first.
    pub fn local_pool(&self) -> Vec<Demonstration> {
        self.base.iter().chain(&self.enriched).cloned().collect()
    }
}

/// A server query with the current round's synthesized reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub query: String,
    pub steps: Vec<String>,
    pub answer: String,
    pub round: usize,
}

impl QueryRecord {
    /// The record viewed as an in-context demonstration.
    pub fn as_demonstration(&self) -> Demonstration {
        Demonstration {
            query: self.query.clone(),
            steps: self.steps.clone(),
            answer: self.answer.clone(),
            category: None,
        }
    }

    /// Successor record for the next round.
    pub fn advance(&self, steps: Vec<String>, answer: String) -> QueryRecord {
        QueryRecord {
            query_id: self.query_id,
            query: self.query.clone(),
            steps,
            answer,
            round: self.round + 1,
        }
    }
}

/// One client's labeled answer for one server query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSubmission {
    pub client_id: usize,
    pub query_id: u64,
    pub steps: Vec<String>,
    pub answer: String,
    /// Mean token entropy in nats.
    pub uncertainty: f64,
}

/// Everything recorded about one completed round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    pub query_set: Vec<QueryRecord>,
    pub submissions: Vec<ClientSubmission>,
    #[serde(with = "weight_entries")]
    pub weights: BTreeMap<(u64, usize), f64>,
    pub metrics: BTreeMap<String, f64>,
}

impl RoundSnapshot {
    /// Per-query weight sums; each should be 1.
    pub fn weight_sums(&self) -> BTreeMap<u64, f64> {
        let mut sums = BTreeMap::new();
        for (&(query_id, _), &w) in &self.weights {
            *sums.entry(query_id).or_insert(0.0) += w;
        }
        sums
    }
}

/// Weights keyed by (query_id, client_id) are stored as a flat list so the
/// snapshot stays plain JSON.
mod weight_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        query_id: u64,
        client_id: usize,
        weight: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(u64, usize), f64>, serializer: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(&(query_id, client_id), &weight)| Entry {
                query_id,
                client_id,
                weight,
            })
            .collect();
        entries.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<BTreeMap<(u64, usize), f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(deserializer)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.query_id, e.client_id), e.weight))
            .collect())
    }
}
