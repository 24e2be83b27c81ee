use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMode;
use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::selection::SelectionConfig;

/// Protocol variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FederationMode {
    /// Full loop: refinement, labeling with demonstrations, aggregation.
    #[default]
    Fera,
    /// Answers only: reasoning steps are stripped everywhere and the server
    /// uses weighted voting.
    FeraQ,
    /// Clients hold no private data and learn only from the server set.
    FeraFree,
    /// Clients keep their private data fixed; only the server set evolves.
    FeraGt,
}

impl FederationMode {
    pub fn answer_only(self) -> bool {
        self == FederationMode::FeraQ
    }

    pub fn refines(self) -> bool {
        matches!(self, FederationMode::Fera | FederationMode::FeraQ)
    }
}

impl FromStr for FederationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fera" => Ok(FederationMode::Fera),
            "fera_q" => Ok(FederationMode::FeraQ),
            "fera_free" => Ok(FederationMode::FeraFree),
            "fera_gt" => Ok(FederationMode::FeraGt),
            other => Err(Error::invalid(format!("unknown federation mode `{other}`"))),
        }
    }
}

impl fmt::Display for FederationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FederationMode::Fera => "fera",
            FederationMode::FeraQ => "fera_q",
            FederationMode::FeraFree => "fera_free",
            FederationMode::FeraGt => "fera_gt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_rounds: usize,
    pub num_clients: usize,
    pub tau: f64,
    pub selection: SelectionConfig,
    pub mode: FederationMode,
    pub aggregation: AggregationMode,
    pub token_limit: usize,
    pub sentences_limit: usize,
    pub seed: u64,
    /// Clients sampled per round; all of them when unset.
    pub participation: Option<usize>,
    pub task: TaskKind,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_rounds: 3,
            num_clients: 3,
            tau: 1.0,
            selection: SelectionConfig::default(),
            mode: FederationMode::Fera,
            aggregation: AggregationMode::UaSca,
            token_limit: 256,
            sentences_limit: 5,
            seed: 0,
            participation: None,
            task: TaskKind::MultipleChoice,
        }
    }
}

impl FederationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rounds == 0 {
            return Err(Error::Config("num_rounds must be at least 1".into()));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.token_limit == 0 {
            return Err(Error::Config("token_limit must be at least 1".into()));
        }
        if self.sentences_limit == 0 {
            return Err(Error::Config("sentences_limit must be at least 1".into()));
        }
        if let Some(p) = self.participation {
            if p == 0 || p > self.num_clients {
                return Err(Error::Config(format!(
                    "participation must be between 1 and {}, got {p}",
                    self.num_clients
                )));
            }
        }
        self.selection.validate()
    }

    /// The aggregation actually used: answer-only runs always vote.
    pub fn effective_aggregation(&self) -> AggregationMode {
        if self.mode == FederationMode::FeraQ {
            AggregationMode::UaWa
        } else {
            self.aggregation
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        FederationConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_rounds_rejected() {
        let c = FederationConfig {
            num_rounds: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = FederationConfig {
            participation: Some(4),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FederationConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn answer_only_forces_voting() {
        let c = FederationConfig {
            mode: FederationMode::FeraQ,
            ..Default::default()
        };
        assert_eq!(c.effective_aggregation(), AggregationMode::UaWa);
        assert_eq!(
            FederationConfig::default().effective_aggregation(),
            AggregationMode::UaSca
        );
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
num_rounds = 4
num_clients = 2
mode = "fera_free"
aggregation = "uniform_vote"
task = "numeric"

[selection]
count = 3
lambda = 0.25
method = "knn"
"#;
        let c = FederationConfig::from_toml(text).unwrap();
        assert_eq!(c.num_rounds, 4);
        assert_eq!(c.mode, FederationMode::FeraFree);
        assert_eq!(c.aggregation, AggregationMode::UniformVote);
        assert_eq!(c.selection.count, 3);
        assert_eq!(FederationConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(FederationConfig::from_toml("rounds = 3").is_err());
    }
}
