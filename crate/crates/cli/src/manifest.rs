//! Run manifest: the TOML file behind `fera run`.
//!
//! The `[federation]` table mirrors the protocol config field for field.
//! Dataset paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use fera_core::backend::{HttpBackend, HttpBackendConfig, MockBackend};
use fera_core::datamodel::{dirichlet_partition, load_dataset, Demonstration};
use fera_core::protocol::{scenario, Backends, FederationInputs};
use fera_core::selection::{CachingEmbedder, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};
use fera_core::{Backend, Embedder, FederationConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockScenario {
    /// Self-contained scripted federation; ignores `[data]`.
    #[default]
    Ladder,
    /// Per-category accuracy knobs over the `[data]` files.
    Knobs,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub federation: FederationConfig,
    pub data: DataSection,
    pub backend: BackendSection,
    pub embedder: EmbedderSection,
    pub mock: MockSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Server queries; their labels serve as reference answers.
    pub queries: Option<PathBuf>,
    /// One private dataset per client.
    pub clients: Vec<PathBuf>,
    /// Alternative to `clients`: one labeled pool split by Dirichlet draw.
    pub pool: Option<PathBuf>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub client: HttpBackendConfig,
    /// Server model; the client endpoint is reused when absent.
    pub server: Option<HttpBackendConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub http: HttpEmbedderConfig,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection {
            kind: EmbedderKind::Hashing,
            dim: 64,
            http: HttpEmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub scenario: MockScenario,
    pub topics: usize,
    pub default_accuracy: f64,
    pub familiar_accuracy: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        MockSection {
            scenario: MockScenario::Ladder,
            topics: 5,
            default_accuracy: 0.4,
            familiar_accuracy: 0.9,
        }
    }
}

/// A manifest with everything loaded and ready to run.
pub struct Prepared {
    pub config: FederationConfig,
    pub inputs: FederationInputs,
    pub backends: Backends,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut manifest: RunManifest = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.data.resolve(base);
        Ok(manifest)
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let mut config = self.federation.clone();
        let embedder = self.embedder.build()?;
        if self.backend.kind == BackendKind::Mock && self.mock.scenario == MockScenario::Ladder {
            let s = scenario::ladder(self.mock.topics, config.num_clients, config.num_rounds);
            // the ladder shows every candidate; other settings come from the manifest
            config.selection.count = s.config.selection.count;
            config.validate()?;
            let backends = Backends::shared(Arc::new(MockBackend::new(s.script)), embedder);
            return Ok(Prepared {
                config,
                inputs: s.inputs,
                backends,
            });
        }

        config.validate()?;
        let (inputs, categories) = self.data.load(&config)?;
        let backends = match self.backend.kind {
            BackendKind::Mock => {
                let script = scenario::knobs_script(
                    &inputs,
                    config.task,
                    &categories,
                    self.mock.default_accuracy,
                    self.mock.familiar_accuracy,
                    config.seed,
                );
                Backends::shared(Arc::new(MockBackend::new(script)), embedder)
            }
            BackendKind::Http => {
                let client: Arc<dyn Backend> = Arc::new(HttpBackend::from_env(self.backend.client.clone())?);
                let server: Arc<dyn Backend> = match &self.backend.server {
                    Some(cfg) => Arc::new(HttpBackend::from_env(cfg.clone())?),
                    None => Arc::clone(&client),
                };
                Backends {
                    clients: vec![client],
                    server: Some(server),
                    embedder,
                }
            }
        };
        Ok(Prepared {
            config,
            inputs,
            backends,
        })
    }
}

impl DataSection {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        self.queries = self.queries.as_ref().map(join);
        self.pool = self.pool.as_ref().map(join);
        self.clients = self.clients.iter().map(join).collect();
    }

    /// Inputs plus the category of each server query.
    fn load(&self, config: &FederationConfig) -> Result<(FederationInputs, Vec<Option<String>>)> {
        if self.pool.is_some() && !self.clients.is_empty() {
            bail!("[data] takes either `clients` or `pool`, not both");
        }
        let queries_path = self.queries.as_ref().context("[data] queries is required")?;
        let queries = load(queries_path, config)?;
        if queries.is_empty() {
            bail!("{}: no queries", queries_path.display());
        }
        let datasets = match (&self.pool, self.clients.is_empty()) {
            (Some(pool), _) => {
                let items = load(pool, config)?;
                let alpha = self.alpha.unwrap_or(1.0);
                dirichlet_partition(&items, alpha, config.num_clients, config.seed)
                    .with_context(|| format!("partitioning {}", pool.display()))?
                    .into_iter()
                    .map(|c| c.base().to_vec())
                    .collect()
            }
            (None, false) => self
                .clients
                .iter()
                .map(|p| load(p, config))
                .collect::<Result<Vec<_>>>()?,
            (None, true) if config.mode == fera_core::FederationMode::FeraFree => {
                vec![Vec::new(); config.num_clients]
            }
            (None, true) => bail!("[data] needs `clients` or `pool`"),
        };
        if datasets.len() != config.num_clients {
            bail!(
                "{} client datasets for num_clients = {}",
                datasets.len(),
                config.num_clients
            );
        }
        let categories = queries.iter().map(|q| q.category.clone()).collect();
        let inputs = FederationInputs {
            queries: queries.iter().map(|q| q.query.clone()).collect(),
            datasets,
            references: Some(queries.into_iter().map(|q| q.answer).collect()),
        };
        Ok((inputs, categories))
    }
}

fn load(path: &Path, config: &FederationConfig) -> Result<Vec<Demonstration>> {
    load_dataset(path, config.task).context("loading dataset")
}

impl EmbedderSection {
    fn build(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self.kind {
            EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(self.dim)?),
            EmbedderKind::Http => Arc::new(CachingEmbedder::new(HttpEmbedder::new(
                self.http.clone(),
                std::env::var(fera_core::backend::http::API_KEY_ENV).ok(),
            )?)),
        })
    }
}
