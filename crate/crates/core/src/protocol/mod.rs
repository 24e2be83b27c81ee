//! The federation round loop: distribute the server query set, let each
//! client refine its private pairs and answer every server query with an
//! uncertainty score, then aggregate per query into the next query set.
//!
//! Failures degrade per query and never abort a round.

mod config;
mod report;
pub mod scenario;
mod wire;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::{debug, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{aggregate, ua_wa, AggregationResult, ServerPromptContext};
use crate::backend::{
    format_examples, prediction_template, zero_shot_template, Backend, CallContext, CallKind, GenerationRequest,
    GenerationResponse, Role,
};
use crate::datamodel::{
    extract_steps, normalize_answer, persist_round, ClientDataset, ClientSubmission, Demonstration, QueryRecord,
    RoundSnapshot, TaskKind, UNPARSED,
};
use crate::error::{Error, Result};
use crate::selection::{select, Embedder};

pub use config::{FederationConfig, FederationMode};
pub use report::{accuracy, FederationReport, RoundReport};
pub use wire::WireMessage;

/// Uncertainty recorded for a failed or unscored call; large enough that
/// its trust weight vanishes next to any real score.
pub const FAILURE_UNCERTAINTY: f64 = 1e6;

/// Backends for one federation: per-client generators (or one shared), an
/// optional server generator and the embedder used for selection.
#[derive(Clone)]
pub struct Backends {
    pub clients: Vec<Arc<dyn Backend>>,
    pub server: Option<Arc<dyn Backend>>,
    pub embedder: Arc<dyn Embedder>,
}

impl Backends {
    /// One backend playing every client and the server.
    pub fn shared(backend: Arc<dyn Backend>, embedder: Arc<dyn Embedder>) -> Self {
        Backends {
            clients: vec![Arc::clone(&backend)],
            server: Some(backend),
            embedder,
        }
    }

    pub fn client(&self, client_id: usize) -> &dyn Backend {
        let i = if self.clients.len() == 1 { 0 } else { client_id };
        self.clients[i].as_ref()
    }

    fn check(&self, config: &FederationConfig) -> Result<()> {
        if self.clients.len() != 1 && self.clients.len() != config.num_clients {
            return Err(Error::Config(format!(
                "{} client backends for {} clients",
                self.clients.len(),
                config.num_clients
            )));
        }
        let mode = config.effective_aggregation();
        if mode.needs_server() && self.server.is_none() {
            return Err(Error::Config(format!("aggregation `{mode}` needs a server backend")));
        }
        Ok(())
    }
}

/// What a federation runs on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FederationInputs {
    /// Server query texts; ids are their positions.
    pub queries: Vec<String>,
    /// Private data per client.
    pub datasets: Vec<Vec<Demonstration>>,
    /// Reference answers, used only for metrics.
    pub references: Option<Vec<String>>,
}

impl FederationInputs {
    fn check(&self, config: &FederationConfig) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::Config("the server query set is empty".into()));
        }
        if self.datasets.len() != config.num_clients {
            return Err(Error::Config(format!(
                "{} client datasets for num_clients = {}",
                self.datasets.len(),
                config.num_clients
            )));
        }
        if let Some(r) = &self.references {
            if r.len() != self.queries.len() {
                return Err(Error::Config(format!(
                    "{} reference answers for {} queries",
                    r.len(),
                    self.queries.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    /// The next round to run, starting at 1.
    pub round: usize,
    pub server_queryset: Vec<QueryRecord>,
    pub initial_queryset: Vec<QueryRecord>,
    pub clients: Vec<ClientDataset>,
    pub history: Vec<RoundSnapshot>,
    pub references: Option<Vec<String>>,
}

fn limit_bindings<'a>(token_limit: &'a str, sentences: &'a str) -> Vec<(&'static str, &'a str)> {
    vec![("token_limit", token_limit), ("sentences_limit", sentences)]
}

fn limits(config: &FederationConfig) -> (String, String) {
    (config.token_limit.to_string(), config.sentences_limit.to_string())
}

/// Parses generated text into (steps, answer, uncertainty).
fn parse_reply(response: &GenerationResponse, task: TaskKind, answer_only: bool) -> (Vec<String>, String, Option<f64>) {
    let answer = normalize_answer(&response.text, task);
    let steps = if answer_only {
        Vec::new()
    } else {
        extract_steps(&response.text)
    };
    let uncertainty = match response.uncertainty() {
        Some(Ok(score)) => Some(score.value),
        Some(Err(e)) => {
            warn!("discarding malformed token distributions: {e}");
            None
        }
        None => None,
    };
    (steps, answer, uncertainty)
}

fn failed_submission(client_id: usize, query_id: u64) -> ClientSubmission {
    ClientSubmission {
        client_id,
        query_id,
        steps: Vec::new(),
        answer: UNPARSED.to_string(),
        uncertainty: FAILURE_UNCERTAINTY,
    }
}

fn scored_submission(
    client_id: usize,
    query_id: u64,
    outcome: Result<GenerationResponse>,
    config: &FederationConfig,
) -> ClientSubmission {
    match outcome {
        Ok(response) => {
            let (steps, answer, u) = parse_reply(&response, config.task, config.mode.answer_only());
            let uncertainty = u.unwrap_or_else(|| {
                warn!("client {client_id}, query {query_id}: no token scores returned");
                FAILURE_UNCERTAINTY
            });
            ClientSubmission {
                client_id,
                query_id,
                steps,
                answer,
                uncertainty,
            }
        }
        Err(e) => {
            warn!("client {client_id}, query {query_id}: {e}");
            failed_submission(client_id, query_id)
        }
    }
}

/// Zero-shot answers from every client, combined by weighted voting into
/// the first server query set.
pub fn initialize_queryset(
    queries: &[String],
    num_clients: usize,
    backends: &Backends,
    config: &FederationConfig,
) -> Result<Vec<QueryRecord>> {
    if queries.is_empty() {
        return Err(Error::invalid("no server queries"));
    }
    if num_clients == 0 {
        return Err(Error::invalid("no clients"));
    }
    let answer_only = config.mode.answer_only();
    let template = zero_shot_template(config.task, answer_only);
    let (tokens, sentences) = limits(config);
    queries
        .par_iter()
        .enumerate()
        .map(|(i, query)| {
            let query_id = i as u64;
            let mut bindings = limit_bindings(&tokens, &sentences);
            bindings.push(("query", query));
            let prompt = template.render(&bindings)?;
            let submissions: Vec<ClientSubmission> = (0..num_clients)
                .map(|client| {
                    let request = GenerationRequest::new(prompt.clone())
                        .with_max_tokens(config.token_limit)
                        .with_logprobs(GenerationRequest::DEFAULT_TOP_LOGPROBS)
                        .with_context(CallContext {
                            role: Role::Client(client),
                            kind: CallKind::ZeroShot,
                            task: config.task,
                            round: 0,
                            query_id: Some(query_id),
                            subject: None,
                            demonstrations: Vec::new(),
                            answer_only,
                        });
                    scored_submission(client, query_id, backends.client(client).generate(&request), config)
                })
                .collect();
            let result = ua_wa(&submissions, config.tau)?;
            let steps = if answer_only || result.answer == UNPARSED {
                Vec::new()
            } else {
                result.steps
            };
            Ok(QueryRecord {
                query_id,
                query: query.clone(),
                steps,
                answer: result.answer,
                round: 1,
            })
        })
        .collect()
}

/// Answer-only runs never show reasoning, private or shared.
fn shown_demonstrations(demos: Vec<Demonstration>, config: &FederationConfig) -> Vec<Demonstration> {
    if config.mode.answer_only() {
        demos.iter().map(Demonstration::answer_only).collect()
    } else {
        demos
    }
}

fn predict_prompt(demos: &[Demonstration], query: &str, config: &FederationConfig) -> Result<String> {
    let answer_only = config.mode.answer_only();
    let (tokens, sentences) = limits(config);
    let examples = format_examples(demos, config.task, !answer_only);
    let mut bindings = limit_bindings(&tokens, &sentences);
    bindings.push(("examples", &examples));
    bindings.push(("query", query));
    prediction_template(config.task, answer_only).render(&bindings)
}

/// Regenerates the client's pairs for its private queries using
/// demonstrations drawn from the server set. Items that fail keep their
/// previous pair (the private pair itself on the first round).
pub fn local_refinement(
    client: &ClientDataset,
    query_set: &[QueryRecord],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    config: &FederationConfig,
    round: usize,
) -> Result<ClientDataset> {
    if !config.mode.refines() || client.base().is_empty() {
        return Ok(client.clone());
    }
    let pool: Vec<Demonstration> = query_set.iter().map(QueryRecord::as_demonstration).collect();
    let previous = client.enriched();
    let enriched = client
        .base()
        .iter()
        .enumerate()
        .map(|(item, base)| {
            let fallback = previous.get(item).unwrap_or(base);
            let anchor = previous.get(item).unwrap_or(base);
            match refine_item(
                client.client_id(),
                item,
                base,
                anchor,
                &pool,
                backend,
                embedder,
                config,
                round,
            ) {
                Ok(Some(demo)) => demo,
                Ok(None) => {
                    debug!(
                        "client {} item {item}: unparsed refinement, keeping previous pair",
                        client.client_id()
                    );
                    fallback.clone()
                }
                Err(e) => {
                    warn!("client {} item {item}: {e}", client.client_id());
                    fallback.clone()
                }
            }
        })
        .collect();
    client.with_enriched(enriched)
}

#[allow(clippy::too_many_arguments)]
fn refine_item(
    client_id: usize,
    item: usize,
    base: &Demonstration,
    anchor: &Demonstration,
    pool: &[Demonstration],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    config: &FederationConfig,
    round: usize,
) -> Result<Option<Demonstration>> {
    let demos = shown_demonstrations(select(anchor, pool, &config.selection, embedder)?, config);
    let request = GenerationRequest::new(predict_prompt(&demos, &base.query, config)?)
        .with_max_tokens(config.token_limit)
        .with_context(CallContext {
            role: Role::Client(client_id),
            kind: CallKind::Refine { item },
            task: config.task,
            round,
            query_id: None,
            subject: Some(base.clone()),
            demonstrations: demos,
            answer_only: config.mode.answer_only(),
        });
    let (steps, answer, _) = parse_reply(&backend.generate(&request)?, config.task, config.mode.answer_only());
    if answer == UNPARSED {
        return Ok(None);
    }
    Ok(Some(Demonstration {
        query: base.query.clone(),
        steps,
        answer,
        category: base.category.clone(),
    }))
}

/// One submission per server query, each scored by its token entropy.
pub fn client_labeling(
    client: &ClientDataset,
    query_set: &[QueryRecord],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    config: &FederationConfig,
    round: usize,
) -> Result<Vec<ClientSubmission>> {
    if query_set.is_empty() {
        return Err(Error::invalid("no server queries to label"));
    }
    let local = client.local_pool();
    let shared: Vec<Demonstration> = query_set.iter().map(QueryRecord::as_demonstration).collect();
    let client_id = client.client_id();
    Ok(query_set
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let pool: Vec<Demonstration> = if config.mode == FederationMode::FeraFree {
                shared
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, d)| d.clone())
                    .collect()
            } else {
                local.clone()
            };
            let outcome = label_one(client_id, record, &pool, backend, embedder, config, round);
            scored_submission(client_id, record.query_id, outcome, config)
        })
        .collect())
}

fn label_one(
    client_id: usize,
    record: &QueryRecord,
    pool: &[Demonstration],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    config: &FederationConfig,
    round: usize,
) -> Result<GenerationResponse> {
    let anchor = record.as_demonstration();
    let demos = shown_demonstrations(select(&anchor, pool, &config.selection, embedder)?, config);
    let request = GenerationRequest::new(predict_prompt(&demos, &record.query, config)?)
        .with_max_tokens(config.token_limit)
        .with_logprobs(GenerationRequest::DEFAULT_TOP_LOGPROBS)
        .with_context(CallContext {
            role: Role::Client(client_id),
            kind: CallKind::Label,
            task: config.task,
            round,
            query_id: Some(record.query_id),
            subject: Some(anchor),
            demonstrations: demos,
            answer_only: config.mode.answer_only(),
        });
    backend.generate(&request)
}

/// A client's full turn: refine, then answer the distributed set. Returns
/// the updated private state and the message sent back to the server.
pub fn client_step(
    client: &ClientDataset,
    message: &WireMessage,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    config: &FederationConfig,
) -> Result<(ClientDataset, WireMessage)> {
    let WireMessage::Distribute { round, query_set } = message else {
        return Err(Error::invalid("clients only accept distribute messages"));
    };
    let refined = local_refinement(client, query_set, backend, embedder, config, *round)?;
    let submissions = client_labeling(&refined, query_set, backend, embedder, config, *round)?;
    let reply = WireMessage::Submit {
        round: *round,
        client_id: client.client_id(),
        submissions,
    };
    Ok((refined, reply))
}

/// Clients taking part in `round`, in id order.
pub fn participants(config: &FederationConfig, round: usize) -> Vec<usize> {
    match config.participation {
        Some(p) if p < config.num_clients => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut chosen = sample(&mut rng, config.num_clients, p).into_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..config.num_clients).collect(),
    }
}

struct QueryOutcome {
    record: QueryRecord,
    result: AggregationResult,
    submissions: Vec<ClientSubmission>,
}

fn aggregate_query(
    record: &QueryRecord,
    submissions: Vec<ClientSubmission>,
    backends: &Backends,
    config: &FederationConfig,
    round: usize,
) -> Result<QueryOutcome> {
    let mode = config.effective_aggregation();
    let ctx = ServerPromptContext {
        question: &record.query,
        task: config.task,
        token_limit: config.token_limit,
        round,
    };
    let result = match aggregate(mode, &submissions, backends.server.as_deref(), config.tau, &ctx) {
        Ok(r) => r,
        Err(e) => {
            warn!(
                "query {}: {mode} failed ({e}); falling back to weighted voting",
                record.query_id
            );
            let mut r = ua_wa(&submissions, config.tau)?;
            r.degraded = true;
            r.warnings.push(format!("{mode} failed: {e}"));
            r
        }
    };
    let next = if result.answer == UNPARSED {
        record.advance(record.steps.clone(), record.answer.clone())
    } else if config.mode.answer_only() {
        record.advance(Vec::new(), result.answer.clone())
    } else {
        record.advance(result.steps.clone(), result.answer.clone())
    };
    Ok(QueryOutcome {
        record: next,
        result,
        submissions,
    })
}

/// One full round. Consumes the state and returns its successor with the
/// round's snapshot appended.
pub fn run_round(state: FederationState, backends: &Backends, config: &FederationConfig) -> Result<FederationState> {
    let round = state.round;
    let distribute = WireMessage::Distribute {
        round,
        query_set: state.server_queryset.clone(),
    };
    let active = participants(config, round);
    let steps: Vec<(ClientDataset, Option<WireMessage>)> = state
        .clients
        .par_iter()
        .map(|client| {
            let id = client.client_id();
            if active.binary_search(&id).is_err() {
                return Ok((client.clone(), None));
            }
            client_step(
                client,
                &distribute,
                backends.client(id),
                backends.embedder.as_ref(),
                config,
            )
            .map(|(c, m)| (c, Some(m)))
        })
        .collect::<Result<_>>()?;

    let mut by_query: BTreeMap<u64, Vec<ClientSubmission>> = BTreeMap::new();
    let mut clients = Vec::with_capacity(steps.len());
    for (client, message) in steps {
        clients.push(client);
        if let Some(WireMessage::Submit { submissions, .. }) = message {
            for s in submissions {
                by_query.entry(s.query_id).or_default().push(s);
            }
        }
    }

    let outcomes: Vec<QueryOutcome> = state
        .server_queryset
        .par_iter()
        .map(|record| {
            let subs = by_query.get(&record.query_id).cloned().unwrap_or_default();
            if subs.is_empty() {
                return Err(Error::invalid(format!("no submissions for query {}", record.query_id)));
            }
            aggregate_query(record, subs, backends, config, round)
        })
        .collect::<Result<_>>()?;

    let mut snapshot = RoundSnapshot {
        round,
        ..Default::default()
    };
    let mut degraded = 0usize;
    let mut server_calls = 0usize;
    let mut next_set = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        for (s, w) in outcome.submissions.iter().zip(&outcome.result.weights.weights) {
            snapshot.weights.insert((s.query_id, s.client_id), *w);
        }
        degraded += usize::from(outcome.result.degraded);
        server_calls += outcome.result.server_calls;
        snapshot.submissions.extend(outcome.submissions);
        next_set.push(outcome.record);
    }
    snapshot.query_set = next_set.clone();
    snapshot.metrics = round_metrics(&snapshot, state.references.as_deref(), config, degraded, server_calls);

    let mut history = state.history;
    history.push(snapshot);
    Ok(FederationState {
        round: round + 1,
        server_queryset: next_set,
        initial_queryset: state.initial_queryset,
        clients,
        history,
        references: state.references,
    })
}

fn round_metrics(
    snapshot: &RoundSnapshot,
    references: Option<&[String]>,
    config: &FederationConfig,
    degraded: usize,
    server_calls: usize,
) -> BTreeMap<String, f64> {
    let mut metrics = BTreeMap::new();
    if let Some(refs) = references {
        metrics.insert("accuracy".to_string(), accuracy(&snapshot.query_set, refs, config.task));
    }
    metrics.insert("degraded_queries".to_string(), degraded as f64);
    metrics.insert("server_calls".to_string(), server_calls as f64);
    let mut per_client: BTreeMap<usize, (f64, usize, usize)> = BTreeMap::new();
    for s in &snapshot.submissions {
        let entry = per_client.entry(s.client_id).or_default();
        if s.uncertainty < FAILURE_UNCERTAINTY {
            entry.0 += s.uncertainty;
            entry.1 += 1;
        }
        if s.answer == UNPARSED {
            entry.2 += 1;
        }
    }
    let mut unparsed = 0;
    for (client, (sum, n, bad)) in per_client {
        if n > 0 {
            metrics.insert(format!("mean_uncertainty.client_{client}"), sum / n as f64);
        }
        unparsed += bad;
    }
    metrics.insert("unparsed_submissions".to_string(), unparsed as f64);
    metrics
}

/// Runs `config.num_rounds` rounds. With a snapshot directory, each round
/// is written to `round_<k>.json` as it completes and the report to
/// `report.json` at the end.
pub fn run_federation(
    config: &FederationConfig,
    inputs: &FederationInputs,
    backends: &Backends,
    snapshot_dir: Option<&Path>,
) -> Result<FederationState> {
    config.validate()?;
    inputs.check(config)?;
    backends.check(config)?;
    if let Some(dir) = snapshot_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let references = inputs.references.as_ref().map(|refs| {
        refs.iter()
            .map(|r| normalize_answer(r, config.task))
            .collect::<Vec<_>>()
    });
    let clients = inputs
        .datasets
        .iter()
        .enumerate()
        .map(|(i, data)| {
            let base = if config.mode == FederationMode::FeraFree {
                Vec::new()
            } else {
                data.clone()
            };
            ClientDataset::new(i, base)
        })
        .collect();
    let initial = initialize_queryset(&inputs.queries, config.num_clients, backends, config)?;
    let mut state = FederationState {
        round: 1,
        server_queryset: initial.clone(),
        initial_queryset: initial,
        clients,
        history: Vec::new(),
        references,
    };
    for _ in 0..config.num_rounds {
        state = run_round(state, backends, config)?;
        if let (Some(dir), Some(snapshot)) = (snapshot_dir, state.history.last()) {
            persist_round(snapshot, dir.join(format!("round_{}.json", snapshot.round)))?;
        }
    }
    if let Some(dir) = snapshot_dir {
        FederationReport::from_state(&state, config).write(dir.join("report.json"))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
