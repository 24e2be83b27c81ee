//! Server-side aggregation of client submissions for one query.
//!
//! [`ua_wa`] sums trust weights per answer and takes the argmax.
//! [`ua_sca`] groups submissions by answer, summarizes each group, has
//! every trace critiqued against the rival summaries, and asks the server
//! model for one weighted synthesis. Summaries run concurrently, then
//! critiques, then the single aggregate call.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    aggregate_template, critique_template, format_client_entries, format_numbered, format_response, summarize_template,
    Backend, CallContext, CallKind, GenerationRequest, Role,
};
use crate::datamodel::{extract_steps, normalize_answer, ClientSubmission, TaskKind, UNPARSED};
use crate::error::{Error, Result};
use crate::uncertainty::{trust_weights, TrustWeights};

/// Scores closer than this are treated as tied.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    UaSca,
    UaWa,
    UniformVote,
    ScaOnly,
}

impl AggregationMode {
    pub fn needs_server(self) -> bool {
        matches!(self, AggregationMode::UaSca | AggregationMode::ScaOnly)
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ua_sca" => Ok(AggregationMode::UaSca),
            "ua_wa" => Ok(AggregationMode::UaWa),
            "uniform_vote" => Ok(AggregationMode::UniformVote),
            "sca_only" => Ok(AggregationMode::ScaOnly),
            other => Err(Error::invalid(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::UaSca => "ua_sca",
            AggregationMode::UaWa => "ua_wa",
            AggregationMode::UniformVote => "uniform_vote",
            AggregationMode::ScaOnly => "sca_only",
        })
    }
}

/// Submissions sharing one normalized answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerGroup {
    pub answer: String,
    pub members: Vec<ClientSubmission>,
    pub summary: Option<String>,
}

impl AnswerGroup {
    fn first_client(&self) -> usize {
        self.members.iter().map(|m| m.client_id).min().unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub steps: Vec<String>,
    pub answer: String,
    /// One weight per submission, in input order.
    pub weights: TrustWeights,
    /// Submissions after critique (the originals when no critique ran).
    pub revised: Vec<ClientSubmission>,
    pub mode: AggregationMode,
    /// Set when the synthesis output was unusable and voting was used.
    pub degraded: bool,
    pub warnings: Vec<String>,
    pub server_calls: usize,
}

/// What the server prompts need to know about the query.
#[derive(Debug, Clone, Copy)]
pub struct ServerPromptContext<'a> {
    pub question: &'a str,
    pub task: TaskKind,
    pub token_limit: usize,
    pub round: usize,
}

fn check_same_query(submissions: &[ClientSubmission]) -> Result<()> {
    let first = submissions
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one submission"))?;
    if let Some(other) = submissions.iter().find(|s| s.query_id != first.query_id) {
        return Err(Error::invalid(format!(
            "submissions mix queries {} and {}",
            first.query_id, other.query_id
        )));
    }
    Ok(())
}

/// Partitions submissions by exact answer. Groups are ordered by their
/// lowest client id; members keep input order.
pub fn group_by_answer(submissions: &[ClientSubmission]) -> Result<Vec<AnswerGroup>> {
    check_same_query(submissions)?;
    let mut by_answer: BTreeMap<&str, Vec<ClientSubmission>> = BTreeMap::new();
    for s in submissions {
        by_answer.entry(s.answer.as_str()).or_default().push(s.clone());
    }
    let mut groups: Vec<AnswerGroup> = by_answer
        .into_iter()
        .map(|(answer, members)| AnswerGroup {
            answer: answer.to_string(),
            members,
            summary: None,
        })
        .collect();
    groups.sort_by_key(AnswerGroup::first_client);
    Ok(groups)
}

/// Weighted plurality. Parsed answers beat UNPARSED whenever any exist;
/// ties go to the lower total uncertainty, then the lower first client id.
/// Steps come from the heaviest member of the winning group.
fn weighted_vote(submissions: &[ClientSubmission], weights: &[f64]) -> (String, Vec<String>) {
    struct Tally {
        score: f64,
        total_u: f64,
        first_client: usize,
        best: usize,
    }
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    for (i, (s, &w)) in submissions.iter().zip(weights).enumerate() {
        let t = tallies.entry(s.answer.as_str()).or_insert(Tally {
            score: 0.0,
            total_u: 0.0,
            first_client: s.client_id,
            best: i,
        });
        t.score += w;
        t.total_u += s.uncertainty;
        t.first_client = t.first_client.min(s.client_id);
        let incumbent = &submissions[t.best];
        if w > weights[t.best] || (w == weights[t.best] && s.client_id < incumbent.client_id) {
            t.best = i;
        }
    }
    let any_parsed = tallies.keys().any(|a| *a != UNPARSED);
    let winner = tallies
        .iter()
        .filter(|(a, _)| !any_parsed || **a != UNPARSED)
        .reduce(|best, cand| {
            let (b, c) = (best.1, cand.1);
            let better = if (c.score - b.score).abs() > TIE_EPS {
                c.score > b.score
            } else if (c.total_u - b.total_u).abs() > TIE_EPS {
                c.total_u < b.total_u
            } else {
                c.first_client < b.first_client
            };
            if better {
                cand
            } else {
                best
            }
        })
        .expect("at least one submission");
    (winner.0.to_string(), submissions[winner.1.best].steps.clone())
}

fn uncertainties(submissions: &[ClientSubmission]) -> Vec<f64> {
    submissions.iter().map(|s| s.uncertainty).collect()
}

fn voting_result(submissions: &[ClientSubmission], weights: TrustWeights, mode: AggregationMode) -> AggregationResult {
    let (answer, steps) = weighted_vote(submissions, &weights.weights);
    AggregationResult {
        steps,
        answer,
        weights,
        revised: submissions.to_vec(),
        mode,
        degraded: false,
        warnings: Vec::new(),
        server_calls: 0,
    }
}

/// Uncertainty-aware weighted answer voting.
pub fn ua_wa(submissions: &[ClientSubmission], tau: f64) -> Result<AggregationResult> {
    check_same_query(submissions)?;
    let weights = trust_weights(&uncertainties(submissions), tau)?;
    Ok(voting_result(submissions, weights, AggregationMode::UaWa))
}

/// Plurality vote with equal weights and the same tie-breaking.
pub fn uniform_vote(submissions: &[ClientSubmission]) -> Result<AggregationResult> {
    check_same_query(submissions)?;
    let weights = TrustWeights::uniform(submissions.len());
    Ok(voting_result(submissions, weights, AggregationMode::UniformVote))
}

fn server_request(prompt: String, ctx: &ServerPromptContext<'_>, kind: CallKind, query_id: u64) -> GenerationRequest {
    GenerationRequest::new(prompt)
        .with_max_tokens(ctx.token_limit.max(1))
        .with_context(CallContext {
            role: Role::Server,
            kind,
            task: ctx.task,
            round: ctx.round,
            query_id: Some(query_id),
            ..Default::default()
        })
}

/// One server call condensing a group's traces.
pub fn summarize_group(group: &AnswerGroup, server: &dyn Backend, ctx: &ServerPromptContext<'_>) -> Result<String> {
    let first = group
        .members
        .first()
        .ok_or_else(|| Error::invalid("cannot summarize an empty answer group"))?;
    let traces: Vec<String> = group
        .members
        .iter()
        .map(|m| format_response(&m.steps, &m.answer, ctx.task))
        .collect();
    let count = group.members.len().to_string();
    let limit = ctx.token_limit.to_string();
    let reasoning = format_numbered("Response", &traces);
    let prompt = summarize_template().render(&[
        ("count", &count),
        ("question", ctx.question),
        ("reasoning_formatted", &reasoning),
        ("token_limit", &limit),
    ])?;
    let kind = CallKind::Summarize {
        answer: group.answer.clone(),
        members: group.members.len(),
    };
    let response = server
        .generate(&server_request(prompt, ctx, kind, first.query_id))
        .map_err(|e| Error::Backend {
            status: match &e {
                Error::Backend { status, .. } => *status,
                _ => None,
            },
            message: format!("summarizing group `{}`: {e}", group.answer),
        })?;
    Ok(response.text.trim().to_string())
}

/// Revises `target` against rival summaries. With no rivals the target is
/// returned without a call. An unparseable revision keeps the original and
/// yields a warning. Uncertainty is always inherited from the target.
pub fn self_critique(
    target: &ClientSubmission,
    other_summaries: &[String],
    server: &dyn Backend,
    ctx: &ServerPromptContext<'_>,
) -> Result<(ClientSubmission, Option<String>)> {
    if other_summaries.is_empty() {
        return Ok((target.clone(), None));
    }
    let target_text = format_response(&target.steps, &target.answer, ctx.task);
    let alternatives = format_numbered("Summary", other_summaries);
    let limit = ctx.token_limit.to_string();
    let prompt = critique_template(ctx.task).render(&[
        ("question", ctx.question),
        ("target_response", &target_text),
        ("alternatives_formatted", &alternatives),
        ("token_limit", &limit),
    ])?;
    let kind = CallKind::Critique {
        target_client: target.client_id,
        current_answer: target.answer.clone(),
    };
    let text = server
        .generate(&server_request(prompt, ctx, kind, target.query_id))?
        .text;
    let answer = normalize_answer(&text, ctx.task);
    if answer == UNPARSED {
        let msg = format!(
            "critique of client {} on query {} was unparseable; original kept",
            target.client_id, target.query_id
        );
        return Ok((target.clone(), Some(msg)));
    }
    Ok((
        ClientSubmission {
            steps: extract_steps(&text),
            answer,
            ..target.clone()
        },
        None,
    ))
}

fn critique_all(
    submissions: &[ClientSubmission],
    groups: &[AnswerGroup],
    server: &dyn Backend,
    ctx: &ServerPromptContext<'_>,
) -> Vec<(ClientSubmission, Option<String>)> {
    submissions
        .par_iter()
        .map(|s| {
            let rivals: Vec<String> = groups
                .iter()
                .filter(|g| g.answer != s.answer)
                .filter_map(|g| g.summary.clone())
                .collect();
            self_critique(s, &rivals, server, ctx).unwrap_or_else(|e| {
                let msg = format!("critique of client {} failed ({e}); original kept", s.client_id);
                (s.clone(), Some(msg))
            })
        })
        .collect()
}

fn critique_pipeline(
    submissions: &[ClientSubmission],
    weights: TrustWeights,
    mode: AggregationMode,
    server: &dyn Backend,
    tau: f64,
    ctx: &ServerPromptContext<'_>,
) -> Result<AggregationResult> {
    let mut groups = group_by_answer(submissions)?;
    let mut server_calls = 0;
    let mut warnings = Vec::new();

    let revised = if groups.len() >= 2 {
        let summaries = groups
            .par_iter()
            .map(|g| summarize_group(g, server, ctx))
            .collect::<Result<Vec<_>>>()?;
        server_calls += groups.len();
        for (g, s) in groups.iter_mut().zip(summaries) {
            g.summary = Some(s);
        }
        let critiqued = critique_all(submissions, &groups, server, ctx);
        server_calls += submissions.len();
        critiqued
            .into_iter()
            .map(|(s, w)| {
                warnings.extend(w);
                s
            })
            .collect()
    } else {
        submissions.to_vec()
    };

    let entries: Vec<(usize, String, f64)> = revised
        .iter()
        .zip(&weights.weights)
        .map(|(s, &w)| (s.client_id, format_response(&s.steps, &s.answer, ctx.task), w))
        .collect();
    let limit = ctx.token_limit.to_string();
    let prompt = aggregate_template(ctx.task).render(&[
        ("question", ctx.question),
        ("client_entries", &format_client_entries(&entries)),
        ("token_limit", &limit),
    ])?;
    let kind = CallKind::Aggregate {
        candidates: revised
            .iter()
            .zip(&weights.weights)
            .map(|(s, &w)| (s.answer.clone(), w))
            .collect(),
    };
    server_calls += 1;
    let synthesized = server
        .generate(&server_request(prompt, ctx, kind, submissions[0].query_id))
        .map(|r| (normalize_answer(&r.text, ctx.task), extract_steps(&r.text)));

    let (answer, steps, degraded) = match synthesized {
        Ok((answer, steps)) if answer != UNPARSED => (answer, steps, false),
        outcome => {
            let why = match outcome {
                Err(e) => format!("aggregate call failed ({e})"),
                Ok(_) => "aggregate output was unparseable".to_string(),
            };
            warnings.push(format!("{why}; fell back to weighted voting over revised traces"));
            let fallback = match mode {
                AggregationMode::ScaOnly => uniform_vote(&revised)?,
                _ => ua_wa(&revised, tau)?,
            };
            (fallback.answer, fallback.steps, true)
        }
    };
    for w in &warnings {
        warn!("{w}");
    }
    Ok(AggregationResult {
        steps,
        answer,
        weights,
        revised,
        mode,
        degraded,
        warnings,
        server_calls,
    })
}

/// Group, summarize, critique, then one weighted synthesis call. Weights
/// come from the original submissions' uncertainties.
pub fn ua_sca(
    submissions: &[ClientSubmission],
    server: &dyn Backend,
    tau: f64,
    ctx: &ServerPromptContext<'_>,
) -> Result<AggregationResult> {
    check_same_query(submissions)?;
    let weights = trust_weights(&uncertainties(submissions), tau)?;
    critique_pipeline(submissions, weights, AggregationMode::UaSca, server, tau, ctx)
}

/// The critique pipeline with equal weights.
pub fn sca_only(
    submissions: &[ClientSubmission],
    server: &dyn Backend,
    ctx: &ServerPromptContext<'_>,
) -> Result<AggregationResult> {
    check_same_query(submissions)?;
    let weights = TrustWeights::uniform(submissions.len());
    critique_pipeline(submissions, weights, AggregationMode::ScaOnly, server, 1.0, ctx)
}

/// Dispatches on `mode`.
pub fn aggregate(
    mode: AggregationMode,
    submissions: &[ClientSubmission],
    server: Option<&dyn Backend>,
    tau: f64,
    ctx: &ServerPromptContext<'_>,
) -> Result<AggregationResult> {
    let need = || Error::Config(format!("aggregation `{mode}` needs a server backend"));
    match mode {
        AggregationMode::UaWa => ua_wa(submissions, tau),
        AggregationMode::UniformVote => uniform_vote(submissions),
        AggregationMode::UaSca => ua_sca(submissions, server.ok_or_else(need)?, tau, ctx),
        AggregationMode::ScaOnly => sca_only(submissions, server.ok_or_else(need)?, ctx),
    }
}
