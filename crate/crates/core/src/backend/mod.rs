//! Text-generation backends.
//!
//! A [`GenerationRequest`] carries only rendered prompt text plus sampling
//! parameters on the wire. The attached [`CallContext`] is in-process
//! metadata used for logging and by the scripted mock; HTTP backends never
//! serialize it.

pub mod http;
pub mod mock;
mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Demonstration, TaskKind};
use crate::error::{Error, Result};
use crate::uncertainty::{
    sequence_uncertainty, uncertainty_from_logprobs, TokenDistribution, UncertaintyScore, DEFAULT_EPSILON,
};

pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use mock::{AccuracyKnobs, MockBackend, MockReply, MockScript, ScriptedReply};
pub use template::{
    aggregate_template, critique_template, format_client_entries, format_examples, format_numbered, format_response,
    prediction_template, render_prompt, summarize_template, zero_shot_template, PromptTemplate,
};

/// Who issues a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    Client(usize),
    #[default]
    Server,
}

/// Which protocol step a call belongs to.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CallKind {
    /// Zero-shot answer used to seed the server query set.
    #[default]
    ZeroShot,
    /// Relabeling base item `item` with server demonstrations.
    Refine { item: usize },
    /// Answering a server query with local demonstrations.
    Label,
    /// Summarizing one answer group.
    Summarize { answer: String, members: usize },
    /// Revising one client's trace against rival summaries.
    Critique {
        target_client: usize,
        current_answer: String,
    },
    /// Weighted synthesis of revised traces: (answer, weight) per trace.
    Aggregate { candidates: Vec<(String, f64)> },
}

impl CallKind {
    pub fn label(&self) -> &'static str {
        match self {
            CallKind::ZeroShot => "zero_shot",
            CallKind::Refine { .. } => "refine",
            CallKind::Label => "label",
            CallKind::Summarize { .. } => "summarize",
            CallKind::Critique { .. } => "critique",
            CallKind::Aggregate { .. } => "aggregate",
        }
    }
}

/// In-process metadata about a call. Never sent to a remote backend.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CallContext {
    pub role: Role,
    pub kind: CallKind,
    pub task: TaskKind,
    pub round: usize,
    pub query_id: Option<u64>,
    /// The item being answered, as it appears in the prompt.
    pub subject: Option<Demonstration>,
    /// Demonstrations rendered into the prompt.
    pub demonstrations: Vec<Demonstration>,
    /// Whether the prompt asks for the final answer only.
    pub answer_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system: Option<String>,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
    #[serde(skip)]
    pub context: CallContext,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_TOKENS: usize = 256;
    pub const DEFAULT_TEMPERATURE: f64 = 0.3;
    pub const DEFAULT_TOP_P: f64 = 0.8;
    pub const DEFAULT_TOP_LOGPROBS: u8 = 5;

    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            system: None,
            prompt: prompt.into(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            temperature: Self::DEFAULT_TEMPERATURE,
            top_p: Self::DEFAULT_TOP_P,
            want_logprobs: false,
            top_logprobs: Self::DEFAULT_TOP_LOGPROBS,
            context: CallContext::default(),
        }
    }

    pub fn with_logprobs(mut self, top: u8) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = top;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_context(mut self, context: CallContext) -> Self {
        self.context = context;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::invalid(format!("bad temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(1..=20).contains(&self.top_logprobs) {
            return Err(Error::invalid(format!(
                "top_logprobs {} outside [1, 20]",
                self.top_logprobs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    /// Per-position (possibly truncated) distributions.
    pub token_dists: Option<Vec<TokenDistribution>>,
    /// Log-probabilities of the sampled tokens, when reported.
    pub token_logprobs: Option<Vec<f64>>,
}

impl GenerationResponse {
    pub fn text(text: impl Into<String>) -> Self {
        GenerationResponse {
            text: text.into(),
            ..Default::default()
        }
    }

    /// Mean token entropy when distributions are present, otherwise the
    /// negated mean log-probability of the sampled tokens.
    pub fn uncertainty(&self) -> Option<Result<UncertaintyScore>> {
        match (&self.token_dists, &self.token_logprobs) {
            (Some(dists), _) if !dists.is_empty() => Some(sequence_uncertainty(dists, DEFAULT_EPSILON)),
            (_, Some(lps)) if !lps.is_empty() => Some(uncertainty_from_logprobs(lps)),
            _ => None,
        }
    }
}

/// A text generator. Implementations must be callable concurrently.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        (**self).generate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}
