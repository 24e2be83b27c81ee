//! Deterministic scripted backend.
//!
//! Replies are resolved in order: custom rules, then per-round overrides,
//! then the (client, query) table, then accuracy knobs. Server calls fall
//! back to simple defaults: summaries report their member count, critiques
//! keep the current answer, and aggregation follows the highest-weight
//! candidate. When log-probabilities are requested, every position gets a
//! distribution whose entropy equals the scripted uncertainty.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::sync::{Arc, Mutex};

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{format_response, Backend, CallContext, CallKind, GenerationRequest, GenerationResponse, Role};
use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::uncertainty::{token_entropy, TokenDistribution, DEFAULT_EPSILON};

/// Largest support used when synthesizing a distribution.
const MAX_SUPPORT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    pub steps: Vec<String>,
    pub answer: String,
    pub uncertainty: f64,
}

impl ScriptedReply {
    pub fn new(steps: &[&str], answer: impl Into<String>, uncertainty: f64) -> Self {
        ScriptedReply {
            steps: steps.iter().map(|s| s.to_string()).collect(),
            answer: answer.into(),
            uncertainty,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Scripted(ScriptedReply),
    /// Verbatim text, e.g. a summary or deliberately unparseable output.
    Raw {
        text: String,
        uncertainty: f64,
    },
}

pub type Rule = Arc<dyn Fn(&CallContext) -> Option<MockReply> + Send + Sync>;

/// Per-client, per-category probability of answering correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracyKnobs {
    pub answer_key: BTreeMap<u64, String>,
    pub categories: BTreeMap<u64, String>,
    pub default_accuracy: f64,
    /// client id -> category -> accuracy
    pub category_accuracy: BTreeMap<usize, BTreeMap<String, f64>>,
    pub correct_uncertainty: f64,
    pub wrong_uncertainty: f64,
    pub seed: u64,
}

impl Default for AccuracyKnobs {
    fn default() -> Self {
        AccuracyKnobs {
            answer_key: BTreeMap::new(),
            categories: BTreeMap::new(),
            default_accuracy: 0.5,
            category_accuracy: BTreeMap::new(),
            correct_uncertainty: 0.2,
            wrong_uncertainty: 1.2,
            seed: 0,
        }
    }
}

impl AccuracyKnobs {
    fn accuracy(&self, client: usize, query_id: u64) -> f64 {
        self.categories
            .get(&query_id)
            .and_then(|c| self.category_accuracy.get(&client)?.get(c))
            .copied()
            .unwrap_or(self.default_accuracy)
    }

    fn reply(&self, task: TaskKind, client: usize, query_id: u64, round: usize) -> Option<ScriptedReply> {
        let key = self.answer_key.get(&query_id)?;
        let mut h = FnvHasher::default();
        for part in [self.seed, client as u64, query_id, round as u64] {
            h.write_u64(part);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let correct = rng.random_bool(self.accuracy(client, query_id).clamp(0.0, 1.0));
        Some(if correct {
            ScriptedReply::new(&["Recalled the relevant fact."], key.clone(), self.correct_uncertainty)
        } else {
            ScriptedReply::new(
                &["Guessed from partial recall."],
                wrong_answer(key, task),
                self.wrong_uncertainty,
            )
        })
    }
}

/// A fixed distractor for `key`.
fn wrong_answer(key: &str, task: TaskKind) -> String {
    match task {
        TaskKind::MultipleChoice => match key.as_bytes() {
            [c @ b'A'..=b'Y'] => ((c + 1) as char).to_string(),
            _ => "A".to_string(),
        },
        TaskKind::Numeric => key
            .parse::<i64>()
            .map(|n| (n + 1).to_string())
            .unwrap_or_else(|_| "0".into()),
    }
}

#[derive(Clone, Default)]
pub struct MockScript {
    task: TaskKind,
    table: HashMap<(usize, u64), ScriptedReply>,
    overrides: HashMap<(usize, u64, usize), ScriptedReply>,
    knobs: Option<AccuracyKnobs>,
    rules: Vec<Rule>,
}

impl MockScript {
    pub fn new(task: TaskKind) -> Self {
        MockScript {
            task,
            ..Default::default()
        }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn entry(mut self, client: usize, query_id: u64, reply: ScriptedReply) -> Self {
        self.table.insert((client, query_id), reply);
        self
    }

    pub fn round_override(mut self, client: usize, query_id: u64, round: usize, reply: ScriptedReply) -> Self {
        self.overrides.insert((client, query_id, round), reply);
        self
    }

    pub fn knobs(mut self, knobs: AccuracyKnobs) -> Self {
        self.knobs = Some(knobs);
        self
    }

    pub fn rule(mut self, rule: impl Fn(&CallContext) -> Option<MockReply> + Send + Sync + 'static) -> Self {
        self.rules.push(Arc::new(rule));
        self
    }

    fn resolve(&self, ctx: &CallContext) -> Result<MockReply> {
        if let Some(reply) = self.rules.iter().find_map(|r| r(ctx)) {
            return Ok(reply);
        }
        match (&ctx.kind, ctx.role) {
            (CallKind::ZeroShot | CallKind::Label, Role::Client(client)) => {
                let query_id = ctx.query_id.unwrap_or(u64::MAX);
                self.overrides
                    .get(&(client, query_id, ctx.round))
                    .or_else(|| self.table.get(&(client, query_id)))
                    .cloned()
                    .or_else(|| self.knobs.as_ref()?.reply(self.task, client, query_id, ctx.round))
                    .map(MockReply::Scripted)
                    .ok_or(Error::ScriptMiss {
                        client_id: client,
                        query_id,
                    })
            }
            (CallKind::Refine { item }, Role::Client(client)) => ctx
                .subject
                .as_ref()
                .map(|d| {
                    MockReply::Scripted(ScriptedReply {
                        steps: d.steps.clone(),
                        answer: d.answer.clone(),
                        uncertainty: 0.5,
                    })
                })
                .ok_or(Error::ScriptMiss {
                    client_id: client,
                    query_id: *item as u64,
                }),
            (CallKind::Summarize { members, .. }, _) => Ok(MockReply::Raw {
                text: format!("{members} responses"),
                uncertainty: 0.0,
            }),
            (CallKind::Critique { current_answer, .. }, _) => Ok(MockReply::Scripted(ScriptedReply::new(
                &["Reconsidered against the alternatives."],
                current_answer.clone(),
                0.0,
            ))),
            (CallKind::Aggregate { candidates }, _) => {
                let best = candidates
                    .iter()
                    .fold(None::<&(String, f64)>, |best, c| match best {
                        Some(b) if b.1 >= c.1 => Some(b),
                        _ => Some(c),
                    })
                    .ok_or_else(|| Error::invalid("aggregate call without candidates"))?;
                Ok(MockReply::Scripted(ScriptedReply::new(
                    &["Synthesized from the weighted responses."],
                    best.0.clone(),
                    0.0,
                )))
            }
            (_, role) => Err(Error::invalid(format!(
                "mock has no default for {} calls from {role:?}",
                ctx.kind.label()
            ))),
        }
    }
}

/// A distribution whose entropy (with the standard stabilizer) equals `u`:
/// one dominant token plus the remaining mass spread evenly.
pub fn entropy_matched_distribution(u: f64) -> Result<TokenDistribution> {
    if !(u.is_finite() && u >= 0.0) {
        return Err(Error::invalid(format!("cannot synthesize entropy {u}")));
    }
    if u < 1e-12 {
        return TokenDistribution::from_probs(&[1.0]);
    }
    let n = if u <= std::f64::consts::LN_2 {
        2
    } else {
        u.exp().floor() as usize + 2
    };
    if n > MAX_SUPPORT {
        return Err(Error::invalid(format!("entropy {u} exceeds the synthesizable range")));
    }
    let build = |p: f64| {
        let rest = (1.0 - p) / (n - 1) as f64;
        let mut probs = vec![rest; n];
        probs[0] = p;
        TokenDistribution::from_probs(&probs)
    };
    let (mut lo, mut hi) = (1.0 / n as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if token_entropy(&build(mid)?, DEFAULT_EPSILON)? > u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(0.5 * (lo + hi))
}

/// One logged call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub role: Role,
    pub kind: &'static str,
    pub query_id: Option<u64>,
    pub round: usize,
}

pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<CallRecord>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn server_calls(&self) -> usize {
        self.calls().iter().filter(|c| c.role == Role::Server).count()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.calls().iter().filter(|c| c.kind == kind).count()
    }

    pub fn reset(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }
}

impl Backend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let ctx = &request.context;
        self.log.lock().expect("mock log poisoned").push(CallRecord {
            role: ctx.role,
            kind: ctx.kind.label(),
            query_id: ctx.query_id,
            round: ctx.round,
        });
        let (text, uncertainty) = match self.script.resolve(ctx)? {
            MockReply::Scripted(r) => {
                let steps: &[String] = if ctx.answer_only { &[] } else { &r.steps };
                (format_response(steps, &r.answer, self.script.task), r.uncertainty)
            }
            MockReply::Raw { text, uncertainty } => (text, uncertainty),
        };
        let token_dists = if request.want_logprobs {
            let positions = text.split_whitespace().count().clamp(1, 64);
            Some(vec![entropy_matched_distribution(uncertainty)?; positions])
        } else {
            None
        };
        Ok(GenerationResponse {
            text,
            token_dists,
            token_logprobs: None,
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::datamodel::normalize_answer;
    use crate::uncertainty::sequence_uncertainty;

    fn label_request(client: usize, query_id: u64) -> GenerationRequest {
        GenerationRequest::new("prompt")
            .with_logprobs(5)
            .with_context(CallContext {
                role: Role::Client(client),
                kind: CallKind::Label,
                query_id: Some(query_id),
                ..Default::default()
            })
    }

    #[test]
    fn scripted_echo() {
        let mock = MockBackend::new(MockScript::new(TaskKind::MultipleChoice).entry(
            0,
            7,
            ScriptedReply::new(&["step"], "B", 0.4),
        ));
        let r = mock.generate(&label_request(0, 7)).unwrap();
        assert!(r.text.contains("The answer is (B)."), "{}", r.text);
        let u = sequence_uncertainty(r.token_dists.as_ref().unwrap(), DEFAULT_EPSILON).unwrap();
        assert!((u.value - 0.4).abs() < 1e-6, "{}", u.value);
        assert_eq!(r, mock.generate(&label_request(0, 7)).unwrap());
    }

    #[test]
    fn script_miss_names_the_pair() {
        let mock = MockBackend::new(MockScript::new(TaskKind::MultipleChoice));
        let err = mock.generate(&label_request(2, 9)).unwrap_err();
        assert!(matches!(
            err,
            Error::ScriptMiss {
                client_id: 2,
                query_id: 9
            }
        ));
    }

    #[test]
    fn overrides_take_precedence_by_round() {
        let script = MockScript::new(TaskKind::Numeric)
            .entry(0, 1, ScriptedReply::new(&[], "3", 0.1))
            .round_override(0, 1, 2, ScriptedReply::new(&[], "4", 0.1));
        let mock = MockBackend::new(script);
        let mut req = label_request(0, 1);
        req.context.round = 1;
        assert_eq!(
            normalize_answer(&mock.generate(&req).unwrap().text, TaskKind::Numeric),
            "3"
        );
        req.context.round = 2;
        assert_eq!(
            normalize_answer(&mock.generate(&req).unwrap().text, TaskKind::Numeric),
            "4"
        );
    }

    #[test]
    fn server_defaults() {
        let mock = MockBackend::new(MockScript::new(TaskKind::MultipleChoice));
        let summary = GenerationRequest::new("p").with_context(CallContext {
            kind: CallKind::Summarize {
                answer: "A".into(),
                members: 2,
            },
            ..Default::default()
        });
        assert_eq!(mock.generate(&summary).unwrap().text, "2 responses");
        let agg = GenerationRequest::new("p").with_context(CallContext {
            kind: CallKind::Aggregate {
                candidates: vec![("A".into(), 0.2), ("C".into(), 0.5), ("B".into(), 0.3)],
            },
            ..Default::default()
        });
        let text = mock.generate(&agg).unwrap().text;
        assert_eq!(normalize_answer(&text, TaskKind::MultipleChoice), "C");
        assert_eq!(mock.server_calls(), 2);
        assert_eq!(mock.count("summarize"), 1);
    }

    #[test]
    fn answer_only_drops_steps() {
        let mock = MockBackend::new(MockScript::new(TaskKind::MultipleChoice).entry(
            0,
            1,
            ScriptedReply::new(&["why"], "D", 0.3),
        ));
        let mut req = label_request(0, 1);
        req.context.answer_only = true;
        assert_eq!(mock.generate(&req).unwrap().text, "The answer is (D).");
    }

    #[test]
    fn rules_come_first() {
        let script = MockScript::new(TaskKind::MultipleChoice)
            .entry(0, 1, ScriptedReply::new(&[], "A", 0.3))
            .rule(|ctx| {
                (ctx.query_id == Some(1)).then(|| MockReply::Raw {
                    text: "no idea".into(),
                    uncertainty: 2.0,
                })
            });
        let r = MockBackend::new(script).generate(&label_request(0, 1)).unwrap();
        assert_eq!(r.text, "no idea");
    }

    #[test]
    fn knobs_are_deterministic_and_calibrated() {
        let mut knobs = AccuracyKnobs {
            default_accuracy: 0.8,
            seed: 3,
            ..Default::default()
        };
        for q in 0..2000u64 {
            knobs.answer_key.insert(q, "C".into());
        }
        let mock = MockBackend::new(MockScript::new(TaskKind::MultipleChoice).knobs(knobs));
        let mut correct = 0;
        for q in 0..2000u64 {
            let a = mock.generate(&label_request(1, q)).unwrap();
            assert_eq!(a, mock.generate(&label_request(1, q)).unwrap());
            let ans = normalize_answer(&a.text, TaskKind::MultipleChoice);
            assert!(ans == "C" || ans == "D");
            correct += usize::from(ans == "C");
        }
        assert!((1500..1700).contains(&correct), "{correct}");
    }

    #[test]
    fn distractors() {
        assert_eq!(wrong_answer("A", TaskKind::MultipleChoice), "B");
        assert_eq!(wrong_answer("Z", TaskKind::MultipleChoice), "A");
        assert_eq!(wrong_answer("41", TaskKind::Numeric), "42");
    }

    #[test]
    fn large_entropies_are_matched() {
        for u in [0.0, 0.9, 2.5, 7.0] {
            let d = entropy_matched_distribution(u).unwrap();
            assert!((token_entropy(&d, DEFAULT_EPSILON).unwrap() - u).abs() < 1e-6, "{u}");
        }
        assert!(entropy_matched_distribution(9.0).is_err());
        assert!(entropy_matched_distribution(-0.1).is_err());
    }

    proptest! {
        #[test]
        fn two_token_synthesis_matches(u in 0.0f64..=std::f64::consts::LN_2) {
            let d = entropy_matched_distribution(u).unwrap();
            prop_assert!(d.probs.len() <= 2);
            let got = sequence_uncertainty(&[d.clone(), d], DEFAULT_EPSILON).unwrap().value;
            prop_assert!((got - u).abs() < 1e-6);
        }
    }
}
