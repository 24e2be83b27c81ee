//! Scripted federations for the mock backend.
//!
//! The ladder: `topics` server queries, each with an option-letter key.
//! Zero-shot, clients only get topic 0 right. A client answers topic `t`
//! correctly once its demonstrations contain a correctly answered pair for
//! topic `t - 1`; private pairs for topic `t` start wrong and pick up the
//! server's current answer for topic `t` during refinement. Server
//! accuracy therefore climbs by one topic per round.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{FederationConfig, FederationInputs};
use crate::backend::{AccuracyKnobs, CallKind, MockReply, MockScript, Role, ScriptedReply};
use crate::datamodel::{Demonstration, TaskKind};
use crate::selection::SelectionConfig;

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Config, inputs and script for one scripted federation.
#[derive(Clone)]
pub struct Scenario {
    pub config: FederationConfig,
    pub inputs: FederationInputs,
    pub script: MockScript,
}

fn key(topic: usize) -> String {
    LETTERS[topic % LETTERS.len()].to_string()
}

fn distractor(topic: usize) -> String {
    LETTERS[(topic + 1) % LETTERS.len()].to_string()
}

pub fn ladder_query(topic: usize) -> String {
    format!("Ladder topic {topic}: which option completes stage {topic}? (A) up (B) down (C) left (D) right")
}

fn practice_query(client: usize, topic: usize) -> String {
    format!("Client {client} practice on ladder topic {topic}")
}

pub fn ladder(topics: usize, num_clients: usize, num_rounds: usize) -> Scenario {
    let topics = topics.max(1);
    let mut topic_of: HashMap<String, usize> = HashMap::new();
    let queries: Vec<String> = (0..topics).map(ladder_query).collect();
    for (t, q) in queries.iter().enumerate() {
        topic_of.insert(q.clone(), t);
    }
    let datasets: Vec<Vec<Demonstration>> = (0..num_clients)
        .map(|c| {
            (0..topics)
                .map(|t| {
                    let q = practice_query(c, t);
                    topic_of.insert(q.clone(), t);
                    Demonstration {
                        query: q,
                        steps: vec![format!("Unsure about stage {t}.")],
                        answer: distractor(t),
                        category: Some(format!("topic_{t}")),
                    }
                })
                .collect()
        })
        .collect();
    let topic_of = Arc::new(topic_of);

    let lookup = Arc::clone(&topic_of);
    let script = MockScript::new(TaskKind::MultipleChoice).rule(move |ctx| {
        let client = match ctx.role {
            Role::Client(c) => c,
            Role::Server => return None,
        };
        // Lower ids are slightly more confident so weights are not uniform.
        let confidence = 0.05 * client as f64;
        match &ctx.kind {
            CallKind::ZeroShot | CallKind::Label => {
                let t = ctx.query_id? as usize;
                let knows = t == 0
                    || ctx
                        .demonstrations
                        .iter()
                        .any(|d| lookup.get(&d.query) == Some(&(t - 1)) && d.answer == key(t - 1));
                Some(MockReply::Scripted(if knows {
                    ScriptedReply::new(&["Built on the previous stage."], key(t), 0.2 + confidence)
                } else {
                    ScriptedReply::new(&["No earlier stage to build on."], distractor(t), 1.0 + confidence)
                }))
            }
            CallKind::Refine { .. } => {
                let subject = ctx.subject.as_ref()?;
                let t = *lookup.get(&subject.query)?;
                let shared = ctx
                    .demonstrations
                    .iter()
                    .find(|d| d.query == ladder_query(t))
                    .map_or_else(|| subject.answer.clone(), |d| d.answer.clone());
                Some(MockReply::Scripted(ScriptedReply::new(
                    &["Aligned with the shared answer for this stage."],
                    shared,
                    0.3,
                )))
            }
            _ => None,
        }
    });

    let config = FederationConfig {
        num_rounds,
        num_clients,
        selection: SelectionConfig {
            // every candidate is shown, so the dynamics do not depend on
            // embedding geometry
            count: 2 * topics,
            ..SelectionConfig::default()
        },
        ..FederationConfig::default()
    };
    Scenario {
        config,
        inputs: FederationInputs {
            queries,
            datasets,
            references: Some((0..topics).map(key).collect()),
        },
        script,
    }
}

/// Knob-driven script: each client answers correctly with a base
/// probability, raised for categories present in its private data.
pub fn knobs_script(
    inputs: &FederationInputs,
    task: TaskKind,
    query_categories: &[Option<String>],
    default_accuracy: f64,
    familiar_accuracy: f64,
    seed: u64,
) -> MockScript {
    let answer_key: BTreeMap<u64, String> = inputs
        .references
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, a)| (i as u64, crate::datamodel::normalize_answer(a, task)))
        .collect();
    let categories: BTreeMap<u64, String> = query_categories
        .iter()
        .enumerate()
        .filter_map(|(i, c)| Some((i as u64, c.clone()?)))
        .collect();
    let category_accuracy = inputs
        .datasets
        .iter()
        .enumerate()
        .map(|(client, data)| {
            let familiar = data
                .iter()
                .filter_map(|d| Some((d.category.clone()?, familiar_accuracy)))
                .collect();
            (client, familiar)
        })
        .collect();
    MockScript::new(task).knobs(AccuracyKnobs {
        answer_key,
        categories,
        default_accuracy,
        category_accuracy,
        seed,
        ..AccuracyKnobs::default()
    })
}
