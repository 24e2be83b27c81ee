use std::sync::Arc;

use super::*;
use crate::aggregation::AggregationMode;
use crate::backend::{MockBackend, MockReply, MockScript, ScriptedReply};
use crate::selection::HashingEmbedder;

fn demo(q: &str, a: &str) -> Demonstration {
    Demonstration::new(q, vec![format!("about {q}")], a).unwrap()
}

fn backends(script: MockScript) -> (Arc<MockBackend>, Backends) {
    let mock = Arc::new(MockBackend::new(script));
    let b = Backends::shared(mock.clone(), Arc::new(HashingEmbedder::default()));
    (mock, b)
}

fn inputs(queries: &[&str], clients: usize) -> FederationInputs {
    FederationInputs {
        queries: queries.iter().map(|q| q.to_string()).collect(),
        datasets: (0..clients).map(|c| vec![demo(&format!("private {c}"), "A")]).collect(),
        references: None,
    }
}

fn config(clients: usize, rounds: usize) -> FederationConfig {
    FederationConfig {
        num_clients: clients,
        num_rounds: rounds,
        ..Default::default()
    }
}

fn scripted(answers: &[(usize, u64, &str, f64)]) -> MockScript {
    answers
        .iter()
        .fold(MockScript::new(TaskKind::MultipleChoice), |s, &(c, q, a, u)| {
            s.entry(c, q, ScriptedReply::new(&["thinking"], a, u))
        })
}

#[test]
fn initial_set_from_single_client() {
    let (_, b) = backends(scripted(&[(0, 0, "C", 0.3)]));
    let q = initialize_queryset(&["q0".to_string()], 1, &b, &config(1, 1)).unwrap();
    assert_eq!(q[0].answer, "C");
    assert_eq!(q[0].round, 1);
}

#[test]
fn initial_set_majority() {
    let (_, b) = backends(scripted(&[(0, 0, "A", 0.5), (1, 0, "B", 0.5), (2, 0, "B", 0.5)]));
    let q = initialize_queryset(&["q0".to_string()], 3, &b, &config(3, 1)).unwrap();
    assert_eq!(q[0].answer, "B");
}

#[test]
fn initial_set_survives_total_failure() {
    let (_, b) = backends(MockScript::new(TaskKind::MultipleChoice));
    let q = initialize_queryset(&["q0".to_string()], 2, &b, &config(2, 1)).unwrap();
    assert_eq!(q[0].answer, UNPARSED);
    assert!(q[0].steps.is_empty());
}

#[test]
fn unanimous_round() {
    let (_, b) = backends(scripted(&[
        (0, 0, "D", 0.2),
        (1, 0, "D", 0.4),
        (0, 1, "B", 0.2),
        (1, 1, "B", 0.1),
    ]));
    let state = run_federation(&config(2, 1), &inputs(&["q0", "q1"], 2), &b, None).unwrap();
    let answers: Vec<&str> = state.server_queryset.iter().map(|r| r.answer.as_str()).collect();
    assert_eq!(answers, ["D", "B"]);
    assert_eq!(state.round, 2);
    assert_eq!(state.server_queryset[0].round, 2);
}

#[test]
fn confident_minority_beats_majority_only_with_weights() {
    let script = scripted(&[(0, 0, "A", 0.05), (1, 0, "B", 2.0), (2, 0, "B", 2.0)]);
    let mut inp = inputs(&["q0"], 3);
    inp.references = Some(vec!["A".into()]);
    let run = |mode| {
        let (_, b) = backends(script.clone());
        let cfg = FederationConfig {
            aggregation: mode,
            ..config(3, 1)
        };
        run_federation(&cfg, &inp, &b, None).unwrap()
    };
    let weighted = run(AggregationMode::UaWa);
    let uniform = run(AggregationMode::UniformVote);
    assert_eq!(weighted.server_queryset[0].answer, "A");
    assert_eq!(uniform.server_queryset[0].answer, "B");
    assert_eq!(weighted.history[0].metrics["accuracy"], 1.0);
    assert_eq!(uniform.history[0].metrics["accuracy"], 0.0);
}

#[test]
fn fixed_context_keeps_clients_unchanged() {
    let (mock, b) = backends(scripted(&[(0, 0, "A", 0.2), (1, 0, "B", 0.3)]));
    let cfg = FederationConfig {
        mode: FederationMode::FeraGt,
        ..config(2, 3)
    };
    let inp = inputs(&["q0"], 2);
    let state = run_federation(&cfg, &inp, &b, None).unwrap();
    for (client, data) in state.clients.iter().zip(&inp.datasets) {
        assert_eq!(client.base(), data.as_slice());
        assert!(client.enriched().is_empty());
    }
    assert_eq!(mock.count("refine"), 0);
    assert_eq!(state.history.len(), 3);
}

#[test]
fn data_free_clients_learn_from_server_set_only() {
    let script = MockScript::new(TaskKind::MultipleChoice).rule(|ctx| {
        if ctx.kind == CallKind::Label {
            let own = format!("q{}", ctx.query_id?);
            assert!(ctx
                .demonstrations
                .iter()
                .all(|d| d.query.starts_with('q') && d.query != own));
            assert_eq!(ctx.demonstrations.len(), 2);
        }
        Some(MockReply::Scripted(ScriptedReply::new(&["s"], "A", 0.3)))
    });
    let (mock, b) = backends(script);
    let cfg = FederationConfig {
        mode: FederationMode::FeraFree,
        ..config(2, 2)
    };
    let state = run_federation(&cfg, &inputs(&["q0", "q1", "q2"], 2), &b, None).unwrap();
    assert!(state
        .clients
        .iter()
        .all(|c| c.base().is_empty() && c.enriched().is_empty()));
    assert_eq!(mock.count("refine"), 0);
    assert_eq!(mock.count("label"), 2 * 3 * 2);
}

#[test]
fn answer_only_mode_strips_steps_and_votes() {
    let script = MockScript::new(TaskKind::MultipleChoice).rule(|ctx| {
        assert!(ctx.answer_only);
        assert!(ctx.demonstrations.iter().all(|d| d.steps.is_empty()));
        let answer = if matches!(ctx.role, Role::Client(0)) { "A" } else { "B" };
        Some(MockReply::Scripted(ScriptedReply::new(
            &["long reasoning"],
            answer,
            0.3,
        )))
    });
    let (mock, b) = backends(script);
    let cfg = FederationConfig {
        mode: FederationMode::FeraQ,
        aggregation: AggregationMode::UaSca,
        ..config(3, 2)
    };
    let state = run_federation(&cfg, &inputs(&["q0", "q1"], 3), &b, None).unwrap();
    for snap in &state.history {
        assert!(snap.query_set.iter().all(|r| r.steps.is_empty()));
        assert!(snap.submissions.iter().all(|s| s.steps.is_empty()));
    }
    assert_eq!(mock.server_calls(), 0);
    let report = FederationReport::from_state(&state, &cfg);
    assert_eq!(report.aggregation, AggregationMode::UaWa);
    assert!(report.notes.iter().any(|n| n.contains("ua_wa")));
}

#[test]
fn refinement_echoes_server_answers() {
    // Private queries coincide with server queries; the echo rule returns
    // the selected demonstration for the same query.
    let script = MockScript::new(TaskKind::MultipleChoice)
        .entry(0, 0, ScriptedReply::new(&["s"], "C", 0.2))
        .entry(0, 1, ScriptedReply::new(&["s"], "D", 0.2))
        .rule(|ctx| {
            if !matches!(ctx.kind, CallKind::Refine { .. }) {
                return None;
            }
            let subject = ctx.subject.as_ref()?;
            let d = ctx.demonstrations.iter().find(|d| d.query == subject.query)?;
            Some(MockReply::Scripted(ScriptedReply::new(&[], d.answer.clone(), 0.1)))
        });
    let (_, b) = backends(script);
    let cfg = config(1, 1);
    let inp = FederationInputs {
        queries: vec!["q0".into(), "q1".into()],
        datasets: vec![vec![demo("q0", "A"), demo("q1", "A")]],
        references: None,
    };
    let state = run_federation(&cfg, &inp, &b, None).unwrap();
    let answers: Vec<&str> = state.clients[0].enriched().iter().map(|d| d.answer.as_str()).collect();
    assert_eq!(answers, ["C", "D"]);
}

#[test]
fn failures_degrade_per_item() {
    // Client 1 has no script: every call fails.
    let (_, b) = backends(scripted(&[(0, 0, "B", 0.3)]).rule(|ctx| {
        (matches!(ctx.kind, CallKind::Refine { .. }) && ctx.role == Role::Client(1)).then(|| MockReply::Raw {
            text: "gibberish".into(),
            uncertainty: 1.0,
        })
    }));
    let state = run_federation(&config(2, 1), &inputs(&["q0"], 2), &b, None).unwrap();
    let subs = &state.history[0].submissions;
    let failed = subs.iter().find(|s| s.client_id == 1).unwrap();
    assert_eq!(failed.answer, UNPARSED);
    assert_eq!(failed.uncertainty, FAILURE_UNCERTAINTY);
    assert_eq!(state.server_queryset[0].answer, "B");
    // unparsable refinement keeps the private pair
    assert_eq!(state.clients[1].enriched()[0], state.clients[1].base()[0]);
    assert_eq!(state.history[0].metrics["unparsed_submissions"], 1.0);
}

#[test]
fn unparsed_aggregate_keeps_previous_record() {
    let (_, b) = backends(scripted(&[(0, 0, "B", 0.3)]).round_override(0, 0, 2, ScriptedReply::new(&[], "?", 0.3)));
    let state = run_federation(&config(1, 2), &inputs(&["q0"], 1), &b, None).unwrap();
    assert_eq!(state.history[1].query_set[0].answer, "B");
    assert_eq!(state.history[1].query_set[0].round, 3);
}

struct Broken;

impl Backend for Broken {
    fn generate(&self, _: &GenerationRequest) -> Result<GenerationResponse> {
        Err(Error::Backend {
            status: Some(500),
            message: "down".into(),
        })
    }

    fn name(&self) -> &str {
        "broken"
    }
}

#[test]
fn server_outage_falls_back_to_voting() {
    let mock = Arc::new(MockBackend::new(scripted(&[(0, 0, "A", 0.1), (1, 0, "B", 2.0)])));
    let b = Backends {
        clients: vec![mock],
        server: Some(Arc::new(Broken)),
        embedder: Arc::new(HashingEmbedder::default()),
    };
    let state = run_federation(&config(2, 1), &inputs(&["q0"], 2), &b, None).unwrap();
    assert_eq!(state.server_queryset[0].answer, "A");
    assert_eq!(state.history[0].metrics["degraded_queries"], 1.0);
}

#[test]
fn missing_server_is_a_config_error() {
    let b = Backends {
        clients: vec![Arc::new(MockBackend::new(MockScript::new(TaskKind::MultipleChoice)))],
        server: None,
        embedder: Arc::new(HashingEmbedder::default()),
    };
    let err = run_federation(&config(1, 1), &inputs(&["q0"], 1), &b, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let zero = config(1, 0);
    assert!(matches!(
        run_federation(&zero, &inputs(&["q0"], 1), &b, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn full_scale_submission_count() {
    let queries: Vec<String> = (0..70).map(|i| format!("question {i}")).collect();
    let inp = FederationInputs {
        references: Some((0..70).map(|i| ["A", "B", "C", "D"][i % 4].to_string()).collect()),
        datasets: (0..3).map(|c| vec![demo(&format!("private {c}"), "A")]).collect(),
        queries,
    };
    let script = scenario::knobs_script(&inp, TaskKind::MultipleChoice, &[], 0.7, 0.9, 4);
    let (_, b) = backends(script);
    let state = run_federation(&config(3, 1), &inp, &b, None).unwrap();
    assert_eq!(state.history[0].submissions.len(), 210);
    assert_eq!(state.history[0].weights.len(), 210);
    for sum in state.history[0].weight_sums().values() {
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ladder_accuracy_climbs() {
    let s = scenario::ladder(5, 3, 4);
    let (_, b) = backends(s.script.clone());
    let state = run_federation(&s.config, &s.inputs, &b, None).unwrap();
    let curve = FederationReport::from_state(&state, &s.config)
        .accuracy_curve()
        .unwrap();
    let want = [0.2, 0.4, 0.6, 0.8, 1.0];
    for (got, want) in curve.iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{curve:?}");
    }
}

#[test]
fn query_set_is_stable_and_rounds_contiguous() {
    let s = scenario::ladder(4, 2, 3);
    let (_, b) = backends(s.script.clone());
    let state = run_federation(&s.config, &s.inputs, &b, None).unwrap();
    let rounds: Vec<usize> = state.history.iter().map(|h| h.round).collect();
    assert_eq!(rounds, [1, 2, 3]);
    for snap in &state.history {
        let texts: Vec<&str> = snap.query_set.iter().map(|r| r.query.as_str()).collect();
        assert_eq!(texts, s.inputs.queries.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

#[test]
fn snapshots_are_byte_identical_across_runs() {
    let s = scenario::ladder(4, 3, 3);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let (_, b) = backends(s.script.clone());
        run_federation(&s.config, &s.inputs, &b, Some(dir.path())).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let first = run();
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["report.json", "round_1.json", "round_2.json", "round_3.json"]);
    assert_eq!(first, run());
}

#[test]
fn snapshots_round_trip_from_disk() {
    let s = scenario::ladder(3, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let (_, b) = backends(s.script.clone());
    let state = run_federation(&s.config, &s.inputs, &b, Some(dir.path())).unwrap();
    let loaded = crate::datamodel::load_round(dir.path().join("round_2.json")).unwrap();
    assert_eq!(loaded, state.history[1]);
    let report = FederationReport::load(dir.path().join("report.json")).unwrap();
    assert_eq!(report.rounds.len(), 2);
}

#[test]
fn submissions_never_carry_private_queries() {
    const TAG: &str = "PRIVATE-TAG-7f3e";
    let script = MockScript::new(TaskKind::MultipleChoice).rule(|ctx| {
        Some(MockReply::Scripted(ScriptedReply::new(
            &["Reasoned from examples."],
            "B",
            0.4 + ctx.round as f64 * 0.01,
        )))
    });
    let (_, b) = backends(script);
    let cfg = config(1, 1);
    let client = ClientDataset::new(0, vec![demo(&format!("{TAG} secret question"), "C")]);
    let query_set = vec![QueryRecord {
        query_id: 0,
        query: "public question".into(),
        steps: vec![],
        answer: "A".into(),
        round: 1,
    }];
    let message = WireMessage::Distribute { round: 1, query_set };
    let (refined, reply) = client_step(&client, &message, b.client(0), b.embedder.as_ref(), &cfg).unwrap();
    assert!(refined.enriched()[0].query.contains(TAG));
    let payload = serde_json::to_string(&reply).unwrap();
    assert!(!payload.contains(TAG), "{payload}");
    assert!(matches!(reply, WireMessage::Submit { client_id: 0, .. }));
}

#[test]
fn partial_participation_is_seeded() {
    let cfg = FederationConfig {
        participation: Some(2),
        num_clients: 5,
        seed: 3,
        ..Default::default()
    };
    let a = participants(&cfg, 1);
    assert_eq!(a.len(), 2);
    assert_eq!(a, participants(&cfg, 1));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    let all = participants(
        &FederationConfig {
            num_clients: 4,
            ..Default::default()
        },
        1,
    );
    assert_eq!(all, [0, 1, 2, 3]);

    let s = scenario::ladder(3, 5, 2);
    let cfg = FederationConfig {
        participation: Some(2),
        ..s.config.clone()
    };
    let (_, b) = backends(s.script.clone());
    let state = run_federation(&cfg, &s.inputs, &b, None).unwrap();
    assert_eq!(state.history[0].submissions.len(), 2 * 3);
}
