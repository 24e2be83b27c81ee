//! Prompt templates with `{slot}` placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

use crate::datamodel::{format_answer_sentence, Demonstration, TaskKind};
use crate::error::{Error, Result};

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid slot regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

impl PromptTemplate {
    /// Every `{identifier}` in `body` becomes a required slot.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = SLOT.captures_iter(&body).map(|c| c[1].to_string()).collect();
        PromptTemplate {
            name: name.into(),
            body,
            required_slots,
        }
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String> {
        let map: BTreeMap<String, String> = bindings.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        render_prompt(self, &map)
    }
}

/// Substitutes every slot in one pass; bound values are not re-scanned.
pub fn render_prompt(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    if let Some(missing) = template.required_slots.iter().find(|s| !bindings.contains_key(*s)) {
        return Err(Error::MissingSlot(missing.clone()));
    }
    Ok(SLOT
        .replace_all(&template.body, |c: &regex::Captures| bindings[&c[1]].clone())
        .into_owned())
}

const ZERO_SHOT_MC: &str = "\
You are a knowledgeable assistant. For the following multiple-choice question, briefly explain your reasoning (no more than {sentences_limit} sentences), then end with the exact sentence: The answer is (X).

Rules:
1. X must be the option letter only (A/B/C/D/...). Do not include the option text.
2. Do not include any content after the final sentence.
3. Keep your entire response within {token_limit} tokens.

Question: {query}
Answer: Let's think step by step.";

const ZERO_SHOT_MC_ANSWER_ONLY: &str = "\
You are taking a multiple-choice question. Read the following question carefully and select the single best answer. Do not explain your reasoning. Output only the final answer choice letter (A, B, C, D, ...).

Rules:
1. The output must be a single uppercase letter (A/B/C/D/...) with no punctuation or extra text.
2. Do not include any explanation or content after the answer.
3. Keep the response within {token_limit} tokens.

Question: {query}

Answer:";

const ZERO_SHOT_NUMERIC: &str = "\
You are a knowledgeable assistant. For the following math question, briefly explain your reasoning (no more than {sentences_limit} sentences), then end with the exact sentence: The answer is X.

Rules:
1. X must be a single numeric value (e.g., 12, -3/5, 7.25); no units or extra text.
2. If X is a fraction, reduce it to simplest terms; if a decimal, use standard form without trailing zeros.
3. Do not include any content after the final sentence.
4. Keep the entire response within {token_limit} tokens.

Question: {query}

Answer: Let's think step by step.";

const ZERO_SHOT_NUMERIC_ANSWER_ONLY: &str = "\
You are taking a math question. Read the following question carefully and give only the final numeric answer. Do not explain your reasoning.

Rules:
1. End with the exact sentence: The answer is X.
2. X must be a single numeric value (e.g., 12, -3/5, 7.25); no units or extra text.
3. Keep the response within {token_limit} tokens.

Question: {query}

Answer:";

const PREDICT_MC: &str = "\
You are tasked with answering multiple-choice math questions. Below are several example questions with their step-by-step reasoning and final answers. After reviewing these examples, you will be presented with a new question to answer.

Guidelines:
1. Provide clear, concise, and logically coherent step-by-step reasoning (at most {sentences_limit} sentences).
2. End with the exact sentence: The answer is (X).
3. X must be the option letter only (A, B, C, D, ...); do not include the option text.
4. Include no additional content after the final answer sentence.
5. Keep the complete response within {token_limit} tokens.

Examples:
{examples}

Question:
{query}

Answer: Let's think step by step.";

const PREDICT_MC_ANSWER_ONLY: &str = "\
You are taking a multiple-choice question. Below are several example questions with their final answers. After reviewing these examples, you will be presented with a new question to answer.

Guidelines:
1. Read the question carefully and select the single best answer.
2. Do not explain your reasoning.
3. Output only the final answer choice letter (A, B, C, D, ...); do not include the option text.
4. Do not include any additional content after the answer.

Examples:
{examples}

Question:
{query}

Answer:";

const PREDICT_NUMERIC: &str = "\
You are tasked with answering math questions in this domain. Below are several example questions with their step-by-step reasoning and final answers. After reviewing these examples, you will be presented with a new question to answer.

Guidelines:
1. Provide clear, concise, and logically coherent step-by-step reasoning.
2. End your response with the exact sentence: The answer is X.
3. X must be a single numeric value (e.g., 12, -3/5, 7.25); no units or extra text.
4. If X is a fraction, reduce it to simplest terms; if a decimal, use standard form without trailing zeros.
5. Include no additional content after the final answer sentence.
6. Keep the complete response within {token_limit} tokens.

Examples:
{examples}

Question:
{query}

Answer: Let's think step by step.";

const PREDICT_NUMERIC_ANSWER_ONLY: &str = "\
You are taking a math question. Below are several example questions with their final answers. After reviewing these examples, you will be presented with a new question to answer.

Guidelines:
1. Do not explain your reasoning.
2. End with the exact sentence: The answer is X.
3. X must be a single numeric value (e.g., 12, -3/5, 7.25); no units or extra text.
4. Keep the complete response within {token_limit} tokens.

Examples:
{examples}

Question:
{query}

Answer:";

const SUMMARIZE: &str = "\
You are a cognitive reasoning analyst tasked with examining {count} reasoning responses derived from the following question.

Question:
{question}

Reasoning Responses:
{reasoning_formatted}

Analysis Objective:
Provide a concise analytical characterization of this reasoning cluster. Identify the cognitive patterns, methodological strategies, and structural similarities across the responses.

Characterization Guidelines:
1. Synthesize the distinguishing features of these reasoning responses
2. Emphasize their reasoning methodology and structural organization
3. Identify common problem-solving paradigms across responses
4. Present your analysis within {token_limit} tokens
5. Capture the essential cognitive characteristics of this cluster

Your Analysis:";

const CRITIQUE_MC: &str = "\
You are improving a reasoning response by incorporating insights from conflicting reasoning approaches.

Original Question:
{question}

Target Reasoning Response (to be improved):
{target_response}

Alternative Approaches Summary:
{alternatives_formatted}

Task:
Create an enhanced version of the target reasoning response by incorporating valuable insights from the alternative approaches. Identify reasoning elements, methodologies, or perspectives from the conflicting summaries that could strengthen the original response.

Requirements:
1. Use the target reasoning response as your foundation
2. Extract valuable insights from the alternative approaches
3. Integrate these insights to create a more comprehensive response
4. Maintain logical consistency throughout
5. Present only the final improved reasoning
6. Conclude with: \"The answer is (X)\" where X is the option letter only (A/B/C/D/...)
7. Exclude option text after the letter
8. Limit response to {token_limit} tokens
9. Omit meta-commentary or explanatory analysis

Improved Response:";

const CRITIQUE_NUMERIC: &str = "\
You are improving a reasoning response by incorporating insights from conflicting reasoning approaches.

Original Question:
{question}

Target Reasoning Response (to be improved):
{target_response}

Alternative Approaches Summary:
{alternatives_formatted}

Task:
Create an enhanced version of the target reasoning response by incorporating valuable insights from the alternative approaches. Identify reasoning elements, methodologies, or perspectives from the conflicting summaries that could strengthen the original response.

Requirements:
1. Start with the target reasoning as your foundation
2. Identify useful insights from the conflicting summaries that could improve the reasoning
3. Integrate these insights to create a stronger, more comprehensive reasoning
4. Maintain logical consistency throughout
5. Present only the final improved reasoning
6. End with \"The answer is X\".
7. Limit response to {token_limit} tokens
8. No meta-commentary or analysis explanation

Improved Response:";

const AGGREGATE_MC: &str = "\
You are synthesizing multiple reasoning responses to create a single, unified reasoning path.

Context:
You are given several reasoning responses to the same question, each from a different client. Each response includes a confidence score (higher = more confident).

Question:
{question}

Client Responses (with confidence scores):
{client_entries}

Task:
Produce a single, concise, professional, and logically coherent merged reasoning response that synthesizes the reasoning leading to the final answer.

Requirements:
1. Synthesize the reasoning leading to the final answer
2. Give greater weight to reasoning from higher-confidence responses
3. Avoid unnecessary repetition or irrelevant details
4. Keep the ENTIRE response (reasoning + final answer) within {token_limit} tokens
5. End with: \"The answer is (X)\" where X is the option letter only (A/B/C/D/...)
6. Do not include the option text after the letter
7. Maintain professional and logical coherence throughout

Merged Reasoning Response:";

const AGGREGATE_NUMERIC: &str = "\
You are synthesizing multiple reasoning responses to create a single, unified solution path.

Context:
You are given several reasoning responses to the same question, each from a different client. Each response includes a confidence score (higher = more confident).

Question:
{question}

Client Responses (with confidence scores):
{client_entries}

Task:
Produce a single, concise, professional, and logically coherent merged reasoning response that synthesizes the reasoning leading to the final answer.

Requirements:
1. Synthesize the reasoning leading to the final answer
2. Give greater weight to reasoning from higher-confidence responses
3. Avoid unnecessary repetition or irrelevant details
4. Keep the ENTIRE response (reasoning + final answer) within {token_limit} tokens
5. End with the exact sentence: \"The answer is X.\"
6. X must be a single numeric value (e.g., 12, -3/5, 7.25)
7. No units or extra text after the answer

Merged Reasoning Response:";

macro_rules! builtin {
    ($name:ident, $label:literal, $body:ident) => {
        static $name: LazyLock<PromptTemplate> = LazyLock::new(|| PromptTemplate::new($label, $body));
    };
}

builtin!(T_ZERO_SHOT_MC, "zero_shot_mc", ZERO_SHOT_MC);
builtin!(T_ZERO_SHOT_MC_AO, "zero_shot_mc_answer_only", ZERO_SHOT_MC_ANSWER_ONLY);
builtin!(T_ZERO_SHOT_NUM, "zero_shot_numeric", ZERO_SHOT_NUMERIC);
builtin!(
    T_ZERO_SHOT_NUM_AO,
    "zero_shot_numeric_answer_only",
    ZERO_SHOT_NUMERIC_ANSWER_ONLY
);
builtin!(T_PREDICT_MC, "predict_mc", PREDICT_MC);
builtin!(T_PREDICT_MC_AO, "predict_mc_answer_only", PREDICT_MC_ANSWER_ONLY);
builtin!(T_PREDICT_NUM, "predict_numeric", PREDICT_NUMERIC);
builtin!(
    T_PREDICT_NUM_AO,
    "predict_numeric_answer_only",
    PREDICT_NUMERIC_ANSWER_ONLY
);
builtin!(T_SUMMARIZE, "summarize", SUMMARIZE);
builtin!(T_CRITIQUE_MC, "critique_mc", CRITIQUE_MC);
builtin!(T_CRITIQUE_NUM, "critique_numeric", CRITIQUE_NUMERIC);
builtin!(T_AGGREGATE_MC, "aggregate_mc", AGGREGATE_MC);
builtin!(T_AGGREGATE_NUM, "aggregate_numeric", AGGREGATE_NUMERIC);

/// Zero-shot prompt used to seed the server query set.
pub fn zero_shot_template(kind: TaskKind, answer_only: bool) -> &'static PromptTemplate {
    match (kind, answer_only) {
        (TaskKind::MultipleChoice, false) => &T_ZERO_SHOT_MC,
        (TaskKind::MultipleChoice, true) => &T_ZERO_SHOT_MC_AO,
        (TaskKind::Numeric, false) => &T_ZERO_SHOT_NUM,
        (TaskKind::Numeric, true) => &T_ZERO_SHOT_NUM_AO,
    }
}

/// Few-shot client prediction prompt (refinement and labeling).
pub fn prediction_template(kind: TaskKind, answer_only: bool) -> &'static PromptTemplate {
    match (kind, answer_only) {
        (TaskKind::MultipleChoice, false) => &T_PREDICT_MC,
        (TaskKind::MultipleChoice, true) => &T_PREDICT_MC_AO,
        (TaskKind::Numeric, false) => &T_PREDICT_NUM,
        (TaskKind::Numeric, true) => &T_PREDICT_NUM_AO,
    }
}

pub fn summarize_template() -> &'static PromptTemplate {
    &T_SUMMARIZE
}

pub fn critique_template(kind: TaskKind) -> &'static PromptTemplate {
    match kind {
        TaskKind::MultipleChoice => &T_CRITIQUE_MC,
        TaskKind::Numeric => &T_CRITIQUE_NUM,
    }
}

pub fn aggregate_template(kind: TaskKind) -> &'static PromptTemplate {
    match kind {
        TaskKind::MultipleChoice => &T_AGGREGATE_MC,
        TaskKind::Numeric => &T_AGGREGATE_NUM,
    }
}

/// Reasoning lines followed by the canonical answer sentence.
pub fn format_response(steps: &[String], answer: &str, kind: TaskKind) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str(step);
        out.push('\n');
    }
    out.push_str(&format_answer_sentence(answer, kind));
    out
}

/// Demonstrations as question/answer blocks for the `{examples}` slot.
pub fn format_examples(demos: &[Demonstration], kind: TaskKind, include_steps: bool) -> String {
    demos
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let steps: &[String] = if include_steps { &d.steps } else { &[] };
            format!(
                "Example {}:\nQuestion: {}\nAnswer: {}",
                i + 1,
                d.query,
                format_response(steps, &d.answer, kind)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Numbered blocks, e.g. `Response 1:` / `Summary 2:`.
pub fn format_numbered(label: &str, items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{label} {}:\n{t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Traces annotated with their weight, rendered to four decimals.
pub fn format_client_entries(entries: &[(usize, String, f64)]) -> String {
    entries
        .iter()
        .map(|(client, text, weight)| format!("Client {client} (confidence: {weight:.4}):\n{text}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_substitution() {
        let t = PromptTemplate::new("t", "Q: {query}");
        assert_eq!(t.render(&[("query", "2+2?")]).unwrap(), "Q: 2+2?");
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new("t", "{a}|{b}");
        assert_eq!(t.render(&[("a", "{b}"), ("b", "x")]).unwrap(), "{b}|x");
    }

    #[test]
    fn summarize_opening() {
        let out = summarize_template()
            .render(&[
                ("count", "2"),
                ("question", "q"),
                ("reasoning_formatted", "r"),
                ("token_limit", "256"),
            ])
            .unwrap();
        assert!(out.starts_with("You are a cognitive reasoning analyst"));
        assert!(!out.contains('{'));
    }

    #[test]
    fn missing_examples_named() {
        let err = prediction_template(TaskKind::MultipleChoice, false)
            .render(&[("query", "q"), ("token_limit", "256"), ("sentences_limit", "5")])
            .unwrap_err();
        assert!(matches!(&err, Error::MissingSlot(s) if s == "examples"), "{err}");
        assert!(err.to_string().contains("examples"));
    }

    #[test]
    fn builtin_openings() {
        assert!(critique_template(TaskKind::Numeric)
            .body
            .starts_with("You are improving a reasoning response"));
        assert!(aggregate_template(TaskKind::MultipleChoice)
            .body
            .starts_with("You are synthesizing multiple reasoning responses"));
        for answer_only in [false, true] {
            for kind in [TaskKind::MultipleChoice, TaskKind::Numeric] {
                let t = prediction_template(kind, answer_only);
                assert!(t.required_slots.contains("examples"));
                assert!(t.required_slots.contains("query"));
                assert!(zero_shot_template(kind, answer_only).required_slots.contains("query"));
            }
        }
    }

    #[test]
    fn example_blocks() {
        let d = Demonstration::new("Which?", vec!["Because.".into()], "B").unwrap();
        let with = format_examples(std::slice::from_ref(&d), TaskKind::MultipleChoice, true);
        assert_eq!(
            with,
            "Example 1:\nQuestion: Which?\nAnswer: Because.\nThe answer is (B)."
        );
        let without = format_examples(&[d], TaskKind::MultipleChoice, false);
        assert!(!without.contains("Because."));
    }

    #[test]
    fn confidence_four_decimals() {
        let s = format_client_entries(&[(0, "t".into(), 0.519_012_3)]);
        assert!(s.contains("confidence: 0.5190"), "{s}");
    }
}
