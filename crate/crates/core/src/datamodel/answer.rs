//! Final-answer extraction and canonicalization.

use std::sync::LazyLock;

use num_integer::Integer;
use regex::Regex;

use super::TaskKind;

/// Sentinel for outputs with no extractable answer. Aggregation treats it
/// as its own answer group.
pub const UNPARSED: &str = "UNPARSED";

static MC_SENTENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)the\s+answer\s+is\s*:?\s*\(?\s*([a-z])\s*\)?(?:[^a-z0-9]|$)").unwrap());
static MC_PAREN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());
static MC_BARE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[\s(\[]*([A-Za-z])[\s)\].:]*$").unwrap());

const NUMBER: &str = r"[-−]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)(?:\s*/\s*[-−]?\d+)?";
static NUM_SENTENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?i)the\s+answer\s+is\s*:?\s*\$?\s*({NUMBER})")).unwrap());
static NUM_ANY: LazyLock<Regex> = LazyLock::new(|| Regex::new(NUMBER).unwrap());
static ANSWER_CUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)the\s+answer\s+is").unwrap());

/// Extracts the final answer from model output or a dataset label.
///
/// The last `The answer is ...` sentence wins. Without one, the last
/// parenthesized option letter (or a bare letter) is used for multiple
/// choice, and the last number for numeric tasks. Returns [`UNPARSED`] when
/// nothing matches. Idempotent.
pub fn normalize_answer(raw: &str, kind: TaskKind) -> String {
    let found = match kind {
        TaskKind::MultipleChoice => last_capture(&MC_SENTENCE, raw)
            .or_else(|| last_capture(&MC_PAREN, raw))
            .or_else(|| last_capture(&MC_BARE, raw))
            .map(|s| s.to_ascii_uppercase()),
        TaskKind::Numeric => last_capture(&NUM_SENTENCE, raw).and_then(canonical_number).or_else(|| {
            NUM_ANY
                .find_iter(raw)
                .filter_map(|m| canonical_number(m.as_str()))
                .last()
        }),
    };
    found.unwrap_or_else(|| UNPARSED.to_string())
}

fn last_capture<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.captures_iter(text).last().and_then(|c| c.get(1)).map(|m| m.as_str())
}

/// Canonical numeric form: fractions reduced, no trailing zeros, no
/// thousands separators.
fn canonical_number(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| if c == '−' { '-' } else { c })
        .collect();
    if let Some((num, den)) = cleaned.split_once('/') {
        let num: i128 = num.parse().ok()?;
        let den: i128 = den.parse().ok()?;
        if den == 0 {
            return None;
        }
        let g = num.gcd(&den);
        let (mut n, mut d) = (num / g, den / g);
        if d < 0 {
            n = -n;
            d = -d;
        }
        return Some(if d == 1 { n.to_string() } else { format!("{n}/{d}") });
    }
    let (negative, digits) = match cleaned.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, cleaned.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let frac_part = frac_part.trim_end_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let body = if frac_part.is_empty() {
        int_part.to_string()
    } else {
        format!("{int_part}.{frac_part}")
    };
    Some(if negative && body != "0" {
        format!("-{body}")
    } else {
        body
    })
}

/// Reasoning steps of a model output: the non-empty lines preceding the
/// final answer sentence.
pub fn extract_steps(text: &str) -> Vec<String> {
    let body = match ANSWER_CUE.find_iter(text).last() {
        Some(m) => &text[..m.start()],
        None => text,
    };
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// The closing sentence the prompts ask for.
pub fn format_answer_sentence(answer: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::MultipleChoice => format!("The answer is ({answer})."),
        TaskKind::Numeric => format!("The answer is {answer}."),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const MC: TaskKind = TaskKind::MultipleChoice;
    const NUM: TaskKind = TaskKind::Numeric;

    #[test]
    fn multiple_choice_sentence() {
        assert_eq!(normalize_answer("…so it rises. The answer is (C).", MC), "C");
        assert_eq!(normalize_answer("the answer is (b)", MC), "B");
        assert_eq!(
            normalize_answer("The answer is (A). Wait, no. The answer is (D).", MC),
            "D"
        );
        assert_eq!(normalize_answer("The answer is E", MC), "E");
    }

    #[test]
    fn multiple_choice_fallbacks() {
        assert_eq!(normalize_answer("(B)", MC), "B");
        assert_eq!(normalize_answer("B", MC), "B");
        assert_eq!(normalize_answer("Options (A) or (C); I pick (C)", MC), "C");
        assert_eq!(normalize_answer("I cannot decide.", MC), UNPARSED);
        assert_eq!(normalize_answer("The answer is apples", MC), UNPARSED);
        assert_eq!(normalize_answer("", MC), UNPARSED);
    }

    #[test]
    fn numeric_forms() {
        assert_eq!(normalize_answer("The answer is 7.250", NUM), "7.25");
        assert_eq!(normalize_answer("The answer is 12.", NUM), "12");
        assert_eq!(normalize_answer("The answer is 6/10.", NUM), "3/5");
        assert_eq!(normalize_answer("The answer is -3/5", NUM), "-3/5");
        assert_eq!(normalize_answer("The answer is 4/-2", NUM), "-2");
        assert_eq!(normalize_answer("The answer is $1,250.00.", NUM), "1250");
        assert_eq!(normalize_answer("The answer is .50", NUM), "0.5");
        assert_eq!(normalize_answer("The answer is -0.0", NUM), "0");
        assert_eq!(normalize_answer("007", NUM), "7");
    }

    #[test]
    fn numeric_fallback_takes_last_number() {
        assert_eq!(normalize_answer("3 apples plus 4 apples is 7", NUM), "7");
        assert_eq!(normalize_answer("I cannot decide.", NUM), UNPARSED);
        assert_eq!(normalize_answer("divide by 1/0", NUM), UNPARSED);
    }

    #[test]
    fn steps_exclude_answer_sentence() {
        let text = "Tomatoes come from flowers.\n\nThey contain seeds.\nThe answer is (A).";
        assert_eq!(
            extract_steps(text),
            vec!["Tomatoes come from flowers.", "They contain seeds."]
        );
        assert!(extract_steps("The answer is 4.").is_empty());
        assert_eq!(extract_steps("one\ntwo"), vec!["one", "two"]);
    }

    #[test]
    fn sentinel_is_stable() {
        assert_eq!(normalize_answer(UNPARSED, MC), UNPARSED);
        assert_eq!(normalize_answer(UNPARSED, NUM), UNPARSED);
    }

    proptest! {
        #[test]
        fn idempotent_mc(s in ".{0,60}") {
            let once = normalize_answer(&s, MC);
            prop_assert_eq!(normalize_answer(&once, MC), once);
        }

        #[test]
        fn idempotent_numeric(s in "[ a-zA-Z0-9.,/$()-]{0,40}") {
            let once = normalize_answer(&s, NUM);
            prop_assert_eq!(normalize_answer(&once, NUM), once);
        }

        #[test]
        fn numeric_sentence_roundtrip(n in -100000i64..100000, d in 1i64..1000) {
            let text = format!("The answer is {n}/{d}.");
            let once = normalize_answer(&text, NUM);
            prop_assert_eq!(normalize_answer(&format_answer_sentence(&once, NUM), NUM), once);
        }
    }
}
