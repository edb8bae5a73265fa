//! Tokenization, hypothesis construction and answer-span marking.

use crate::error::{MulteeError, Result};

pub const ANSWER_BEGIN: &str = "@@@answer";
pub const ANSWER_END: &str = "answer@@@";

/// Lowercases and splits on whitespace and punctuation. The answer markers
/// survive as single tokens.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(marker) = [ANSWER_BEGIN, ANSWER_END]
                .into_iter()
                .find(|m| rest.starts_with(m))
            {
                tokens.push(marker.to_string());
                rest = &rest[marker.len()..];
                continue;
            }
            let first = rest.chars().next().expect("non-empty");
            if is_word_char(first) {
                let end = rest
                    .char_indices()
                    .find(|&(_, c)| !is_word_char(c))
                    .map_or(rest.len(), |(i, _)| i);
                tokens.push(rest[..end].to_string());
                rest = &rest[end..];
            } else {
                tokens.push(first.to_string());
                rest = &rest[first.len_utf8()..];
            }
        }
    }
    if tokens.is_empty() {
        return Err(MulteeError::EmptyText);
    }
    Ok(tokens)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

const BE_AUX: [&str; 4] = ["is", "was", "are", "were"];
const DO_AUX: [&str; 3] = ["do", "does", "did"];

/// Turns a question and a candidate answer into a declarative statement.
///
/// Rules, tried in order:
/// * `who|what <rest>` with a subject gap: `<answer> <rest>`
/// * `who|what do|does|did <rest>`: `<rest> <answer>`
/// * `which <noun> <rest>`: `<answer> <rest>`
/// * `where|when be <subject..> <verb>`: `<subject..> be <verb> in <answer>`
/// * `where|when do|does|did <rest>`: `<rest> in <answer>`
///
/// Anything else falls back to `<question without ?> <answer>`.
pub fn make_hypothesis(question: &str, answer: &str) -> Result<String> {
    let answer = answer.trim();
    let q = question.trim();
    if q.is_empty() || answer.is_empty() {
        return Err(MulteeError::EmptyText);
    }
    let q = q.trim_end_matches('?').trim_end();
    let words: Vec<&str> = q.split_whitespace().collect();
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let join = |ws: &[&str]| ws.join(" ");

    let rule = match lower.first().map(String::as_str) {
        Some("who" | "what") if words.len() >= 2 => {
            if DO_AUX.contains(&lower[1].as_str()) && words.len() >= 3 {
                Some(format!("{} {answer}", join(&words[2..])))
            } else {
                Some(format!("{answer} {}", join(&words[1..])))
            }
        }
        Some("which") if words.len() >= 3 => Some(format!("{answer} {}", join(&words[2..]))),
        Some("where" | "when") if words.len() >= 3 => {
            let aux = lower[1].as_str();
            let rest = &words[2..];
            if BE_AUX.contains(&aux) {
                let (head, verb) = rest.split_at(rest.len() - 1);
                if head.is_empty() {
                    Some(format!("{} {} in {answer}", verb[0], words[1]))
                } else {
                    Some(format!("{} {} {} in {answer}", join(head), words[1], verb[0]))
                }
            } else if DO_AUX.contains(&aux) {
                Some(format!("{} in {answer}", join(rest)))
            } else {
                None
            }
        }
        _ => None,
    };
    Ok(rule.unwrap_or_else(|| format!("{q} {answer}")))
}

/// Wraps the first case-insensitive occurrence of `answer` in answer markers.
/// Text that already carries a marker pair is returned unchanged.
pub fn mark_answer_span(hypothesis: &str, answer: &str) -> Result<String> {
    if hypothesis.contains(ANSWER_BEGIN) && hypothesis.contains(ANSWER_END) {
        return Ok(hypothesis.to_string());
    }
    let answer = answer.trim();
    let not_found = || MulteeError::SpanNotFound {
        text: hypothesis.to_string(),
        answer: answer.to_string(),
    };
    if answer.is_empty() {
        return Err(not_found());
    }
    let (start, end) = find_ignore_case(hypothesis, answer).ok_or_else(not_found)?;
    Ok(format!(
        "{}{ANSWER_BEGIN} {} {ANSWER_END}{}",
        &hypothesis[..start],
        &hypothesis[start..end],
        &hypothesis[end..]
    ))
}

/// Hypothesis with its answer span marked; appends a marked answer when the span is absent.
pub fn marked_hypothesis(question: &str, answer: &str) -> Result<String> {
    let hyp = make_hypothesis(question, answer)?;
    match mark_answer_span(&hyp, answer) {
        Ok(marked) => Ok(marked),
        Err(MulteeError::SpanNotFound { .. }) => {
            Ok(format!("{hyp} {ANSWER_BEGIN} {} {ANSWER_END}", answer.trim()))
        }
        Err(e) => Err(e),
    }
}

fn find_ignore_case(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let needle: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    for (start, _) in haystack.char_indices() {
        let mut it = haystack[start..].char_indices();
        let mut matched = 0;
        let mut end = start;
        let mut buf = Vec::new();
        while matched < needle.len() {
            let Some((off, c)) = it.next() else { break };
            buf.clear();
            buf.extend(c.to_lowercase());
            if needle[matched..].starts_with(&buf) {
                matched += buf.len();
                end = start + off + c.len_utf8();
            } else {
                break;
            }
        }
        if matched == needle.len() {
            return Some((start, end));
        }
    }
    None
}
