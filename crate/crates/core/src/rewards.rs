//! Structured-answer parsing and the three reward terms.
//!
//! A candidate answer earns
//!
//! ```text
//! R = R_format + R_accuracy + R_semantic
//! ```
//!
//! where `R_format` is 0.5 for an `[Observation] .. [Analysis] .. [Conclusion] ..`
//! answer (0 otherwise), `R_accuracy` is 2 when the label extracted from the
//! conclusion matches the gold label (0 otherwise), and `R_semantic` is the
//! cosine between frozen-encoder embeddings of the gold and predicted
//! observation sections.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder};
use crate::error::Result;

pub const FORMAT_REWARD: f64 = 0.5;
pub const ACCURACY_REWARD: f64 = 2.0;
/// Largest composite reward reachable with a non-negative encoder.
pub const MAX_TOTAL_REWARD: f64 = FORMAT_REWARD + ACCURACY_REWARD + 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub observation: String,
    pub analysis: String,
    pub conclusion: String,
    pub well_formed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub semantic: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(format: f64, accuracy: f64, semantic: f64) -> Self {
        Self {
            format,
            accuracy,
            semantic,
            total: format + accuracy + semantic,
        }
    }
}

/// Reference answer for one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub observation: String,
    pub conclusion_label: String,
    pub full_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Observation,
    Analysis,
    Conclusion,
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\[?[ \t]*\b(observation|analysis|conclusion)\b[ \t]*\]?[ \t]*(?::|→|->)?")
            .expect("header regex")
    })
}

fn trim_section(s: &str) -> &str {
    s.trim()
        .trim_end_matches("→")
        .trim_end_matches("->")
        .trim()
}

/// Splits `text` into its three sections. Anything before the first header is
/// ignored. Missing, duplicated, out-of-order or empty sections all yield a
/// malformed (empty) answer.
pub fn parse_structured_answer(text: &str) -> ParsedAnswer {
    let headers: Vec<(Section, usize, usize)> = header_regex()
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).unwrap();
            let section = match c[1].to_ascii_lowercase().as_str() {
                "observation" => Section::Observation,
                "analysis" => Section::Analysis,
                _ => Section::Conclusion,
            };
            (section, whole.start(), whole.end())
        })
        .collect();

    let expected = [Section::Observation, Section::Analysis, Section::Conclusion];
    if headers.len() != 3 || headers.iter().map(|h| h.0).ne(expected) {
        return ParsedAnswer::default();
    }
    let body = |i: usize| {
        let end = headers.get(i + 1).map_or(text.len(), |h| h.1);
        trim_section(&text[headers[i].2..end]).to_string()
    };
    let (observation, analysis, conclusion) = (body(0), body(1), body(2));
    if observation.is_empty() || analysis.is_empty() || conclusion.is_empty() {
        return ParsedAnswer::default();
    }
    ParsedAnswer {
        observation,
        analysis,
        conclusion,
        well_formed: true,
    }
}

pub fn format_reward(parsed: &ParsedAnswer) -> f64 {
    if parsed.well_formed {
        FORMAT_REWARD
    } else {
        0.0
    }
}

/// Case-folded label with punctuation and surrounding whitespace removed.
pub fn canonical_label(label: &str) -> String {
    label
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_letter_label(canon: &str) -> bool {
    canon.chars().count() == 1 && canon.chars().all(|c| c.is_alphabetic())
}

/// Finds the first answer-space label mentioned in `conclusion` and returns
/// it as spelled in `answer_space`.
///
/// Word labels match as whole token sequences. Single-letter labels match as
/// `option X`, `(X)`, `answer is X` / `answer: X`, an uppercase standalone
/// letter, or a conclusion consisting of the letter alone; a lowercase
/// standalone `a` inside running text is read as an article, not a label.
pub fn extract_final_answer(conclusion: &str, answer_space: &[String]) -> Option<String> {
    struct Tok<'a> {
        raw: &'a str,
        canon: String,
        start: usize,
    }
    let toks: Vec<Tok> = conclusion
        .match_indices(|c: char| c.is_alphanumeric())
        .fold(Vec::<(usize, usize)>::new(), |mut spans, (i, s)| {
            match spans.last_mut() {
                Some(last) if last.1 == i => last.1 = i + s.len(),
                _ => spans.push((i, i + s.len())),
            }
            spans
        })
        .into_iter()
        .map(|(a, b)| Tok {
            raw: &conclusion[a..b],
            canon: conclusion[a..b].to_lowercase(),
            start: a,
        })
        .collect();
    if toks.is_empty() {
        return None;
    }

    let labels: Vec<(&String, String, Vec<String>)> = answer_space
        .iter()
        .map(|l| {
            let canon = canonical_label(l);
            let parts = canon.split(' ').map(str::to_string).collect();
            (l, canon, parts)
        })
        .filter(|(_, c, _)| !c.is_empty())
        .collect();

    let letter_ok = |i: usize| -> bool {
        let t = &toks[i];
        if toks.len() == 1 || t.raw.chars().all(|c| c.is_uppercase()) {
            return true;
        }
        if i > 0 && matches!(toks[i - 1].canon.as_str(), "option" | "choice" | "answer") {
            return true;
        }
        if i > 1 && toks[i - 1].canon == "is" && toks[i - 2].canon == "answer" {
            return true;
        }
        let before = conclusion[..t.start].trim_end();
        let after = conclusion[t.start + t.raw.len()..].trim_start();
        before.ends_with('(') && after.starts_with(')')
    };

    for i in 0..toks.len() {
        for (label, canon, parts) in &labels {
            if i + parts.len() > toks.len() {
                continue;
            }
            let hit = parts
                .iter()
                .zip(&toks[i..i + parts.len()])
                .all(|(p, t)| *p == t.canon);
            if !hit {
                continue;
            }
            if is_letter_label(canon) && !letter_ok(i) {
                continue;
            }
            return Some((*label).clone());
        }
    }
    None
}

pub fn accuracy_reward(pred: Option<&str>, gold: &str) -> f64 {
    match pred {
        Some(p) if canonical_label(p) == canonical_label(gold) => ACCURACY_REWARD,
        _ => 0.0,
    }
}

/// Cosine between encoder embeddings of the gold and predicted observations.
pub fn semantic_reward(
    gold_observation: &str,
    pred_observation: &str,
    encoder: &dyn Embedder,
) -> Result<f64> {
    let g = encoder.embed(gold_observation)?;
    let p = encoder.embed(pred_observation)?;
    cosine(&g, &p)
}

pub fn total_reward(
    generated: &str,
    gold: &GoldAnswer,
    answer_space: &[String],
    encoder: &dyn Embedder,
) -> Result<RewardBreakdown> {
    let parsed = parse_structured_answer(generated);
    let format = format_reward(&parsed);
    let pred = if parsed.well_formed {
        extract_final_answer(&parsed.conclusion, answer_space)
    } else {
        None
    };
    let accuracy = accuracy_reward(pred.as_deref(), &gold.conclusion_label);
    let semantic = semantic_reward(&gold.observation, &parsed.observation, encoder)?;
    Ok(RewardBreakdown::new(format, accuracy, semantic))
}
