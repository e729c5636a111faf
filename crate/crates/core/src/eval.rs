//! Accuracy, token recall, format compliance and answer-length statistics.
//!
//! Recall here is token-set recall of the gold observation inside the
//! predicted observation: the share of distinct gold tokens (case-folded,
//! punctuation stripped) that the prediction contains.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::QARecord;
use crate::embedding::{word_tokens, Embedder};
use crate::error::{Error, Result};
use crate::policy::{greedy_decode, PolicyParams, Vocabulary};
use crate::rewards::{
    accuracy_reward, extract_final_answer, format_reward, parse_structured_answer,
    semantic_reward, ACCURACY_REWARD, FORMAT_REWARD,
};

pub fn accuracy(predictions: &[Option<String>], golds: &[String]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions vs gold labels",
            expected: golds.len(),
            actual: predictions.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits: f64 = predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| accuracy_reward(p.as_deref(), g))
        .sum();
    Ok(hits / ACCURACY_REWARD / golds.len() as f64)
}

pub fn recall(pred_text: &str, gold_text: &str) -> f64 {
    let gold: HashSet<String> = word_tokens(gold_text).collect();
    if gold.is_empty() {
        return 1.0;
    }
    let pred: HashSet<String> = word_tokens(pred_text).collect();
    gold.iter().filter(|t| pred.contains(*t)).count() as f64 / gold.len() as f64
}

/// Produces one answer per evaluation record.
pub trait AnswerSource: Sync {
    fn answer(&self, record: &QARecord) -> Result<String>;
}

pub struct GreedyPolicy<'a> {
    pub params: &'a PolicyParams,
    pub vocab: &'a Vocabulary,
    pub max_len: usize,
}

impl AnswerSource for GreedyPolicy<'_> {
    fn answer(&self, record: &QARecord) -> Result<String> {
        Ok(greedy_decode(self.params, self.vocab, &record.context(), self.max_len)?.generated_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub records: usize,
    pub accuracy: f64,
    pub format_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub question: String,
    pub generated: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub format_rate: f64,
    pub mean_semantic: f64,
    pub mean_length: f64,
    pub median_length: f64,
    pub lengths: Vec<usize>,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub transcripts: Vec<Transcript>,
}

struct Scored {
    pred: Option<String>,
    format: f64,
    recall: f64,
    semantic: f64,
    length: usize,
    text: String,
}

fn median(sorted: &[usize]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    }
}

/// Scores one answer per record. Records are processed in parallel and
/// reported in input order.
pub fn evaluate(
    source: &dyn AnswerSource,
    dataset: &[QARecord],
    encoder: &dyn Embedder,
    transcripts: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate: empty dataset".into()));
    }
    let scored: Vec<Scored> = dataset
        .par_iter()
        .map(|r| {
            let text = source.answer(r)?;
            let parsed = parse_structured_answer(&text);
            let pred = if parsed.well_formed {
                extract_final_answer(&parsed.conclusion, &r.answer_space)
            } else {
                None
            };
            Ok(Scored {
                format: format_reward(&parsed),
                recall: recall(&parsed.observation, &r.gold.observation),
                semantic: semantic_reward(&r.gold.observation, &parsed.observation, encoder)?,
                length: text.split_whitespace().count(),
                pred,
                text,
            })
        })
        .collect::<Result<_>>()?;

    let n = dataset.len() as f64;
    let preds: Vec<Option<String>> = scored.iter().map(|s| s.pred.clone()).collect();
    let golds: Vec<String> = dataset.iter().map(|r| r.gold.conclusion_label.clone()).collect();
    let lengths: Vec<usize> = scored.iter().map(|s| s.length).collect();
    let mut sorted = lengths.clone();
    sorted.sort_unstable();

    let mut per_category: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (r, s) in dataset.iter().zip(&scored) {
        let e = per_category.entry(r.category.clone()).or_default();
        e.0 += 1;
        e.1 += accuracy_reward(s.pred.as_deref(), &r.gold.conclusion_label) / ACCURACY_REWARD;
        e.2 += s.format / FORMAT_REWARD;
    }

    Ok(EvalReport {
        records: dataset.len(),
        accuracy: accuracy(&preds, &golds)?,
        recall: scored.iter().map(|s| s.recall).sum::<f64>() / n,
        format_rate: scored.iter().map(|s| s.format).sum::<f64>() / FORMAT_REWARD / n,
        mean_semantic: scored.iter().map(|s| s.semantic).sum::<f64>() / n,
        mean_length: lengths.iter().sum::<usize>() as f64 / n,
        median_length: median(&sorted),
        per_category: per_category
            .into_iter()
            .map(|(k, (c, acc, fmt))| {
                (
                    k,
                    CategoryStats {
                        records: c,
                        accuracy: acc / c as f64,
                        format_rate: fmt / c as f64,
                    },
                )
            })
            .collect(),
        transcripts: dataset
            .iter()
            .zip(&scored)
            .take(transcripts)
            .map(|(r, s)| Transcript {
                id: r.id.clone(),
                question: r.question.clone(),
                generated: s.text.clone(),
                gold: r.gold.full_text.clone(),
            })
            .collect(),
        lengths,
    })
}

/// Greedy-decodes every record with the given policy and scores the answers.
pub fn evaluate_model(
    params: &PolicyParams,
    vocab: &Vocabulary,
    dataset: &[QARecord],
    encoder: &dyn Embedder,
    max_len: usize,
) -> Result<EvalReport> {
    evaluate(
        &GreedyPolicy {
            params,
            vocab,
            max_len,
        },
        dataset,
        encoder,
        5,
    )
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "records        {}", self.records);
        let _ = writeln!(s, "accuracy       {:.4}", self.accuracy);
        let _ = writeln!(s, "recall         {:.4}", self.recall);
        let _ = writeln!(s, "format_rate    {:.4}", self.format_rate);
        let _ = writeln!(s, "mean_semantic  {:.4}", self.mean_semantic);
        let _ = writeln!(s, "length mean    {:.2}  median {:.1}", self.mean_length, self.median_length);
        let _ = writeln!(s, "{:<26} {:>7} {:>9} {:>8}", "category", "records", "accuracy", "format");
        for (k, c) in &self.per_category {
            let _ = writeln!(s, "{:<26} {:>7} {:>9.4} {:>8.4}", k, c.records, c.accuracy, c.format_rate);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let g: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let all: Vec<Option<String>> = g.iter().cloned().map(Some).collect();
        assert_eq!(accuracy(&all, &g).unwrap(), 1.0);
        assert_eq!(accuracy(&[None, None, None, None], &g).unwrap(), 0.0);
        let three = vec![Some("a".into()), Some("B".into()), Some("c".into()), Some("A".into())];
        assert_eq!(accuracy(&three, &g).unwrap(), 0.75);
        assert!(accuracy(&three[..2], &g).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall("tumor cells present", "tumor cells present"), 1.0);
        assert_eq!(recall("stroma", "tumor cells"), 0.0);
        assert!((recall("tumor present", "tumor cells present") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall("anything", ""), 1.0);
        assert_eq!(recall("present tumor tumor", "Tumor, present."), 1.0);
    }
}
