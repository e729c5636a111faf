//! Rule-based question and answer templates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::vocab::{ANALYSIS, CONCLUSION, LETTER_LABELS, NO, OBSERVATION, YES};
use crate::rewards::GoldAnswer;

/// Descriptive vocabulary of one latent tissue class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLexicon {
    pub name: String,
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
}

fn lex(name: &str, nouns: &[&str], adjectives: &[&str]) -> ClassLexicon {
    ClassLexicon {
        name: name.into(),
        nouns: nouns.iter().map(|s| s.to_string()).collect(),
        adjectives: adjectives.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn default_lexicons() -> Vec<ClassLexicon> {
    vec![
        lex(
            "glandular",
            &["glands", "lumens", "acini", "epithelium"],
            &["crowded", "branching", "columnar", "cribriform"],
        ),
        lex(
            "stromal",
            &["fibroblasts", "collagen", "bundles", "matrix"],
            &["spindled", "dense", "wavy", "hyalinized"],
        ),
        lex(
            "necrotic",
            &["debris", "karyorrhexis", "remnants", "exudate"],
            &["eosinophilic", "granular", "anucleate", "fragmented"],
        ),
        lex(
            "lymphoid",
            &["lymphocytes", "follicles", "aggregates", "infiltrates"],
            &["small", "round", "basophilic", "monotonous"],
        ),
        lex(
            "adipose",
            &["adipocytes", "vacuoles", "septa", "lobules"],
            &["clear", "polygonal", "thin", "empty"],
        ),
        lex(
            "mucinous",
            &["mucin", "pools", "goblet", "strands"],
            &["pale", "floating", "bluish", "extracellular"],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskTag {
    pub name: String,
    pub domain: String,
}

pub const MCQ_TAG: &str = "diagnosis-mcq";
pub const TRUE_FALSE_TAG: &str = "diagnosis-true-false";

/// Ten subtasks grouped under four domains.
pub fn default_subtasks() -> Vec<SubtaskTag> {
    [
        ("morphology-description", "morphology"),
        ("cell-morphology", "morphology"),
        ("tissue-architecture", "morphology"),
        ("tissue-type", "diagnosis"),
        (MCQ_TAG, "diagnosis"),
        (TRUE_FALSE_TAG, "diagnosis"),
        ("grading", "grading"),
        ("atypia-assessment", "grading"),
        ("differential-diagnosis", "clinical"),
        ("report-summary", "clinical"),
    ]
    .iter()
    .map(|(n, d)| SubtaskTag {
        name: n.to_string(),
        domain: d.to_string(),
    })
    .collect()
}

/// Generic questions for pretraining pairs. Replaceable through config.
pub fn default_pretrain_questions() -> Vec<String> {
    [
        "describe this image",
        "what do you see in this patch ?",
        "summarize the histology of this region",
        "what tissue is shown here ?",
        "describe the visible structures",
        "give a short description of this patch",
        "what are the main findings in this image ?",
        "characterize the cells in this field",
        "what is the appearance of this tissue ?",
        "provide a caption for this patch",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Words picked for one patch description, reused by the analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionTerms {
    pub pairs: Vec<(String, String)>,
}

pub fn describe(lexicon: &ClassLexicon, rng: &mut impl Rng) -> (String, DescriptionTerms) {
    let mut nouns = lexicon.nouns.clone();
    nouns.shuffle(rng);
    let pairs: Vec<(String, String)> = nouns
        .into_iter()
        .take(3)
        .map(|n| (lexicon.adjectives.choose(rng).unwrap().clone(), n))
        .collect();
    let text = format!("{} tissue with {} {}", lexicon.name, pairs[0].0, pairs[0].1);
    (text, DescriptionTerms { pairs })
}

/// Everything a question backend may look at for one patch.
pub struct PatchView<'a> {
    pub description: &'a str,
    pub terms: &'a DescriptionTerms,
    pub class: usize,
    pub lexicons: &'a [ClassLexicon],
}

/// One generated question with its gold structured answer.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQa {
    pub question: String,
    pub answer_space: Vec<String>,
    pub gold: GoldAnswer,
}

/// Source of questions and structured answers. The built-in implementation
/// is template based; an LLM-backed generator can implement the same trait.
pub trait QuestionBackend: Sync {
    fn instruction_item(&self, patch: &PatchView, category: &str, rng: &mut dyn rand::RngCore) -> GeneratedQa;
    fn multiple_choice(&self, patch: &PatchView, options: usize, rng: &mut dyn rand::RngCore) -> GeneratedQa;
    fn true_false(&self, patch: &PatchView, corrupt: bool, rng: &mut dyn rand::RngCore) -> GeneratedQa;
}

#[derive(Debug, Clone)]
pub struct TemplateBackend {
    /// Extra analysis sentences appended to long-form answers.
    pub analysis_sentences: usize,
}

impl Default for TemplateBackend {
    fn default() -> Self {
        Self { analysis_sentences: 7 }
    }
}

fn structured(observation: &str, analysis: &str, conclusion: &str) -> String {
    format!("{OBSERVATION} {observation} {ANALYSIS} {analysis} {CONCLUSION} {conclusion}")
}

impl TemplateBackend {
    fn long_analysis(&self, patch: &PatchView, category: &str) -> String {
        let name = &patch.lexicons[patch.class].name;
        let p = &patch.terms.pairs;
        let other = &patch.lexicons[(patch.class + 1) % patch.lexicons.len()].name;
        let sentences = [
            format!("the {} {} are the dominant finding in this field", p[0].0, p[0].1),
            format!("together with {} {} this pattern indicates {name} tissue", p[1].0, p[1].1),
            format!("the {} {} further support a {name} pattern", p[2].0, p[2].1),
            format!("no convincing features of {other} tissue are identified"),
            format!("the overall architecture is typical for {name} tissue"),
            format!("the {category} assessment therefore relies on the {} {}", p[0].0, p[0].1),
            "the findings are consistent across the examined region".to_string(),
            format!("the {} {} and {} {} are distributed evenly", p[1].0, p[1].1, p[2].0, p[2].1),
            "no additional abnormality is evident in this patch".to_string(),
        ];
        let n = self.analysis_sentences.clamp(1, sentences.len());
        sentences[..n].join(" . ")
    }
}

fn category_question(category: &str) -> &'static str {
    match category {
        "morphology-description" => "describe the morphology of this patch",
        "cell-morphology" => "what do the cells in this patch look like ?",
        "tissue-architecture" => "how is the tissue in this patch organized ?",
        "tissue-type" => "what type of tissue is shown in this patch ?",
        "grading" => "how would you grade the findings in this patch ?",
        "atypia-assessment" => "is there atypia in this patch and what tissue is it ?",
        "differential-diagnosis" => "what is the most likely diagnosis for this patch ?",
        "report-summary" => "write a short report for this patch",
        _ => "what does this patch show ?",
    }
}

impl QuestionBackend for TemplateBackend {
    fn instruction_item(&self, patch: &PatchView, category: &str, rng: &mut dyn rand::RngCore) -> GeneratedQa {
        match category {
            MCQ_TAG => return self.multiple_choice(patch, 4.min(patch.lexicons.len()), rng),
            TRUE_FALSE_TAG => {
                let corrupt = rng.gen_bool(0.5);
                return self.true_false(patch, corrupt, rng);
            }
            _ => {}
        }
        let name = patch.lexicons[patch.class].name.clone();
        let analysis = self.long_analysis(patch, category);
        let conclusion = format!("the findings are consistent with {name} tissue");
        GeneratedQa {
            question: category_question(category).to_string(),
            answer_space: patch.lexicons.iter().map(|l| l.name.clone()).collect(),
            gold: GoldAnswer {
                observation: patch.description.to_string(),
                conclusion_label: name,
                full_text: structured(patch.description, &analysis, &conclusion),
            },
        }
    }

    fn multiple_choice(&self, patch: &PatchView, options: usize, rng: &mut dyn rand::RngCore) -> GeneratedQa {
        // Options are a window of consecutive classes (cyclically) with the
        // gold class at a uniform position.
        let classes = patch.lexicons.len();
        let gold_pos = rng.gen_range(0..options);
        let order: Vec<usize> = (0..options)
            .map(|i| (patch.class + classes - gold_pos + i) % classes)
            .collect();
        let listing = order
            .iter()
            .zip(LETTER_LABELS)
            .map(|(&c, l)| format!("{l} {}", patch.lexicons[c].name))
            .collect::<Vec<_>>()
            .join(" ");
        let label = LETTER_LABELS[gold_pos].to_string();
        GeneratedQa {
            question: format!("which tissue type best matches this patch ? {listing}"),
            answer_space: LETTER_LABELS[..options].iter().map(|s| s.to_string()).collect(),
            gold: GoldAnswer {
                observation: patch.description.to_string(),
                full_text: structured(
                    patch.description,
                    &format!(
                        "{} last so {} is {label}",
                        patch.lexicons[order[options - 1]].name,
                        patch.lexicons[patch.class].name
                    ),
                    &label,
                ),
                conclusion_label: label,
            },
        }
    }

    fn true_false(&self, patch: &PatchView, corrupt: bool, rng: &mut dyn rand::RngCore) -> GeneratedQa {
        let asserted = if corrupt {
            let others: Vec<usize> = (0..patch.lexicons.len()).filter(|&c| c != patch.class).collect();
            *others.choose(rng).unwrap()
        } else {
            patch.class
        };
        let label = if corrupt { NO } else { YES }.to_string();
        GeneratedQa {
            question: format!(
                "answer yes or no : is this patch {}",
                patch.lexicons[asserted].name
            ),
            answer_space: vec![YES.to_string(), NO.to_string()],
            gold: GoldAnswer {
                observation: patch.description.to_string(),
                full_text: structured(
                    patch.description,
                    &format!(
                        "{} asked and {} seen",
                        patch.lexicons[asserted].name,
                        patch.lexicons[patch.class].name
                    ),
                    &label,
                ),
                conclusion_label: label,
            },
        }
    }
}
