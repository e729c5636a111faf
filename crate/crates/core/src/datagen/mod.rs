//! Synthetic corpus and the dataset construction pipeline.
//!
//! A seeded world of slides and patches stands in for real whole-slide
//! images. From it we build a pretraining pool (up to 100 patches per slide),
//! an instruction set (10 patches per slide, three-section answers over ten
//! subtasks), a multiple-choice / true-false RL set with a held-out eval
//! split, and a cold-start subset favouring long answers with balanced
//! categories.

mod files;
pub mod templates;

pub use files::{load_dataset, write_dataset, Manifest, SplitInfo, MANIFEST_FILE};
pub use templates::{ClassLexicon, QuestionBackend, SubtaskTag, TemplateBackend};

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PromptContext, Vocabulary};
use crate::rewards::GoldAnswer;
use templates::{describe, DescriptionTerms, PatchView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub slides: usize,
    pub patches_per_slide: usize,
    pub classes: usize,
    pub noise: f64,
    pub feature_a_dim: usize,
    pub feature_b_dim: usize,
    pub pretrain_per_slide: usize,
    pub sft_per_slide: usize,
    pub rl_records: usize,
    pub mcq_options: usize,
    pub mcq_fraction: f64,
    pub eval_fraction: f64,
    pub cold_start: usize,
    pub analysis_sentences: usize,
    pub pretrain_questions: Vec<String>,
    pub subtasks: Vec<SubtaskTag>,
    pub lexicons: Vec<ClassLexicon>,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            slides: 50,
            patches_per_slide: 100,
            classes: 4,
            noise: 0.15,
            feature_a_dim: 8,
            feature_b_dim: 8,
            pretrain_per_slide: 100,
            sft_per_slide: 10,
            rl_records: 600,
            mcq_options: 4,
            mcq_fraction: 0.5,
            eval_fraction: 0.2,
            cold_start: 200,
            analysis_sentences: 7,
            pretrain_questions: templates::default_pretrain_questions(),
            subtasks: templates::default_subtasks(),
            lexicons: templates::default_lexicons(),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > self.lexicons.len() {
            return bad(format!(
                "classes must be in [2, {}], got {}",
                self.lexicons.len(),
                self.classes
            ));
        }
        if self.mcq_options < 2 || self.mcq_options > 4 || self.mcq_options > self.classes {
            return bad(format!(
                "mcq_options must be in [2, min(4, classes)], got {}",
                self.mcq_options
            ));
        }
        if !(0.0..=1.0).contains(&self.mcq_fraction) || !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("mcq_fraction must be in [0,1] and eval_fraction in [0,1)".into());
        }
        if self.slides == 0 || self.patches_per_slide < 10 {
            return bad("need at least one slide and 10 patches per slide".into());
        }
        if self.subtasks.is_empty() || self.pretrain_questions.is_empty() {
            return bad("subtask and pretrain question lists must be non-empty".into());
        }
        if self.feature_a_dim == 0 || self.feature_b_dim == 0 || !(self.noise >= 0.0) {
            return bad("feature dimensions must be positive and noise non-negative".into());
        }
        Ok(())
    }

    fn active_lexicons(&self) -> &[ClassLexicon] {
        &self.lexicons[..self.classes]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    pub feature_a: Vec<f64>,
    pub feature_b: Vec<f64>,
    pub description: String,
    pub class: usize,
    pub terms: DescriptionTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlide {
    pub id: usize,
    pub patches: Vec<Patch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub slides: Vec<SyntheticSlide>,
    pub centroids_a: Vec<Vec<f64>>,
    pub centroids_b: Vec<Vec<f64>>,
    pub lexicons: Vec<ClassLexicon>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Sft,
    Rl,
    Eval,
}

/// One basic VQA pair of the pretraining pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub id: String,
    pub slide_id: usize,
    pub patch_id: usize,
    pub feature_a: Vec<f64>,
    pub feature_b: Vec<f64>,
    pub question: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub slide_id: usize,
    pub patch_id: usize,
    pub prompt_tokens: Vec<usize>,
    pub feature_a: Vec<f64>,
    pub feature_b: Vec<f64>,
    pub question: String,
    pub answer_space: Vec<String>,
    pub gold: GoldAnswer,
    pub category: String,
    pub split: Split,
}

impl QARecord {
    pub fn context(&self) -> PromptContext {
        PromptContext {
            prompt: self.prompt_tokens.clone(),
            feature_a: self.feature_a.clone(),
            feature_b: self.feature_b.clone(),
        }
    }

    pub fn answer_token_count(&self) -> usize {
        self.gold.full_text.split_whitespace().count()
    }
}

/// All splits plus the shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub pretrain: Vec<PretrainPair>,
    pub sft: Vec<QARecord>,
    pub rl: Vec<QARecord>,
    pub eval: Vec<QARecord>,
}

/// Independent RNG stream for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut x = seed ^ xxhash_rust::xxh64::xxh64(stream.as_bytes(), 0x5eed);
    x = x.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

pub fn generate_world(seed: u64, config: &DatagenConfig) -> Result<World> {
    config.validate()?;
    let lexicons = config.active_lexicons().to_vec();
    let mut crng = stream_rng(seed, "centroids", 0);
    let mut centroid = |d: usize| -> Vec<f64> { (0..d).map(|_| crng.gen_range(-1.0..1.0)).collect() };
    let centroids_a: Vec<Vec<f64>> = (0..config.classes).map(|_| centroid(config.feature_a_dim)).collect();
    let centroids_b: Vec<Vec<f64>> = (0..config.classes).map(|_| centroid(config.feature_b_dim)).collect();

    let slides = (0..config.slides)
        .map(|s| {
            let mut rng = stream_rng(seed, "slide", s as u64);
            let patches = (0..config.patches_per_slide)
                .map(|p| {
                    let class = rng.gen_range(0..config.classes);
                    let noisy = |c: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
                        c.iter()
                            .map(|&m| m + config.noise * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    };
                    let feature_a = noisy(&centroids_a[class], &mut rng);
                    let feature_b = noisy(&centroids_b[class], &mut rng);
                    let (description, terms) = describe(&lexicons[class], &mut rng);
                    Patch {
                        id: p,
                        feature_a,
                        feature_b,
                        description,
                        class,
                        terms,
                    }
                })
                .collect();
            SyntheticSlide { id: s, patches }
        })
        .collect();
    Ok(World {
        slides,
        centroids_a,
        centroids_b,
        lexicons,
    })
}

/// Up to `per_slide` patches from every slide, sampled without replacement,
/// each paired with a question from the predefined list.
pub fn build_pretrain_pool(world: &World, seed: u64, config: &DatagenConfig) -> Vec<PretrainPair> {
    let mut out = Vec::new();
    for slide in &world.slides {
        let mut rng = stream_rng(seed, "pretrain", slide.id as u64);
        let n = config.pretrain_per_slide.min(slide.patches.len());
        let mut picks = index::sample(&mut rng, slide.patches.len(), n).into_vec();
        picks.sort_unstable();
        for p in picks {
            let patch = &slide.patches[p];
            out.push(PretrainPair {
                id: format!("pretrain-{:06}", out.len()),
                slide_id: slide.id,
                patch_id: patch.id,
                feature_a: patch.feature_a.clone(),
                feature_b: patch.feature_b.clone(),
                question: config.pretrain_questions.choose(&mut rng).unwrap().clone(),
                caption: patch.description.clone(),
            });
        }
    }
    out
}

fn view<'a>(world: &'a World, patch: &'a Patch) -> PatchView<'a> {
    PatchView {
        description: &patch.description,
        terms: &patch.terms,
        class: patch.class,
        lexicons: &world.lexicons,
    }
}

fn record(
    id: String,
    slide: usize,
    patch: &Patch,
    qa: templates::GeneratedQa,
    category: &str,
    split: Split,
) -> QARecord {
    QARecord {
        id,
        slide_id: slide,
        patch_id: patch.id,
        prompt_tokens: Vec::new(),
        feature_a: patch.feature_a.clone(),
        feature_b: patch.feature_b.clone(),
        question: qa.question,
        answer_space: qa.answer_space,
        gold: qa.gold,
        category: category.to_string(),
        split,
    }
}

/// `sft_per_slide` patches per slide with round-robin subtask categories.
/// Patches outside the pretraining pool are preferred when enough remain.
pub fn build_sft_set(
    world: &World,
    seed: u64,
    config: &DatagenConfig,
    pretrain: &[PretrainPair],
    backend: &dyn QuestionBackend,
) -> Vec<QARecord> {
    let used: HashSet<(usize, usize)> = pretrain.iter().map(|p| (p.slide_id, p.patch_id)).collect();
    let tags = &config.subtasks;
    let mut out = Vec::new();
    for slide in &world.slides {
        let mut rng = stream_rng(seed, "sft", slide.id as u64);
        let fresh: Vec<usize> = (0..slide.patches.len())
            .filter(|&p| !used.contains(&(slide.id, p)))
            .collect();
        let n = config.sft_per_slide.min(slide.patches.len());
        let pool: Vec<usize> = if fresh.len() >= n {
            fresh
        } else {
            (0..slide.patches.len()).collect()
        };
        let picks = index::sample(&mut rng, pool.len(), n).into_vec();
        for (j, pi) in picks.into_iter().enumerate() {
            let patch = &slide.patches[pool[pi]];
            let category = &tags[(slide.id + j) % tags.len()].name;
            let qa = backend.instruction_item(&view(world, patch), category, &mut rng);
            out.push(record(
                format!("sft-{:06}", out.len()),
                slide.id,
                patch,
                qa,
                category,
                Split::Sft,
            ));
        }
    }
    out
}

/// Multiple-choice and true/false records over uniformly sampled patches.
/// Returns `(rl, eval)` with the eval split held out by `eval_fraction`.
pub fn build_rl_set(
    world: &World,
    seed: u64,
    config: &DatagenConfig,
    backend: &dyn QuestionBackend,
) -> (Vec<QARecord>, Vec<QARecord>) {
    let n = config.rl_records;
    let n_mcq = (n as f64 * config.mcq_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..n).map(|i| i < n_mcq).collect();
    let mut rng = stream_rng(seed, "rl-kinds", 0);
    kinds.shuffle(&mut rng);

    let mut records: Vec<QARecord> = kinds
        .iter()
        .enumerate()
        .map(|(i, &mcq)| {
            let mut rng = stream_rng(seed, "rl", i as u64);
            let slide = &world.slides[rng.gen_range(0..world.slides.len())];
            let patch = &slide.patches[rng.gen_range(0..slide.patches.len())];
            let v = view(world, patch);
            let (qa, tag) = if mcq {
                (backend.multiple_choice(&v, config.mcq_options, &mut rng), templates::MCQ_TAG)
            } else {
                let corrupt = rng.gen_bool(0.5);
                (backend.true_false(&v, corrupt, &mut rng), templates::TRUE_FALSE_TAG)
            };
            record(String::new(), slide.id, patch, qa, tag, Split::Rl)
        })
        .collect();

    let n_eval = (n as f64 * config.eval_fraction).round() as usize;
    let eval = records.split_off(n - n_eval);
    let name = |mut rs: Vec<QARecord>, prefix: &str, split: Split| {
        for (i, r) in rs.iter_mut().enumerate() {
            r.id = format!("{prefix}-{i:06}");
            r.split = split;
        }
        rs
    };
    (name(records, "rl", Split::Rl), name(eval, "eval", Split::Eval))
}

/// Long-answer, category-balanced subset of the instruction set.
///
/// Each category contributes its `ceil(k / categories)` longest answers
/// (ties by id), the last category is truncated so exactly `k` records are
/// returned, and any shortfall from small categories is filled with the
/// longest remaining records.
pub fn curate_cold_start(sft: &[QARecord], k: usize) -> Result<Vec<QARecord>> {
    if k > sft.len() {
        return Err(Error::InvalidArgument(format!(
            "cold start size {k} exceeds instruction set size {}",
            sft.len()
        )));
    }
    let mut by_cat: BTreeMap<&str, Vec<&QARecord>> = BTreeMap::new();
    for r in sft {
        by_cat.entry(r.category.as_str()).or_default().push(r);
    }
    let longest_first = |a: &&QARecord, b: &&QARecord| {
        b.answer_token_count()
            .cmp(&a.answer_token_count())
            .then_with(|| a.id.cmp(&b.id))
    };
    for recs in by_cat.values_mut() {
        recs.sort_by(longest_first);
    }
    let quota = k.div_ceil(by_cat.len().max(1));
    let mut chosen: Vec<&QARecord> = Vec::with_capacity(k);
    let mut leftovers: Vec<&QARecord> = Vec::new();
    for recs in by_cat.values() {
        let take = quota.min(k - chosen.len()).min(recs.len());
        chosen.extend(&recs[..take]);
        leftovers.extend(&recs[take..]);
    }
    if chosen.len() < k {
        leftovers.sort_by(longest_first);
        let missing = k - chosen.len();
        chosen.extend(&leftovers[..missing]);
    }
    Ok(chosen.into_iter().cloned().collect())
}

fn assign_prompt_tokens(records: &mut [QARecord], vocab: &Vocabulary) {
    for r in records {
        r.prompt_tokens = vocab.encode(&r.question);
    }
}

/// Full pipeline: world, pretrain pool, instruction set, RL and eval splits,
/// and a vocabulary covering every question and answer.
pub fn build_dataset(seed: u64, config: &DatagenConfig, backend: &dyn QuestionBackend) -> Result<Dataset> {
    let world = generate_world(seed, config)?;
    let pretrain = build_pretrain_pool(&world, seed, config);
    let mut sft = build_sft_set(&world, seed, config, &pretrain, backend);
    let (mut rl, mut eval) = build_rl_set(&world, seed, config, backend);
    let texts = pretrain
        .iter()
        .flat_map(|p| [p.question.as_str(), p.caption.as_str()])
        .chain(
            sft.iter()
                .chain(&rl)
                .chain(&eval)
                .flat_map(|r| [r.question.as_str(), r.gold.full_text.as_str()]),
        );
    let vocab = Vocabulary::build(texts);
    for split in [&mut sft, &mut rl, &mut eval] {
        assign_prompt_tokens(split, &vocab);
    }
    Ok(Dataset {
        vocab,
        pretrain,
        sft,
        rl,
        eval,
    })
}

pub fn default_backend(config: &DatagenConfig) -> TemplateBackend {
    TemplateBackend {
        analysis_sentences: config.analysis_sentences,
    }
}
