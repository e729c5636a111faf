//! Command-line driver: data generation, the three training stages,
//! evaluation and reward inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, curate_cold_start, default_backend, load_dataset, write_dataset, DatagenConfig, Dataset};
use crate::embedding::{build_embedder, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::eval::GreedyPolicy;
use crate::grpo::{align_train, grpo_train, sft_train, GrpoConfig, SupervisedConfig};
use crate::io::{to_jsonl, write_atomic};
use crate::policy::{load_checkpoint, save_checkpoint, AdapterConfig, Checkpoint, PolicyConfig, PolicyParams};
use crate::rewards::{total_reward, GoldAnswer};

pub const ENV_PREFIX: &str = "PATHRL_";

#[derive(Debug, Parser)]
#[command(name = "pathrl", version, about = "Structured-answer GRPO on a synthetic pathology VQA corpus")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root for data, checkpoints and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData,
    /// Run one training stage, or all three in order.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Start instruction tuning from a fresh initialization instead of the align checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Greedy-decode the eval split and write an evaluation report.
    Eval {
        /// Checkpoint to evaluate; defaults to the latest stage present.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score candidate answers (one per line) against gold records (JSON lines).
    RewardCheck { candidates: PathBuf, golds: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Align,
    Sft,
    Grpo,
    All,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Relative entries resolve against `out`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("run"),
            data: PathBuf::from("data"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl Paths {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join(&self.data)
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.out.join(&self.checkpoints).join(format!("{stage}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.out.join(&self.reports).join(name)
    }
}

/// Policy dimensions not implied by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub projector_hidden: usize,
    pub adapter: Option<AdapterConfig>,
}

impl Default for PolicyDims {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            embed_dim: p.embed_dim,
            hidden_dim: 64,
            projector_hidden: p.projector_hidden,
            adapter: p.adapter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub max_new_tokens: usize,
    pub transcripts: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: 40,
            transcripts: 5,
        }
    }
}

/// Everything one run needs. Stage seeds are taken from the global `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DatagenConfig,
    pub embedding: EmbeddingConfig,
    pub policy: PolicyDims,
    pub align: SupervisedConfig,
    pub sft: SupervisedConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DatagenConfig::default(),
            embedding: EmbeddingConfig::default(),
            policy: PolicyDims::default(),
            align: SupervisedConfig {
                learning_rate: 1e-2,
                batch_size: 32,
                max_steps: 200,
                ..SupervisedConfig::default()
            },
            sft: SupervisedConfig {
                learning_rate: 3e-3,
                max_steps: 3000,
                ..SupervisedConfig::default()
            },
            grpo: GrpoConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.embedding.validate()?;
        self.align.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn policy_config(&self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            embed_dim: self.policy.embed_dim,
            hidden_dim: self.policy.hidden_dim,
            projector_hidden: self.policy.projector_hidden,
            feature_a_dim: self.data.feature_a_dim,
            feature_b_dim: self.data.feature_b_dim,
            adapter: self.policy.adapter,
        }
    }

    pub fn stage_configs(&self) -> (SupervisedConfig, SupervisedConfig, GrpoConfig) {
        let mut align = self.align.clone();
        let mut sft = self.sft.clone();
        let mut grpo = self.grpo.clone();
        align.seed = self.seed;
        sft.seed = self.seed;
        grpo.seed = self.seed;
        (align, sft, grpo)
    }
}

/// Applies `PATHRL_<SECTION>_<KEY>` overrides to a config tree. Values are
/// parsed as TOML values (scalars, arrays, inline tables), falling back to
/// plain strings. Returns the dotted key path each variable was applied to.
pub fn apply_env_overrides(
    tree: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<(String, Vec<String>)>> {
    let mut applied = Vec::new();
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        match set_path(tree, &rest.to_lowercase(), parse_env_value(&raw)) {
            Some(path) => applied.push((name, path)),
            None => return Err(Error::Config(format!("environment variable {name} matches no config key"))),
        }
    }
    Ok(applied)
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Option<Vec<String>> {
    if let Some(slot) = table.get_mut(key) {
        if !slot.is_table() {
            *slot = value;
            return Some(vec![key.to_string()]);
        }
    }
    let mut names: Vec<String> = table.keys().cloned().collect();
    names.sort_by_key(|k| std::cmp::Reverse(k.len()));
    for name in names {
        let Some(rest) = key.strip_prefix(&format!("{name}_")) else {
            continue;
        };
        let Some(toml::Value::Table(inner)) = table.get_mut(&name) else {
            continue;
        };
        let found = set_path(inner, rest, value.clone()).or_else(|| {
            // Optional fields are absent from the serialized tree; the
            // caller verifies the key survives deserialization.
            (!inner.contains_key(rest)).then(|| {
                inner.insert(rest.to_string(), value.clone());
                vec![rest.to_string()]
            })
        });
        if let Some(mut path) = found {
            path.insert(0, name);
            return Some(path);
        }
    }
    None
}

fn lookup<'a>(table: &'a toml::Table, path: &[String]) -> Option<&'a toml::Value> {
    let (first, rest) = path.split_first()?;
    let v = table.get(first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

/// Resolves the run configuration: defaults, then the config file, then
/// environment variables, then command-line flags.
pub fn resolve_config(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let base = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let mut tree = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    let applied = apply_env_overrides(&mut tree, env)?;
    let mut cfg: RunConfig = toml::Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("environment override: {e}")))?;
    let check = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    for (name, path) in applied {
        if lookup(&check, &path).is_none() {
            return Err(Error::Config(format!("environment variable {name} matches no config key")));
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.paths.out = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn env_vars() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), env_vars(), cli.seed, cli.out.as_deref())?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { stage, from_scratch } => cmd_train(&cfg, *stage, *from_scratch),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::RewardCheck { candidates, golds } => cmd_reward_check(&cfg, candidates, golds),
    }
}

fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&cfg.paths.out.join("run_config.toml"), text.as_bytes())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dataset = build_dataset(cfg.seed, &cfg.data, &default_backend(&cfg.data))?;
    let dir = cfg.paths.data_dir();
    let manifest = write_dataset(&dir, &dataset, cfg.seed, &cfg.data)?;
    write_resolved_config(cfg)?;
    println!("wrote {}", dir.display());
    for (name, info) in &manifest.splits {
        println!("  {name:<9} {:>6} records  sha256 {}", info.records, &info.sha256[..16]);
    }
    println!("vocabulary {}", dataset.vocab.len());
    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for r in dataset.sft.iter().chain(&dataset.rl).chain(&dataset.eval) {
        *hist.entry(r.category.as_str()).or_default() += 1;
    }
    println!("categories:");
    for (k, n) in hist {
        println!("  {k:<26} {n:>6}");
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.paths.data_dir();
    if !dir.join(crate::datagen::MANIFEST_FILE).exists() {
        return Err(Error::MissingStage {
            stage: "gen-data".into(),
            path: dir,
        });
    }
    Ok(load_dataset(&dir)?.0)
}

fn load_stage(cfg: &RunConfig, stage: &str, dataset: &Dataset) -> Result<PolicyParams> {
    let path = cfg.paths.checkpoint(stage);
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: stage.into(),
            path,
        });
    }
    let ckpt = load_checkpoint(&path)?;
    check_vocab(&ckpt, dataset, &path)?;
    Ok(ckpt.params)
}

fn check_vocab(ckpt: &Checkpoint, dataset: &Dataset, path: &Path) -> Result<()> {
    if ckpt.vocab != dataset.vocab {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different vocabulary ({} tokens) than the dataset ({} tokens)",
            path.display(),
            ckpt.vocab.len(),
            dataset.vocab.len()
        )));
    }
    Ok(())
}

fn save_stage(cfg: &RunConfig, stage: &str, dataset: &Dataset, params: &PolicyParams) -> Result<PathBuf> {
    let path = cfg.paths.checkpoint(stage);
    save_checkpoint(
        &path,
        &Checkpoint {
            stage: stage.into(),
            vocab: dataset.vocab.clone(),
            params: params.clone(),
        },
    )?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, from_scratch: bool) -> Result<()> {
    let dataset = load_data(cfg)?;
    let (align_cfg, sft_cfg, grpo_cfg) = cfg.stage_configs();
    let policy_cfg = cfg.policy_config(dataset.vocab.len());
    let run_align = matches!(stage, Stage::Align | Stage::All);
    let run_sft = matches!(stage, Stage::Sft | Stage::All);
    let run_grpo = matches!(stage, Stage::Grpo | Stage::All);
    write_resolved_config(cfg)?;

    if run_align {
        let init = PolicyParams::init(&policy_cfg, cfg.seed)?;
        let (params, report) = align_train(&dataset.pretrain, init, &cfg.embedding, &align_cfg)?;
        let path = save_stage(cfg, "align", &dataset, &params)?;
        write_atomic(&cfg.paths.report("align.jsonl"), &to_jsonl(&report.records)?)?;
        println!(
            "align: loss {:.4} -> {:.4} over {} steps; wrote {}",
            report.initial_loss,
            report.final_loss,
            report.records.len(),
            path.display()
        );
    }
    if run_sft {
        let init = if from_scratch && stage == Stage::Sft {
            PolicyParams::init(&policy_cfg, cfg.seed)?
        } else {
            load_stage(cfg, "align", &dataset)?
        };
        let cold = curate_cold_start(&dataset.sft, cfg.data.cold_start)?;
        let (params, report) = sft_train(&cold, &dataset.vocab, init, &sft_cfg)?;
        let path = save_stage(cfg, "sft", &dataset, &params)?;
        write_atomic(&cfg.paths.report("sft.jsonl"), &to_jsonl(&report.records)?)?;
        println!(
            "sft: loss {:.4} -> {:.4} over {} steps on {} records; wrote {}",
            report.initial_loss,
            report.final_loss,
            report.records.len(),
            cold.len(),
            path.display()
        );
    }
    if run_grpo {
        let reference = load_stage(cfg, "sft", &dataset)?;
        let encoder = build_embedder(&cfg.embedding)?;
        let (params, report) = grpo_train(
            &dataset.rl,
            &dataset.vocab,
            reference.clone(),
            &reference,
            encoder.as_ref(),
            &grpo_cfg,
        )?;
        let path = save_stage(cfg, "grpo", &dataset, &params)?;
        write_atomic(&cfg.paths.report("grpo.jsonl"), &report.to_jsonl()?)?;
        let (head, tail) = report.head_tail_mean(0.1, |r| r.mean_reward);
        let (_, fmt) = report.head_tail_mean(0.1, |r| r.format_rate);
        let (_, kl) = report.head_tail_mean(0.1, |r| r.mean_kl);
        println!(
            "grpo: mean reward {head:.4} (first 10%) -> {tail:.4} (last 10%), format rate {fmt:.3}, kl {kl:.4}; wrote {}",
            path.display()
        );
    }
    println!("stage {} done", stage.name());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let dataset = load_data(cfg)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => ["grpo", "sft", "align"]
            .iter()
            .map(|s| cfg.paths.checkpoint(s))
            .find(|p| p.exists())
            .ok_or_else(|| Error::MissingStage {
                stage: "train".into(),
                path: cfg.paths.out.join(&cfg.paths.checkpoints),
            })?,
    };
    let ckpt = load_checkpoint(&path)?;
    check_vocab(&ckpt, &dataset, &path)?;
    let encoder = build_embedder(&cfg.embedding)?;
    let source = GreedyPolicy {
        params: &ckpt.params,
        vocab: &dataset.vocab,
        max_len: cfg.eval.max_new_tokens,
    };
    let report = evaluate(&source, &dataset.eval, encoder.as_ref(), cfg.eval.transcripts)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&cfg.paths.report("eval.json"), &json)?;
    let table = report.table();
    write_atomic(&cfg.paths.report("eval.txt"), table.as_bytes())?;
    println!("checkpoint {} (stage {})", path.display(), ckpt.stage);
    print!("{table}");
    Ok(())
}

/// One line of the gold file accepted by `reward-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLine {
    #[serde(flatten)]
    pub gold: GoldAnswer,
    pub answer_space: Vec<String>,
}

pub fn cmd_reward_check(cfg: &RunConfig, candidates: &Path, golds: &Path) -> Result<()> {
    let cand_text = fs::read_to_string(candidates)?;
    let gold_text = fs::read_to_string(golds)?;
    let cand: Vec<&str> = cand_text.lines().collect();
    let gold: Vec<&str> = gold_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if cand.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} candidates but {} has {} gold records",
            candidates.display(),
            cand.len(),
            golds.display(),
            gold.len()
        )));
    }
    let encoder = build_embedder(&cfg.embedding)?;
    println!("{:>5} {:>7} {:>9} {:>9} {:>7}", "line", "format", "accuracy", "semantic", "total");
    for (i, (c, g)) in cand.iter().zip(&gold).enumerate() {
        let line: GoldLine = serde_json::from_str(g)
            .map_err(|e| Error::InvalidArgument(format!("{} line {}: {e}", golds.display(), i + 1)))?;
        let r = total_reward(c, &line.gold, &line.answer_space, encoder.as_ref())?;
        println!(
            "{:>5} {:>7.4} {:>9.4} {:>9.6} {:>7.4}",
            i + 1,
            r.format,
            r.accuracy,
            r.semantic,
            r.total
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::{LrSchedule, OptimizerKind};

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn precedence_is_flags_then_env_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "seed = 5\n[grpo]\nlearning_rate = 0.5\nkl_beta = 0.1\n").unwrap();
        let cfg = resolve_config(Some(&file), env(&[("PATHRL_GRPO_KL_BETA", "0.2")]), None, None).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.grpo.learning_rate, 0.5);
        assert_eq!(cfg.grpo.kl_beta, 0.2);
        let cfg = resolve_config(Some(&file), env(&[("PATHRL_SEED", "9")]), Some(11), Some(Path::new("x"))).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.paths.out, PathBuf::from("x"));
    }

    #[test]
    fn env_reaches_nested_optional_and_string_keys() {
        let cfg = resolve_config(
            None,
            env(&[
                ("PATHRL_GRPO_MAX_GRAD_NORM", "1.5"),
                ("PATHRL_EMBEDDING_BACKEND", "remote"),
                ("PATHRL_EMBEDDING_REMOTE_ENDPOINT", "http://127.0.0.1:9/embed"),
                ("PATHRL_DATA_MCQ_OPTIONS", "3"),
                ("PATHRL_PATHS_OUT", "elsewhere"),
                ("PATHRL_POLICY_ADAPTER", "{ rank = 2, alpha = 4.0 }"),
            ]),
            None,
            None,
        )
        .unwrap();
        assert_eq!(cfg.grpo.max_grad_norm, Some(1.5));
        assert_eq!(cfg.embedding.remote_endpoint.as_deref(), Some("http://127.0.0.1:9/embed"));
        assert_eq!(cfg.data.mcq_options, 3);
        assert_eq!(cfg.paths.out, PathBuf::from("elsewhere"));
        assert_eq!(cfg.policy.adapter, Some(AdapterConfig { rank: 2, alpha: 4.0 }));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(matches!(
            resolve_config(None, env(&[("PATHRL_NOPE", "1")]), None, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_config(None, env(&[("PATHRL_GRPO_GROUP_SIZE", "many")]), None, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_config(None, env(&[("PATHRL_GRPO_NOT_A_KEY", "1")]), None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "sede = 5\n").unwrap();
        assert!(resolve_config(Some(&file), Vec::new(), None, None).is_err());
    }

    #[test]
    fn stage_seeds_follow_global_seed() {
        let cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        let (a, s, g) = cfg.stage_configs();
        assert_eq!((a.seed, s.seed, g.seed), (42, 42, 42));
        assert_eq!(a.lr_schedule, LrSchedule::Cosine);
        assert_eq!(g.optimizer, OptimizerKind::Adam);
    }
}
