use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pathrl::datagen::Manifest;

const SMALL: &str = r#"
seed = 5

[data]
slides = 3
patches_per_slide = 20
pretrain_per_slide = 10
sft_per_slide = 10
rl_records = 20
cold_start = 10

[policy]
embed_dim = 4
hidden_dim = 8
projector_hidden = 8

[align]
max_steps = 3
batch_size = 4

[sft]
max_steps = 3
batch_size = 4

[grpo]
max_steps = 2
batch_size = 2
max_new_tokens = 8

[eval]
max_new_tokens = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pathrl"));
    c.env_clear();
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    let out = dir.join("run");
    bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn err(o: &Output) -> String {
    assert!(!o.status.success());
    let e = String::from_utf8(o.stderr.clone()).unwrap();
    assert!(e.starts_with("error: "), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
    e
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&fs::read(dir.join("run/data/manifest.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout = ok(&run(a.path(), &["gen-data"]));
    assert!(stdout.contains("categories:"));
    ok(&run(b.path(), &["gen-data"]));
    for f in ["pretrain.jsonl", "sft.jsonl", "rl.jsonl", "eval.jsonl", "manifest.json"] {
        assert!(a.path().join("run/data").join(f).exists(), "{f}");
    }
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma.splits, mb.splits);
    assert_eq!(ma.seed, 5);
    ok(&run(a.path(), &["gen-data"]));
    assert_eq!(manifest(a.path()).splits, ma.splits);
    ok(&run(b.path(), &["--seed", "6", "gen-data"]));
    assert_ne!(manifest(b.path()).splits, ma.splits);
}

#[test]
fn training_pipeline_and_eval() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&run(d, &["gen-data"]));
        let out = ok(&run(d, &["train", "--stage", "all"]));
        assert!(out.contains("stage all done"), "{out}");
    }
    for stage in ["align", "sft", "grpo"] {
        let rel = format!("run/checkpoints/{stage}.ckpt");
        let (x, y) = (fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
        assert_eq!(x, y, "{stage} checkpoint differs between identical runs");
        assert!(a.path().join(format!("run/reports/{stage}.jsonl")).exists());
    }
    let first = ok(&run(a.path(), &["eval"]));
    assert!(first.contains("stage grpo"));
    let report = fs::read(a.path().join("run/reports/eval.json")).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert!(v["accuracy"].is_number() && v["format_rate"].is_number());
    ok(&run(a.path(), &["eval"]));
    assert_eq!(fs::read(a.path().join("run/reports/eval.json")).unwrap(), report);

    let ckpt = a.path().join("run/checkpoints/sft.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, &bytes).unwrap();
    let e = err(&run(a.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    assert!(e.contains("integrity"), "{e}");
}

#[test]
fn stage_prerequisites_are_enforced() {
    let d = tempfile::tempdir().unwrap();
    let e = err(&run(d.path(), &["train", "--stage", "align"]));
    assert!(e.contains("gen-data"), "{e}");
    ok(&run(d.path(), &["gen-data"]));
    let e = err(&run(d.path(), &["train", "--stage", "grpo"]));
    assert!(e.contains("sft"), "{e}");
    let e = err(&run(d.path(), &["train", "--stage", "sft"]));
    assert!(e.contains("align"), "{e}");
    ok(&run(d.path(), &["train", "--stage", "sft", "--from-scratch"]));
    ok(&run(d.path(), &["train", "--stage", "grpo"]));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(&run(d.path(), &["gen-data"]));
    ok(&run(d.path(), &["train", "--stage", "align"]));
    ok(&run(d.path(), &["--seed", "99", "gen-data"]));
    let e = err(&run(d.path(), &["--seed", "99", "eval"]));
    assert!(e.contains("vocabulary"), "{e}");
}

#[test]
fn malformed_config_leaves_nothing_behind() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[data]\nslides = \"many\"\n").unwrap();
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("run"))
        .arg("gen-data")
        .output()
        .unwrap();
    err(&o);
    assert!(!d.path().join("run").exists());
    assert_eq!(files_under(d.path()), vec![cfg.clone()]);

    fs::write(&cfg, "[data]\nclasses = 1\n").unwrap();
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("run"))
        .arg("gen-data")
        .output()
        .unwrap();
    err(&o);
    assert_eq!(files_under(d.path()), vec![cfg]);
}

#[test]
fn env_overrides_reach_the_run() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.toml"), SMALL).unwrap();
    let o = bin()
        .env("PATHRL_DATA_RL_RECORDS", "40")
        .arg("--config")
        .arg(d.path().join("small.toml"))
        .arg("--out")
        .arg(d.path().join("run"))
        .arg("gen-data")
        .output()
        .unwrap();
    ok(&o);
    let m = manifest(d.path());
    assert_eq!(m.splits["rl"].records + m.splits["eval"].records, 40);
    let o = bin()
        .env("PATHRL_GRPO_NOT_A_KEY", "1")
        .arg("--out")
        .arg(d.path().join("run2"))
        .arg("gen-data")
        .output()
        .unwrap();
    err(&o);
}

#[test]
fn reward_check_prints_breakdowns() {
    let d = tempfile::tempdir().unwrap();
    let gold = r#"{"observation":"dense collagen bundles","conclusion_label":"B","full_text":"","answer_space":["A","B","C","D"]}"#;
    let golds = d.path().join("golds.jsonl");
    fs::write(&golds, format!("{gold}\n{gold}\n")).unwrap();
    let cands = d.path().join("cands.txt");
    fs::write(
        &cands,
        "[Observation] dense collagen bundles [Analysis] stromal pattern [Conclusion] B\n\n",
    )
    .unwrap();
    let out = ok(&run(d.path(), &["reward-check", cands.to_str().unwrap(), golds.to_str().unwrap()]));
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][4], "3.5000");
    assert_eq!(rows[1][4], "0.0000");

    fs::write(&cands, "only one line\n").unwrap();
    fs::write(&golds, format!("{gold}\n{gold}\n{gold}\n")).unwrap();
    err(&run(d.path(), &["reward-check", cands.to_str().unwrap(), golds.to_str().unwrap()]));
}

#[test]
fn unknown_command_exits_nonzero() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert!(!o.status.success());
}
