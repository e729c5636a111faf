use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatagenConfig};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, sha256_hex, to_jsonl, write_atomic};
use crate::policy::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

/// Sidecar describing a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DatagenConfig,
    pub vocabulary: Vocabulary,
    pub splits: BTreeMap<String, SplitInfo>,
}

/// Writes `pretrain.jsonl`, `sft.jsonl`, `rl.jsonl`, `eval.jsonl` and the
/// manifest into `dir`. Every file goes through temp-then-rename; the
/// manifest is written last.
pub fn write_dataset(dir: &Path, dataset: &Dataset, seed: u64, config: &DatagenConfig) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let payloads = [
        ("pretrain", to_jsonl(&dataset.pretrain)?, dataset.pretrain.len()),
        ("sft", to_jsonl(&dataset.sft)?, dataset.sft.len()),
        ("rl", to_jsonl(&dataset.rl)?, dataset.rl.len()),
        ("eval", to_jsonl(&dataset.eval)?, dataset.eval.len()),
    ];
    let mut splits = BTreeMap::new();
    for (name, bytes, records) in payloads {
        let file = format!("{name}.jsonl");
        write_atomic(&dir.join(&file), &bytes)?;
        splits.insert(
            name.to_string(),
            SplitInfo {
                file,
                records,
                sha256: sha256_hex(&bytes),
            },
        );
    }
    let manifest = Manifest {
        seed,
        config: config.clone(),
        vocabulary: dataset.vocab.clone(),
        splits,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a dataset directory, verifying every split against its manifest hash.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let check = |name: &str| -> Result<std::path::PathBuf> {
        let info = manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("manifest lacks split `{name}`")))?;
        let path = dir.join(&info.file);
        if sha256_hex(&fs::read(&path)?) != info.sha256 {
            return Err(Error::Integrity(format!("split `{name}` does not match its manifest hash")));
        }
        Ok(path)
    };
    let dataset = Dataset {
        vocab: manifest.vocabulary.clone(),
        pretrain: read_jsonl(&check("pretrain")?)?,
        sft: read_jsonl(&check("sft")?)?,
        rl: read_jsonl(&check("rl")?)?,
        eval: read_jsonl(&check("eval")?)?,
    };
    Ok((dataset, manifest))
}
