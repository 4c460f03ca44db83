//! Optional TOML configuration. Each subcommand reads its own section;
//! command-line flags take precedence over file values.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub learn_vocab: LearnVocabSection,
    pub pretrain: PretrainSection,
    pub train_generator: GeneratorSection,
    pub transplant: TransplantSection,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct LearnVocabSection {
    pub merges: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PretrainSection {
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub mask_fraction: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GeneratorSection {
    pub kind: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub normalized: Option<bool>,
    pub p_merge: Option<f64>,
    pub p_split: Option<f64>,
    pub max_pieces: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TransplantSection {
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchmarkSection {
    pub upstream_sentences: Option<usize>,
    pub downstream_sentences: Option<usize>,
    pub upstream_merges: Option<usize>,
    pub downstream_merges: Option<usize>,
    pub pretrain_steps: Option<usize>,
    pub generator_steps: Option<usize>,
    pub probe_steps: Option<usize>,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
