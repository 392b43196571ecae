//! Pipeline configuration: one TOML file plus `--set key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyrank::corpus::{MaskingConfig, MixtureConfig};
use storyrank::datagen::WorldConfig;
use storyrank::eval::EvalConfig;
use storyrank::grammar::StoryTransform;
use storyrank::{Dtype, ModelConfig, TaskKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dtype: Dtype,
    pub world: WorldConfig,
    pub vocab: VocabSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub transform: StoryTransform,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dtype: Dtype::F32,
            world: WorldConfig::default(),
            vocab: VocabSection::default(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            transform: StoryTransform::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// Requested BPE merges.
    pub merges: usize,
    /// Training stories whose text feeds merge learning.
    pub merge_sample: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { merges: 128, merge_sample: 500 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub mixture: MixtureConfig,
    pub masking: MaskingConfig,
}

/// Model shape; the vocabulary size comes from the built vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub context_length: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden_dim: Option<usize>,
    pub tie_embeddings: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            context_length: d.context_length,
            layers: d.layers,
            heads: d.heads,
            model_dim: d.model_dim,
            mlp_hidden_dim: d.mlp_hidden_dim,
            tie_embeddings: d.tie_embeddings,
            rope_base: d.rope_base,
            norm_eps: d.norm_eps,
            init_std: d.init_std,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_length: self.context_length,
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            mlp_hidden_dim: self.mlp_hidden_dim,
            tie_embeddings: self.tie_embeddings,
            rope_base: self.rope_base,
            norm_eps: self.norm_eps,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k_cutoffs: Vec<usize>,
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    pub max_users: Option<usize>,
    pub tasks: Vec<TaskKind>,
    /// Also report the popularity reference and, for search, BM25.
    pub baselines: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            k_cutoffs: e.k_cutoffs,
            holdout_fraction: e.holdout_fraction,
            rng_seed: e.rng_seed,
            max_users: e.max_users,
            tasks: vec![TaskKind::ItemMasked, TaskKind::Carousel, TaskKind::Search],
            baselines: true,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

impl EvalSection {
    pub fn to_eval_config(&self) -> EvalConfig {
        EvalConfig {
            k_cutoffs: self.k_cutoffs.clone(),
            holdout_fraction: self.holdout_fraction,
            rng_seed: self.rng_seed,
            max_users: self.max_users,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file (or the defaults when `path` is `None`) and applies
    /// `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig =
            toml::Value::Table(value).try_into().map_err(|e| anyhow!(storyrank::Error::config(e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| anyhow!(storyrank::Error::config(e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.corpus.mixture.validate()?;
        self.corpus.masking.validate()?;
        self.model.to_model_config(1).validate()?;
        self.train.validate()?;
        self.eval.to_eval_config().validate()?;
        if self.corpus.mixture.context_length != self.model.context_length {
            bail!(storyrank::Error::config(format!(
                "corpus.mixture.context_length ({}) must equal model.context_length ({})",
                self.corpus.mixture.context_length, self.model.context_length
            )));
        }
        if self.eval.tasks.is_empty() {
            bail!(storyrank::Error::config("eval.tasks must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!(storyrank::Error::config(format!("override `{spec}` is not key=value"))))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(storyrank::Error::config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!(storyrank::Error::config(format!("override `{key}`: `{p}` is not a section"))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let a = PipelineConfig::default();
        a.validate().unwrap();
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = PipelineConfig::load(
            None,
            &["train.macro_steps=700".into(), "dtype=\"f64\"".into(), "transform.view=item".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.macro_steps, 700);
        assert_eq!(cfg.dtype, Dtype::F64);
        assert_eq!(cfg.transform.view, Some(storyrank::grammar::View::Item));
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_mismatched_context_are_rejected() {
        assert!(PipelineConfig::from_toml("[train]\nlearning_rat = 1.0\n").is_err());
        assert!(PipelineConfig::from_toml("[model]\ncontext_length = 128\n").is_err());
        assert!(PipelineConfig::load(None, &["novalue".into()]).is_err());
    }
}
