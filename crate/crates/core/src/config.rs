//! Flat key-value pipeline configuration and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabelSpace, PromptTemplate, Stage};
use crate::error::{Error, Result};
use crate::generator::{DecodingConfig, GenerationSettings, LexiconLm, LexiconLmConfig};
use crate::relabel::{RelabelConfig, RelabelMode};
use crate::trainer::{Architecture, TrainConfig};
use crate::weighting::{OuterOptimizer, ProxySpec, WeightConfig};

/// Which prompts condition generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// The single domain-free template.
    #[default]
    Unigen,
    /// One domain-specific template, chosen by `domain`.
    Zerogen,
    /// All domain-specific templates, round-robin.
    Combined,
}

impl std::str::FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigen" => Ok(Self::Unigen),
            "zerogen" => Ok(Self::Zerogen),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown generation mode {other:?}"))),
        }
    }
}

const GENERATION_KEYS: &[&str] = &[
    "seed",
    "labels",
    "verbalizer",
    "template",
    "mode",
    "domain",
    "generator",
    "n_samples",
    "top_k",
    "top_p",
    "max_new_tokens",
    "stop_sequences",
    "attempts",
];
const RELABEL_KEYS: &[&str] = &["relabel_mode", "tau_re", "t_re"];
const WEIGHT_KEYS: &[&str] = &[
    "skip_weight",
    "weight_seed",
    "outer_lr",
    "outer_epochs",
    "inner_steps_per_outer",
    "inner_lr",
    "warmup_steps",
    "outer_val_count",
    "gce_q",
    "select_count",
    "outer_optimizer",
    "init_weight",
    "proxy_feature_dim",
    "proxy_bigrams",
];
/// Fields that never change an artifact's content.
const RUN_CONTROL_KEYS: &[&str] = &["seeds", "eval_dir"];

/// Every pipeline hyperparameter in one flat document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed for generation and weighting.
    pub seed: u64,
    /// One TAM is trained per seed; excluded from the config hash.
    pub seeds: Vec<u64>,

    pub labels: Vec<String>,
    pub verbalizer: Vec<String>,
    /// Universal template; the domain templates are built in.
    pub template: String,
    pub mode: GenerationMode,
    /// Domain whose template is used in `zerogen` mode.
    pub domain: String,
    pub generator: String,
    pub n_samples: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub attempts: usize,

    pub relabel_mode: RelabelMode,
    pub tau_re: f64,
    pub t_re: f64,

    pub skip_weight: bool,
    /// Seed of the weighting stage; defaults to `seed`.
    pub weight_seed: Option<u64>,
    pub outer_lr: f64,
    pub outer_epochs: usize,
    pub inner_steps_per_outer: usize,
    pub inner_lr: f64,
    pub warmup_steps: usize,
    pub outer_val_count: usize,
    pub gce_q: f64,
    pub select_count: usize,
    pub outer_optimizer: OuterOptimizer,
    pub init_weight: f64,
    pub proxy_feature_dim: usize,
    pub proxy_bigrams: bool,

    pub alpha: f64,
    pub tau_scl: f64,
    pub proj_dim: usize,
    pub bank_capacity: usize,
    pub momentum: f64,
    pub t_mb: f64,
    pub bank_denoise: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    pub grad_clip: f64,
    pub weight_loss: bool,

    /// Directory of evaluation corpora; empty selects the bundled fixture.
    pub eval_dir: String,
    pub fixture_seed: u64,
}

impl Default for PipelineConfig {
    /// Desk-scale preset.
    fn default() -> Self {
        let ls = LabelSpace::sentiment();
        let decoding = DecodingConfig::default();
        let relabel = RelabelConfig::default();
        let weight = WeightConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            labels: ls.names().to_vec(),
            verbalizer: ls.verbalizer().to_vec(),
            template: PromptTemplate::default_universal().template().to_string(),
            mode: GenerationMode::Unigen,
            domain: "movie".to_string(),
            generator: "lexicon-lm".to_string(),
            n_samples: 2000,
            top_k: decoding.top_k,
            top_p: decoding.top_p,
            max_new_tokens: decoding.max_new_tokens,
            stop_sequences: decoding.stop_sequences,
            attempts: 3,
            relabel_mode: relabel.mode,
            tau_re: relabel.tau_re,
            t_re: relabel.t_re,
            skip_weight: false,
            weight_seed: None,
            outer_lr: weight.outer_lr,
            outer_epochs: weight.outer_epochs,
            inner_steps_per_outer: weight.inner_steps_per_outer,
            inner_lr: weight.inner_lr,
            warmup_steps: weight.warmup_steps,
            outer_val_count: 500,
            gce_q: weight.gce_q,
            select_count: 500,
            outer_optimizer: weight.outer_optimizer,
            init_weight: weight.init_weight,
            proxy_feature_dim: weight.proxy.feature_dim,
            proxy_bigrams: weight.proxy.bigrams,
            alpha: train.alpha,
            tau_scl: train.tau_scl,
            proj_dim: train.proj_dim,
            bank_capacity: train.bank_capacity,
            momentum: 0.99,
            t_mb: train.t_mb,
            bank_denoise: train.bank_denoise,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            architecture: train.architecture,
            embed_dim: train.embed_dim,
            hidden_dim: train.hidden_dim,
            layers: train.layers,
            heads: train.heads,
            ffn_dim: train.ffn_dim,
            max_len: train.max_len,
            max_vocab: train.max_vocab,
            grad_clip: train.grad_clip,
            weight_loss: train.weight_loss,
            eval_dir: String::new(),
            fixture_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Full-scale settings: a million generated samples, fine-tuning rates.
    pub fn full_scale() -> Self {
        let train = TrainConfig::default();
        let weight = WeightConfig::default();
        Self {
            n_samples: 1_000_000,
            outer_val_count: weight.outer_val_count,
            select_count: weight.select_count,
            momentum: train.momentum,
            epochs: train.epochs,
            lr: train.lr,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.label_space()?;
        self.template()?;
        self.relabel_template()?;
        self.generator()?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        self.decoding().validate()?;
        self.relabel_config().validate(self.labels.len())?;
        self.weight_config().validate()?;
        self.train_config(self.seeds[0]).validate()
    }

    /// SHA-256 of the canonical JSON form, without the run-control fields
    /// that do not change any artifact's content.
    pub fn hash(&self) -> String {
        self.digest(|key| !RUN_CONTROL_KEYS.contains(&key))
    }

    /// Hash of only the fields that shape an artifact at `stage`: a
    /// generated set depends on the generation fields alone, a relabeled set
    /// also on the relabel fields, a weighted or selected set also on the
    /// weighting fields. Downstream stages check their input against this.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut sections = vec![GENERATION_KEYS];
        if stage >= Stage::Relabeled {
            sections.push(RELABEL_KEYS);
        }
        if stage >= Stage::Weighted {
            sections.push(WEIGHT_KEYS);
        }
        self.digest(|key| sections.iter().any(|s| s.contains(&key)))
    }

    fn digest(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises to JSON");
        if let Some(map) = value.as_object_mut() {
            map.retain(|k, _| keep(k));
        }
        let canonical = serde_json::to_string(&value).expect("JSON value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.labels.clone(), self.verbalizer.clone())
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::universal(self.template.clone())
    }

    /// Generation templates for the configured mode.
    pub fn generation_templates(&self) -> Result<Vec<PromptTemplate>> {
        match self.mode {
            GenerationMode::Unigen => Ok(vec![self.template()?]),
            GenerationMode::Zerogen => Ok(vec![self.relabel_template()?]),
            GenerationMode::Combined => Ok(PromptTemplate::default_domains()),
        }
    }

    /// The universal template, except in `zerogen` mode where relabeling
    /// reuses the domain template the data was generated with.
    pub fn relabel_template(&self) -> Result<PromptTemplate> {
        if self.mode != GenerationMode::Zerogen {
            return self.template();
        }
        PromptTemplate::default_domains()
            .into_iter()
            .find(|t| t.domain_name() == self.domain)
            .ok_or_else(|| Error::Config(format!("unknown domain {:?}", self.domain)))
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed.unwrap_or(self.seed)
    }

    pub fn generator(&self) -> Result<LexiconLm> {
        match self.generator.as_str() {
            "lexicon-lm" => Ok(LexiconLm::new(LexiconLmConfig::default())),
            other => Err(Error::Config(format!("unknown generator {other:?}"))),
        }
    }

    pub fn decoding(&self) -> DecodingConfig {
        DecodingConfig {
            top_k: self.top_k,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            stop_sequences: self.stop_sequences.clone(),
        }
    }

    pub fn generation_settings(&self) -> GenerationSettings {
        GenerationSettings {
            decoding: self.decoding(),
            n_samples: self.n_samples,
            seed: self.seed,
            attempts: self.attempts,
            ..GenerationSettings::default()
        }
    }

    pub fn relabel_config(&self) -> RelabelConfig {
        RelabelConfig {
            tau_re: self.tau_re,
            t_re: self.t_re,
            mode: self.relabel_mode,
        }
    }

    pub fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            outer_lr: self.outer_lr,
            outer_epochs: self.outer_epochs,
            inner_steps_per_outer: self.inner_steps_per_outer,
            inner_lr: self.inner_lr,
            warmup_steps: self.warmup_steps,
            outer_val_count: self.outer_val_count,
            gce_q: self.gce_q,
            select_count: self.select_count,
            outer_optimizer: self.outer_optimizer,
            init_weight: self.init_weight,
            proxy: ProxySpec {
                feature_dim: self.proxy_feature_dim,
                bigrams: self.proxy_bigrams,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            tau_scl: self.tau_scl,
            proj_dim: self.proj_dim,
            bank_capacity: self.bank_capacity,
            momentum: self.momentum,
            t_mb: self.t_mb,
            bank_denoise: self.bank_denoise,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            architecture: self.architecture,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            max_vocab: self.max_vocab,
            grad_clip: self.grad_clip,
            weight_loss: self.weight_loss,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = PipelineConfig::from_toml_str("n_samples = 10\nalpha = 0.0\n").unwrap();
        assert_eq!(c.n_samples, 10);
        assert_eq!(c.alpha, 0.0);
        assert_eq!(c.tau_scl, 0.2);
    }

    #[test]
    fn hash_tracks_content_but_not_run_control() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seeds: vec![9], ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { tau_re: 0.2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn stage_hashes_nest() {
        let a = PipelineConfig::default();
        let relabel = PipelineConfig { tau_re: 0.2, ..a.clone() };
        assert_eq!(a.stage_hash(Stage::Generated), relabel.stage_hash(Stage::Generated));
        assert_ne!(a.stage_hash(Stage::Relabeled), relabel.stage_hash(Stage::Relabeled));
        let train = PipelineConfig { alpha: 0.1, ..a.clone() };
        assert_eq!(a.stage_hash(Stage::Selected), train.stage_hash(Stage::Selected));
        assert_ne!(a.hash(), train.hash());
        assert_eq!(a.stage_hash(Stage::Weighted), a.stage_hash(Stage::Selected));
    }

    #[test]
    fn every_key_is_classified_once() {
        let value = serde_json::to_value(PipelineConfig::default()).unwrap();
        let sections = [GENERATION_KEYS, RELABEL_KEYS, WEIGHT_KEYS, RUN_CONTROL_KEYS];
        for key in sections.concat() {
            assert!(value.get(key).is_some(), "stale key {key}");
            assert_eq!(sections.iter().filter(|s| s.contains(&key)).count(), 1, "{key}");
        }
    }

    #[test]
    fn modes_pick_templates() {
        let zero = PipelineConfig::from_toml_str("mode = \"zerogen\"\ndomain = \"restaurant\"\n").unwrap();
        assert_eq!(zero.generation_templates().unwrap()[0].domain_name(), "restaurant");
        assert_eq!(zero.relabel_template().unwrap().domain_name(), "restaurant");
        let combined = PipelineConfig { mode: GenerationMode::Combined, ..PipelineConfig::default() };
        assert_eq!(combined.generation_templates().unwrap().len(), 5);
        assert_eq!(combined.relabel_template().unwrap(), PromptTemplate::default_universal());
        assert!(PipelineConfig::from_toml_str("mode = \"zerogen\"\ndomain = \"opera\"\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml_str("nonsense = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("gce_q = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("tau_scl = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("generator = \"gpt\"\n").is_err());
    }

    #[test]
    fn full_scale_preset_values() {
        let p = PipelineConfig::full_scale();
        assert_eq!((p.top_k, p.top_p, p.tau_re, p.t_re), (40, 0.9, 0.1, 0.2));
        assert_eq!((p.outer_epochs, p.outer_lr, p.outer_val_count, p.select_count), (50, 5e-2, 50_000, 200_000));
        assert_eq!((p.alpha, p.proj_dim, p.tau_scl, p.bank_capacity), (0.5, 256, 0.2, 64));
        assert_eq!((p.momentum, p.t_mb, p.epochs, p.lr), (0.999, 0.8, 3, 2e-5));
    }
}
