//! TAM training: soft-label cross-entropy plus supervised contrastive loss
//! against a momentum-encoded, weight-gated memory bank.

pub mod bank;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{argmax, DatasetManifest, Stage};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Matrix;

pub use bank::{BankEntry, MemoryBank};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use loss::{ce_soft, ce_soft_with_grad, scl_loss, scl_loss_with_grad, SclOutput};
pub use model::{forward, Architecture, EncoderPair, ModelSpec, ParamSet, Vocab};
pub use optim::Adam;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_SHUFFLE: u64 = 0x7368_7566;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau_scl: f64,
    pub proj_dim: usize,
    pub bank_capacity: usize,
    pub momentum: f64,
    pub t_mb: f64,
    /// Gate bank admission on learned weights; when off every sample is admitted.
    pub bank_denoise: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Scale each sample's cross-entropy by its learned weight.
    pub weight_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau_scl: 0.2,
            proj_dim: 256,
            bank_capacity: 64,
            momentum: 0.999,
            t_mb: 0.8,
            bank_denoise: true,
            epochs: 3,
            batch_size: 32,
            lr: 2e-5,
            seed: 0,
            architecture: Architecture::Transformer,
            embed_dim: 64,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 48,
            max_vocab: 8000,
            grad_clip: 1.0,
            weight_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.tau_scl > 0.0 && self.tau_scl.is_finite()) {
            return bad("tau_scl must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.t_mb) {
            return bad("t_mb must be in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.bank_capacity == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("bank_capacity, batch_size and epochs must be positive");
        }
        if self.max_vocab < 2 {
            return bad("max_vocab must be at least 2");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }

    pub fn model_spec(&self, vocab_size: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            vocab_size,
            num_classes,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            proj_dim: self.proj_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
        }
    }
}

/// One training batch in model-ready form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    /// Soft targets, `n x K`.
    pub targets: Matrix,
    /// Hard class per row, used for contrastive positives.
    pub class_ids: Vec<usize>,
    pub weights: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
}

/// `ce_soft + alpha * scl_loss` and its gradient with respect to every
/// parameter of `params`. The bank is read only when `alpha > 0`.
pub fn combined_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Batch,
    bank: &MemoryBank,
    config: &TrainConfig,
) -> (LossParts, BTreeMap<String, Matrix>) {
    let mut tape = Tape::new();
    let out = forward(spec, &mut tape, params, &batch.tokens);
    let logits = out.logits.expect("query encoder has a classifier head");

    let ce_weights: Option<Vec<f64>> = config
        .weight_loss
        .then(|| batch.weights.iter().map(|w| w.unwrap_or(1.0)).collect());
    let (ce, ce_grad) = ce_soft_with_grad(tape.value(logits), &batch.targets, ce_weights.as_deref());
    let mut total_var = tape.scalar_fn(logits, ce, ce_grad);

    let mut scl = 0.0;
    if config.alpha > 0.0 {
        let o = scl_loss_with_grad(tape.value(out.projections), &batch.class_ids, bank, config.tau_scl);
        scl = o.loss;
        let scl_var = tape.scalar_fn(out.projections, o.loss, o.grad);
        let scaled = tape.scale(scl_var, config.alpha);
        total_var = tape.add(total_var, scaled);
    }
    let total = tape.value(total_var).item();

    let mut grads = tape.backward(total_var);
    let named = out
        .params
        .iter()
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect();
    (LossParts { ce, scl, total }, named)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
    pub bank_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub pair: EncoderPair,
    pub log: Vec<TrainLogRow>,
}

pub fn write_train_log(rows: &[TrainLogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("step,epoch,ce,scl,total,bank_size\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.epoch, r.ce, r.scl, r.total, r.bank_size);
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains a TAM on the records of `manifest`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, config_hash: &str) -> Result<TrainOutput> {
    config.validate()?;
    manifest.require_stage(&[Stage::Relabeled, Stage::Weighted, Stage::Selected])?;
    if manifest.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if manifest.stage != Stage::Selected {
        log::info!("training on a {} dataset (no selection step)", manifest.stage);
    }
    if config.alpha > 0.0 && !config.bank_denoise {
        log::info!("bank denoising disabled: memory bank admission always passes");
    } else if config.alpha > 0.0 && manifest.records.iter().all(|r| r.weight.is_none()) {
        log::info!("records carry no weights: memory bank admission always passes");
    }

    let k = manifest.label_space.num_classes();
    let vocab = Vocab::build(manifest.records.iter().map(|r| r.text.as_str()), config.max_vocab);
    let spec = config.model_spec(vocab.len(), k);
    spec.validate()?;

    let mut init_rng = rng_for(config.seed, &[TAG_INIT]);
    let mut pair = EncoderPair::new(spec.init(&mut init_rng), config.momentum);
    let mut bank = MemoryBank::new(config.bank_capacity);
    let mut adam = Adam::new(config.lr);

    let tokens: Vec<Vec<usize>> = manifest
        .records
        .iter()
        .map(|r| vocab.encode(&r.text, config.max_len))
        .collect();

    let mut log_rows = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                tokens: chunk.iter().map(|&i| tokens[i].clone()).collect(),
                targets: Matrix::from_rows(
                    &chunk.iter().map(|&i| manifest.records[i].soft_label.clone()).collect::<Vec<_>>(),
                ),
                class_ids: chunk.iter().map(|&i| argmax(&manifest.records[i].soft_label)).collect(),
                weights: chunk.iter().map(|&i| manifest.records[i].weight).collect(),
            };

            let (parts, mut grads) = combined_loss(&spec, &pair.query, &batch, &bank, config);
            if !parts.total.is_finite() {
                return Err(Error::TrainDivergence {
                    epoch,
                    step,
                    detail: format!("ce={} scl={} total={}", parts.ce, parts.scl, parts.total),
                });
            }
            optim::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(&mut pair.query, &grads);
            if !pair.query.is_finite() {
                return Err(Error::TrainDivergence {
                    epoch,
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }

            if config.alpha > 0.0 {
                pair.momentum_update()?;
                let mut tape = Tape::new();
                let out = forward(&spec, &mut tape, &pair.key, &batch.tokens);
                let ungated = vec![None; batch.weights.len()];
                let weights = if config.bank_denoise { &batch.weights } else { &ungated };
                bank.update(tape.value(out.projections), &batch.class_ids, weights, config.t_mb);
            }

            log_rows.push(TrainLogRow {
                step,
                epoch,
                ce: parts.ce,
                scl: parts.scl,
                total: parts.total,
                bank_size: bank.len(),
            });
            step += 1;
        }
        log::debug!(
            "epoch {epoch}: last total loss {:.4}, bank {}",
            log_rows.last().map_or(f64::NAN, |r| r.total),
            bank.len()
        );
    }

    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        config_hash: config_hash.to_string(),
        spec,
        label_space: manifest.label_space.clone(),
        vocab,
        params: pair.query.clone(),
    };
    Ok(TrainOutput {
        checkpoint,
        pair,
        log: log_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSpace, Provenance, SampleRecord};

    fn provenance() -> Provenance {
        Provenance {
            generator: "test".into(),
            prompt: String::new(),
            top_k: 1,
            top_p: 1.0,
            max_new_tokens: 1,
            stop_sequences: vec![],
            seed: 0,
        }
    }

    fn separable(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(LabelSpace::sentiment(), Stage::Selected, "h");
        for i in 0..n {
            let label = i % 2;
            let text = if label == 1 {
                format!("great lovely item {i}")
            } else {
                format!("awful broken item {i}")
            };
            let mut r = SampleRecord::seeded(text, label, 2, provenance());
            r.weight = Some(0.9);
            m.records.push(r);
        }
        m
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            proj_dim: 16,
            embed_dim: 16,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 16,
            batch_size: 8,
            lr: 1e-2,
            momentum: 0.9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let m = separable(64);
        for arch in [Architecture::BagOfEmbeddings, Architecture::Transformer] {
            let config = TrainConfig {
                architecture: arch,
                ..small_config()
            };
            let out = train(&m, &config, "h").unwrap();
            let texts: Vec<&str> = m.records.iter().map(|r| r.text.as_str()).collect();
            let pred = out.checkpoint.predict(&texts);
            let correct = pred.iter().zip(&m.records).filter(|(p, r)| **p == r.hard_label).count();
            assert_eq!(correct, 64, "{arch:?}");
        }
    }

    #[test]
    fn alpha_zero_equals_plain_ce() {
        let m = separable(24);
        let config = TrainConfig {
            alpha: 0.0,
            architecture: Architecture::BagOfEmbeddings,
            ..small_config()
        };
        let a = train(&m, &config, "h").unwrap();
        assert!(a.log.iter().all(|r| r.scl == 0.0 && r.bank_size == 0 && r.total == r.ce));
        let b = train(&m, &TrainConfig { t_mb: 0.0, bank_capacity: 3, ..config }, "h").unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let m = separable(24);
        let config = small_config();
        let a = train(&m, &config, "h").unwrap();
        let b = train(&m, &config, "h").unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_ne!(a.pair.key, a.pair.query.shared());
    }

    #[test]
    fn low_weights_keep_the_bank_empty() {
        let mut m = separable(16);
        for r in &mut m.records {
            r.weight = Some(0.5);
        }
        let out = train(&m, &small_config(), "h").unwrap();
        assert!(out.log.iter().all(|r| r.bank_size == 0));

        let ungated = TrainConfig {
            bank_denoise: false,
            ..small_config()
        };
        let out = train(&m, &ungated, "h").unwrap();
        assert!(out.log.last().unwrap().bank_size > 0);
    }
}
