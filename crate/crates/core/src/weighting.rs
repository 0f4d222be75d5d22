//! Per-sample cleanliness weights learned by bi-level optimisation.
//!
//! The inner problem fits a linear softmax proxy over hashed bag-of-words
//! features to the weighted training risk. The outer problem moves the
//! sigmoid-parameterised weights to reduce a generalized cross-entropy on a
//! freshly drawn validation subset, differentiating through the last inner
//! gradient step.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_in_place;
use crate::data::{DatasetManifest, Stage};
use crate::error::{Error, Result};
use crate::seed::{fnv1a, rng_for};
use crate::text::tokenize;

const TAG_VAL: u64 = 0x7661_6c;

/// Generalized cross-entropy `(1 - p_target^q) / q`.
pub fn robust_loss(probabilities: &[f64], target: usize, q: f64) -> f64 {
    let p = probabilities[target].clamp(0.0, 1.0);
    (1.0 - p.powf(q)) / q
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    /// Gradient descent on the hypergradient rescaled to unit RMS.
    Normalized,
    Adam,
    Sgd,
}

impl FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown outer optimizer {other:?}"))),
        }
    }
}

/// Hashed bag-of-words features for the proxy classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    pub feature_dim: usize,
    pub bigrams: bool,
}

impl Default for ProxySpec {
    fn default() -> Self {
        Self {
            feature_dim: 4096,
            bigrams: false,
        }
    }
}

impl ProxySpec {
    /// Sparse L2-normalised feature vector, sorted by index.
    pub fn features(&self, text: &str) -> Vec<(usize, f64)> {
        let tokens = tokenize(text);
        let mut idx: Vec<usize> = tokens
            .iter()
            .map(|t| (fnv1a(t.as_bytes()) % self.feature_dim as u64) as usize)
            .collect();
        if self.bigrams {
            for pair in tokens.windows(2) {
                let key = format!("{} {}", pair[0], pair[1]);
                idx.push((fnv1a(key.as_bytes()) % self.feature_dim as u64) as usize);
            }
        }
        idx.sort_unstable();
        let mut out: Vec<(usize, f64)> = Vec::new();
        for i in idx {
            match out.last_mut() {
                Some((j, c)) if *j == i => *c += 1.0,
                _ => out.push((i, 1.0)),
            }
        }
        let norm = out.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|(_, c)| *c /= norm);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub outer_lr: f64,
    pub outer_epochs: usize,
    pub inner_steps_per_outer: usize,
    pub inner_lr: f64,
    /// Extra inner steps before the first outer update.
    pub warmup_steps: usize,
    /// Validation subset size; clamped to the dataset size.
    pub outer_val_count: usize,
    pub gce_q: f64,
    pub select_count: usize,
    pub outer_optimizer: OuterOptimizer,
    /// Starting value of every weight, in (0, 1).
    pub init_weight: f64,
    pub proxy: ProxySpec,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            outer_lr: 5e-2,
            outer_epochs: 50,
            inner_steps_per_outer: 10,
            inner_lr: 1.0,
            warmup_steps: 100,
            outer_val_count: 50_000,
            gce_q: 0.7,
            select_count: 200_000,
            outer_optimizer: OuterOptimizer::Normalized,
            init_weight: 0.5,
            proxy: ProxySpec::default(),
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.inner_lr > 0.0) {
            return Err(Error::Config("outer_lr and inner_lr must be positive".into()));
        }
        if self.outer_epochs == 0 || self.inner_steps_per_outer == 0 || self.outer_val_count == 0 {
            return Err(Error::Config(
                "outer_epochs, inner_steps_per_outer and outer_val_count must be positive".into(),
            ));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::Config(format!("gce_q must be in (0, 1], got {}", self.gce_q)));
        }
        if !(self.init_weight > 0.0 && self.init_weight < 1.0) {
            return Err(Error::Config(format!("init_weight must be in (0, 1), got {}", self.init_weight)));
        }
        if self.select_count == 0 {
            return Err(Error::Config("select_count must be positive".into()));
        }
        if self.proxy.feature_dim == 0 {
            return Err(Error::Config("proxy feature_dim must be positive".into()));
        }
        Ok(())
    }
}

struct OuterState {
    kind: OuterOptimizer,
    lr: f64,
    t: i32,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl OuterState {
    fn new(kind: OuterOptimizer, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m1: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    fn step(&mut self, raw: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        match self.kind {
            OuterOptimizer::Normalized => {
                let rms = (grads.iter().map(|g| g * g).sum::<f64>() / grads.len() as f64).sqrt().max(1e-300);
                for (r, g) in raw.iter_mut().zip(grads) {
                    *r -= self.lr * g / rms;
                }
            }
            OuterOptimizer::Sgd => {
                for (r, g) in raw.iter_mut().zip(grads) {
                    *r -= self.lr * g;
                }
            }
            OuterOptimizer::Adam => {
                for (j, (r, g)) in raw.iter_mut().zip(grads).enumerate() {
                    self.m1[j] = B1 * self.m1[j] + (1.0 - B1) * g;
                    self.m2[j] = B2 * self.m2[j] + (1.0 - B2) * g * g;
                    *r -= self.lr * (self.m1[j] / c1) / ((self.m2[j] / c2).sqrt() + 1e-12);
                }
            }
        }
    }
}

/// Unconstrained parameters; the weight of sample `i` is `sigmoid(raw[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub raw: Vec<f64>,
}

impl SampleWeights {
    /// Every weight equal to 0.5.
    pub fn uniform(n: usize) -> Self {
        Self::constant(n, 0.5)
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            raw: vec![(value / (1.0 - value)).ln(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn value(&self, i: usize) -> f64 {
        sigmoid(self.raw[i])
    }

    pub fn values(&self) -> Vec<f64> {
        self.raw.iter().map(|r| sigmoid(*r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub outer_epoch: usize,
    pub outer_loss: f64,
    /// Weight quantiles at 0%, 10%, ..., 100%.
    pub deciles: [f64; 11],
}

#[derive(Debug, Clone)]
pub struct WeightOutcome {
    pub weights: SampleWeights,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("outer_epoch,outer_loss");
    for d in 0..=10 {
        let _ = write!(s, ",p{}", d * 10);
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.outer_epoch, r.outer_loss);
        for d in r.deciles {
            let _ = write!(s, ",{d}");
        }
        s.push('\n');
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn deciles(values: &[f64]) -> [f64; 11] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = [0.0; 11];
    for (d, slot) in out.iter_mut().enumerate() {
        let pos = (d as f64 / 10.0 * (sorted.len() - 1) as f64).round() as usize;
        *slot = sorted[pos];
    }
    out
}

/// Linear softmax classifier over sparse features.
struct Proxy {
    k: usize,
    /// `feature_dim x k`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Proxy {
    fn new(dim: usize, k: usize) -> Self {
        Self {
            k,
            w: vec![0.0; dim * k],
            b: vec![0.0; k],
        }
    }

    fn probs(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let mut z = self.b.clone();
        for &(f, v) in x {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += v * self.w[f * self.k + c];
            }
        }
        softmax_in_place(&mut z);
        z
    }

    /// Weighted cross-entropy and its gradient `(dW, db)`, plus the
    /// per-sample residuals `p - y` used by the hypergradient.
    fn weighted_ce(
        &self,
        xs: &[Vec<(usize, f64)>],
        ys: &[usize],
        w: &[f64],
    ) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let total: f64 = w.iter().sum();
        let mut loss = 0.0;
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; self.k];
        let mut residuals = Vec::with_capacity(xs.len());
        for ((x, &y), &wi) in xs.iter().zip(ys).zip(w) {
            let mut r = self.probs(x);
            loss += wi * -r[y].max(1e-300).ln();
            r[y] -= 1.0;
            let s = wi / total;
            for &(f, v) in x {
                for c in 0..self.k {
                    gw[f * self.k + c] += s * v * r[c];
                }
            }
            for c in 0..self.k {
                gb[c] += s * r[c];
            }
            residuals.push(r);
        }
        (loss / total, gw, gb, residuals)
    }
}

/// Learns one weight per record of a relabeled dataset.
pub fn learn_weights(manifest: &DatasetManifest, config: &WeightConfig, seed: u64) -> Result<WeightOutcome> {
    config.validate()?;
    manifest.require_stage(&[Stage::Relabeled, Stage::Weighted])?;
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Validation("weight learning needs at least 2 records".into()));
    }
    let k = manifest.label_space.num_classes();
    let xs: Vec<Vec<(usize, f64)>> = manifest.records.iter().map(|r| config.proxy.features(&r.text)).collect();
    let ys: Vec<usize> = manifest.records.iter().map(|r| r.hard_label).collect();

    let val_count = config.outer_val_count.min(n);
    let with_replacement = 2 * val_count > n;
    if with_replacement {
        log::info!("validation subset of {val_count} from {n} records is drawn with replacement");
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ys.iter().enumerate() {
        by_class[y].push(i);
    }
    let class_quota: Vec<usize> = by_class
        .iter()
        .map(|m| ((m.len() * val_count) as f64 / n as f64).round() as usize)
        .collect();
    let mut proxy = Proxy::new(config.proxy.feature_dim, k);
    let mut weights = SampleWeights::constant(n, config.init_weight);
    let mut outer_opt = OuterState::new(config.outer_optimizer, config.outer_lr, n);
    let mut trace = Vec::with_capacity(config.outer_epochs);

    for outer in 0..config.outer_epochs {
        let w = weights.values();

        // Inner problem; the last step is kept for unrolling.
        let mut last = None;
        let steps = config.inner_steps_per_outer + if outer == 0 { config.warmup_steps } else { 0 };
        for inner in 0..steps {
            let (loss, gw, gb, residuals) = proxy.weighted_ce(&xs, &ys, &w);
            if !loss.is_finite() {
                return Err(Error::WeightDivergence {
                    outer_epoch: outer,
                    inner_step: inner,
                    detail: format!("inner loss {loss}"),
                });
            }
            for (p, g) in proxy.w.iter_mut().zip(&gw) {
                *p -= config.inner_lr * g;
            }
            for (p, g) in proxy.b.iter_mut().zip(&gb) {
                *p -= config.inner_lr * g;
            }
            last = Some((gw, residuals));
        }
        let (gw_bar, residuals) = last.expect("at least one inner step");

        // Outer objective on a fresh validation draw at the updated proxy.
        let mut rng = rng_for(seed, &[TAG_VAL, outer as u64]);
        // Stratified by hard label so the class mix matches the dataset.
        let mut val = Vec::with_capacity(val_count);
        for (members, &want) in by_class.iter().zip(&class_quota) {
            if with_replacement {
                val.extend((0..want).map(|_| members[rng.random_range(0..members.len())]));
            } else {
                val.extend(sample(&mut rng, members.len(), want).into_iter().map(|i| members[i]));
            }
        }
        if val.is_empty() {
            val.push(rng.random_range(0..n));
        }
        let val_count = val.len();
        let mut v_w = vec![0.0; proxy.w.len()];
        let mut outer_loss = 0.0;
        let inv = 1.0 / val_count as f64;
        for &i in &val {
            let p = proxy.probs(&xs[i]);
            let t = ys[i];
            outer_loss += robust_loss(&p, t, config.gce_q) * inv;
            let pt_q = p[t].powf(config.gce_q);
            for c in 0..k {
                let delta = if c == t { 1.0 } else { 0.0 };
                let dz = -pt_q * (delta - p[c]) * inv;
                for &(f, x) in &xs[i] {
                    v_w[f * k + c] += x * dz;
                }
            }
        }
        if !outer_loss.is_finite() {
            return Err(Error::WeightDivergence {
                outer_epoch: outer,
                inner_step: config.inner_steps_per_outer,
                detail: format!("outer loss {outer_loss}"),
            });
        }

        // d L_val / d w_j = -lr_inner / W * v . (g_j - g_bar), through the
        // feature weights only. The intercept moves every sample of a class
        // alike, so its share carries nothing but the class prior and drifts
        // whole classes with the validation class mix.
        let total_w: f64 = w.iter().sum();
        let v_dot_gbar = crate::tensor::dot(&v_w, &gw_bar);
        let scale = -config.inner_lr / total_w;
        let grads: Vec<f64> = (0..n)
            .map(|j| {
                let r = &residuals[j];
                let mut v_dot_gj = 0.0;
                for c in 0..k {
                    let mut proj = 0.0;
                    for &(f, x) in &xs[j] {
                        proj += x * v_w[f * k + c];
                    }
                    v_dot_gj += r[c] * proj;
                }
                scale * (v_dot_gj - v_dot_gbar) * w[j] * (1.0 - w[j])
            })
            .collect();
        outer_opt.step(&mut weights.raw, &grads);

        let row = TraceRow {
            outer_epoch: outer,
            outer_loss,
            deciles: deciles(&weights.values()),
        };
        log::debug!("outer epoch {outer}: loss {outer_loss:.5}, median weight {:.4}", row.deciles[5]);
        trace.push(row);
    }

    Ok(WeightOutcome { weights, trace })
}

/// Copies each weight onto its record without dropping any.
pub fn attach_weights(manifest: &DatasetManifest, weights: &SampleWeights) -> Result<DatasetManifest> {
    check_lengths(manifest, weights)?;
    let mut out = manifest.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        r.weight = Some(weights.value(i));
    }
    out.advance(Stage::Weighted)?;
    Ok(out)
}

/// Keeps the `select_count` highest-weight records (ties to the lower
/// index) in their original order, with weights attached.
pub fn select_top(manifest: &DatasetManifest, weights: &SampleWeights, select_count: usize) -> Result<DatasetManifest> {
    check_lengths(manifest, weights)?;
    if select_count > manifest.len() {
        return Err(Error::Validation(format!(
            "select_count {select_count} exceeds dataset size {}",
            manifest.len()
        )));
    }
    let values = weights.values();
    let mut ranked: Vec<usize> = (0..manifest.len()).collect();
    ranked.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut keep = ranked[..select_count].to_vec();
    keep.sort_unstable();

    let mut out = DatasetManifest::new(manifest.label_space.clone(), manifest.stage, manifest.config_hash.clone());
    out.records = keep
        .iter()
        .map(|&i| {
            let mut r = manifest.records[i].clone();
            r.weight = Some(values[i]);
            r
        })
        .collect();
    out.advance(Stage::Selected)?;
    Ok(out)
}

fn check_lengths(manifest: &DatasetManifest, weights: &SampleWeights) -> Result<()> {
    if manifest.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} records",
            weights.len(),
            manifest.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSpace, Provenance, SampleRecord};
    use approx::assert_abs_diff_eq;

    fn record(text: &str, label: usize) -> SampleRecord {
        let prov = Provenance {
            generator: "test".into(),
            prompt: String::new(),
            top_k: 1,
            top_p: 1.0,
            max_new_tokens: 1,
            stop_sequences: vec![],
            seed: 0,
        };
        SampleRecord::seeded(text, label, 2, prov)
    }

    fn manifest(records: Vec<SampleRecord>) -> DatasetManifest {
        let mut m = DatasetManifest::new(LabelSpace::sentiment(), Stage::Relabeled, "h");
        m.records = records;
        m
    }

    fn weights(values: &[f64]) -> SampleWeights {
        SampleWeights {
            raw: values.iter().map(|v| (v / (1.0 - v)).ln()).collect(),
        }
    }

    #[test]
    fn robust_loss_examples() {
        assert_eq!(robust_loss(&[0.0, 1.0], 1, 0.3), 0.0);
        assert_abs_diff_eq!(robust_loss(&[0.5, 0.5], 0, 1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(robust_loss(&[0.5, 0.5], 0, 0.7), 0.549_18, epsilon = 1e-5);
        assert_abs_diff_eq!(robust_loss(&[0.5, 0.5], 0, 0.7), (1.0 - 0.5f64.powf(0.7)) / 0.7, epsilon = 1e-15);
    }

    #[test]
    fn select_top_examples() {
        let m = manifest(vec![record("a", 0), record("b", 1), record("c", 0)]);
        let s = select_top(&m, &weights(&[0.9, 0.1, 0.5]), 2).unwrap();
        let texts: Vec<&str> = s.records.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, ["a", "c"]);
        assert_eq!(s.stage, Stage::Selected);
        assert_abs_diff_eq!(s.records[1].weight.unwrap(), 0.5, epsilon = 1e-12);

        let all = select_top(&m, &weights(&[0.9, 0.1, 0.5]), 3).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.records.iter().all(|r| r.weight.is_some()));

        let tied = select_top(&m, &SampleWeights::uniform(3), 2).unwrap();
        let texts: Vec<&str> = tied.records.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, ["a", "b"]);

        assert!(select_top(&m, &SampleWeights::uniform(3), 4).is_err());
    }

    fn two_class_corpus(n: usize) -> Vec<SampleRecord> {
        let pos = ["great", "superb", "lovely", "fantastic", "wonderful"];
        let neg = ["awful", "terrible", "poor", "horrible", "dreadful"];
        let topics = ["film", "phone", "meal", "plot", "screen", "service"];
        (0..n)
            .map(|i| {
                let label = i % 2;
                let cue = if label == 1 { pos[i / 2 % 5] } else { neg[i / 2 % 5] };
                let text = format!("the {} was {cue}", topics[i / 10 % 6]);
                record(&text, label)
            })
            .collect()
    }

    fn small_config() -> WeightConfig {
        WeightConfig {
            outer_epochs: 20,
            outer_val_count: 50,
            select_count: 10,
            proxy: ProxySpec {
                feature_dim: 512,
                bigrams: true,
            },
            ..WeightConfig::default()
        }
    }

    #[test]
    fn flipped_duplicate_gets_lower_weight() {
        let mut records = two_class_corpus(200);
        let j = 7;
        let mut flipped = records[j].clone();
        flipped.hard_label = 1 - flipped.hard_label;
        flipped.soft_label.reverse();
        records.push(flipped);
        let m = manifest(records);
        let out = learn_weights(&m, &small_config(), 3).unwrap();
        assert!(out.weights.value(200) < out.weights.value(j));
        assert!(out.weights.values().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(out.trace.iter().all(|r| r.outer_loss.is_finite()));
    }

    #[test]
    fn identical_clean_samples_stay_uniform() {
        let m = manifest((0..100).map(|_| record("the film was great", 1)).collect());
        let out = learn_weights(&m, &small_config(), 1).unwrap();
        let v = out.weights.values();
        let spread = v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
        assert!(spread < 0.2, "spread {spread}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = manifest(two_class_corpus(60));
        let a = learn_weights(&m, &small_config(), 9).unwrap();
        let b = learn_weights(&m, &small_config(), 9).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_and_stage_errors() {
        let mut m = manifest(two_class_corpus(10));
        m.stage = Stage::Generated;
        assert!(learn_weights(&m, &small_config(), 0).is_err());
    }

    #[test]
    fn features_are_unit_norm() {
        let f = ProxySpec::default().features("good good movie");
        let norm: f64 = f.iter().map(|(_, v)| v * v).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        assert!(ProxySpec::default().features("").is_empty());
    }
}
