//! Pseudo-relabeling of generated samples with the language model's own
//! verbalizer scores, followed by a confidence filter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, DatasetManifest, LabelSpace, PromptTemplate, Stage, LABEL_SLOT, TEXT_SLOT};
use crate::error::{Error, Result};
use crate::generator::TextGenerator;

/// Slack on the inclusive threshold comparison, so that `0.5 + 0.2` and a
/// stored `0.7` compare equal regardless of rounding.
const THRESHOLD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelMode {
    Soft,
    Hard,
    Off,
}

impl std::str::FromStr for RelabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown relabel mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    pub tau_re: f64,
    pub t_re: f64,
    pub mode: RelabelMode,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            tau_re: 0.1,
            t_re: 0.2,
            mode: RelabelMode::Soft,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.tau_re > 0.0 && self.tau_re.is_finite()) {
            return Err(Error::Config(format!("tau_re must be positive, got {}", self.tau_re)));
        }
        let upper = 1.0 - 1.0 / num_classes as f64;
        if !(self.t_re >= 0.0 && self.t_re < upper) {
            return Err(Error::Config(format!("t_re must be in [0, {upper}), got {}", self.t_re)));
        }
        Ok(())
    }
}

/// Relabel orientation of a template: the text first, then the template
/// without its `<text>` slot, cut just before `<label>`.
///
/// Returns the scoring context and one continuation per class (the
/// verbalizer word with a leading space).
pub fn render_relabel_prompt(template: &PromptTemplate, label_space: &LabelSpace, text: &str) -> Result<(String, Vec<String>)> {
    if !template.has_text_slot() {
        return Err(Error::Template(format!("template {:?} has no {TEXT_SLOT} slot", template.template())));
    }
    let body = template.template();
    let label_pos = body.find(LABEL_SLOT).expect("validated at construction");
    let prefix = body[..label_pos].replace(TEXT_SLOT, "");
    let prefix = prefix.trim();
    if prefix.is_empty() {
        return Err(Error::Template(format!(
            "template {:?} has no context before its {LABEL_SLOT} slot",
            body
        )));
    }
    let context = format!("{text}\n{prefix}");
    let candidates = label_space.verbalizer().iter().map(|w| format!(" {w}")).collect();
    Ok((context, candidates))
}

/// Log-probability of each class's verbalizer continuation.
pub fn class_logits<G: TextGenerator + ?Sized>(
    gen: &G,
    template: &PromptTemplate,
    label_space: &LabelSpace,
    text: &str,
) -> Result<Vec<f64>> {
    let (context, candidates) = render_relabel_prompt(template, label_space, text)?;
    let scores = gen.score_next_tokens(&context, &candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Backend(format!(
            "scorer returned {} values for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Backend(format!("scorer returned non-finite log-probability {bad}")));
    }
    Ok(scores)
}

/// Temperature softmax with max subtraction.
pub fn soft_relabel(logits: &[f64], tau_re: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau_re).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn hard_relabel(soft: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; soft.len()];
    out[argmax(soft)] = 1.0;
    out
}

/// Keeps a sample iff its top probability reaches `1/K + t_re` (inclusive).
pub fn passes_threshold(soft: &[f64], t_re: f64) -> bool {
    let max = soft.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max >= 1.0 / soft.len() as f64 + t_re - THRESHOLD_EPS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelSummary {
    pub n_in: usize,
    pub n_kept: usize,
    pub n_removed: usize,
    pub mode: RelabelMode,
}

impl RelabelSummary {
    pub fn removed_fraction(&self) -> f64 {
        if self.n_in == 0 {
            0.0
        } else {
            self.n_removed as f64 / self.n_in as f64
        }
    }
}

pub fn relabel_dataset<G: TextGenerator + ?Sized>(
    manifest: &DatasetManifest,
    gen: &G,
    template: &PromptTemplate,
    config: &RelabelConfig,
) -> Result<(DatasetManifest, RelabelSummary)> {
    manifest.require_stage(&[Stage::Generated])?;
    let ls = &manifest.label_space;
    config.validate(ls.num_classes())?;
    let mut out = manifest.clone();
    out.advance(Stage::Relabeled)?;

    if config.mode != RelabelMode::Off {
        let soft: Vec<Vec<f64>> = manifest
            .records
            .par_iter()
            .map(|r| class_logits(gen, template, ls, &r.text).map(|l| soft_relabel(&l, config.tau_re)))
            .collect::<Result<_>>()?;
        out.records = manifest
            .records
            .iter()
            .zip(soft)
            .filter(|(_, s)| passes_threshold(s, config.t_re))
            .map(|(r, s)| {
                let mut r = r.clone();
                let label = if config.mode == RelabelMode::Hard { hard_relabel(&s) } else { s };
                r.set_soft_label(label);
                r
            })
            .collect();
    }

    let summary = RelabelSummary {
        n_in: manifest.len(),
        n_kept: out.len(),
        n_removed: manifest.len() - out.len(),
        mode: config.mode,
    };
    log::info!(
        "relabel ({:?}): kept {}/{} ({:.1}% removed)",
        config.mode,
        summary.n_kept,
        summary.n_in,
        100.0 * summary.removed_fraction()
    );
    Ok((out, summary))
}
