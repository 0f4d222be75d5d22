//! Synthetic dataset generation by conditioning a causal language model on a
//! label-bearing prompt.
//!
//! The universal template produces domain-free text; domain templates
//! reproduce task-specific generation, and passing several domain templates
//! at once concatenates their outputs round-robin.

mod lexicon_lm;
pub mod sampling;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, LabelSpace, PromptTemplate, Provenance, SampleRecord, Stage, TEXT_SLOT};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub use lexicon_lm::{LexiconLm, LexiconLmConfig};

/// A causal language model usable for both generation and next-token scoring.
///
/// Implementations must be deterministic for a fixed `(prompt, decoding, seed)`
/// and safe to call from several worker threads.
pub trait TextGenerator: Send + Sync {
    /// Identifier recorded in sample provenance.
    fn id(&self) -> String;

    fn generate(&self, prompt: &str, decoding: &DecodingConfig, seed: u64) -> Result<String>;

    /// Log-probability of each candidate's first token as the next token
    /// after `prompt`. Values are finite and `<= 0`.
    fn score_next_tokens(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>>;
}

impl<T: TextGenerator + ?Sized> TextGenerator for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, prompt: &str, decoding: &DecodingConfig, seed: u64) -> Result<String> {
        (**self).generate(prompt, decoding, seed)
    }

    fn score_next_tokens(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>> {
        (**self).score_next_tokens(prompt, candidates)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            top_k: 40,
            top_p: 0.9,
            max_new_tokens: 64,
            stop_sequences: vec!["\n".to_string()],
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn sample_seed_label<R: Rng + ?Sized>(label_space: &LabelSpace, rng: &mut R) -> usize {
    rng.random_range(0..label_space.num_classes())
}

/// Fills the `<label>` slot with the class name and cuts the template at the
/// `<text>` slot, so the prompt ends where the continuation begins.
pub fn render_generation_prompt(template: &PromptTemplate, label_space: &LabelSpace, label: usize) -> Result<String> {
    let word = label_space
        .name(label)
        .ok_or_else(|| Error::Validation(format!("class {label} not in label space")))?;
    let body = template.template();
    let body = match body.find(TEXT_SLOT) {
        Some(pos) => &body[..pos],
        None => body,
    };
    Ok(body.replace(crate::data::LABEL_SLOT, word).trim_end().to_string())
}

/// Strips an echoed prompt and cuts at the first newline or stop sequence.
pub fn clean_continuation(raw: &str, prompt: &str, decoding: &DecodingConfig) -> String {
    let mut text = raw.strip_prefix(prompt).unwrap_or(raw);
    let mut cut = text.find('\n').unwrap_or(text.len());
    for stop in decoding.stop_sequences.iter().filter(|s| !s.is_empty()) {
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text = &text[..cut];
    text.trim().to_string()
}

/// Generates one record, retrying empty continuations up to `attempts` times.
/// Returns `Ok(None)` when every attempt came back empty.
pub fn generate_sample<G, R>(
    gen: &G,
    template: &PromptTemplate,
    label_space: &LabelSpace,
    decoding: &DecodingConfig,
    attempts: usize,
    rng: &mut R,
) -> Result<Option<SampleRecord>>
where
    G: TextGenerator + ?Sized,
    R: Rng + ?Sized,
{
    let label = sample_seed_label(label_space, rng);
    let prompt = render_generation_prompt(template, label_space, label)?;
    for _ in 0..attempts.max(1) {
        let seed = rng.next_u64();
        let raw = gen.generate(&prompt, decoding, seed)?;
        let text = clean_continuation(&raw, &prompt, decoding);
        if text.is_empty() {
            continue;
        }
        let provenance = Provenance {
            generator: gen.id(),
            prompt: template.id().to_string(),
            top_k: decoding.top_k,
            top_p: decoding.top_p,
            max_new_tokens: decoding.max_new_tokens,
            stop_sequences: decoding.stop_sequences.clone(),
            seed,
        };
        return Ok(Some(SampleRecord::seeded(text, label, label_space.num_classes(), provenance)));
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub decoding: DecodingConfig,
    pub n_samples: usize,
    pub seed: u64,
    /// Attempts per draw before the draw is discarded.
    pub attempts: usize,
    /// Upper bound on draws for a single slot before giving up.
    pub max_draws: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            decoding: DecodingConfig::default(),
            n_samples: 1000,
            seed: 0,
            attempts: 3,
            max_draws: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub draws: usize,
    pub empty_generations: usize,
}

/// Produces exactly `n_samples` records. Slot `i` uses template
/// `i % templates.len()` and draws from a seed derived from `(seed, i, draw)`,
/// so the output does not depend on scheduling.
pub fn generate_dataset<G: TextGenerator + ?Sized>(
    gen: &G,
    templates: &[PromptTemplate],
    label_space: &LabelSpace,
    settings: &GenerationSettings,
    config_hash: &str,
) -> Result<(DatasetManifest, GenerationStats)> {
    if templates.is_empty() {
        return Err(Error::Config("at least one prompt template is required".into()));
    }
    if settings.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    settings.decoding.validate()?;

    let slots: Vec<Result<(SampleRecord, usize, usize)>> = (0..settings.n_samples)
        .into_par_iter()
        .map(|index| {
            let template = &templates[index % templates.len()];
            let mut empties = 0;
            for draw in 0..settings.max_draws {
                let mut rng = rng_for(settings.seed, &[index as u64, draw as u64]);
                let sample = generate_sample(gen, template, label_space, &settings.decoding, settings.attempts, &mut rng)
                    .map_err(|e| Error::Generation {
                        index,
                        source: Box::new(e),
                    })?;
                match sample {
                    Some(record) => return Ok((record, draw + 1, empties)),
                    None => empties += 1,
                }
            }
            Err(Error::Generation {
                index,
                source: Box::new(Error::Backend(format!(
                    "no non-empty continuation after {} draws",
                    settings.max_draws
                ))),
            })
        })
        .collect();

    let mut manifest = DatasetManifest::new(label_space.clone(), Stage::Generated, config_hash);
    let mut stats = GenerationStats::default();
    for slot in slots {
        let (record, draws, empties) = slot?;
        stats.draws += draws;
        stats.empty_generations += empties;
        manifest.records.push(record);
    }
    if stats.empty_generations > 0 {
        log::info!("{} empty generations discarded and redrawn", stats.empty_generations);
    }
    Ok((manifest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Fixed(&'static str);

    impl TextGenerator for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn generate(&self, _: &str, _: &DecodingConfig, _: u64) -> Result<String> {
            Ok(self.0.to_string())
        }
        fn score_next_tokens(&self, _: &str, c: &[String]) -> Result<Vec<f64>> {
            Ok(vec![-1.0; c.len()])
        }
    }

    /// Returns "" for the first `empties` calls, then a fixed text.
    struct Flaky {
        calls: AtomicUsize,
        empties: usize,
    }

    impl TextGenerator for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn generate(&self, _: &str, _: &DecodingConfig, _: u64) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(if n < self.empties { "  ".into() } else { "ok".into() })
        }
        fn score_next_tokens(&self, _: &str, c: &[String]) -> Result<Vec<f64>> {
            Ok(vec![-1.0; c.len()])
        }
    }

    #[test]
    fn seed_labels_are_uniform_for_two_classes() {
        let ls = LabelSpace::sentiment();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let ones = (0..n).filter(|_| sample_seed_label(&ls, &mut rng) == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
        assert!((0.47..=0.53).contains(&(1.0 - freq)));
    }

    #[test]
    fn seed_labels_repeat_under_same_seed() {
        let ls = LabelSpace::from_names(["a", "b", "c"]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_seed_label(&ls, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn renders_builtin_prompts() {
        let ls = LabelSpace::sentiment();
        let uni = PromptTemplate::default_universal();
        assert_eq!(render_generation_prompt(&uni, &ls, 1).unwrap(), "The text in positive sentiment is:");
        let movie = &PromptTemplate::default_domains()[0];
        assert_eq!(
            render_generation_prompt(movie, &ls, 0).unwrap(),
            "The movie review in negative sentiment is:"
        );
        assert!(PromptTemplate::universal("The text is: <text>").is_err());
    }

    #[test]
    fn continuation_is_cut_at_stop() {
        let d = DecodingConfig {
            stop_sequences: vec!["###".into()],
            ..DecodingConfig::default()
        };
        assert_eq!(clean_continuation("P: Great ### more", "P:", &d), "Great");
        assert_eq!(clean_continuation(" Fine.\nNext line", "P:", &d), "Fine.");
    }

    #[test]
    fn stub_sample_is_one_hot_with_default_decoding() {
        let ls = LabelSpace::sentiment();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = generate_sample(
            &Fixed("Great product!"),
            &PromptTemplate::default_universal(),
            &ls,
            &DecodingConfig::default(),
            3,
            &mut rng,
        )
        .unwrap()
        .unwrap();
        assert_eq!(r.text, "Great product!");
        assert_eq!(r.soft_label[r.seed_label], 1.0);
        assert_eq!(r.soft_label.iter().sum::<f64>(), 1.0);
        assert_eq!(r.weight, None);
        assert_eq!((r.provenance.top_k, r.provenance.top_p), (40, 0.9));
    }

    #[test]
    fn three_empty_continuations_discard_the_sample() {
        let gen = Flaky {
            calls: AtomicUsize::new(0),
            empties: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = generate_sample(
            &gen,
            &PromptTemplate::default_universal(),
            &LabelSpace::sentiment(),
            &DecodingConfig::default(),
            3,
            &mut rng,
        )
        .unwrap();
        assert!(out.is_none());

        let gen = Flaky {
            calls: AtomicUsize::new(0),
            empties: 3,
        };
        let settings = GenerationSettings {
            n_samples: 1,
            ..GenerationSettings::default()
        };
        let (m, stats) = generate_dataset(&gen, &[PromptTemplate::default_universal()], &LabelSpace::sentiment(), &settings, "h").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(stats.empty_generations, 1);
    }

    #[test]
    fn dataset_provenance_differs_only_in_seed() {
        let settings = GenerationSettings {
            n_samples: 10,
            seed: 5,
            ..GenerationSettings::default()
        };
        let (m, _) = generate_dataset(
            &Fixed("Great product!"),
            &[PromptTemplate::default_universal()],
            &LabelSpace::sentiment(),
            &settings,
            "h",
        )
        .unwrap();
        assert_eq!(m.len(), 10);
        let first = &m.records[0].provenance;
        for r in &m.records {
            let mut p = r.provenance.clone();
            p.seed = first.seed;
            assert_eq!(&p, first);
        }
        let mut seeds: Vec<u64> = m.records.iter().map(|r| r.provenance.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn combined_mode_is_round_robin() {
        let settings = GenerationSettings {
            n_samples: 10,
            ..GenerationSettings::default()
        };
        let templates = PromptTemplate::default_domains();
        let (m, _) = generate_dataset(&Fixed("x"), &templates, &LabelSpace::sentiment(), &settings, "h").unwrap();
        for t in &templates {
            assert_eq!(m.records.iter().filter(|r| r.provenance.prompt == t.id()).count(), 2);
        }
        let settings = GenerationSettings {
            n_samples: 7,
            ..settings
        };
        let (m, _) = generate_dataset(&Fixed("x"), &templates, &LabelSpace::sentiment(), &settings, "h").unwrap();
        let counts: Vec<usize> = templates
            .iter()
            .map(|t| m.records.iter().filter(|r| r.provenance.prompt == t.id()).count())
            .collect();
        assert_eq!(counts, vec![2, 2, 1, 1, 1]);
    }
}
