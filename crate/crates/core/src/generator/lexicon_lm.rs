//! A deterministic lexicon-driven language model.
//!
//! It stands in for a large causal LM at desk scale: prompts naming a
//! sentiment and a domain produce short reviews built from the shared
//! [`crate::lexicon`] word lists through top-k/top-p sampling, with
//! configurable label noise, and next-token scoring reads polarity evidence
//! from the context text.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sampling::sample_top_k_top_p;
use super::{DecodingConfig, TextGenerator};
use crate::error::Result;
use crate::lexicon::{self, DomainLexicon, DOMAINS};
use crate::seed::{fnv1a, rng_for};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconLmConfig {
    /// Probability that a positive prompt yields negative text.
    pub positive_flip: f64,
    /// Probability that a negative prompt yields positive text.
    pub negative_flip: f64,
    /// Probability of text with no clear polarity.
    pub neutral_rate: f64,
    /// Extra flip probability when the prompt names no domain.
    pub universal_extra_flip: f64,
    /// Logit of the sentiment words after a relabel context.
    pub label_bias: f64,
    /// Next-token logit shift per unit of polarity evidence.
    pub evidence_scale: f64,
    /// Standard deviation of the per-text scoring perturbation.
    pub score_noise: f64,
}

impl Default for LexiconLmConfig {
    fn default() -> Self {
        Self {
            positive_flip: 0.10,
            negative_flip: 0.30,
            neutral_rate: 0.10,
            universal_extra_flip: 0.05,
            label_bias: 3.0,
            evidence_scale: 0.05,
            score_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LexiconLm {
    config: LexiconLmConfig,
    vocabulary: Vec<&'static str>,
}

const UNKNOWN_LOGIT: f64 = -10.0;

impl LexiconLm {
    pub fn new(config: LexiconLmConfig) -> Self {
        Self {
            config,
            vocabulary: lexicon::vocabulary(),
        }
    }

    pub fn config(&self) -> &LexiconLmConfig {
        &self.config
    }

    /// Net polarity evidence of a text (positive > 0).
    pub fn evidence(text: &str) -> f64 {
        tokenize(text).iter().map(|t| lexicon::cue_polarity(t)).sum()
    }

    fn perturbation(&self, text: &str) -> f64 {
        if self.config.score_noise == 0.0 {
            return 0.0;
        }
        let mut rng = rng_for(fnv1a(text.as_bytes()), &[]);
        let z: f64 = StandardNormal.sample(&mut rng);
        self.config.score_noise * z
    }

    fn sentence(&self, domain: &DomainLexicon, polarity: i8, decoding: &DecodingConfig, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
        let pick = |cands: &[(&'static str, f64)], rng: &mut ChaCha8Rng| {
            let logits: Vec<f64> = cands.iter().map(|c| c.1).collect();
            cands[sample_top_k_top_p(&logits, decoding.top_k, decoding.top_p, rng)].0
        };
        let topics: Vec<(&str, f64)> = DOMAINS
            .iter()
            .flat_map(|d| {
                let logit = if d.name == domain.name { 1.5 } else { -2.0 };
                d.topics.iter().map(move |t| (*t, logit))
            })
            .collect();
        let cues = cue_candidates(domain, polarity);
        let uniform = |words: &[&'static str]| words.iter().map(|w| (*w, 0.0)).collect::<Vec<_>>();

        let mut words = Vec::new();
        if rng.random_bool(0.4) {
            words.extend(pick(&uniform(lexicon::OPENERS), rng).split_whitespace());
        }
        words.push("the");
        words.push(pick(&topics, rng));
        words.push(if rng.random_bool(0.5) { "was" } else { "is" });
        if rng.random_bool(0.5) {
            words.push(pick(&uniform(lexicon::INTENSIFIERS), rng));
        }
        words.push(pick(&cues, rng));
        if rng.random_bool(0.6) {
            words.push(pick(&uniform(lexicon::CONNECTORS), rng));
            if rng.random_bool(0.5) {
                words.push("the");
                words.push(pick(&topics, rng));
                words.push("was");
            }
            words.push(pick(&cues, rng));
        }
        words.truncate(decoding.max_new_tokens);
        words
    }
}

impl Default for LexiconLm {
    fn default() -> Self {
        Self::new(LexiconLmConfig::default())
    }
}

fn cue_candidates(domain: &DomainLexicon, polarity: i8) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for d in DOMAINS {
        let own = d.name == domain.name;
        for (words, sign) in [(d.positive, 1i8), (d.negative, -1i8)] {
            let logit = match (polarity, sign == polarity, own) {
                (0, _, true) => 0.0,
                (0, _, false) => -2.0,
                (_, true, true) => 1.5,
                (_, true, false) => -0.5,
                (_, false, _) => -2.5,
            };
            out.extend(words.iter().map(|w| (*w, logit)));
        }
    }
    for (words, sign) in [(lexicon::GENERAL_POSITIVE, 1i8), (lexicon::GENERAL_NEGATIVE, -1i8)] {
        let logit = match polarity {
            0 => -1.0,
            p if p == sign => 1.0,
            _ => -2.5,
        };
        out.extend(words.iter().map(|w| (*w, logit)));
    }
    let neutral_logit = if polarity == 0 { 2.0 } else { -3.0 };
    out.extend(lexicon::NEUTRAL.iter().map(|w| (*w, neutral_logit)));
    out
}

/// Sentiment requested by the prompt: the last of "positive"/"negative".
fn prompt_polarity(prompt: &str) -> i8 {
    let mut polarity = 0;
    for token in tokenize(prompt) {
        match token.as_str() {
            "positive" => polarity = 1,
            "negative" => polarity = -1,
            _ => {}
        }
    }
    polarity
}

impl TextGenerator for LexiconLm {
    fn id(&self) -> String {
        "lexicon-lm".to_string()
    }

    fn generate(&self, prompt: &str, decoding: &DecodingConfig, seed: u64) -> Result<String> {
        let mut rng = rng_for(seed, &[fnv1a(prompt.as_bytes())]);
        let requested = prompt_polarity(prompt);
        let named = lexicon::domain_in_prompt(prompt);
        let domain = named.unwrap_or_else(|| &DOMAINS[rng.random_range(0..DOMAINS.len())]);

        let flip = match requested {
            1 => self.config.positive_flip,
            -1 => self.config.negative_flip,
            _ => 0.0,
        } + if named.is_none() { self.config.universal_extra_flip } else { 0.0 };
        let u: f64 = rng.random();
        let polarity = if requested == 0 || u < self.config.neutral_rate {
            0
        } else if u < self.config.neutral_rate + flip {
            -requested
        } else {
            requested
        };

        let words = self.sentence(domain, polarity, decoding, &mut rng);
        let mut text = words.join(" ");
        if let Some(first) = text.get(..1) {
            text = first.to_uppercase() + &text[1..];
        }
        text.push('.');
        // Causal models keep going past the sentence; the caller trims at the stop.
        let tail = self.sentence(domain, polarity, decoding, &mut rng).join(" ");
        Ok(format!(" {text}\n{tail}"))
    }

    fn score_next_tokens(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let context = prompt.rsplit_once('\n').map_or(prompt, |(text, _)| text);
        let signal = Self::evidence(context) + self.perturbation(context);
        let shift = self.config.evidence_scale * signal;
        let logit_of = |word: &str| match word {
            "positive" => self.config.label_bias + shift,
            "negative" => self.config.label_bias - shift,
            _ => 0.0,
        };
        let max = self
            .vocabulary
            .iter()
            .map(|w| logit_of(w))
            .fold(UNKNOWN_LOGIT, f64::max);
        let log_norm = max
            + (self.vocabulary.iter().map(|w| (logit_of(w) - max).exp()).sum::<f64>() + (UNKNOWN_LOGIT - max).exp())
                .ln();
        Ok(candidates
            .iter()
            .map(|c| {
                let first = c.split_whitespace().next().unwrap_or("").to_lowercase();
                let logit = if self.vocabulary.contains(&first.as_str()) {
                    logit_of(&first)
                } else {
                    UNKNOWN_LOGIT
                };
                logit - log_norm
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let lm = LexiconLm::default();
        let d = DecodingConfig::default();
        let p = "The text in positive sentiment is:";
        assert_eq!(lm.generate(p, &d, 3).unwrap(), lm.generate(p, &d, 3).unwrap());
        let distinct: std::collections::HashSet<String> = (0..20).map(|s| lm.generate(p, &d, s).unwrap()).collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn domain_prompt_stays_on_topic() {
        let lm = LexiconLm::new(LexiconLmConfig {
            positive_flip: 0.0,
            negative_flip: 0.0,
            neutral_rate: 0.0,
            ..LexiconLmConfig::default()
        });
        let d = DecodingConfig::default();
        let movie = lexicon::domain("movie").unwrap();
        for seed in 0..50 {
            let text = lm.generate("The movie review in negative sentiment is:", &d, seed).unwrap();
            let first = text.lines().next().unwrap();
            let tokens = tokenize(first);
            assert!(tokens.iter().any(|t| movie.topics.contains(&t.as_str())), "{first}");
            assert!(LexiconLm::evidence(first) < 0.0, "{first}");
        }
    }

    #[test]
    fn label_noise_matches_configuration() {
        let lm = LexiconLm::default();
        let d = DecodingConfig::default();
        let n = 2000;
        let flipped = (0..n)
            .filter(|s| {
                let text = lm.generate("The text in negative sentiment is:", &d, *s).unwrap();
                LexiconLm::evidence(text.lines().next().unwrap()) > 0.0
            })
            .count() as f64
            / n as f64;
        // negative_flip + universal_extra_flip = 0.35
        assert!((0.30..0.40).contains(&flipped), "{flipped}");
    }

    #[test]
    fn scores_are_log_probabilities() {
        let lm = LexiconLm::default();
        let cands = vec![" negative".to_string(), " positive".to_string(), " zebra".to_string()];
        let s = lm.score_next_tokens("Delicious and fresh food.\nThe text in", &cands).unwrap();
        assert!(s.iter().all(|v| v.is_finite() && *v <= 0.0));
        assert!(s[1] > s[0]);
        assert!(s[2] < s[0]);
    }
}
