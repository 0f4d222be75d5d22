//! Rule-generated corpora with planted polarity cues.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::Corpus;
use crate::data::{DatasetManifest, LabelSpace, Provenance, SampleRecord, Stage};
use crate::lexicon::{self, DomainLexicon};
use crate::seed::rng_for;

/// Domains of the bundled evaluation fixture.
pub const FIXTURE_DOMAINS: [&str; 4] = ["movie", "products", "restaurant", "electronics"];
pub const FIXTURE_PER_DOMAIN: usize = 200;

fn sentence<R: Rng + ?Sized>(d: &DomainLexicon, positive: bool, rng: &mut R) -> String {
    let (own, general) = if positive {
        (d.positive, lexicon::GENERAL_POSITIVE)
    } else {
        (d.negative, lexicon::GENERAL_NEGATIVE)
    };
    let topic = d.topics.choose(rng).expect("non-empty topics");
    let cue = own.choose(rng).expect("non-empty cues");
    let mut words = vec!["the", *topic, if rng.random_bool(0.5) { "was" } else { "is" }];
    if rng.random_bool(0.3) {
        words.push(lexicon::INTENSIFIERS.choose(rng).expect("non-empty"));
    }
    words.push(cue);
    match rng.random_range(0..3) {
        0 => {
            words.push("and");
            words.push(general.choose(rng).expect("non-empty"));
        }
        1 => {
            words.extend(["but", "the"]);
            words.push(d.topics.choose(rng).expect("non-empty"));
            words.push("was");
            words.push(lexicon::NEUTRAL.choose(rng).expect("non-empty"));
        }
        _ => {}
    }
    words.join(" ")
}

/// Four domains of balanced binary sentiment texts (class 1 = positive).
pub fn bundled_fixture(seed: u64) -> BTreeMap<String, Corpus> {
    FIXTURE_DOMAINS
        .iter()
        .enumerate()
        .map(|(di, name)| {
            let d = lexicon::domain(name).expect("fixture domain exists in the lexicon");
            let mut rng = rng_for(seed, &[di as u64]);
            let corpus = (0..FIXTURE_PER_DOMAIN)
                .map(|i| {
                    let label = i % 2;
                    (sentence(d, label == 1, &mut rng), label)
                })
                .collect();
            (name.to_string(), corpus)
        })
        .collect()
}

/// Relabeled two-class dataset where a `flip_rate` fraction of the labels
/// is inverted. Returns the dataset and a per-record "label is clean" flag.
pub fn planted_noise_dataset(n: usize, flip_rate: f64, seed: u64) -> (DatasetManifest, Vec<bool>) {
    let mut rng = rng_for(seed, &[]);
    let mut m = DatasetManifest::new(LabelSpace::sentiment(), Stage::Relabeled, "planted-noise");
    let n_flip = (n as f64 * flip_rate).round() as usize;
    let mut flipped = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n_flip) {
        flipped[i] = true;
    }
    for (i, flip) in flipped.iter().enumerate() {
        let d = &lexicon::DOMAINS[rng.random_range(0..lexicon::DOMAINS.len())];
        let true_label = i % 2;
        let text = sentence(d, true_label == 1, &mut rng);
        let label = if *flip { 1 - true_label } else { true_label };
        let prov = Provenance {
            generator: "planted-noise".into(),
            prompt: String::new(),
            top_k: 0,
            top_p: 1.0,
            max_new_tokens: 0,
            stop_sequences: Vec::new(),
            seed,
        };
        m.records.push(SampleRecord::seeded(text, label, 2, prov));
    }
    let clean = flipped.iter().map(|f| !f).collect();
    (m, clean)
}
