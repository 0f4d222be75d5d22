//! Word lists shared by the lexicon language model and the bundled
//! evaluation fixture. Each domain carries topic nouns and its own polarity
//! cue words; a small general-purpose set of cues is shared by all domains.

#[derive(Debug, Clone, Copy)]
pub struct DomainLexicon {
    pub name: &'static str,
    /// Noun phrase that names the domain inside a prompt.
    pub prompt_noun: &'static str,
    pub topics: &'static [&'static str],
    pub positive: &'static [&'static str],
    pub negative: &'static [&'static str],
}

pub const GENERAL_POSITIVE: &[&str] = &["great", "wonderful", "excellent", "amazing", "lovely", "perfect"];
pub const GENERAL_NEGATIVE: &[&str] = &["terrible", "awful", "horrible", "worst", "disappointing", "poor"];

pub const OPENERS: &[&str] = &["honestly", "overall", "well", "so", "today", "really", "i think", "we found"];
pub const FILLER: &[&str] = &[
    "the", "it", "was", "this", "and", "really", "very", "quite", "my", "our", "just", "is", "with", "a", "that",
    "again", "also", "there",
];
/// Polarity-free adjectives used for off-label continuations.
pub const NEUTRAL: &[&str] = &["okay", "fine", "average", "ordinary", "normal", "typical"];
pub const INTENSIFIERS: &[&str] = &["very", "really", "quite", "so", "truly", "pretty"];
pub const CONNECTORS: &[&str] = &["and", "but", "also", "plus", "while"];

pub const DOMAINS: &[DomainLexicon] = &[
    DomainLexicon {
        name: "movie",
        prompt_noun: "movie review",
        topics: &["movie", "film", "plot", "actors", "director", "scenes", "sequel", "soundtrack"],
        positive: &["gripping", "moving", "hilarious", "masterpiece", "captivating", "brilliant"],
        negative: &["boring", "predictable", "dull", "overlong", "clumsy", "forgettable"],
    },
    DomainLexicon {
        name: "products",
        prompt_noun: "product review",
        topics: &["product", "item", "purchase", "package", "seller", "order", "delivery", "box"],
        positive: &["sturdy", "reliable", "useful", "bargain", "recommended", "handy"],
        negative: &["broken", "flimsy", "useless", "overpriced", "defective", "refund"],
    },
    DomainLexicon {
        name: "restaurant",
        prompt_noun: "restaurant review",
        topics: &["food", "waiter", "menu", "dinner", "restaurant", "dessert", "chef", "table"],
        positive: &["delicious", "tasty", "friendly", "fresh", "cozy", "flavorful"],
        negative: &["bland", "cold", "rude", "stale", "greasy", "overcooked"],
    },
    DomainLexicon {
        name: "electronics",
        prompt_noun: "electronics product review",
        topics: &["battery", "screen", "laptop", "phone", "charger", "speaker", "keyboard", "camera"],
        positive: &["fast", "crisp", "responsive", "durable", "sleek", "powerful"],
        negative: &["laggy", "dim", "overheats", "glitchy", "cracked", "noisy"],
    },
    DomainLexicon {
        name: "tweet",
        prompt_noun: "tweet",
        topics: &["today", "lol", "friends", "weekend", "morning", "tonight", "everyone", "guys"],
        positive: &["yay", "blessed", "awesome", "excited", "grateful", "thrilled"],
        negative: &["ugh", "annoyed", "sucks", "tired", "stressed", "furious"],
    },
];

pub fn domain(name: &str) -> Option<&'static DomainLexicon> {
    DOMAINS.iter().find(|d| d.name == name)
}

/// Finds the domain whose prompt noun occurs in `prompt`, preferring the
/// longest match ("electronics product review" over "product review").
pub fn domain_in_prompt(prompt: &str) -> Option<&'static DomainLexicon> {
    let lower = prompt.to_lowercase();
    DOMAINS
        .iter()
        .filter(|d| lower.contains(d.prompt_noun))
        .max_by_key(|d| d.prompt_noun.len())
}

/// Signed polarity evidence of a single lower-case token.
pub fn cue_polarity(token: &str) -> f64 {
    if GENERAL_POSITIVE.contains(&token) {
        return 0.8;
    }
    if GENERAL_NEGATIVE.contains(&token) {
        return -0.8;
    }
    for d in DOMAINS {
        if d.positive.contains(&token) {
            return 1.0;
        }
        if d.negative.contains(&token) {
            return -1.0;
        }
    }
    0.0
}

/// Every word the lexicon knows, in a fixed order without duplicates.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let mut push = |list: &[&'static str]| {
        for w in list {
            for part in w.split_whitespace() {
                if !words.contains(&part) {
                    words.push(part);
                }
            }
        }
    };
    push(GENERAL_POSITIVE);
    push(GENERAL_NEGATIVE);
    push(OPENERS);
    push(FILLER);
    push(NEUTRAL);
    push(INTENSIFIERS);
    push(CONNECTORS);
    for d in DOMAINS {
        push(d.topics);
        push(d.positive);
        push(d.negative);
    }
    push(&["positive", "negative", "neutral", "text", "in", "sentiment", "review", "product", "."]);
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_prompt_noun_wins() {
        let d = domain_in_prompt("The electronics product review in positive sentiment is:").unwrap();
        assert_eq!(d.name, "electronics");
        assert_eq!(domain_in_prompt("The product review in x").unwrap().name, "products");
        assert!(domain_in_prompt("The text in positive sentiment is:").is_none());
    }

    #[test]
    fn cue_words_are_unambiguous() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for d in DOMAINS {
            pos.extend_from_slice(d.positive);
            neg.extend_from_slice(d.negative);
        }
        pos.extend_from_slice(GENERAL_POSITIVE);
        neg.extend_from_slice(GENERAL_NEGATIVE);
        for w in &pos {
            assert!(!neg.contains(w), "{w} is both positive and negative");
            assert!(cue_polarity(w) > 0.0);
        }
        for w in &neg {
            assert!(cue_polarity(w) < 0.0);
        }
    }
}
