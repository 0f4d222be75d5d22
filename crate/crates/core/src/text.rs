//! Tokenization shared by the lexicon model, feature extraction and the TAM.

/// Lower-cases and splits on anything that is not alphanumeric or an
/// apostrophe.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("Don't buy, it's BAD!"), vec!["don't", "buy", "it's", "bad"]);
        assert!(tokenize("  ...  ").is_empty());
    }
}
