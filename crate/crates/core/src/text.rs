//! Shared text normalization: lowercase, strip punctuation, split on
//! whitespace. Questions, answers, and the n-gram metrics all use this.

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            (!cleaned.is_empty()).then_some(cleaned)
        })
        .collect()
}
