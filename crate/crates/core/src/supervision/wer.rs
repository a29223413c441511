use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<String>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Lowercases, strips punctuation (apostrophes inside words survive) and
/// splits on whitespace.
pub fn normalize_text(raw: &str) -> Transcript {
    let tokens = raw
        .split_whitespace()
        .filter_map(|word| {
            let kept: String = word
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect();
            let trimmed = kept.trim_matches('\'');
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect();
    Transcript { tokens }
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Error count and reference length, the ingredients of a pooled WER.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub errors: usize,
    pub ref_words: usize,
}

impl ErrorCount {
    pub fn between(reference: &Transcript, hypothesis: &Transcript) -> Self {
        Self {
            errors: edit_distance(&reference.tokens, &hypothesis.tokens),
            ref_words: reference.len(),
        }
    }

    pub fn wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors as f64 / self.ref_words as f64)
    }
}

impl std::ops::AddAssign for ErrorCount {
    fn add_assign(&mut self, rhs: Self) {
        self.errors += rhs.errors;
        self.ref_words += rhs.ref_words;
    }
}

/// Edit distance divided by the reference length; not clipped at 1.
pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a non-empty reference"));
    }
    Ok(edit_distance(&reference.tokens, &hypothesis.tokens) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(words: &str) -> Transcript {
        normalize_text(words)
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(t("The CAT, sat.").tokens, ["the", "cat", "sat"]);
        assert_eq!(t("don't stop").tokens, ["don't", "stop"]);
        assert!(t("  ").is_empty());
        assert_eq!(t("'quoted' -- words!").tokens, ["quoted", "words"]);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&t("a b c"), &t("a b c")).unwrap(), 0.0);
        assert!((wer(&t("a b c"), &t("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&t("a b"), &t("a b c")).unwrap(), 0.5);
        assert!(wer(&t(""), &t("a")).is_err());
    }

    #[test]
    fn wer_is_not_clipped() {
        assert_eq!(wer(&t("a"), &t("b c d")).unwrap(), 3.0);
    }

    #[test]
    fn pooled_counts() {
        let mut total = ErrorCount::default();
        total += ErrorCount::between(&t("a b c d"), &t("a b x d"));
        total += ErrorCount::between(&t("a b c d e f"), &t("a b c d"));
        assert_eq!(total, ErrorCount { errors: 3, ref_words: 10 });
        assert_eq!(total.wer(), Some(0.3));
    }
}
