//! Detection of responses that decline to answer for lack of evidence.

use serde::{Deserialize, Serialize};

/// Phrases treated as equivalent to the retrieval label.
pub const ACKNOWLEDGMENT_PHRASES: [&str; 17] = [
    "<RET>",
    "sorry",
    "i cannot",
    "i do not",
    "image does not",
    "information",
    "not enough",
    "not clear",
    "not visible",
    "not sure",
    "not able",
    "determine",
    "blurry",
    "blurred",
    "no existence",
    "context",
    "apologize",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcknowledgmentLexicon {
    phrases: Vec<String>,
    /// Require phrase matches to sit on word boundaries.
    pub strict: bool,
}

impl Default for AcknowledgmentLexicon {
    fn default() -> Self {
        Self::new(ACKNOWLEDGMENT_PHRASES.iter().copied(), false)
    }
}

impl AcknowledgmentLexicon {
    pub fn new<'a>(phrases: impl IntoIterator<Item = &'a str>, strict: bool) -> Self {
        AcknowledgmentLexicon {
            phrases: phrases.into_iter().map(str::to_lowercase).collect(),
            strict,
        }
    }

    pub fn strict() -> Self {
        AcknowledgmentLexicon {
            strict: true,
            ..Self::default()
        }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// First matching phrase, if any.
    pub fn find(&self, text: &str) -> Option<&str> {
        let hay = text.to_lowercase();
        self.phrases
            .iter()
            .find(|p| {
                if self.strict {
                    contains_word(&hay, p)
                } else {
                    hay.contains(p.as_str())
                }
            })
            .map(String::as_str)
    }

    pub fn detect(&self, text: &str) -> bool {
        self.find(text).is_some()
    }
}

fn contains_word(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        // a boundary is only required where the phrase itself starts/ends in a word char
        let left_ok = !needle.starts_with(char::is_alphanumeric)
            || !is_word(hay[..start].chars().next_back());
        let right_ok =
            !needle.ends_with(char::is_alphanumeric) || !is_word(hay[end..].chars().next());
        if left_ok && right_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// `detect_ack` with the default (substring) lexicon.
pub fn detect_ack(text: &str) -> bool {
    AcknowledgmentLexicon::default().detect(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert!(detect_ack("Sorry, I cannot determine the answer."));
        assert!(!detect_ack("The shape is round."));
        assert!(detect_ack("<RET>"));
        assert!(detect_ack("<ret>"));
    }

    #[test]
    fn strict_mode_needs_word_boundaries() {
        let loose = AcknowledgmentLexicon::default();
        let strict = AcknowledgmentLexicon::strict();
        let t = "An informational plaque stands by the gate.";
        assert!(loose.detect(t));
        assert!(!strict.detect(t));
        assert!(strict.detect("Not enough information."));
        assert!(strict.detect("answer: <RET>"));
        assert!(strict.detect("x<RET>y"));
        assert!(!strict.detect("predetermined"));
    }

    #[test]
    fn monotone_under_supertext() {
        let lex = AcknowledgmentLexicon::default();
        for p in ACKNOWLEDGMENT_PHRASES {
            let t = format!("well, {p} indeed");
            assert!(lex.detect(&t));
            assert!(lex.detect(&format!("prefix {t} suffix")));
        }
    }
}
