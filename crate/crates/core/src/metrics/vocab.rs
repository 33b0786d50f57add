//! Category vocabularies for restricted bag-of-words matching.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::QuestionCategory;

pub const YESNO_TOKENS: [&str; 2] = ["yes", "no"];

pub const COLOR_TOKENS: [&str; 36] = [
    "orangebrown", "spot", "yellow", "blue", "rainbow", "ivory",
    "brown", "gray", "teal", "bluewhite", "orangepurple", "black",
    "white", "gold", "redorange", "pink", "blonde", "tan", "turquoise",
    "grey", "beige", "golden", "orange", "bronze", "maroon", "purple",
    "bluere", "red", "rust", "violet", "transparent", "yes", "silver",
    "chrome", "green", "aqua",
];

pub const SHAPE_TOKENS: [&str; 69] = [
    "globular", "octogon", "ring", "hoop", "octagon", "concave", "flat",
    "wavy", "shamrock", "cross", "cylinder", "cylindrical", "pentagon",
    "point", "pyramidal", "crescent", "rectangular", "hook", "tube",
    "cone", "bell", "spiral", "ball", "convex", "square", "arch", "h",
    "cuboid", "step", "rectangle", "dot", "oval", "circle", "star",
    "crosse", "crest", "octagonal", "cube", "triangle", "semicircle",
    "domeshape", "obelisk", "corkscrew", "curve", "circular", "xs",
    "slope", "pyramid", "round", "bow", "straight", "triangular",
    "heart", "fork", "teardrop", "fold", "curl", "spherical",
    "diamond", "keyhole", "conical", "dome", "sphere", "bellshaped",
    "rounded", "hexagon", "flower", "globe", "torus",
];

pub const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

/// Largest digit string accepted by the default number vocabulary.
pub const NUMBER_DIGIT_MAX: u32 = 9999;

/// Lowercase and split on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    pub yesno: BTreeSet<String>,
    pub color: BTreeSet<String>,
    pub shape: BTreeSet<String>,
    pub number_words: BTreeSet<String>,
    /// Digit strings `0..=number_digit_max` are number tokens.
    pub number_digit_max: u32,
}

impl Default for CategoryVocabulary {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        CategoryVocabulary {
            yesno: set(&YESNO_TOKENS),
            color: set(&COLOR_TOKENS),
            shape: set(&SHAPE_TOKENS),
            number_words: set(&NUMBER_WORDS),
            number_digit_max: NUMBER_DIGIT_MAX,
        }
    }
}

impl CategoryVocabulary {
    /// Membership test. `Open` has no vocabulary restriction.
    pub fn contains(&self, category: QuestionCategory, token: &str) -> bool {
        match category {
            QuestionCategory::YesNo => self.yesno.contains(token),
            QuestionCategory::Color => self.color.contains(token),
            QuestionCategory::Shape => self.shape.contains(token),
            QuestionCategory::Number => {
                self.number_words.contains(token) || self.is_number_digits(token)
            }
            QuestionCategory::Open => true,
        }
    }

    fn is_number_digits(&self, token: &str) -> bool {
        // "007" is not the canonical form of 7, so it is not in the set
        !token.is_empty()
            && token.bytes().all(|b| b.is_ascii_digit())
            && (token == "0" || !token.starts_with('0'))
            && token.len() <= 10
            && token.parse::<u64>().is_ok_and(|n| n <= self.number_digit_max as u64)
    }

    /// Finite token list for an enumerable category, in sorted order.
    pub fn tokens(&self, category: QuestionCategory) -> Vec<String> {
        match category {
            QuestionCategory::YesNo => self.yesno.iter().cloned().collect(),
            QuestionCategory::Color => self.color.iter().cloned().collect(),
            QuestionCategory::Shape => self.shape.iter().cloned().collect(),
            QuestionCategory::Number => {
                let mut all: Vec<String> = self.number_words.iter().cloned().collect();
                all.extend((0..=self.number_digit_max).map(|n| n.to_string()));
                all
            }
            QuestionCategory::Open => Vec::new(),
        }
    }
}
