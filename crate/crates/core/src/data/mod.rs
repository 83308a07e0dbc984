//! Datasets: synthetic corpus, overlap filtering, hard-negative mining, IO.

mod corpus;
mod io;
mod levenshtein;
mod mining;

pub use corpus::{
    attrs_from_prompt, gen_synthetic_corpus, preferred_by_rule, prompt_for, quality_score,
    render_image, Corpus, CorpusSpec, Preferred, PromptAttrs, COLOR_NAMES, COUNT_NAMES,
    SHAPE_NAMES,
};
pub use io::{load_binary, load_pairs, save_binary, save_pairs};
pub use levenshtein::{levenshtein, normalized_levenshtein};
pub use mining::{filter_overlap, mine_hard_negatives};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token id space shared by all prompts; the last id is reserved for EOS.
pub const VOCAB_SIZE: usize = 256;
/// Reserved end-of-sentence token appended by the model, never by prompts.
pub const EOS_TOKEN: u32 = (VOCAB_SIZE - 1) as u32;

/// Evaluation axis a reward model is specialized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerspectiveTag {
    Alignment,
    Fidelity,
    Safety,
    Overall,
}

impl PerspectiveTag {
    pub const ALL: [PerspectiveTag; 4] = [
        PerspectiveTag::Alignment,
        PerspectiveTag::Fidelity,
        PerspectiveTag::Safety,
        PerspectiveTag::Overall,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerspectiveTag::Alignment => "alignment",
            PerspectiveTag::Fidelity => "fidelity",
            PerspectiveTag::Safety => "safety",
            PerspectiveTag::Overall => "overall",
        }
    }
}

impl std::str::FromStr for PerspectiveTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(PerspectiveTag::Alignment),
            "fidelity" => Ok(PerspectiveTag::Fidelity),
            "safety" => Ok(PerspectiveTag::Safety),
            "overall" => Ok(PerspectiveTag::Overall),
            other => Err(Error::UnknownPerspective(other.to_string())),
        }
    }
}

impl std::fmt::Display for PerspectiveTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tokenized prompt plus its raw surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub tokens: Vec<u32>,
    pub raw: String,
}

impl TextPrompt {
    /// Builds a prompt from known vocabulary words.
    pub fn from_words(words: &[&str]) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("prompt must be non-empty".into()));
        }
        let tokens = words
            .iter()
            .map(|w| {
                token_for_word(w)
                    .ok_or_else(|| Error::Config(format!("word {w:?} not in vocabulary")))
            })
            .collect::<Result<Vec<u32>>>()?;
        Ok(Self {
            tokens,
            raw: words.join(" "),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Config("prompt must be non-empty".into()));
        }
        for &t in &self.tokens {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::Config(format!(
                    "token id {t} exceeds vocabulary size {VOCAB_SIZE}"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed word table: counts, colors, shapes.
const WORD_TABLE: &[(&str, u32)] = &[
    ("one", 1),
    ("two", 2),
    ("three", 3),
    ("red", 10),
    ("green", 11),
    ("blue", 12),
    ("yellow", 13),
    ("cyan", 14),
    ("white", 15),
    ("square", 20),
    ("circle", 21),
    ("cross", 22),
    ("triangle", 23),
];

pub fn token_for_word(word: &str) -> Option<u32> {
    WORD_TABLE
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, id)| *id)
}

/// Categorical ground-truth attributes a synthetic image was rendered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: u8,
    pub color: u8,
    pub count: u8,
    pub corruption: u8,
    pub unsafe_marker: bool,
}

/// A small H x W x C image with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub pixels: Array3<f64>,
    pub attributes: Attributes,
}

impl SyntheticImage {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("pixel values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Pixel-space squared L2 distance to another image of the same shape.
    pub fn l2_sq(&self, other: &SyntheticImage) -> f64 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// One preference record: a prompt with a chosen and a rejected image.
///
/// For mined prompt-negatives the rejected image is scored under
/// `rejected_prompt` instead of the shared prompt; in that encoding the two
/// legs may carry the same pixels but must differ as (prompt, image) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub prompt: TextPrompt,
    pub chosen: SyntheticImage,
    pub rejected: SyntheticImage,
    pub rejected_prompt: Option<TextPrompt>,
    pub perspective: PerspectiveTag,
}

impl PairExample {
    /// The legs must be distinct as (prompt, image) pairs.
    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.chosen.validate()?;
        self.rejected.validate()?;
        if let Some(rp) = &self.rejected_prompt {
            rp.validate()?;
            if rp == &self.prompt && self.chosen == self.rejected {
                return Err(Error::Config("pair legs are identical".into()));
            }
        } else if self.chosen == self.rejected {
            return Err(Error::Config("pair legs are identical".into()));
        }
        Ok(())
    }

    /// The prompt the rejected leg is scored under.
    pub fn rejected_leg_prompt(&self) -> &TextPrompt {
        self.rejected_prompt.as_ref().unwrap_or(&self.prompt)
    }
}

/// One binary-labeled record (true = chosen/safe, false = rejected/unsafe).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryExample {
    pub prompt: TextPrompt,
    pub image: SyntheticImage,
    pub label: bool,
}
