//! Synthetic corpus generation.
//!
//! Images are 16x16x3 canvases with colored shape instances placed at fixed
//! quadrant anchors; prompts name the (count, color, shape) triple. A
//! deterministic rule maps (prompt attributes, image attributes, perspective)
//! to the preferred image, so every generated pair carries an exact
//! ground-truth label that tests can recompute independently.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Attributes, BinaryExample, PairExample, PerspectiveTag, SyntheticImage, TextPrompt,
};
use crate::{Error, Result};

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "white"];
pub const SHAPE_NAMES: [&str; 4] = ["square", "circle", "cross", "triangle"];
pub const COUNT_NAMES: [&str; 3] = ["one", "two", "three"];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.12, 0.15, 0.85],
    [0.85, 0.80, 0.10],
    [0.10, 0.80, 0.80],
    [0.90, 0.90, 0.90],
];
const BACKGROUND: f64 = 0.08;
const UNSAFE_BORDER: [f64; 3] = [0.90, 0.05, 0.90];

/// Parameters controlling a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub perspective: PerspectiveTag,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Palette indices in play (subsets of COLOR_NAMES).
    pub colors: Vec<u8>,
    /// Shape indices in play (subsets of SHAPE_NAMES).
    pub shapes: Vec<u8>,
    /// Instance counts in play (1..=3).
    pub counts: Vec<u8>,
    /// Corruption levels in play; fidelity needs at least two.
    pub corruption_levels: Vec<u8>,
    /// Noise amplitude applied per corruption level.
    pub noise_amplitude: f64,
    /// Probability that a safety example is unsafe.
    pub unsafe_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            perspective: PerspectiveTag::Alignment,
            height: 16,
            width: 16,
            channels: 3,
            colors: vec![0, 1, 2, 3],
            shapes: vec![0, 1, 2, 3],
            counts: vec![1, 2, 3],
            corruption_levels: vec![0],
            noise_amplitude: 0.05,
            unsafe_fraction: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn for_perspective(perspective: PerspectiveTag) -> Self {
        let mut spec = Self {
            perspective,
            ..Self::default()
        };
        if matches!(
            perspective,
            PerspectiveTag::Fidelity | PerspectiveTag::Overall
        ) {
            spec.corruption_levels = vec![0, 1, 2, 3];
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Config("corpus images must have 3 channels".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.counts.is_empty() {
            return Err(Error::Config(
                "colors, shapes, and counts must each have at least one class".into(),
            ));
        }
        if self.colors.iter().any(|&c| c as usize >= PALETTE.len()) {
            return Err(Error::Config("color index out of palette range".into()));
        }
        if self.shapes.iter().any(|&s| s as usize >= SHAPE_NAMES.len()) {
            return Err(Error::Config("shape index out of range".into()));
        }
        if self.counts.iter().any(|&c| c == 0 || c > 3) {
            return Err(Error::Config("counts must lie in 1..=3".into()));
        }
        if self.corruption_levels.is_empty() {
            return Err(Error::Config("need at least one corruption level".into()));
        }
        if self.perspective == PerspectiveTag::Fidelity && self.corruption_levels.len() < 2 {
            return Err(Error::Config(
                "fidelity corpus needs at least two corruption levels".into(),
            ));
        }
        if !(0.0..=0.25).contains(&self.noise_amplitude) {
            return Err(Error::Config("noise_amplitude must lie in [0, 0.25]".into()));
        }
        if !(0.0..=1.0).contains(&self.unsafe_fraction) {
            return Err(Error::Config("unsafe_fraction must lie in [0, 1]".into()));
        }
        if self.colors.len() * self.shapes.len() * self.counts.len() < 2 {
            return Err(Error::Config(
                "attribute space must contain at least two combinations".into(),
            ));
        }
        Ok(())
    }
}

/// A generated dataset: paired preferences plus binary-labeled examples.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub pairs: Vec<PairExample>,
    pub binary: Vec<BinaryExample>,
}

/// The attribute triple a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptAttrs {
    pub color: u8,
    pub shape: u8,
    pub count: u8,
}

/// Which leg of a candidate pair the generation rule prefers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preferred {
    First,
    Second,
}

/// Prompt surface form for an attribute triple. The attribute words repeat
/// once ("one red square one red square") so the prompt carries enough mass
/// against the visual tokens in the EOS hidden state at desk scale.
pub fn prompt_for(attrs: PromptAttrs) -> TextPrompt {
    let count = COUNT_NAMES[attrs.count as usize - 1];
    let color = COLOR_NAMES[attrs.color as usize];
    let shape = SHAPE_NAMES[attrs.shape as usize];
    TextPrompt::from_words(&[count, color, shape, count, color, shape])
        .expect("generator words are always in vocabulary")
}

/// Parses a generated prompt back into its attribute triple.
pub fn attrs_from_prompt(prompt: &TextPrompt) -> Option<PromptAttrs> {
    let words: Vec<&str> = prompt.raw.split_whitespace().collect();
    if words.len() < 3 {
        return None;
    }
    let count = COUNT_NAMES.iter().position(|w| *w == words[0])? as u8 + 1;
    let color = COLOR_NAMES.iter().position(|w| *w == words[1])? as u8;
    let shape = SHAPE_NAMES.iter().position(|w| *w == words[2])? as u8;
    Some(PromptAttrs {
        color,
        shape,
        count,
    })
}

fn match_count(prompt: PromptAttrs, image: &Attributes) -> u32 {
    u32::from(prompt.color == image.color)
        + u32::from(prompt.shape == image.shape)
        + u32::from(prompt.count == image.count)
}

/// The deterministic labeling rule the generator enforces.
///
/// Alignment prefers the image matching more prompt attributes; fidelity
/// prefers the lower corruption level; overall orders lexicographically by
/// (match count desc, corruption asc). Returns None on a tie and for the
/// safety perspective, which is labeled per-image rather than pairwise.
pub fn preferred_by_rule(
    perspective: PerspectiveTag,
    prompt: PromptAttrs,
    a: &Attributes,
    b: &Attributes,
) -> Option<Preferred> {
    let key = |img: &Attributes| -> (i64, i64) {
        match perspective {
            PerspectiveTag::Alignment => (i64::from(match_count(prompt, img)), 0),
            PerspectiveTag::Fidelity => (-i64::from(img.corruption), 0),
            PerspectiveTag::Overall => (
                i64::from(match_count(prompt, img)),
                -i64::from(img.corruption),
            ),
            PerspectiveTag::Safety => return (0, 0),
        }
    };
    if perspective == PerspectiveTag::Safety {
        return None;
    }
    match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Greater => Some(Preferred::First),
        std::cmp::Ordering::Less => Some(Preferred::Second),
        std::cmp::Ordering::Equal => None,
    }
}

/// Rule-derived scalar quality of an image under a prompt, used as the
/// human-score stand-in when computing correlation metrics.
pub fn quality_score(perspective: PerspectiveTag, prompt: PromptAttrs, image: &Attributes) -> f64 {
    match perspective {
        PerspectiveTag::Alignment => f64::from(match_count(prompt, image)),
        PerspectiveTag::Fidelity => -f64::from(image.corruption),
        PerspectiveTag::Overall => {
            10.0 * f64::from(match_count(prompt, image)) - f64::from(image.corruption)
        }
        PerspectiveTag::Safety => {
            if image.unsafe_marker {
                0.0
            } else {
                1.0
            }
        }
    }
}

fn shape_mask(shape: u8, r: usize, c: usize) -> bool {
    // masks inside an 8x8 cell; kept strongly distinct at patch granularity
    match shape {
        // solid square
        0 => true,
        // hollow frame
        1 => r < 2 || r >= 6 || c < 2 || c >= 6,
        // plus
        2 => (3..5).contains(&r) || (3..5).contains(&c),
        // lower-left triangle
        3 => r >= c,
        _ => false,
    }
}

/// Renders the image for an attribute set; `rng` drives corruption noise only.
pub fn render_image(attrs: Attributes, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> SyntheticImage {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut pixels = Array3::from_elem((h, w, ch), BACKGROUND);

    let cell_h = h / 2;
    let cell_w = w / 2;
    let anchors = [(0, 0), (0, cell_w), (cell_h, 0), (cell_h, cell_w)];
    let rgb = PALETTE[attrs.color as usize];
    for &(ar, ac) in anchors.iter().take(attrs.count as usize) {
        for r in 0..cell_h.min(8) {
            for c in 0..cell_w.min(8) {
                if shape_mask(attrs.shape, r, c) {
                    for (k, &v) in rgb.iter().enumerate() {
                        pixels[[ar + r, ac + c, k]] = v;
                    }
                }
            }
        }
    }

    if attrs.unsafe_marker {
        for r in 0..h {
            for c in 0..w {
                if r == 0 || r + 1 == h || c == 0 || c + 1 == w {
                    for (k, &v) in UNSAFE_BORDER.iter().enumerate() {
                        pixels[[r, c, k]] = v;
                    }
                }
            }
        }
    }

    if attrs.corruption > 0 {
        let amp = spec.noise_amplitude * f64::from(attrs.corruption);
        for p in pixels.iter_mut() {
            *p = (*p + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0);
        }
    }

    SyntheticImage {
        pixels,
        attributes: attrs,
    }
}

fn sample_prompt_attrs(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> PromptAttrs {
    PromptAttrs {
        color: spec.colors[rng.gen_range(0..spec.colors.len())],
        shape: spec.shapes[rng.gen_range(0..spec.shapes.len())],
        count: spec.counts[rng.gen_range(0..spec.counts.len())],
    }
}

/// Samples an attribute triple distinct from `avoid` (requires >= 2 combos).
fn sample_mismatched(spec: &CorpusSpec, avoid: PromptAttrs, rng: &mut ChaCha8Rng) -> PromptAttrs {
    loop {
        let candidate = sample_prompt_attrs(spec, rng);
        if candidate != avoid {
            return candidate;
        }
    }
}

fn image_attrs(p: PromptAttrs, corruption: u8) -> Attributes {
    Attributes {
        shape: p.shape,
        color: p.color,
        count: p.count,
        corruption,
        unsafe_marker: false,
    }
}

/// Generates `n` preference pairs (or binary examples for safety) from the
/// spec's attribute distributions. Pure function of (seed, n, spec).
pub fn gen_synthetic_corpus(seed: u64, n: usize, spec: &CorpusSpec) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::default();

    for _ in 0..n {
        match spec.perspective {
            PerspectiveTag::Alignment => {
                let want = sample_prompt_attrs(spec, &mut rng);
                let level = spec.corruption_levels[rng.gen_range(0..spec.corruption_levels.len())];
                let other = sample_mismatched(spec, want, &mut rng);
                let chosen = render_image(image_attrs(want, level), spec, &mut rng);
                let rejected = render_image(image_attrs(other, level), spec, &mut rng);
                corpus.pairs.push(PairExample {
                    prompt: prompt_for(want),
                    chosen,
                    rejected,
                    rejected_prompt: None,
                    perspective: spec.perspective,
                });
            }
            PerspectiveTag::Fidelity => {
                let want = sample_prompt_attrs(spec, &mut rng);
                let lo = rng.gen_range(0..spec.corruption_levels.len() - 1);
                let hi = rng.gen_range(lo + 1..spec.corruption_levels.len());
                let mut levels = spec.corruption_levels.clone();
                levels.sort_unstable();
                let chosen = render_image(image_attrs(want, levels[lo]), spec, &mut rng);
                let rejected = render_image(image_attrs(want, levels[hi]), spec, &mut rng);
                corpus.pairs.push(PairExample {
                    prompt: prompt_for(want),
                    chosen,
                    rejected,
                    rejected_prompt: None,
                    perspective: spec.perspective,
                });
            }
            PerspectiveTag::Overall => {
                let want = sample_prompt_attrs(spec, &mut rng);
                let mut levels = spec.corruption_levels.clone();
                levels.sort_unstable();
                let chosen = render_image(image_attrs(want, levels[0]), spec, &mut rng);
                let rejected = if rng.gen_bool(0.5) && levels.len() > 1 {
                    // same attributes, worse corruption
                    let hi = levels[rng.gen_range(1..levels.len())];
                    render_image(image_attrs(want, hi), spec, &mut rng)
                } else {
                    let other = sample_mismatched(spec, want, &mut rng);
                    let level = levels[rng.gen_range(0..levels.len())];
                    render_image(image_attrs(other, level), spec, &mut rng)
                };
                corpus.pairs.push(PairExample {
                    prompt: prompt_for(want),
                    chosen,
                    rejected,
                    rejected_prompt: None,
                    perspective: spec.perspective,
                });
            }
            PerspectiveTag::Safety => {
                let want = sample_prompt_attrs(spec, &mut rng);
                let unsafe_marker = rng.gen_bool(spec.unsafe_fraction);
                let level = spec.corruption_levels[rng.gen_range(0..spec.corruption_levels.len())];
                let mut attrs = image_attrs(want, level);
                attrs.unsafe_marker = unsafe_marker;
                let image = render_image(attrs, spec, &mut rng);
                corpus.binary.push(BinaryExample {
                    prompt: prompt_for(want),
                    image,
                    label: !unsafe_marker,
                });
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_pair_chosen_matches_prompt_exactly() {
        let spec = CorpusSpec::default();
        let corpus = gen_synthetic_corpus(0, 1, &spec).unwrap();
        assert_eq!(corpus.pairs.len(), 1);
        assert!(corpus.binary.is_empty());
        let pair = &corpus.pairs[0];
        let want = attrs_from_prompt(&pair.prompt).unwrap();
        assert_eq!(pair.chosen.attributes.color, want.color);
        assert_eq!(pair.chosen.attributes.shape, want.shape);
        assert_eq!(pair.chosen.attributes.count, want.count);
        pair.validate().unwrap();
    }

    #[test]
    fn same_seed_same_spec_is_byte_identical() {
        let spec = CorpusSpec::for_perspective(PerspectiveTag::Fidelity);
        let a = gen_synthetic_corpus(42, 25, &spec).unwrap();
        let b = gen_synthetic_corpus(42, 25, &spec).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let c = gen_synthetic_corpus(43, 25, &spec).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn preferred_by_rule_holds_on_every_generated_pair() {
        // re-apply the labeling rule as the oracle over a large corpus
        for perspective in [
            PerspectiveTag::Alignment,
            PerspectiveTag::Fidelity,
            PerspectiveTag::Overall,
        ] {
            let spec = CorpusSpec::for_perspective(perspective);
            let corpus = gen_synthetic_corpus(0, 1000, &spec).unwrap();
            assert_eq!(corpus.pairs.len(), 1000);
            for pair in &corpus.pairs {
                let want = attrs_from_prompt(&pair.prompt).unwrap();
                let verdict = preferred_by_rule(
                    perspective,
                    want,
                    &pair.chosen.attributes,
                    &pair.rejected.attributes,
                );
                assert_eq!(verdict, Some(Preferred::First), "perspective {perspective}");
            }
        }
    }

    #[test]
    fn safety_labels_derive_from_unsafe_attribute() {
        let spec = CorpusSpec::for_perspective(PerspectiveTag::Safety);
        let corpus = gen_synthetic_corpus(5, 200, &spec).unwrap();
        assert_eq!(corpus.binary.len(), 200);
        assert!(corpus.pairs.is_empty());
        for ex in &corpus.binary {
            assert_eq!(ex.label, !ex.image.attributes.unsafe_marker);
        }
        // both classes present at the default fraction
        let unsafe_count = corpus.binary.iter().filter(|e| !e.label).count();
        assert!(unsafe_count > 50 && unsafe_count < 150);
    }

    #[test]
    fn pixels_stay_in_unit_interval_under_corruption() {
        let mut spec = CorpusSpec::for_perspective(PerspectiveTag::Fidelity);
        spec.noise_amplitude = 0.25;
        let corpus = gen_synthetic_corpus(9, 50, &spec).unwrap();
        for pair in &corpus.pairs {
            pair.chosen.validate().unwrap();
            pair.rejected.validate().unwrap();
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = CorpusSpec::default();
        spec.colors.clear();
        assert!(gen_synthetic_corpus(0, 1, &spec).is_err());

        let mut spec = CorpusSpec::default();
        spec.counts = vec![7];
        assert!(gen_synthetic_corpus(0, 1, &spec).is_err());

        let mut spec = CorpusSpec::for_perspective(PerspectiveTag::Fidelity);
        spec.corruption_levels = vec![0];
        assert!(gen_synthetic_corpus(0, 1, &spec).is_err());

        assert!(gen_synthetic_corpus(0, 0, &CorpusSpec::default()).is_err());

        let mut spec = CorpusSpec::default();
        spec.colors = vec![0];
        spec.shapes = vec![0];
        spec.counts = vec![1];
        assert!(gen_synthetic_corpus(0, 1, &spec).is_err());
    }

    #[test]
    fn prompt_attr_roundtrip() {
        let attrs = PromptAttrs {
            color: 2,
            shape: 3,
            count: 2,
        };
        let prompt = prompt_for(attrs);
        assert_eq!(prompt.raw, "two blue triangle two blue triangle");
        assert_eq!(attrs_from_prompt(&prompt), Some(attrs));
    }
}
