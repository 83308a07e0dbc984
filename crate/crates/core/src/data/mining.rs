//! Prompt-overlap filtering and hard-negative mining.

use super::levenshtein::normalized_levenshtein;
use super::{PairExample, TextPrompt};
use crate::{Error, Result};

/// Drops every training pair whose prompt sits within `threshold` normalized
/// edit distance of any holdout prompt. The result is a subset of `train`.
pub fn filter_overlap(
    train: &[PairExample],
    holdout: &[PairExample],
    threshold: f64,
) -> Result<Vec<PairExample>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0,1], got {threshold}"
        )));
    }
    let holdout_prompts: Vec<&str> = holdout.iter().map(|p| p.prompt.raw.as_str()).collect();
    Ok(train
        .iter()
        .filter(|ex| {
            !holdout_prompts
                .iter()
                .any(|h| normalized_levenshtein(&ex.prompt.raw, h) < threshold)
        })
        .cloned()
        .collect())
}

/// Distinct prompts in first-occurrence order, with that first index.
fn distinct_prompts(dataset: &[PairExample]) -> Vec<(usize, &TextPrompt)> {
    let mut seen: Vec<(usize, &TextPrompt)> = Vec::new();
    for (idx, ex) in dataset.iter().enumerate() {
        if !seen.iter().any(|(_, p)| p.raw == ex.prompt.raw) {
            seen.push((idx, &ex.prompt));
        }
    }
    seen
}

/// Augments a pair dataset with hardest-negative prompts and images.
///
/// For each prompt `t` and each of its chosen images `i_k`:
/// - a prompt-negative pair keeps `i_k` on both legs but scores the rejected
///   leg under the most-similar distinct prompt (argmin normalized edit
///   distance, ties to the lowest dataset index);
/// - an image-negative pair rejects the pixel-closest distinct image in the
///   dataset (argmin pixel L2, ties to the lowest dataset index).
///
/// Returns the original pairs followed by the mined ones.
pub fn mine_hard_negatives(dataset: &[PairExample]) -> Result<Vec<PairExample>> {
    let prompts = distinct_prompts(dataset);
    if prompts.len() < 2 {
        return Err(Error::Mining(format!(
            "negative prompts need at least 2 distinct prompts, got {}",
            prompts.len()
        )));
    }

    // image pool in dataset order: chosen leg then rejected leg of each pair
    let pool: Vec<&super::SyntheticImage> = dataset
        .iter()
        .flat_map(|ex| [&ex.chosen, &ex.rejected])
        .collect();
    {
        let mut distinct = 0usize;
        'outer: for (i, img) in pool.iter().enumerate() {
            for prior in &pool[..i] {
                if prior.pixels == img.pixels {
                    continue 'outer;
                }
            }
            distinct += 1;
            if distinct >= 2 {
                break;
            }
        }
        if distinct < 2 {
            return Err(Error::Mining(format!(
                "negative images need at least 2 distinct images, got {distinct}"
            )));
        }
    }

    let mut mined = Vec::new();
    for &(_, prompt) in &prompts {
        let neg_prompt = prompts
            .iter()
            .filter(|(_, p)| p.raw != prompt.raw)
            .min_by(|(ia, a), (ib, b)| {
                let da = normalized_levenshtein(&prompt.raw, &a.raw);
                let db = normalized_levenshtein(&prompt.raw, &b.raw);
                da.partial_cmp(&db).unwrap().then(ia.cmp(ib))
            })
            .map(|(_, p)| (*p).clone())
            .expect("at least one other prompt exists");

        // this prompt's chosen images, deduped by pixels, in dataset order
        let mut best_images: Vec<(&super::SyntheticImage, super::PerspectiveTag)> = Vec::new();
        for ex in dataset.iter().filter(|ex| ex.prompt.raw == prompt.raw) {
            if !best_images.iter().any(|(img, _)| img.pixels == ex.chosen.pixels) {
                best_images.push((&ex.chosen, ex.perspective));
            }
        }

        for (image, perspective) in best_images {
            mined.push(PairExample {
                prompt: prompt.clone(),
                chosen: image.clone(),
                rejected: image.clone(),
                rejected_prompt: Some(neg_prompt.clone()),
                perspective,
            });

            let neg_image = pool
                .iter()
                .enumerate()
                .filter(|(_, candidate)| candidate.pixels != image.pixels)
                .min_by(|(ia, a), (ib, b)| {
                    let da = image.l2_sq(a);
                    let db = image.l2_sq(b);
                    da.partial_cmp(&db).unwrap().then(ia.cmp(ib))
                })
                .map(|(_, img)| (*img).clone())
                .expect("at least one pixel-distinct image exists");
            mined.push(PairExample {
                prompt: prompt.clone(),
                chosen: image.clone(),
                rejected: neg_image,
                rejected_prompt: None,
                perspective,
            });
        }
    }

    let mut out = dataset.to_vec();
    out.append(&mut mined);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::corpus::{gen_synthetic_corpus, CorpusSpec};
    use super::super::levenshtein::normalized_levenshtein;
    use super::*;

    fn corpus_pairs(seed: u64, n: usize) -> Vec<PairExample> {
        gen_synthetic_corpus(seed, n, &CorpusSpec::default())
            .unwrap()
            .pairs
    }

    #[test]
    fn exact_duplicate_prompt_is_removed() {
        let train = corpus_pairs(0, 6);
        let holdout = vec![train[0].clone()];
        let kept = filter_overlap(&train, &holdout, 0.1).unwrap();
        assert!(kept.iter().all(|ex| ex.prompt.raw != train[0].prompt.raw));
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let train = corpus_pairs(0, 10);
        let holdout = corpus_pairs(1, 5);
        let kept = filter_overlap(&train, &holdout, 0.0).unwrap();
        assert_eq!(kept.len(), train.len());
    }

    #[test]
    fn threshold_out_of_range_errors() {
        let train = corpus_pairs(0, 2);
        assert!(filter_overlap(&train, &train, -0.1).is_err());
        assert!(filter_overlap(&train, &train, 1.5).is_err());
    }

    #[test]
    fn survivors_match_exhaustive_pairwise_oracle() {
        let train = corpus_pairs(3, 10);
        let holdout = corpus_pairs(11, 3);
        let threshold = 0.3;
        let kept = filter_overlap(&train, &holdout, threshold).unwrap();

        // brute-force oracle over all (train, holdout) prompt pairs
        let expected: Vec<&PairExample> = train
            .iter()
            .filter(|ex| {
                holdout.iter().all(|h| {
                    normalized_levenshtein(&ex.prompt.raw, &h.prompt.raw) >= threshold
                })
            })
            .collect();
        assert_eq!(kept.len(), expected.len());
        for (a, b) in kept.iter().zip(expected) {
            assert_eq!(a.prompt.raw, b.prompt.raw);
        }
        // and every survivor clears the threshold against every holdout prompt
        for ex in &kept {
            for h in &holdout {
                assert!(normalized_levenshtein(&ex.prompt.raw, &h.prompt.raw) >= threshold);
            }
        }
    }

    #[test]
    fn two_prompts_negate_each_other() {
        let corpus = corpus_pairs(0, 50);
        let first = corpus[0].clone();
        let second = corpus
            .iter()
            .find(|ex| ex.prompt.raw != first.prompt.raw)
            .unwrap()
            .clone();
        let pairs = vec![first, second];
        let mined = mine_hard_negatives(&pairs).unwrap();
        let prompt_negs: Vec<&PairExample> = mined
            .iter()
            .filter(|ex| ex.rejected_prompt.is_some())
            .collect();
        assert!(!prompt_negs.is_empty());
        for ex in prompt_negs {
            let neg = ex.rejected_prompt.as_ref().unwrap();
            assert_ne!(neg.raw, ex.prompt.raw);
            assert!(
                neg.raw == pairs[0].prompt.raw || neg.raw == pairs[1].prompt.raw,
                "negative prompt must be the only other prompt"
            );
        }
    }

    #[test]
    fn no_emitted_negative_equals_its_positive() {
        let pairs = corpus_pairs(7, 30);
        let mined = mine_hard_negatives(&pairs).unwrap();
        for ex in &mined[pairs.len()..] {
            match &ex.rejected_prompt {
                Some(neg) => assert_ne!(neg.raw, ex.prompt.raw),
                None => assert_ne!(ex.chosen.pixels, ex.rejected.pixels),
            }
            ex.validate().unwrap();
        }
    }

    #[test]
    fn mined_negatives_match_exhaustive_argmin_oracle() {
        let pairs = corpus_pairs(13, 40);
        let prompts = distinct_prompts(&pairs);
        assert!(prompts.len() >= 10, "want a many-prompt corpus");
        let mined = mine_hard_negatives(&pairs).unwrap();

        for ex in mined[pairs.len()..].iter().filter(|e| e.rejected_prompt.is_some()) {
            let got = &ex.rejected_prompt.as_ref().unwrap().raw;
            // brute-force scan over all other prompts
            let mut best: Option<(f64, usize, &str)> = None;
            for (idx, p) in &prompts {
                if p.raw == ex.prompt.raw {
                    continue;
                }
                let d = normalized_levenshtein(&ex.prompt.raw, &p.raw);
                let better = match best {
                    None => true,
                    Some((bd, bi, _)) => d < bd || (d == bd && *idx < bi),
                };
                if better {
                    best = Some((d, *idx, p.raw.as_str()));
                }
            }
            assert_eq!(got, best.unwrap().2);
        }

        // image negatives match the same kind of scan
        let pool: Vec<&super::super::SyntheticImage> = pairs
            .iter()
            .flat_map(|ex| [&ex.chosen, &ex.rejected])
            .collect();
        for ex in mined[pairs.len()..].iter().filter(|e| e.rejected_prompt.is_none()) {
            let mut best: Option<(f64, usize)> = None;
            for (idx, img) in pool.iter().enumerate() {
                if img.pixels == ex.chosen.pixels {
                    continue;
                }
                let d = ex.chosen.l2_sq(img);
                let better = match best {
                    None => true,
                    Some((bd, _)) => d < bd,
                };
                if better {
                    best = Some((d, idx));
                }
            }
            let (_, idx) = best.unwrap();
            assert_eq!(pool[idx].pixels, ex.rejected.pixels);
        }
    }

    #[test]
    fn single_prompt_dataset_errors() {
        let pairs = corpus_pairs(0, 50);
        let one_prompt: Vec<PairExample> = pairs
            .iter()
            .filter(|ex| ex.prompt.raw == pairs[0].prompt.raw)
            .cloned()
            .collect();
        assert!(mine_hard_negatives(&one_prompt).is_err());
    }
}
