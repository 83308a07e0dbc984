//! Benchmark-style metrics: pairwise accuracy with and without ties, rank
//! correlations, and F1 over binary predictions.
//!
//! Kendall's tau is the tie-corrected tau-b computed with merge-sort
//! inversion counting; the test suite holds it against a quadratic
//! brute-force oracle.

use crate::data::{attrs_from_prompt, quality_score, BinaryExample, PairExample, PerspectiveTag};
use crate::model::ModelState;
use crate::objectives::{preference_prob, sigmoid};
use crate::{Error, Result};

/// Three-way outcome of comparing a chosen/rejected score pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgment {
    Chosen,
    Rejected,
    Tie,
}

/// One evaluated pair when only the discrete judgments are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairJudgment {
    pub predicted: Judgment,
    pub ground_truth: Judgment,
}

/// One evaluated pair with raw scores, so predictions can be re-derived at
/// any tie threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score_chosen: f64,
    pub score_rejected: f64,
    pub ground_truth: Judgment,
}

/// Declares a tie when the preference probability sits within `tie_eps` of
/// one half; otherwise the higher score wins.
pub fn judge_pair(score_chosen: f64, score_rejected: f64, tie_eps: f64) -> Result<Judgment> {
    if !(tie_eps >= 0.0) {
        return Err(Error::Config(format!(
            "tie_eps must be non-negative, got {tie_eps}"
        )));
    }
    let p = preference_prob(score_chosen, score_rejected);
    if (p - 0.5).abs() <= tie_eps {
        Ok(Judgment::Tie)
    } else if score_chosen > score_rejected {
        Ok(Judgment::Chosen)
    } else {
        Ok(Judgment::Rejected)
    }
}

/// Exact three-way match rate.
pub fn accuracy_with_ties(judgments: &[PairJudgment]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::Metric("no judgments to score".into()));
    }
    let hits = judgments
        .iter()
        .filter(|j| j.predicted == j.ground_truth)
        .count();
    Ok(hits as f64 / judgments.len() as f64)
}

/// Binary match rate over pairs where neither the ground truth nor the
/// forced (tie_eps = 0) prediction is a tie.
pub fn accuracy_without_ties(pairs: &[ScoredPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("no pairs to score".into()));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    for pair in pairs {
        if pair.ground_truth == Judgment::Tie {
            continue;
        }
        let forced = judge_pair(pair.score_chosen, pair.score_rejected, 0.0)?;
        if forced == Judgment::Tie {
            continue;
        }
        counted += 1;
        if forced == pair.ground_truth {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Metric(
            "every pair was a tie; accuracy without ties is undefined".into(),
        ));
    }
    Ok(hits as f64 / counted as f64)
}

/// Three-way accuracy derived from scores at a given tie threshold.
pub fn accuracy_with_ties_scored(pairs: &[ScoredPair], tie_eps: f64) -> Result<f64> {
    let judgments = pairs
        .iter()
        .map(|p| {
            Ok(PairJudgment {
                predicted: judge_pair(p.score_chosen, p.score_rejected, tie_eps)?,
                ground_truth: p.ground_truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    accuracy_with_ties(&judgments)
}

/// Forced-choice accuracy against a chosen-is-better ground truth, crediting
/// exactly tied scores with one half. Robust to heads that score both legs
/// identically (an image-blind head lands exactly at 0.5).
pub fn forced_choice_accuracy(pairs: &[ScoredPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("no pairs to score".into()));
    }
    let mut credit = 0.0;
    for pair in pairs {
        let target_sign = match pair.ground_truth {
            Judgment::Chosen => 1.0,
            Judgment::Rejected => -1.0,
            Judgment::Tie => {
                return Err(Error::Metric(
                    "forced-choice accuracy needs non-tie ground truths".into(),
                ))
            }
        };
        let diff = pair.score_chosen - pair.score_rejected;
        if diff == 0.0 {
            credit += 0.5;
        } else if (diff > 0.0) == (target_sign > 0.0) {
            credit += 1.0;
        }
    }
    Ok(credit / pairs.len() as f64)
}

/// Parallel (model score, human score) lists.
#[derive(Debug, Clone)]
pub struct ScoredList {
    model: Vec<f64>,
    human: Vec<f64>,
}

impl ScoredList {
    pub fn new(model: Vec<f64>, human: Vec<f64>) -> Result<Self> {
        if model.len() != human.len() {
            return Err(Error::Metric(format!(
                "list lengths differ: {} vs {}",
                model.len(),
                human.len()
            )));
        }
        if model.len() < 2 {
            return Err(Error::Metric("scored lists need at least 2 entries".into()));
        }
        if model.iter().chain(human.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("scores must be finite".into()));
        }
        Ok(Self { model, human })
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    pub fn model(&self) -> &[f64] {
        &self.model
    }

    pub fn human(&self) -> &[f64] {
        &self.human
    }
}

/// Product-moment correlation; errors when either side has zero variance.
pub fn pearson(list: &ScoredList) -> Result<f64> {
    let n = list.len() as f64;
    let mx = list.model.iter().sum::<f64>() / n;
    let my = list.human.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in list.model.iter().zip(&list.human) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric(
            "correlation undefined: a list has zero variance".into(),
        ));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

fn tied_pair_count(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ties = 0.0;
    let mut run = 1.0;
    for i in 1..values.len() {
        if values[i] == values[i - 1] {
            run += 1.0;
        } else {
            ties += run * (run - 1.0) / 2.0;
            run = 1.0;
        }
    }
    ties + run * (run - 1.0) / 2.0
}

/// Counts strict inversions (i < j with a[i] > a[j]) by merge sort.
fn count_inversions(values: &mut Vec<f64>) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut buf = vec![0.0; n];
    let mut inversions = 0.0;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start + width < n {
            let mid = start + width;
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if values[i] <= values[j] {
                    buf[k] = values[i];
                    i += 1;
                } else {
                    // values[i..mid] all exceed values[j]
                    inversions += (mid - i) as f64;
                    buf[k] = values[j];
                    j += 1;
                }
                k += 1;
            }
            while i < mid {
                buf[k] = values[i];
                i += 1;
                k += 1;
            }
            while j < end {
                buf[k] = values[j];
                j += 1;
                k += 1;
            }
            values[start..end].copy_from_slice(&buf[start..end]);
            start = end;
        }
        width *= 2;
    }
    inversions
}

/// Tie-corrected rank correlation (tau-b) in O(n log n).
pub fn kendall_tau(list: &ScoredList) -> Result<f64> {
    let n = list.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        list.model[a]
            .partial_cmp(&list.model[b])
            .unwrap()
            .then(list.human[a].partial_cmp(&list.human[b]).unwrap())
    });

    let total = (n * (n - 1) / 2) as f64;
    let mut x_sorted: Vec<f64> = list.model.clone();
    let x_ties = tied_pair_count(&mut x_sorted);
    let mut y_sorted: Vec<f64> = list.human.clone();
    let y_ties = tied_pair_count(&mut y_sorted);
    if x_ties == total || y_ties == total {
        return Err(Error::Metric(
            "correlation undefined: a list is entirely tied".into(),
        ));
    }

    // joint ties over (x, y)
    let mut joint_ties = 0.0;
    let mut run = 1.0;
    for w in order.windows(2) {
        if list.model[w[0]] == list.model[w[1]] && list.human[w[0]] == list.human[w[1]] {
            run += 1.0;
        } else {
            joint_ties += run * (run - 1.0) / 2.0;
            run = 1.0;
        }
    }
    joint_ties += run * (run - 1.0) / 2.0;

    let mut y_by_x: Vec<f64> = order.iter().map(|&i| list.human[i]).collect();
    let discordant = count_inversions(&mut y_by_x);

    let con_minus_dis = total - x_ties - y_ties + joint_ties - 2.0 * discordant;
    Ok((con_minus_dis / ((total - x_ties) * (total - y_ties)).sqrt()).clamp(-1.0, 1.0))
}

/// Concordant fraction over human-score-distinct pairs, crediting model-score
/// ties with one half.
pub fn pairwise_acc(list: &ScoredList) -> Result<f64> {
    let n = list.len();
    let mut credit = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let dh = list.human[i] - list.human[j];
            if dh == 0.0 {
                continue;
            }
            counted += 1;
            let dm = list.model[i] - list.model[j];
            if dm == 0.0 {
                credit += 0.5;
            } else if (dm > 0.0) == (dh > 0.0) {
                credit += 1.0;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Metric(
            "pairwise accuracy undefined: human scores are entirely tied".into(),
        ));
    }
    Ok(credit / counted as f64)
}

/// Scores every pair of a dataset with the model; the dataset's chosen leg
/// is the ground truth. Mined prompt-negatives score their rejected leg
/// under the stored negative prompt.
pub fn score_pairs(
    model: &ModelState,
    tag: PerspectiveTag,
    pairs: &[PairExample],
) -> Result<Vec<ScoredPair>> {
    pairs
        .iter()
        .map(|ex| {
            let s_c = model.reward(&ex.prompt, &ex.chosen, tag)?.scalar()?;
            let s_r = model
                .reward(ex.rejected_leg_prompt(), &ex.rejected, tag)?
                .scalar()?;
            Ok(ScoredPair {
                score_chosen: s_c,
                score_rejected: s_r,
                ground_truth: Judgment::Chosen,
            })
        })
        .collect()
}

/// Builds the (model score, rule-derived quality score) list over every leg
/// of a pair dataset, for the correlation metrics.
pub fn scored_list_for_pairs(
    model: &ModelState,
    tag: PerspectiveTag,
    pairs: &[PairExample],
) -> Result<ScoredList> {
    let mut model_scores = Vec::with_capacity(pairs.len() * 2);
    let mut human_scores = Vec::with_capacity(pairs.len() * 2);
    for ex in pairs {
        let want = attrs_from_prompt(&ex.prompt).ok_or_else(|| {
            Error::Metric(format!("prompt {:?} has no attribute parse", ex.prompt.raw))
        })?;
        for (prompt, image) in [
            (&ex.prompt, &ex.chosen),
            (ex.rejected_leg_prompt(), &ex.rejected),
        ] {
            model_scores.push(model.reward(prompt, image, tag)?.scalar()?);
            human_scores.push(quality_score(ex.perspective, want, &image.attributes));
        }
    }
    ScoredList::new(model_scores, human_scores)
}

/// Thresholded binary predictions (sigma(s) > 1/2) scored with F1.
pub fn f1_for_binary(
    model: &ModelState,
    tag: PerspectiveTag,
    examples: &[BinaryExample],
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = model.reward(&ex.prompt, &ex.image, tag)?.scalar()?;
        predictions.push(sigmoid(s) > 0.5);
        labels.push(ex.label);
    }
    f1_binary(&predictions, &labels)
}

/// Harmonic mean of precision and recall on the positive class; defined as 0
/// when precision + recall vanishes.
pub fn f1_binary(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no predictions to score".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fal_n = 0.0;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fal_n += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fal_n);
    Ok(2.0 * precision * recall / (precision + recall))
}
