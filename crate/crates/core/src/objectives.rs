//! Preference-learning objectives.
//!
//! Three interchangeable training signals sit behind one scalar-score
//! abstraction: a pairwise ranking loss on score differences, a
//! preference-embedding score difference built from a skew-symmetric
//! operator, and a per-example cross-entropy term for unpaired binary
//! labels. All of them reduce to stable `softplus`/`sigmoid` evaluations.

use ndarray::{Array1, Array2};

use crate::{Error, Result};

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss: -log sigma((s_c - s_r) / T).
///
/// Evaluated as softplus((s_r - s_c) / T) so large score gaps neither
/// overflow nor round to an infinite loss.
pub fn bt_loss(s_chosen: f64, s_rejected: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be strictly positive and finite, got {temperature}"
        )));
    }
    Ok(softplus((s_rejected - s_chosen) / temperature))
}

/// d bt_loss / d (s_c - s_r) for a given temperature.
pub fn bt_loss_ddiff(diff: f64, temperature: f64) -> f64 {
    -sigmoid(-diff / temperature) / temperature
}

/// Skew-symmetric preference operator acting on reward embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewOperator {
    matrix: Array2<f64>,
}

impl SkewOperator {
    /// Validates exact skew-symmetry (R = -R^T) and even dimension.
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        let (rows, cols) = matrix.dim();
        if rows != cols {
            return Err(Error::Shape(format!(
                "skew operator must be square, got {rows}x{cols}"
            )));
        }
        if rows % 2 != 0 {
            return Err(Error::Config(format!(
                "skew operator dimension must be even, got {rows}"
            )));
        }
        for i in 0..rows {
            for j in 0..cols {
                if matrix[[i, j]] != -matrix[[j, i]] {
                    return Err(Error::Config(
                        "operator is not exactly skew-symmetric".into(),
                    ));
                }
            }
        }
        Ok(Self { matrix })
    }

    /// The default 2-dimensional operator [[0, -1], [1, 0]].
    pub fn default_2d() -> Self {
        let mut m = Array2::zeros((2, 2));
        m[[0, 1]] = -1.0;
        m[[1, 0]] = 1.0;
        Self { matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// Preference score difference <R r_c, r_r> for embedding rewards.
pub fn gpm_score_diff(
    r_chosen: &Array1<f64>,
    r_rejected: &Array1<f64>,
    operator: &SkewOperator,
) -> Result<f64> {
    let m = operator.dim();
    if r_chosen.len() != m || r_rejected.len() != m {
        return Err(Error::Shape(format!(
            "embedding dims {}/{} do not match operator dim {m}",
            r_chosen.len(),
            r_rejected.len()
        )));
    }
    Ok(operator.matrix.dot(r_chosen).dot(r_rejected))
}

/// Gradients of `gpm_score_diff` with respect to both embeddings.
pub fn gpm_score_diff_grads(
    r_chosen: &Array1<f64>,
    r_rejected: &Array1<f64>,
    operator: &SkewOperator,
) -> (Array1<f64>, Array1<f64>) {
    let d_chosen = operator.matrix.t().dot(r_rejected);
    let d_rejected = operator.matrix.dot(r_chosen);
    (d_chosen, d_rejected)
}

/// One cross-entropy term for an unpaired binary-labeled score.
///
/// Label true contributes -log sigma(s); label false -log(1 - sigma(s)).
pub fn ce_term(score: f64, label: bool) -> f64 {
    if label {
        softplus(-score)
    } else {
        softplus(score)
    }
}

/// d ce_term / d score = sigma(s) - label.
pub fn ce_term_dscore(score: f64, label: bool) -> f64 {
    sigmoid(score) - if label { 1.0 } else { 0.0 }
}

/// Mean cross-entropy over a batch of (score, label) terms.
pub fn ce_loss(terms: &[(f64, bool)]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Config("ce_loss needs at least one term".into()));
    }
    Ok(terms.iter().map(|&(s, l)| ce_term(s, l)).sum::<f64>() / terms.len() as f64)
}

/// Probability that the first score's item is preferred: sigma(s_c - s_r).
///
/// Clamped to the open unit interval so saturated differences still return a
/// strictly interior probability; complementarity stays within one ulp.
pub fn preference_prob(s_chosen: f64, s_rejected: f64) -> f64 {
    sigmoid(s_chosen - s_rejected).clamp(f64::MIN_POSITIVE, 1.0 - 0.5 * f64::EPSILON)
}

/// Splits human-scored examples at the global median into binary labels.
///
/// Scores strictly above the median map to true, strictly below to false;
/// examples exactly at the median are dropped. Items keep their input order.
pub fn cross_prompt_label<T: Clone>(scored: &[(T, f64)]) -> Result<Vec<(T, bool)>> {
    if scored.len() < 2 {
        return Err(Error::Labeling(
            "cross-prompt labeling needs at least 2 scored examples".into(),
        ));
    }
    let mut sorted: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Labeling("all scores identical".into()));
    }
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(scored
        .iter()
        .filter(|(_, s)| *s != median)
        .map(|(item, s)| (item.clone(), *s > median))
        .collect())
}
