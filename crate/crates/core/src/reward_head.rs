//! Reward heads mapping (e_h, e_v) to a scalar reward or an embedding.
//!
//! The cross-attention head queries the pooled hidden state against the
//! visual tokens (single-query multi-head attention, keys and values from
//! the visual side) and maps the attended vector through a final linear
//! layer `g`. The linear and MLP baselines read the hidden state alone and
//! cannot see the visual tokens at all — that asymmetry is the point of the
//! head-ablation experiments.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether the head emits a scalar reward or a preference embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Scalar,
    Embedding,
}

/// The head's output for one (prompt, image) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardOutput {
    pub values: Array1<f64>,
    pub mode: RewardMode,
}

impl RewardOutput {
    pub fn new(values: Array1<f64>, mode: RewardMode) -> Result<Self> {
        match mode {
            RewardMode::Scalar if values.len() != 1 => Err(Error::Shape(format!(
                "scalar reward must have 1 value, got {}",
                values.len()
            ))),
            RewardMode::Embedding if values.len() % 2 != 0 || values.is_empty() => {
                Err(Error::Shape(format!(
                    "embedding reward needs an even dimension, got {}",
                    values.len()
                )))
            }
            _ => Ok(Self { values, mode }),
        }
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.mode != RewardMode::Scalar {
            return Err(Error::Config("reward output is not scalar".into()));
        }
        Ok(self.values[0])
    }
}

/// Which head architecture a perspective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    SkipCa,
    Linear,
    Mlp,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skipca" => Ok(HeadKind::SkipCa),
            "linear" => Ok(HeadKind::Linear),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Cross-attention reward head: query from e_h, keys/values from e_v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipCaHead {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// Final map (d_model x m).
    pub g_w: Array2<f64>,
    /// Bias in scalar mode only; embeddings stay centered without one.
    pub g_b: Option<Array1<f64>>,
    pub n_heads: usize,
}

/// Affine baseline head over e_h only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// One-hidden-layer variant of the baseline head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardHead {
    SkipCa(SkipCaHead),
    Linear(LinearHead),
    Mlp(MlpHead),
}

/// Activations saved by a head forward for its backward pass.
pub enum HeadCache {
    SkipCa {
        e_h: Array1<f64>,
        src: Array2<f64>,
        q: Array1<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        /// Per-head attention weights over visual tokens.
        att: Vec<Array1<f64>>,
        ctx: Array1<f64>,
    },
    Linear {
        e_h: Array1<f64>,
    },
    Mlp {
        e_h: Array1<f64>,
        h_pre: Array1<f64>,
        h: Array1<f64>,
    },
}

impl HeadCache {
    /// Attention weights per head (cross-attention heads only).
    pub fn attention(&self) -> Option<&[Array1<f64>]> {
        match self {
            HeadCache::SkipCa { att, .. } => Some(att),
            _ => None,
        }
    }
}

impl RewardHead {
    /// Initializes a head; the final map starts at zero so a fresh model
    /// rewards everything 0 and pairwise losses start at ln 2.
    pub fn init(
        kind: HeadKind,
        d_model: usize,
        n_heads: usize,
        mode: RewardMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = match mode {
            RewardMode::Scalar => 1,
            RewardMode::Embedding => 2,
        };
        if d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        let std = 2.0 / (d_model as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| dist.sample(rng));
        Ok(match kind {
            HeadKind::SkipCa => RewardHead::SkipCa(SkipCaHead {
                w_q: mat(d_model, d_model),
                w_k: mat(d_model, d_model),
                w_v: mat(d_model, d_model),
                g_w: Array2::zeros((d_model, m)),
                g_b: (mode == RewardMode::Scalar).then(|| Array1::zeros(m)),
                n_heads,
            }),
            HeadKind::Linear => RewardHead::Linear(LinearHead {
                w: Array2::zeros((d_model, m)),
                b: Array1::zeros(m),
            }),
            HeadKind::Mlp => RewardHead::Mlp(MlpHead {
                w1: mat(d_model, d_model),
                b1: Array1::zeros(d_model),
                w2: Array2::zeros((d_model, m)),
                b2: Array1::zeros(m),
            }),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            RewardHead::SkipCa(_) => HeadKind::SkipCa,
            RewardHead::Linear(_) => HeadKind::Linear,
            RewardHead::Mlp(_) => HeadKind::Mlp,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            RewardHead::SkipCa(h) => h.g_w.ncols(),
            RewardHead::Linear(h) => h.w.ncols(),
            RewardHead::Mlp(h) => h.w2.ncols(),
        }
    }

    pub fn mode(&self) -> RewardMode {
        if self.output_dim() == 1 {
            RewardMode::Scalar
        } else {
            RewardMode::Embedding
        }
    }

    /// Only the cross-attention head reads the visual tokens.
    pub fn uses_visual(&self) -> bool {
        matches!(self, RewardHead::SkipCa(_))
    }

    pub fn forward(&self, e_h: &Array1<f64>, e_v: &Array2<f64>) -> Result<(RewardOutput, HeadCache)> {
        if e_h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hidden state contains non-finite values".into()));
        }
        match self {
            RewardHead::SkipCa(h) => skipca_forward(h, e_h, e_v),
            RewardHead::Linear(h) => {
                let values = e_h.dot(&h.w) + &h.b;
                Ok((
                    RewardOutput::new(values, self.mode())?,
                    HeadCache::Linear { e_h: e_h.clone() },
                ))
            }
            RewardHead::Mlp(h) => {
                let h_pre = e_h.dot(&h.w1) + &h.b1;
                let hidden = h_pre.mapv(|v| v.max(0.0));
                let values = hidden.dot(&h.w2) + &h.b2;
                Ok((
                    RewardOutput::new(values, self.mode())?,
                    HeadCache::Mlp {
                        e_h: e_h.clone(),
                        h_pre,
                        h: hidden,
                    },
                ))
            }
        }
    }

    /// Backward through the head. Returns (d_e_h, d_e_v, parameter grads);
    /// d_e_v is None for heads that never read the visual tokens.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_values: &Array1<f64>,
    ) -> (Array1<f64>, Option<Array2<f64>>, RewardHead) {
        match (self, cache) {
            (RewardHead::SkipCa(h), HeadCache::SkipCa { e_h, src, q, k, v, att, ctx }) => {
                let (d_e_h, d_src, grads) = skipca_backward(h, e_h, src, q, k, v, att, ctx, d_values);
                (d_e_h, Some(d_src), RewardHead::SkipCa(grads))
            }
            (RewardHead::Linear(h), HeadCache::Linear { e_h }) => {
                let d_w = outer(e_h, d_values);
                let d_e_h = h.w.dot(d_values);
                (
                    d_e_h,
                    None,
                    RewardHead::Linear(LinearHead {
                        w: d_w,
                        b: d_values.clone(),
                    }),
                )
            }
            (RewardHead::Mlp(h), HeadCache::Mlp { e_h, h_pre, h: hidden }) => {
                let d_w2 = outer(hidden, d_values);
                let d_hidden = h.w2.dot(d_values);
                let d_pre = &d_hidden * &h_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let d_w1 = outer(e_h, &d_pre);
                let d_e_h = h.w1.dot(&d_pre);
                (
                    d_e_h,
                    None,
                    RewardHead::Mlp(MlpHead {
                        w1: d_w1,
                        b1: d_pre,
                        w2: d_w2,
                        b2: d_values.clone(),
                    }),
                )
            }
            _ => unreachable!("cache kind always matches head kind"),
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

fn skipca_forward(
    head: &SkipCaHead,
    e_h: &Array1<f64>,
    e_v: &Array2<f64>,
) -> Result<(RewardOutput, HeadCache)> {
    if e_v.nrows() == 0 {
        return Err(Error::Shape("cross-attention needs at least one visual token".into()));
    }
    if e_v.ncols() != head.w_k.nrows() {
        return Err(Error::Shape(format!(
            "visual token width {} != head dim {}",
            e_v.ncols(),
            head.w_k.nrows()
        )));
    }
    if e_v.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("visual tokens contain non-finite values".into()));
    }
    let d = e_h.len();
    let d_head = d / head.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = e_h.dot(&head.w_q);
    let k = e_v.dot(&head.w_k);
    let v = e_v.dot(&head.w_v);

    let mut ctx = Array1::zeros(d);
    let mut att = Vec::with_capacity(head.n_heads);
    for h in 0..head.n_heads {
        let cols = s![h * d_head..(h + 1) * d_head];
        let qh = q.slice(cols);
        let kh = k.slice(s![.., h * d_head..(h + 1) * d_head]);
        let vh = v.slice(s![.., h * d_head..(h + 1) * d_head]);
        let logits = kh.dot(&qh).mapv(|x| x * scale);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|x| (x - max).exp());
        let denom = exp.sum();
        let weights = exp / denom;
        ctx.slice_mut(cols).assign(&weights.dot(&vh));
        att.push(weights);
    }

    let values = match head.g_b.as_ref() {
        Some(b) => ctx.dot(&head.g_w) + b,
        None => ctx.dot(&head.g_w),
    };
    let mode = if head.g_w.ncols() == 1 {
        RewardMode::Scalar
    } else {
        RewardMode::Embedding
    };
    Ok((
        RewardOutput::new(values, mode)?,
        HeadCache::SkipCa {
            e_h: e_h.clone(),
            src: e_v.clone(),
            q,
            k,
            v,
            att,
            ctx,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn skipca_backward(
    head: &SkipCaHead,
    e_h: &Array1<f64>,
    src: &Array2<f64>,
    q: &Array1<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    att: &[Array1<f64>],
    ctx: &Array1<f64>,
    d_values: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, SkipCaHead) {
    let d = e_h.len();
    let n = src.nrows();
    let d_head = d / head.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let d_gw = outer(ctx, d_values);
    let d_gb = head.g_b.as_ref().map(|_| d_values.clone());
    let d_ctx = head.g_w.dot(d_values);

    let mut d_q = Array1::zeros(d);
    let mut d_k = Array2::zeros((n, d));
    let mut d_v = Array2::zeros((n, d));
    for h in 0..head.n_heads {
        let range = h * d_head..(h + 1) * d_head;
        let d_ctx_h = d_ctx.slice(s![range.clone()]);
        let vh = v.slice(s![.., range.clone()]);
        let kh = k.slice(s![.., range.clone()]);
        let qh = q.slice(s![range.clone()]);
        let weights = &att[h];

        // value accumulation: ctx_h = sum_j w_j v_{j,h}
        let d_w = vh.dot(&d_ctx_h);
        for j in 0..n {
            let mut dv = d_v.slice_mut(s![j, range.clone()]);
            dv.assign(&(&d_ctx_h * weights[j]));
        }
        // softmax over visual tokens
        let dot = weights.dot(&d_w);
        let d_logits = weights * &(&d_w - dot);
        // logits_j = scale * k_j . q
        for j in 0..n {
            let coeff = d_logits[j] * scale;
            let kj = kh.row(j);
            for (idx, col) in range.clone().enumerate() {
                d_q[col] += coeff * kj[idx];
                d_k[[j, col]] += coeff * qh[idx];
            }
        }
    }

    let d_wq = outer(e_h, &d_q);
    let d_e_h = head.w_q.dot(&d_q);
    let d_wk = src.t().dot(&d_k);
    let d_wv = src.t().dot(&d_v);
    let d_src = d_k.dot(&head.w_k.t()) + d_v.dot(&head.w_v.t());

    (
        d_e_h,
        d_src,
        SkipCaHead {
            w_q: d_wq,
            w_k: d_wk,
            w_v: d_wv,
            g_w: d_gw,
            g_b: d_gb,
            n_heads: head.n_heads,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_head(kind: HeadKind, d: usize, heads: usize, mode: RewardMode, seed: u64) -> RewardHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = RewardHead::init(kind, d, heads, mode, &mut rng).unwrap();
        // give the zero-initialized final maps random values for oracle tests
        let dist = Normal::new(0.0, 0.5).unwrap();
        match &mut head {
            RewardHead::SkipCa(h) => {
                h.g_w.mapv_inplace(|_| dist.sample(&mut rng));
                if let Some(b) = h.g_b.as_mut() {
                    b.mapv_inplace(|_| dist.sample(&mut rng));
                }
            }
            RewardHead::Linear(h) => {
                h.w.mapv_inplace(|_| dist.sample(&mut rng));
                h.b.mapv_inplace(|_| dist.sample(&mut rng));
            }
            RewardHead::Mlp(h) => {
                h.w2.mapv_inplace(|_| dist.sample(&mut rng));
                h.b2.mapv_inplace(|_| dist.sample(&mut rng));
            }
        }
        head
    }

    fn random_inputs(d: usize, n: usize, seed: u64) -> (Array1<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e_h = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let e_v = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        (e_h, e_v)
    }

    #[test]
    fn skipca_attention_sums_to_one_per_head() {
        let head = random_head(HeadKind::SkipCa, 16, 4, RewardMode::Scalar, 0);
        let (e_h, e_v) = random_inputs(16, 5, 1);
        let (_, cache) = head.forward(&e_h, &e_v).unwrap();
        for w in cache.attention().unwrap() {
            assert!((w.sum() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn single_token_attention_is_forced_to_one() {
        let head = random_head(HeadKind::SkipCa, 8, 2, RewardMode::Scalar, 3);
        let (e_h, e_v) = random_inputs(8, 1, 4);
        let (out, cache) = head.forward(&e_h, &e_v).unwrap();
        for w in cache.attention().unwrap() {
            assert_eq!(w.len(), 1);
            assert!((w[0] - 1.0).abs() < 1e-15);
        }
        // output equals g(value projection of the lone token)
        let RewardHead::SkipCa(h) = &head else { unreachable!() };
        let v = e_v.dot(&h.w_v);
        let expected = v.row(0).dot(&h.g_w) + h.g_b.as_ref().unwrap();
        for (a, b) in out.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skipca_matches_dense_algebra_oracle() {
        // d_model 8, 2 tokens, 1 head: hand-rolled recomputation
        let head = random_head(HeadKind::SkipCa, 8, 1, RewardMode::Scalar, 7);
        let (e_h, e_v) = random_inputs(8, 2, 8);
        let (out, _) = head.forward(&e_h, &e_v).unwrap();

        let RewardHead::SkipCa(h) = &head else { unreachable!() };
        let d = 8;
        let scale = 1.0 / (d as f64).sqrt();
        let mut q = vec![0.0; d];
        for o in 0..d {
            for i in 0..d {
                q[o] += e_h[i] * h.w_q[[i, o]];
            }
        }
        let mut logits = [0.0; 2];
        for (j, slot) in logits.iter_mut().enumerate() {
            let mut kk = vec![0.0; d];
            for o in 0..d {
                for i in 0..d {
                    kk[o] += e_v[[j, i]] * h.w_k[[i, o]];
                }
            }
            *slot = kk.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let w0 = e0 / (e0 + e1);
        let w1 = e1 / (e0 + e1);
        let mut ctx = vec![0.0; d];
        for (j, wj) in [(0usize, w0), (1, w1)] {
            for o in 0..d {
                let mut vv = 0.0;
                for i in 0..d {
                    vv += e_v[[j, i]] * h.w_v[[i, o]];
                }
                ctx[o] += wj * vv;
            }
        }
        let mut reward = h.g_b.as_ref().unwrap()[0];
        for i in 0..d {
            reward += ctx[i] * h.g_w[[i, 0]];
        }
        assert!((out.values[0] - reward).abs() < 1e-10);
    }

    #[test]
    fn skipca_rejects_empty_and_nan_inputs() {
        let head = random_head(HeadKind::SkipCa, 8, 2, RewardMode::Scalar, 0);
        let (e_h, e_v) = random_inputs(8, 2, 0);
        let empty = Array2::zeros((0, 8));
        assert!(matches!(head.forward(&e_h, &empty), Err(Error::Shape(_))));
        let mut bad_h = e_h.clone();
        bad_h[0] = f64::NAN;
        assert!(matches!(head.forward(&bad_h, &e_v), Err(Error::Numeric(_))));
        let mut bad_v = e_v;
        bad_v[[1, 3]] = f64::INFINITY;
        assert!(matches!(head.forward(&e_h, &bad_v), Err(Error::Numeric(_))));
    }

    #[test]
    fn skipca_permutation_invariant_over_visual_rows() {
        let head = random_head(HeadKind::SkipCa, 16, 4, RewardMode::Embedding, 5);
        let (e_h, e_v) = random_inputs(16, 6, 6);
        let (out, _) = head.forward(&e_h, &e_v).unwrap();
        let mut permuted = Array2::zeros(e_v.raw_dim());
        let order = [3usize, 0, 5, 1, 4, 2];
        for (dst, &srcr) in order.iter().enumerate() {
            permuted.row_mut(dst).assign(&e_v.row(srcr));
        }
        let (out_p, _) = head.forward(&e_h, &permuted).unwrap();
        for (a, b) in out.values.iter().zip(out_p.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skipca_output_varies_with_visual_tokens_linear_cannot() {
        let skipca = random_head(HeadKind::SkipCa, 16, 2, RewardMode::Scalar, 9);
        let linear = random_head(HeadKind::Linear, 16, 2, RewardMode::Scalar, 9);
        let (e_h, e_v) = random_inputs(16, 4, 10);
        let mut shifted = e_v.clone();
        shifted += 0.5;
        let (a, _) = skipca.forward(&e_h, &e_v).unwrap();
        let (b, _) = skipca.forward(&e_h, &shifted).unwrap();
        assert!((a.values[0] - b.values[0]).abs() > 1e-9);

        let (la, _) = linear.forward(&e_h, &e_v).unwrap();
        let (lb, _) = linear.forward(&e_h, &shifted).unwrap();
        assert_eq!(la.values[0], lb.values[0]);
        assert!(!linear.uses_visual());
    }

    #[test]
    fn skipca_stable_for_huge_logits() {
        let mut head = random_head(HeadKind::SkipCa, 8, 1, RewardMode::Scalar, 11);
        if let RewardHead::SkipCa(h) = &mut head {
            h.w_q.mapv_inplace(|v| v * 1e3);
            h.w_k.mapv_inplace(|v| v * 1e3);
        }
        let (e_h, e_v) = random_inputs(8, 3, 12);
        let (out, cache) = head.forward(&e_h, &e_v).unwrap();
        assert!(out.values[0].is_finite());
        for w in cache.attention().unwrap() {
            assert!((w.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_head_zero_weights_rewards_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RewardHead::init(HeadKind::Linear, 8, 1, RewardMode::Scalar, &mut rng).unwrap();
        let (e_h, e_v) = random_inputs(8, 2, 1);
        let (out, _) = head.forward(&e_h, &e_v).unwrap();
        assert_eq!(out.values[0], 0.0);
    }

    #[test]
    fn linear_head_matches_affine_oracle() {
        let head = random_head(HeadKind::Linear, 8, 1, RewardMode::Scalar, 13);
        let (e_h, e_v) = random_inputs(8, 2, 14);
        let (out, _) = head.forward(&e_h, &e_v).unwrap();
        let RewardHead::Linear(h) = &head else { unreachable!() };
        let mut expected = h.b[0];
        for i in 0..8 {
            expected += e_h[i] * h.w[[i, 0]];
        }
        assert!((out.values[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn reward_output_mode_shape_contract() {
        assert!(RewardOutput::new(Array1::zeros(2), RewardMode::Scalar).is_err());
        assert!(RewardOutput::new(Array1::zeros(3), RewardMode::Embedding).is_err());
        assert!(RewardOutput::new(Array1::zeros(2), RewardMode::Embedding).is_ok());
    }

    /// Central-difference check of the head backward on its own.
    #[test]
    fn head_backward_matches_finite_differences() {
        for kind in [HeadKind::SkipCa, HeadKind::Linear, HeadKind::Mlp] {
            let head = random_head(kind, 8, 2, RewardMode::Scalar, 21);
            let (e_h, e_v) = random_inputs(8, 3, 22);
            let (out, cache) = head.forward(&e_h, &e_v).unwrap();
            let d_values = Array1::ones(out.values.len());
            let (d_e_h, d_e_v, _) = head.backward(&cache, &d_values);

            let eps = 1e-6;
            for i in 0..e_h.len() {
                let mut plus = e_h.clone();
                plus[i] += eps;
                let mut minus = e_h.clone();
                minus[i] -= eps;
                let fp = head.forward(&plus, &e_v).unwrap().0.values[0];
                let fm = head.forward(&minus, &e_v).unwrap().0.values[0];
                let numeric = (fp - fm) / (2.0 * eps);
                assert!(
                    (d_e_h[i] - numeric).abs() < 1e-6,
                    "{kind:?} d_e_h[{i}]: {} vs {numeric}",
                    d_e_h[i]
                );
            }
            if let Some(d_e_v) = d_e_v {
                for j in 0..e_v.nrows() {
                    for i in 0..e_v.ncols() {
                        let mut plus = e_v.clone();
                        plus[[j, i]] += eps;
                        let mut minus = e_v.clone();
                        minus[[j, i]] -= eps;
                        let fp = head.forward(&e_h, &plus).unwrap().0.values[0];
                        let fm = head.forward(&e_h, &minus).unwrap().0.values[0];
                        let numeric = (fp - fm) / (2.0 * eps);
                        assert!(
                            (d_e_v[[j, i]] - numeric).abs() < 1e-6,
                            "d_e_v[{j},{i}]: {} vs {numeric}",
                            d_e_v[[j, i]]
                        );
                    }
                }
            }
        }
    }
}
