//! Frozen-backbone fine-tuning: batched pair/binary objectives, gradient
//! accumulation, an adaptive-moment optimizer over the flattened trainable
//! parameters, and a central-finite-difference gradient checker.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryExample, PairExample, PerspectiveTag};
use crate::model::{ModelState, PerspectiveGrads};
use crate::objectives::{
    bt_loss_ddiff, ce_term, ce_term_dscore, gpm_score_diff, gpm_score_diff_grads, softplus,
    SkewOperator,
};
use crate::reward_head::RewardMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Bt,
    Gpm,
    Ce,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bt" => Ok(Objective::Bt),
            "gpm" => Ok(Objective::Gpm),
            "ce" => Ok(Objective::Ce),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            grad_accum: 4,
            epochs: 1,
            objective: Objective::Bt,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "batch_size and grad_accum must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive and finite".into()));
        }
        Ok(())
    }
}

/// A homogeneous micro-batch.
pub enum Batch<'a> {
    Pairs(&'a [PairExample]),
    Binary(&'a [BinaryExample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pairs(p) => p.len(),
            Batch::Binary(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adaptive moment estimation over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mutable optimizer state carried across micro-steps.
pub struct TrainState {
    pub micro_step: usize,
    pub optimizer_steps: usize,
    accum: Vec<f64>,
    accum_batches: usize,
    adam: Adam,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &ModelState, tag: PerspectiveTag) -> Result<Self> {
        let n = model.module(tag)?.params.n_params();
        Ok(Self {
            micro_step: 0,
            optimizer_steps: 0,
            accum: vec![0.0; n],
            accum_batches: 0,
            adam: Adam::new(n),
            loss_history: Vec::new(),
        })
    }
}

fn check_head_mode(model: &ModelState, tag: PerspectiveTag, objective: Objective) -> Result<()> {
    let mode = model.module(tag)?.params.head.mode();
    let ok = match objective {
        Objective::Bt | Objective::Ce => mode == RewardMode::Scalar,
        Objective::Gpm => mode == RewardMode::Embedding,
    };
    if !ok {
        return Err(Error::Config(format!(
            "objective {objective:?} does not match head mode {mode:?}"
        )));
    }
    Ok(())
}

/// Mean loss over a batch, optionally with mean gradients.
pub fn batch_loss_and_grads(
    model: &ModelState,
    tag: PerspectiveTag,
    batch: &Batch,
    objective: Objective,
    temperature: f64,
    want_grads: bool,
) -> Result<(f64, Option<PerspectiveGrads>)> {
    if batch.is_empty() {
        return Err(Error::Config("batch must be non-empty".into()));
    }
    check_head_mode(model, tag, objective)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = want_grads.then(|| model.module(tag).unwrap().params.zeros_like());
    let mut loss = 0.0;
    let operator = SkewOperator::default_2d();

    match (batch, objective) {
        (Batch::Pairs(pairs), Objective::Bt) => {
            for ex in *pairs {
                let cache_c = model.forward_cached(&ex.prompt, &ex.chosen, tag)?;
                let cache_r = model.forward_cached(ex.rejected_leg_prompt(), &ex.rejected, tag)?;
                let s_c = cache_c.output.scalar()?;
                let s_r = cache_r.output.scalar()?;
                let diff = s_c - s_r;
                loss += softplus(-diff / temperature) * scale;
                if let Some(g) = grads.as_mut() {
                    let dd = bt_loss_ddiff(diff, temperature) * scale;
                    let gc = model.backward(tag, &cache_c, &Array1::from_elem(1, dd))?;
                    let gr = model.backward(tag, &cache_r, &Array1::from_elem(1, -dd))?;
                    g.add_scaled(&gc, 1.0);
                    g.add_scaled(&gr, 1.0);
                }
            }
        }
        (Batch::Pairs(pairs), Objective::Gpm) => {
            for ex in *pairs {
                let cache_c = model.forward_cached(&ex.prompt, &ex.chosen, tag)?;
                let cache_r = model.forward_cached(ex.rejected_leg_prompt(), &ex.rejected, tag)?;
                let diff =
                    gpm_score_diff(&cache_c.output.values, &cache_r.output.values, &operator)?;
                loss += softplus(-diff / temperature) * scale;
                if let Some(g) = grads.as_mut() {
                    let dd = bt_loss_ddiff(diff, temperature) * scale;
                    let (d_rc, d_rr) = gpm_score_diff_grads(
                        &cache_c.output.values,
                        &cache_r.output.values,
                        &operator,
                    );
                    let gc = model.backward(tag, &cache_c, &d_rc.mapv(|v| v * dd))?;
                    let gr = model.backward(tag, &cache_r, &d_rr.mapv(|v| v * dd))?;
                    g.add_scaled(&gc, 1.0);
                    g.add_scaled(&gr, 1.0);
                }
            }
        }
        (Batch::Pairs(pairs), Objective::Ce) => {
            // paired data under the classification loss: the chosen leg is
            // labeled true and the rejected leg false
            let scale = scale * 0.5;
            for ex in *pairs {
                for (prompt, image, label) in [
                    (&ex.prompt, &ex.chosen, true),
                    (ex.rejected_leg_prompt(), &ex.rejected, false),
                ] {
                    let cache = model.forward_cached(prompt, image, tag)?;
                    let s = cache.output.scalar()?;
                    loss += ce_term(s, label) * scale;
                    if let Some(g) = grads.as_mut() {
                        let ds = ce_term_dscore(s, label) * scale;
                        let gi = model.backward(tag, &cache, &Array1::from_elem(1, ds))?;
                        g.add_scaled(&gi, 1.0);
                    }
                }
            }
        }
        (Batch::Binary(examples), Objective::Ce) => {
            for ex in *examples {
                let cache = model.forward_cached(&ex.prompt, &ex.image, tag)?;
                let s = cache.output.scalar()?;
                loss += ce_term(s, ex.label) * scale;
                if let Some(g) = grads.as_mut() {
                    let ds = ce_term_dscore(s, ex.label) * scale;
                    let gi = model.backward(tag, &cache, &Array1::from_elem(1, ds))?;
                    g.add_scaled(&gi, 1.0);
                }
            }
        }
        (Batch::Binary(_), _) => {
            return Err(Error::Config(
                "binary-labeled data trains with the ce objective only".into(),
            ));
        }
    }
    Ok((loss, grads))
}

/// One micro-step: forward/backward the batch, accumulate, and apply the
/// optimizer every `grad_accum` micro-steps.
pub fn train_step(
    model: &mut ModelState,
    tag: PerspectiveTag,
    batch: &Batch,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    let (loss, grads) =
        batch_loss_and_grads(model, tag, batch, config.objective, config.temperature, true)?;
    let flat = grads.expect("gradients requested").flatten();
    if flat.len() != state.accum.len() {
        return Err(Error::Shape("train state does not match model".into()));
    }
    for (a, g) in state.accum.iter_mut().zip(&flat) {
        *a += g;
    }
    state.accum_batches += 1;
    state.micro_step += 1;

    if state.accum_batches == config.grad_accum {
        let scale = 1.0 / config.grad_accum as f64;
        let mean_grads: Vec<f64> = state.accum.iter().map(|g| g * scale).collect();
        let module = model.module_mut(tag)?;
        let mut params = module.params.flatten();
        state
            .adam
            .step(&mut params, &mean_grads, config.learning_rate);
        module.params.unflatten_from(&params)?;
        state.accum.fill(0.0);
        state.accum_batches = 0;
        state.optimizer_steps += 1;
    }
    state.loss_history.push(loss);
    Ok(loss)
}

/// Owned training data.
pub enum TrainData {
    Pairs(Vec<PairExample>),
    Binary(Vec<BinaryExample>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Binary(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub optimizer_steps: usize,
    pub micro_steps: usize,
}

/// Shuffled epoch loop over the dataset. Deterministic given the config seed.
pub fn run_training(
    model: &mut ModelState,
    tag: PerspectiveTag,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data must be non-empty".into()));
    }
    let mut state = TrainState::new(model, tag)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.len();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            match data {
                TrainData::Pairs(pairs) => {
                    let batch: Vec<PairExample> =
                        chunk.iter().map(|&i| pairs[i].clone()).collect();
                    train_step(model, tag, &Batch::Pairs(&batch), &mut state, config)?;
                }
                TrainData::Binary(examples) => {
                    let batch: Vec<BinaryExample> =
                        chunk.iter().map(|&i| examples[i].clone()).collect();
                    train_step(model, tag, &Batch::Binary(&batch), &mut state, config)?;
                }
            }
        }
    }
    Ok(TrainReport {
        loss_history: state.loss_history,
        optimizer_steps: state.optimizer_steps,
        micro_steps: state.micro_step,
    })
}

/// Writes the per-micro-step loss curve as `step,loss` CSV rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, loss) in losses.iter().enumerate() {
        writeln!(out, "{i},{loss}")?;
    }
    out.flush()?;
    Ok(())
}

/// Summary of which parameters train for a perspective.
#[derive(Debug, Clone)]
pub struct TrainableSummary {
    pub groups: Vec<crate::model::ParamGroup>,
    pub trainable: usize,
    pub total: usize,
}

impl TrainableSummary {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// The trainable selection: projector, adapter factors, and reward head.
/// The backbone body and embeddings are excluded by construction.
pub fn trainable_params(model: &ModelState, tag: PerspectiveTag) -> Result<TrainableSummary> {
    let module = model.module(tag)?;
    Ok(TrainableSummary {
        groups: module.params.param_groups(),
        trainable: module.params.n_params(),
        total: model.total_params(),
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn group_name(groups: &[crate::model::ParamGroup], index: usize) -> String {
    groups
        .iter()
        .find(|g| index >= g.offset && index < g.offset + g.len)
        .map(|g| format!("{}[{}]", g.name, index - g.offset))
        .unwrap_or_else(|| format!("param[{index}]"))
}

/// Compares the analytic batch gradient against central finite differences
/// on a random subsample of trainable scalars.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &mut ModelState,
    tag: PerspectiveTag,
    batch: &Batch,
    objective: Objective,
    temperature: f64,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_loss_and_grads(model, tag, batch, objective, temperature, true)?;
    let analytic = grads.expect("gradients requested").flatten();
    let groups = model.module(tag)?.params.param_groups();
    for (i, g) in analytic.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at {}",
                group_name(&groups, i)
            )));
        }
    }
    gradient_check_against(
        model, tag, batch, objective, temperature, epsilon, n_samples, seed, &analytic,
    )
}

/// The same check against a caller-supplied "analytic" gradient; tests use
/// this to confirm the harness flags corrupted gradients.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_against(
    model: &mut ModelState,
    tag: PerspectiveTag,
    batch: &Batch,
    objective: Objective,
    temperature: f64,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let original = model.module(tag)?.params.flatten();
    if analytic.len() != original.len() {
        return Err(Error::Shape("analytic gradient length mismatch".into()));
    }
    let groups = model.module(tag)?.params.param_groups();

    let mut indices: Vec<usize> = (0..original.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(n_samples.min(original.len()));

    let mut max_err = 0.0;
    let mut worst = String::new();
    for &i in &indices {
        let mut perturbed = original.clone();
        perturbed[i] = original[i] + epsilon;
        model.module_mut(tag)?.params.unflatten_from(&perturbed)?;
        let (loss_plus, _) =
            batch_loss_and_grads(model, tag, batch, objective, temperature, false)?;
        perturbed[i] = original[i] - epsilon;
        model.module_mut(tag)?.params.unflatten_from(&perturbed)?;
        let (loss_minus, _) =
            batch_loss_and_grads(model, tag, batch, objective, temperature, false)?;
        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        let err = rel_error(analytic[i], numeric);
        if err > max_err {
            max_err = err;
            worst = group_name(&groups, i);
        }
    }
    model.module_mut(tag)?.params.unflatten_from(&original)?;
    Ok(GradCheckReport {
        max_rel_error: max_err,
        checked: indices.len(),
        worst_param: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::data::{gen_synthetic_corpus, CorpusSpec};
    use crate::reward_head::HeadKind;

    const TAG: PerspectiveTag = PerspectiveTag::Alignment;

    fn tiny_model(objective: Objective, kind: HeadKind) -> ModelState {
        let mode = match objective {
            Objective::Gpm => RewardMode::Embedding,
            _ => RewardMode::Scalar,
        };
        let mut model = ModelState::new(ModelConfig::tiny(16), 0).unwrap();
        model.add_perspective(TAG, kind, mode, 1).unwrap();
        model
    }

    fn tiny_pairs(n: usize) -> Vec<PairExample> {
        gen_synthetic_corpus(0, n, &CorpusSpec::default()).unwrap().pairs
    }

    #[test]
    fn fresh_bt_loss_is_ln2() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let pairs = tiny_pairs(4);
        let mut state = TrainState::new(&model, TAG).unwrap();
        let config = TrainConfig::default();
        let loss = train_step(&mut model, TAG, &Batch::Pairs(&pairs), &mut state, &config).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn objective_head_mode_mismatch_is_config_error() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let pairs = tiny_pairs(2);
        let mut state = TrainState::new(&model, TAG).unwrap();
        let config = TrainConfig {
            objective: Objective::Gpm,
            ..TrainConfig::default()
        };
        let err = train_step(&mut model, TAG, &Batch::Pairs(&pairs), &mut state, &config);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn binary_data_requires_ce() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let spec = CorpusSpec::for_perspective(PerspectiveTag::Safety);
        let binary = gen_synthetic_corpus(0, 4, &spec).unwrap().binary;
        let mut state = TrainState::new(&model, TAG).unwrap();
        let config = TrainConfig::default();
        let err = train_step(&mut model, TAG, &Batch::Binary(&binary), &mut state, &config);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let pairs = tiny_pairs(12);
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            grad_accum: 1,
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut run = || {
            let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
            run_training(&mut model, TAG, &TrainData::Pairs(pairs.clone()), &config)
                .unwrap()
                .loss_history
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn optimizer_step_count_is_floor_of_micro_steps() {
        let pairs = tiny_pairs(10);
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let config = TrainConfig {
            batch_size: 2,
            grad_accum: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model, TAG).unwrap();
        for chunk in pairs.chunks(2) {
            train_step(&mut model, TAG, &Batch::Pairs(chunk), &mut state, &config).unwrap();
        }
        assert_eq!(state.micro_step, 5);
        assert_eq!(state.optimizer_steps, 5 / 3);
    }

    #[test]
    fn frozen_weights_are_bit_identical_after_training() {
        let pairs = tiny_pairs(8);
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let before = model.backbone.flatten();
        let config = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            grad_accum: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        run_training(&mut model, TAG, &TrainData::Pairs(pairs), &config).unwrap();
        let after = model.backbone.flatten();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the trainable parameters did move
        let trained = model.module(TAG).unwrap().params.flatten();
        let fresh = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let init = fresh.module(TAG).unwrap().params.flatten();
        assert_ne!(trained, init);
    }

    #[test]
    fn gradient_accumulation_equals_one_large_batch() {
        let pairs = tiny_pairs(8);
        let config_accum = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            grad_accum: 4,
            ..TrainConfig::default()
        };
        let config_big = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            grad_accum: 1,
            ..TrainConfig::default()
        };

        let mut model_a = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let mut state_a = TrainState::new(&model_a, TAG).unwrap();
        for chunk in pairs.chunks(2) {
            train_step(&mut model_a, TAG, &Batch::Pairs(chunk), &mut state_a, &config_accum)
                .unwrap();
        }
        assert_eq!(state_a.optimizer_steps, 1);

        let mut model_b = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let mut state_b = TrainState::new(&model_b, TAG).unwrap();
        train_step(&mut model_b, TAG, &Batch::Pairs(&pairs), &mut state_b, &config_big).unwrap();
        assert_eq!(state_b.optimizer_steps, 1);

        let a = model_a.module(TAG).unwrap().params.flatten();
        let b = model_b.module(TAG).unwrap().params.flatten();
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
            assert!(rel <= 1e-6, "{x} vs {y} rel {rel}");
        }
    }

    #[test]
    fn trainable_selection_excludes_frozen_body() {
        let model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let summary = trainable_params(&model, TAG).unwrap();
        assert!(summary
            .groups
            .iter()
            .all(|g| g.name.starts_with("projector")
                || g.name.starts_with("lora")
                || g.name.starts_with("head")));
        assert!(summary.trainable > 0);
        assert!(trainable_params(&model, PerspectiveTag::Safety).is_err());

        // the <15% contract is stated for the default configuration, where
        // the frozen body dominates
        let mut default_model = ModelState::new(ModelConfig::default(), 0).unwrap();
        default_model
            .add_perspective(TAG, HeadKind::SkipCa, RewardMode::Scalar, 1)
            .unwrap();
        let summary = trainable_params(&default_model, TAG).unwrap();
        assert!(summary.fraction() < 0.15, "fraction {}", summary.fraction());
    }

    /// Gives the final head map small nonzero values so the loss responds to
    /// every parameter group.
    fn nudge(model: &mut ModelState) {
        use crate::reward_head::RewardHead;
        let module = model.module_mut(TAG).unwrap();
        let mut c: f64 = 0.013;
        match &mut module.params.head {
            RewardHead::SkipCa(h) => h.g_w.mapv_inplace(|_| {
                c += 0.017;
                c.sin() * 0.2
            }),
            RewardHead::Linear(h) => h.w.mapv_inplace(|_| {
                c += 0.017;
                c.sin() * 0.2
            }),
            RewardHead::Mlp(h) => h.w2.mapv_inplace(|_| {
                c += 0.017;
                c.sin() * 0.2
            }),
        }
        for layer in module.params.lora.layers.iter_mut() {
            layer.q.b.mapv_inplace(|_| {
                c += 0.011;
                c.cos() * 0.05
            });
            layer.v.b.mapv_inplace(|_| {
                c += 0.011;
                c.cos() * 0.05
            });
            layer.up.b.mapv_inplace(|_| {
                c += 0.011;
                c.cos() * 0.05
            });
        }
    }

    #[test]
    fn gradcheck_passes_on_all_objectives() {
        for (objective, kind) in [
            (Objective::Bt, HeadKind::SkipCa),
            (Objective::Gpm, HeadKind::SkipCa),
            (Objective::Ce, HeadKind::Linear),
            (Objective::Bt, HeadKind::Mlp),
        ] {
            let mut model = tiny_model(objective, kind);
            // move off the zero-init saddle so gradients are generic
            nudge(&mut model);
            let pairs = tiny_pairs(3);
            let report = gradient_check(
                &mut model,
                TAG,
                &Batch::Pairs(&pairs),
                objective,
                1.0,
                1e-5,
                60,
                7,
            )
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{objective:?}/{kind:?}: {} at {}",
                report.max_rel_error,
                report.worst_param
            );
        }
    }

    #[test]
    fn gradcheck_on_saturated_loss_sees_tiny_gradients() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let pairs = tiny_pairs(1);
        // train the single pair until its score gap is positive, then shrink
        // the temperature so the loss saturates to (numerically) zero
        let warmup = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            grad_accum: 1,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model, TAG).unwrap();
        for _ in 0..30 {
            train_step(&mut model, TAG, &Batch::Pairs(&pairs), &mut state, &warmup).unwrap();
        }
        let temperature = 0.01;
        let (loss, grads) = batch_loss_and_grads(
            &model,
            TAG,
            &Batch::Pairs(&pairs),
            Objective::Bt,
            temperature,
            true,
        )
        .unwrap();
        assert!(loss < 1e-9, "loss {loss} not saturated");
        let flat = grads.unwrap().flatten();
        let norm: f64 = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "analytic gradient norm {norm} not near zero");

        let report = gradient_check(
            &mut model,
            TAG,
            &Batch::Pairs(&pairs),
            Objective::Bt,
            temperature,
            1e-5,
            50,
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn loss_after_200_steps_beats_initial_loss() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let pairs = tiny_pairs(64);
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            grad_accum: 1,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model, TAG).unwrap();
        let mut steps = 0;
        'outer: loop {
            for chunk in pairs.chunks(4) {
                train_step(&mut model, TAG, &Batch::Pairs(chunk), &mut state, &config).unwrap();
                steps += 1;
                if steps == 200 {
                    break 'outer;
                }
            }
        }
        let first = state.loss_history[0];
        let last = *state.loss_history.last().unwrap();
        assert!(
            last < first,
            "loss did not improve: {first} -> {last} after 200 steps"
        );
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        nudge(&mut model);
        let pairs = tiny_pairs(3);
        let (_, grads) = batch_loss_and_grads(
            &model,
            TAG,
            &Batch::Pairs(&pairs),
            Objective::Bt,
            1.0,
            true,
        )
        .unwrap();
        let mut analytic = grads.unwrap().flatten();
        for g in analytic.iter_mut() {
            *g = *g * 3.0 + 0.05;
        }
        let report = gradient_check_against(
            &mut model,
            TAG,
            &Batch::Pairs(&pairs),
            Objective::Bt,
            1.0,
            1e-5,
            50,
            3,
            &analytic,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "harness missed the corruption");
    }

    #[test]
    fn gradcheck_epsilon_range_is_enforced() {
        let mut model = tiny_model(Objective::Bt, HeadKind::SkipCa);
        let pairs = tiny_pairs(2);
        let err = gradient_check(
            &mut model,
            TAG,
            &Batch::Pairs(&pairs),
            Objective::Bt,
            1.0,
            1e-2,
            50,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn loss_csv_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.7, 0.6931471805599453, 0.25]).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content, "step,loss\n0,0.7\n1,0.6931471805599453\n2,0.25\n");
    }
}
