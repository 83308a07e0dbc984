//! Inference-time scaling: a sequential Monte Carlo particle system steering
//! a toy denoising process toward high reward.
//!
//! The toy process is a discrete-time Gaussian diffusion whose clean-data
//! distribution is an isotropic Gaussian mixture. Conditioned on the mixture
//! component, every joint is linear-Gaussian, so both the exact reverse
//! kernel and the posterior-mean denoiser are closed-form: the unsteered
//! sampler draws exactly from the target, which is what the statistical
//! acceptance checks lean on.

use ndarray::Array1;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Isotropic Gaussian mixture over the state space.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Array1<f64>>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Config("mixture component lists must match and be non-empty".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        if stds.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) || dim == 0 {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        Ok(Self { weights, means, stds })
    }

    /// Well-separated 2-D two-component mixture used by the experiments.
    pub fn default_2d() -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![
                Array1::from_vec(vec![-2.0, 0.0]),
                Array1::from_vec(vec![2.0, 1.0]),
            ],
            vec![0.5, 0.5],
        )
        .expect("static mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn sample_component(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    /// Closed-form draw from the mixture itself (the oracle target sampler).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let k = self.sample_component(rng);
        let mut x = self.means[k].clone();
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += self.stds[k] * z;
        }
        x
    }
}

/// Discrete-time Gaussian-mixture diffusion with exact reverse kernels.
///
/// Denoising time runs t = 0 (noisiest) to t = N (clean); internally the
/// forward-chain index is i = N - t. The per-step noise schedule is given in
/// denoising order and must be non-increasing.
#[derive(Debug, Clone)]
pub struct ToyDiffusion {
    target: GaussianMixture,
    /// Forward-chain betas, index 1..=N stored at [0..N).
    betas: Vec<f64>,
    /// alpha_bar[i] for i = 0..=N.
    alpha_bars: Vec<f64>,
}

impl ToyDiffusion {
    /// `noise_schedule` lists each denoising step's noise scale (in [0, 1)),
    /// from the first (noisiest) step to the last.
    pub fn new(target: GaussianMixture, noise_schedule: &[f64]) -> Result<Self> {
        if noise_schedule.is_empty() {
            return Err(Error::Config("need at least one denoising step".into()));
        }
        if noise_schedule.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::Config("noise scales must lie in [0, 1)".into()));
        }
        if noise_schedule.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(
                "noise schedule must be non-increasing in denoising order".into(),
            ));
        }
        // store in forward-chain order: beta_i for i = 1..=N
        let mut betas: Vec<f64> = noise_schedule.to_vec();
        betas.reverse();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            target,
            betas,
            alpha_bars,
        })
    }

    /// Default: 30 steps, linear noise ramp.
    pub fn default_2d(n_steps: usize) -> Self {
        let target = GaussianMixture::default_2d();
        let schedule: Vec<f64> = (0..n_steps)
            .map(|t| {
                let frac = (n_steps - t) as f64 / n_steps as f64;
                0.02 + 0.28 * frac
            })
            .collect();
        Self::new(target, &schedule).expect("static schedule is valid")
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    /// Marginal mean and variance at forward index i for component k.
    fn marginal(&self, i: usize, k: usize) -> (Array1<f64>, f64) {
        let ab = self.alpha_bars[i];
        let mean = self.target.means[k].mapv(|m| m * ab.sqrt());
        let var = ab * self.target.stds[k] * self.target.stds[k] + (1.0 - ab);
        (mean, var)
    }

    /// Posterior component weights given the state at forward index i.
    fn responsibilities(&self, state: &Array1<f64>, i: usize) -> Vec<f64> {
        let dim = self.dim() as f64;
        let mut log_probs: Vec<f64> = (0..self.target.weights.len())
            .map(|k| {
                let (mean, var) = self.marginal(i, k);
                let sq: f64 = state
                    .iter()
                    .zip(mean.iter())
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum();
                self.target.weights[k].ln() - 0.5 * sq / var - 0.5 * dim * var.ln()
            })
            .collect();
        let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for lp in log_probs.iter_mut() {
            *lp = (*lp - max).exp();
        }
        let sum: f64 = log_probs.iter().sum();
        for lp in log_probs.iter_mut() {
            *lp /= sum;
        }
        log_probs
    }

    /// Draws the initial (noisiest) state from the exact marginal at i = N.
    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let k = self.target.sample_component(rng);
        let (mean, var) = self.marginal(self.n_steps(), k);
        let std = var.sqrt();
        let mut x = mean;
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
        x
    }

    /// One exact ancestral step of the reverse chain (denoising time t to
    /// t + 1). Deterministic given the rng stream.
    pub fn denoise_step(
        &self,
        state: &Array1<f64>,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        let n = self.n_steps();
        if t >= n {
            return Err(Error::Config(format!("step {t} out of range 0..{n}")));
        }
        let i = n - t; // reverse from forward index i to i - 1
        let beta = self.betas[i - 1];
        if beta == 0.0 {
            // the forward step was the identity, so the reverse is too
            return Ok(state.clone());
        }
        let gamma = self.responsibilities(state, i);
        let u: f64 = rng.gen();
        let mut k = gamma.len() - 1;
        let mut acc = 0.0;
        for (idx, &g) in gamma.iter().enumerate() {
            acc += g;
            if u <= acc {
                k = idx;
                break;
            }
        }
        let (mean_prev, var_prev) = self.marginal(i - 1, k);
        let (mean_cur, var_cur) = self.marginal(i, k);
        let a = (1.0 - beta).sqrt();
        // conditional of x_{i-1} given x_i under component k
        let coef = a * var_prev / var_cur;
        let cond_var = (var_prev - coef * a * var_prev).max(0.0);
        let cond_std = cond_var.sqrt();
        let mut next = Array1::zeros(state.len());
        for (idx, v) in next.iter_mut().enumerate() {
            let m = mean_prev[idx] + coef * (state[idx] - mean_cur[idx]);
            let z: f64 = rng.sample(StandardNormal);
            *v = m + cond_std * z;
        }
        Ok(next)
    }

    /// Posterior-mean clean sample E[x_0 | state] at denoising time t; the
    /// identity at t = N.
    pub fn predict_terminal(&self, state: &Array1<f64>, t: usize) -> Result<Array1<f64>> {
        let n = self.n_steps();
        if t > n {
            return Err(Error::Config(format!("time {t} out of range 0..={n}")));
        }
        let i = n - t;
        if i == 0 {
            return Ok(state.clone());
        }
        let gamma = self.responsibilities(state, i);
        let ab_sqrt = self.alpha_bars[i].sqrt();
        let mut out = Array1::zeros(state.len());
        for (k, &g) in gamma.iter().enumerate() {
            let (mean_i, var_i) = self.marginal(i, k);
            let s2 = self.target.stds[k] * self.target.stds[k];
            let gain = ab_sqrt * s2 / var_i;
            for (idx, o) in out.iter_mut().enumerate() {
                *o += g * (self.target.means[k][idx] + gain * (state[idx] - mean_i[idx]));
            }
        }
        Ok(out)
    }
}

/// When the particle population is resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleRule {
    EveryStep,
    EssThreshold,
}

#[derive(Debug, Clone)]
pub struct SteeringConfig {
    /// Particle count K.
    pub k: usize,
    /// Reward tilt strength.
    pub lambda: f64,
    pub resample_rule: ResampleRule,
    /// Resample when ESS < ess_fraction * K (threshold mode only).
    pub ess_fraction: f64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            k: 4,
            lambda: 10.0,
            resample_rule: ResampleRule::EveryStep,
            ess_fraction: 0.5,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(Error::Config("ess_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One SMC trajectory: latent state, importance weight, last reward estimate.
#[derive(Debug, Clone)]
pub struct Particle {
    pub state: Array1<f64>,
    pub log_weight: f64,
    pub last_reward: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub mean_reward: f64,
    pub max_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SteerResult {
    pub sample: Array1<f64>,
    pub final_reward: f64,
    pub diagnostics: Vec<StepDiagnostics>,
    pub resample_events: usize,
}

/// Normalized weights from log weights, max-subtracted.
fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Multinomial ancestor draw: one index per particle slot.
pub fn multinomial_ancestors(weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.iter().position(|&c| u <= c).unwrap_or(weights.len() - 1)
        })
        .collect()
}

/// Runs reward-tilted SMC over the toy process.
///
/// Each particle advances with its own rng stream; after every denoise step
/// the particle's log weight gains lambda * (r_t - r_{t-1}) where r_t is the
/// reward of the posterior-mean clean sample. Resampling is multinomial and
/// resets weights to uniform. The returned sample is the final particle with
/// the highest lambda-scaled reward, ties broken uniformly at random (so a
/// zero-lambda run returns an unbiased ancestral sample).
pub fn smc_steer(
    process: &ToyDiffusion,
    config: &SteeringConfig,
    reward_fn: &dyn Fn(&Array1<f64>) -> f64,
    seed: u64,
) -> Result<SteerResult> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut particle_rngs: Vec<ChaCha8Rng> = (0..config.k)
        .map(|_| ChaCha8Rng::seed_from_u64(master.next_u64()))
        .collect();
    let mut resample_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let check = |r: f64| -> Result<f64> {
        if !r.is_finite() {
            return Err(Error::Numeric("reward function returned a non-finite value".into()));
        }
        Ok(r)
    };

    let mut particles: Vec<Particle> = particle_rngs
        .iter_mut()
        .map(|rng| {
            let state = process.sample_initial(rng);
            let r = check(reward_fn(&process.predict_terminal(&state, 0)?))?;
            Ok(Particle {
                state,
                log_weight: 0.0,
                last_reward: r,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = process.n_steps();
    let mut diagnostics = Vec::with_capacity(n);
    let mut resample_events = 0;

    for t in 0..n {
        for (particle, rng) in particles.iter_mut().zip(particle_rngs.iter_mut()) {
            particle.state = process.denoise_step(&particle.state, t, rng)?;
            let r = check(reward_fn(&process.predict_terminal(&particle.state, t + 1)?))?;
            particle.log_weight += config.lambda * (r - particle.last_reward);
            if !particle.log_weight.is_finite() {
                return Err(Error::Numeric("particle log-weight became non-finite".into()));
            }
            particle.last_reward = r;
        }

        let log_weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
        let weights = normalized_weights(&log_weights);
        let ess_value = ess(&weights);
        let rewards: Vec<f64> = particles.iter().map(|p| p.last_reward).collect();
        diagnostics.push(StepDiagnostics {
            step: t,
            ess: ess_value,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            max_reward: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });

        let do_resample = config.k > 1
            && match config.resample_rule {
                ResampleRule::EveryStep => true,
                ResampleRule::EssThreshold => ess_value < config.ess_fraction * config.k as f64,
            };
        if do_resample {
            let ancestors = multinomial_ancestors(&weights, config.k, &mut resample_rng);
            particles = ancestors
                .iter()
                .map(|&a| Particle {
                    state: particles[a].state.clone(),
                    log_weight: 0.0,
                    last_reward: particles[a].last_reward,
                })
                .collect();
            resample_events += 1;
        }
    }

    // selection score is the tilted reward; at lambda = 0 every particle
    // ties and the pick is uniform
    let scores: Vec<f64> = particles
        .iter()
        .map(|p| config.lambda * p.last_reward)
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<usize> = (0..particles.len())
        .filter(|&i| scores[i] == best)
        .collect();
    let pick = candidates[resample_rng.gen_range(0..candidates.len())];
    let chosen = &particles[pick];
    Ok(SteerResult {
        sample: chosen.state.clone(),
        final_reward: chosen.last_reward,
        diagnostics,
        resample_events,
    })
}

/// Builds an image-space diffusion whose target mixes tight Gaussians around
/// one rendered prototype per (color, shape) class of the corpus spec. Used
/// when steering with a learned reward head: particles live in flattened
/// pixel space and the reward model scores their predicted clean images.
pub fn image_prototype_process(
    corpus_spec: &crate::data::CorpusSpec,
    n_steps: usize,
    proto_std: f64,
) -> Result<ToyDiffusion> {
    use crate::data::{render_image, Attributes};
    corpus_spec.validate()?;
    if n_steps == 0 {
        return Err(Error::Config("need at least one denoising step".into()));
    }
    if !(proto_std > 0.0) {
        return Err(Error::Config("prototype std must be positive".into()));
    }
    let mut means = Vec::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &color in &corpus_spec.colors {
        for &shape in &corpus_spec.shapes {
            let attrs = Attributes {
                shape,
                color,
                count: 1,
                corruption: 0,
                unsafe_marker: false,
            };
            let image = render_image(attrs, corpus_spec, &mut rng);
            means.push(Array1::from_iter(image.pixels.iter().cloned()));
        }
    }
    let k = means.len();
    let target = GaussianMixture::new(vec![1.0 / k as f64; k], means, vec![proto_std; k])?;
    let schedule: Vec<f64> = (0..n_steps)
        .map(|t| {
            let frac = (n_steps - t) as f64 / n_steps as f64;
            0.02 + 0.28 * frac
        })
        .collect();
    ToyDiffusion::new(target, &schedule)
}

/// Reinterprets a flattened pixel state as an image, clamped to [0, 1].
pub fn state_to_image(
    state: &Array1<f64>,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<crate::data::SyntheticImage> {
    if state.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "state length {} != {}x{}x{}",
            state.len(),
            height,
            width,
            channels
        )));
    }
    let pixels = ndarray::Array3::from_shape_vec(
        (height, width, channels),
        state.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
    .expect("shape checked above");
    Ok(crate::data::SyntheticImage {
        pixels,
        attributes: crate::data::Attributes {
            shape: 0,
            color: 0,
            count: 1,
            corruption: 0,
            unsafe_marker: false,
        },
    })
}

/// Writes per-step diagnostics as CSV (step, ess, mean_reward, max_reward).
pub fn write_diagnostics_csv(path: &std::path::Path, diagnostics: &[StepDiagnostics]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,ess,mean_reward,max_reward")?;
    for d in diagnostics {
        writeln!(out, "{},{},{},{}", d.step, d.ess, d.mean_reward, d.max_reward)?;
    }
    out.flush()?;
    Ok(())
}
