//! Noise schedules, forward perturbation and the reverse denoising chain.
//!
//! Timesteps are 1-indexed: `t = 1` is the first noising step and `t = T`
//! the last, so `alpha_bar(t) = Π_{s=1..t} (1 − β_s)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Linear-schedule parameters as they appear in configs and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`, with `σ_t² = β_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self { params: ScheduleParams { steps, beta_start, beta_end }, beta, alpha, alpha_bar, sigma })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`; `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn affine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    let (ca, cb) = (ca as f32, cb as f32);
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_marginal_sample(x0: &Tensor, t: usize, schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    affine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `x_t = √(1−β_t)·x_{t−1} + √β_t·ε`.
pub fn forward_step_sample(x_prev: &Tensor, t: usize, schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    affine(x_prev, (1.0 - b).sqrt(), eps, b.sqrt())
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√(1−β_t) + σ_t·z`. The `t = 1` step
/// ignores `noise`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    let scale = 1.0 / (1.0 - b).sqrt();
    let mean = affine(x_t, scale, eps_hat, -scale * b / (1.0 - schedule.alpha_bar(t)).sqrt())?;
    match noise {
        Some(z) if t > 1 => {
            let s = schedule.sigma(t) as f32;
            mean.zip_map(z, |m, z| m + s * z)
        }
        _ => Ok(mean),
    }
}

/// Anything that predicts the injected noise of a batch `x_t[N, ...]`
/// given one timestep per sample.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Partial-noising reconstruction settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionConfig {
    /// Noising depth, `1 ≤ t_star ≤ T`.
    pub t_star: usize,
    /// When set, every reverse step from `t_star` down uses σ = 0.
    pub deterministic_tail: bool,
    pub seed: u64,
}

impl ReconstructionConfig {
    pub fn from_fraction(schedule: &NoiseSchedule, fraction: f64, deterministic_tail: bool, seed: u64) -> Self {
        let t_star = ((fraction * schedule.steps() as f64).round() as usize).clamp(1, schedule.steps());
        Self { t_star, deterministic_tail, seed }
    }
}

fn standard_normal_like(shape: &[usize], rng: &mut rng::Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), rng)
}

fn predict_checked<M: NoisePredictor + ?Sized>(model: &M, x: &Tensor, t: usize) -> Result<Tensor> {
    let n = x.shape()[0];
    let eps_hat = model.predict_noise(x, &vec![t; n])?;
    if eps_hat.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "noise predictor returned {:?} for input {:?}",
            eps_hat.shape(),
            x.shape()
        )));
    }
    Ok(eps_hat)
}

/// Noise `x0[N, ...]` to `t_star`, then run the reverse chain down to 1.
pub fn reconstruct<M: NoisePredictor + ?Sized>(
    x0: &Tensor,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &ReconstructionConfig,
) -> Result<Tensor> {
    reconstruct_indexed(x0, model, schedule, cfg, 0)
}

/// [`reconstruct`] where sample `i` of the batch draws its noise from the
/// stream of global sample index `first_index + i`, so results do not depend
/// on how a dataset is split into batches.
pub fn reconstruct_indexed<M: NoisePredictor + ?Sized>(
    x0: &Tensor,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &ReconstructionConfig,
    first_index: u64,
) -> Result<Tensor> {
    if cfg.t_star == 0 || cfg.t_star > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "t_star {} outside [1, {}]",
            cfg.t_star,
            schedule.steps()
        )));
    }
    if x0.rank() < 2 {
        return Err(Error::Shape(format!("reconstruct expects a batch [N, ...], got {:?}", x0.shape())));
    }
    let n = x0.shape()[0];
    let item_shape = &x0.shape()[1..];
    let mut rngs: Vec<rng::Rng> = (0..n).map(|i| rng::for_sample(cfg.seed, first_index + i as u64)).collect();
    let draw = |rngs: &mut Vec<rng::Rng>| -> Result<Tensor> {
        let parts: Vec<Tensor> = rngs.iter_mut().map(|r| standard_normal_like(item_shape, r)).collect();
        let mut data = Vec::with_capacity(x0.numel());
        parts.iter().for_each(|p| data.extend_from_slice(p.data()));
        Tensor::new(x0.shape().to_vec(), data)
    };
    let eps = draw(&mut rngs)?;
    let mut x = forward_marginal_sample(x0, cfg.t_star, schedule, &eps)?;
    for t in (1..=cfg.t_star).rev() {
        let eps_hat = predict_checked(model, &x, t)?;
        let noise = if cfg.deterministic_tail || t == 1 { None } else { Some(draw(&mut rngs)?) };
        x = reverse_step(&x, t, &eps_hat, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Full T-step reverse chain from `x_T ~ N(0, I)` of the given batch shape.
pub fn unconditional_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let mut rng = rng::seeded(seed);
    let mut x = standard_normal_like(shape, &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predict_checked(model, &x, t)?;
        let noise = (t > 1).then(|| standard_normal_like(shape, &mut rng));
        x = reverse_step(&x, t, &eps_hat, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Uniform timestep in `[1, T]`.
pub fn sample_timestep<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> usize {
    rng.random_range(1..=schedule.steps())
}
