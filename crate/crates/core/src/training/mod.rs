//! Noise-prediction training with the optional perceptual term, and
//! checkpoint persistence.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_container, save_checkpoint, write_container, Checkpoint, CHECKPOINT_VERSION, MAGIC,
};

use crate::data::Sample;
use crate::denoiser::{Denoiser, ModelWeights};
use crate::diffusion::{sample_timestep, NoiseSchedule};
use crate::error::{Error, Result};
use crate::perception::FeatureExtractor;
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the perceptual loss.
    pub gamma: f64,
    pub seed: u64,
    /// Only items with `t ≤ t_star_fraction·T` contribute to the perceptual
    /// loss, matching the noise levels seen at reconstruction time.
    pub t_star_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Save every this many epochs when a path is set; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            gamma: 0.1,
            seed: 0,
            t_star_fraction: 0.4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            checkpoint_path: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("train.grad_clip must be finite and >= 0, got {}", self.grad_clip));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("train.gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.t_star_fraction) {
            return bad(format!("train.t_star_fraction must lie in [0, 1], got {}", self.t_star_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("train.beta1/beta2 must lie in [0, 1) and train.adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_mse: f64,
    pub l_feat: f64,
    pub l: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: StepLosses,
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every weight that has a gradient.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (lr, eps) = (self.lr, self.eps);
        for (name, g) in grads {
            let w = weights.get_mut(name)?;
            w.expect_same_shape(g)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut data = w.to_vec();
            for (((wi, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi as f64 / c1;
                let v_hat = *vi as f64 / c2;
                *wi -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
            *w = Tensor::new(w.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn estimate_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (c1, c2) = ((1.0 - ab).sqrt() as f32, ab.sqrt() as f32);
    x_t.zip_map(eps_hat, |x, e| (x - c1 * e) / c2)
}

/// Per-item scalars broadcast over a `[B, ...]` batch.
fn per_item(shape: &[usize], values: &[f32]) -> Tensor {
    let inner: usize = shape[1..].iter().product();
    Tensor::from_fn(shape.to_vec(), |i| values[i / inner])
}

/// One optimization step on `batch[B, C, H, W]`.
pub fn training_step(
    model: &mut Denoiser,
    opt: &mut Adam,
    batch: &Tensor,
    schedule: &NoiseSchedule,
    f: &FeatureExtractor,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
) -> Result<StepLosses> {
    model.check_input(batch.shape())?;
    let b = batch.shape()[0];
    let ts: Vec<usize> = (0..b).map(|_| sample_timestep(schedule, rng)).collect();
    let eps = Tensor::randn(batch.shape().to_vec(), rng);
    let sqrt_ab: Vec<f32> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt() as f32).collect();
    let sqrt_1mab: Vec<f32> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt() as f32).collect();
    let x_t = {
        let (a, s) = (per_item(batch.shape(), &sqrt_ab), per_item(batch.shape(), &sqrt_1mab));
        let scaled = batch.zip_map(&a, |x, c| c * x)?;
        let noise = eps.zip_map(&s, |e, c| c * e)?;
        scaled.zip_map(&noise, |p, q| p + q)?
    };

    let g = Graph::new();
    let w = model.weights().bind(&g, true);
    let xt_var = g.constant(x_t.clone());
    let eps_hat = model.forward(&g, &w, &xt_var, &ts)?;
    let l_mse_var = g.mse(&eps_hat, &g.constant(eps))?;

    let t_limit = (cfg.t_star_fraction * schedule.steps() as f64).round() as usize;
    let mask: Vec<bool> = ts.iter().map(|&t| t <= t_limit).collect();
    let active = mask.iter().filter(|&&m| m).count();
    let feat_term = |g: &Graph<f32>, eps_hat: &crate::tensor::Var<f32>| -> Result<Option<crate::tensor::Var<f32>>> {
        if active == 0 {
            return Ok(None);
        }
        // masked items get zero coefficients so they neither blow up nor contribute
        let c1: Vec<f32> = (0..b).map(|i| if mask[i] { sqrt_1mab[i] } else { 0.0 }).collect();
        let c2: Vec<f32> = (0..b).map(|i| if mask[i] { 1.0 / sqrt_ab[i] } else { 0.0 }).collect();
        let shape = batch.shape();
        let scaled = g.mul(eps_hat, &g.constant(per_item(shape, &c1)))?;
        let diff = g.sub(&g.constant(x_t.clone()), &scaled)?;
        let x0_hat = g.mul(&diff, &g.constant(per_item(shape, &c2)))?;
        let fa = f.features(g, &g.constant(batch.clone()))?;
        let fb = f.features(g, &x0_hat)?;
        let d = g.sub(&fa, &fb)?;
        let per = g.sum_trailing(&g.square(&d), 1)?;
        let weights: Vec<f32> = mask.iter().map(|&m| if m { 1.0 / active as f32 } else { 0.0 }).collect();
        let weighted = g.mul(&per, &g.constant(Tensor::new([b], weights)?))?;
        Ok(Some(g.sum(&weighted)))
    };

    let (loss, l_feat) = if cfg.gamma > 0.0 {
        match feat_term(&g, &eps_hat)? {
            Some(lf) => {
                let lf_val = lf.value().item()? as f64;
                (g.add(&l_mse_var, &g.mul_scalar(&lf, cfg.gamma as f32))?, lf_val)
            }
            None => (l_mse_var.clone(), 0.0),
        }
    } else if batch.shape()[2..].iter().any(|&d| d < crate::perception::MIN_INPUT) {
        (l_mse_var.clone(), 0.0)
    } else {
        // still report the perceptual term, computed off the tape
        let gi = Graph::inference();
        let lf = feat_term(&gi, &gi.constant(eps_hat.value().clone()))?;
        (l_mse_var.clone(), lf.map(|v| v.value().data()[0] as f64).unwrap_or(0.0))
    };
    let l_mse = l_mse_var.value().item()? as f64;
    let l = loss.value().item()? as f64;
    if !l.is_finite() || !l_mse.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at optimizer step {}: L_MSE={l_mse}, L_feat={l_feat}, L={l}",
            opt.steps() + 1
        )));
    }
    let grads = g.backward(&loss)?;
    let mut named: BTreeMap<String, Tensor> =
        w.iter().filter_map(|(k, v)| grads.get(v).map(|t| (k.clone(), t.clone()))).collect();
    let grad_norm = named
        .values()
        .flat_map(|t| t.data().iter().map(|&v| (v as f64).powi(2)))
        .sum::<f64>()
        .sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let k = (cfg.grad_clip / grad_norm) as f32;
        named.values_mut().for_each(|t| *t = t.map(|v| v * k));
    }
    opt.step(model.weights_mut(), &named)?;
    Ok(StepLosses { l_mse, l_feat, l, grad_norm })
}

/// Trains on normal samples for `cfg.epochs` epochs and returns the final
/// checkpoint. `on_step` sees every step's losses.
pub fn train(
    mut model: Denoiser,
    dataset: &[Sample],
    schedule: &NoiseSchedule,
    f: &FeatureExtractor,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.label != 0) {
        return Err(Error::Data(format!("training sample `{}` is labelled anomalous", s.id)));
    }
    let shape = dataset[0].tensor.shape().to_vec();
    if let Some(s) = dataset.iter().find(|s| s.tensor.shape() != shape.as_slice()) {
        return Err(Error::Data(format!(
            "training sample `{}` has shape {:?}, expected {shape:?}",
            s.id,
            s.tensor.shape()
        )));
    }
    let mut batch_shape = vec![0];
    batch_shape.extend_from_slice(&shape);
    model.check_input(&{
        let mut s = batch_shape.clone();
        s[0] = 1;
        s
    })?;

    let mut r = rng::seeded(cfg.seed);
    let mut opt = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let snapshot = |model: &Denoiser, step: u64| Checkpoint {
        model: model.config().clone(),
        weights: model.weights().clone(),
        schedule: schedule.params().clone(),
        perception_seed: f.seed(),
        step,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Tensor> = chunk.iter().map(|&i| dataset[i].tensor.clone()).collect();
            let batch = Tensor::stack(&items)?;
            let losses = training_step(&mut model, &mut opt, &batch, schedule, f, cfg, &mut r)?;
            on_step(&StepRecord { step: opt.steps(), losses });
        }
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&snapshot(&model, opt.steps()), path)?;
                log::info!("epoch {}: checkpoint written to {}", epoch + 1, path.display());
            }
        }
    }
    Ok(snapshot(&model, opt.steps()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;

    fn tiny_model() -> Denoiser {
        Denoiser::new(
            ModelConfig {
                base_channels: 4,
                depth: 1,
                heads: 1,
                head_dim: 4,
                wavelet_levels: 1,
                wavelet_filter: "haar".into(),
                time_embed_dim: 8,
                input_channels: 1,
            },
            1,
        )
        .unwrap()
    }

    fn setup() -> (NoiseSchedule, FeatureExtractor, Tensor) {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let f = FeatureExtractor::new(3, 1).unwrap();
        let batch = Tensor::rand_uniform([4, 1, 16, 16], -1.0, 1.0, &mut rng::seeded(2));
        (s, f, batch)
    }

    #[test]
    fn estimate_x0_inverts_the_marginal() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let mut r = rng::seeded(0);
        let x0 = Tensor::randn([16], &mut r);
        let eps = Tensor::randn([16], &mut r);
        let xt = crate::diffusion::forward_marginal_sample(&x0, 9, &s, &eps).unwrap();
        assert!(estimate_x0(&xt, 9, &eps, &s).unwrap().max_abs_diff(&x0).unwrap() < 1e-5);
        let c = s.alpha_bar(9).sqrt() as f32;
        let plain = estimate_x0(&xt, 9, &Tensor::zeros([16]), &s).unwrap();
        assert_eq!(plain.data(), xt.map(|v| v / c).data());
        assert!(estimate_x0(&xt, 21, &eps, &s).is_err());
    }

    #[test]
    fn gamma_zero_total_is_mse() {
        let (s, f, batch) = setup();
        let mut m = tiny_model();
        let cfg = TrainConfig { gamma: 0.0, t_star_fraction: 1.0, ..Default::default() };
        let mut opt = Adam::from_config(&cfg);
        let l = training_step(&mut m, &mut opt, &batch, &s, &f, &cfg, &mut rng::seeded(4)).unwrap();
        assert_eq!(l.l, l.l_mse);
        assert!(l.l_feat > 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (s, f, batch) = setup();
        let mut m = tiny_model();
        let before = m.weights().clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        let mut opt = Adam::from_config(&cfg);
        training_step(&mut m, &mut opt, &batch, &s, &f, &cfg, &mut rng::seeded(4)).unwrap();
        for (k, v) in before.iter() {
            assert!(v.bit_eq(m.weights().get(k).unwrap()), "{k} changed");
        }
    }

    #[test]
    fn clipping_shrinks_the_step_but_not_the_reported_norm() {
        let (s, f, batch) = setup();
        let largest_move = |clip: f64| {
            let mut m = tiny_model();
            let before = m.weights().clone();
            let cfg = TrainConfig { grad_clip: clip, learning_rate: 0.01, ..Default::default() };
            let mut opt = Adam::from_config(&cfg);
            let l = training_step(&mut m, &mut opt, &batch, &s, &f, &cfg, &mut rng::seeded(4)).unwrap();
            let moved = before
                .iter()
                .map(|(k, v)| v.max_abs_diff(m.weights().get(k).unwrap()).unwrap())
                .fold(0.0, f64::max);
            (moved, l.grad_norm)
        };
        let (free, n0) = largest_move(0.0);
        let (clipped, n1) = largest_move(1e-12);
        assert_eq!(n0, n1);
        assert!(n0 > 0.0);
        assert!(free > 0.009, "{free}");
        assert!(clipped < 0.001, "{clipped}");
        assert!(TrainConfig { grad_clip: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([("a".to_string(), Tensor::zeros([2]))]);
        opt.step(&mut w, &grads).unwrap();
        assert_eq!(w.get("a").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([("a".to_string(), Tensor::new([2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut w, &grads).unwrap();
        let d = w.get("a").unwrap().data();
        assert!((d[0] + 0.01).abs() < 1e-6 && (d[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_datasets() {
        let (s, f, _) = setup();
        let cfg = TrainConfig::default();
        assert!(matches!(train(tiny_model(), &[], &s, &f, &cfg, |_| {}), Err(Error::Data(_))));
        let anomalous = Sample::image("x", Tensor::zeros([1, 16, 16]), 1);
        assert!(matches!(train(tiny_model(), &[anomalous], &s, &f, &cfg, |_| {}), Err(Error::Data(_))));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (s, f, batch) = setup();
        let data: Vec<Sample> =
            (0..4).map(|i| Sample::image(format!("{i}"), batch.select_outer(i).unwrap(), 0)).collect();
        let m = tiny_model();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let ck = train(m.clone(), &data, &s, &f, &cfg, |_| {}).unwrap();
        assert_eq!(ck.step, 0);
        for (k, v) in m.weights().iter() {
            assert!(v.bit_eq(ck.weights.get(k).unwrap()));
        }
    }
}
