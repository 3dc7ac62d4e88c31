//! Frozen random convolutional feature extractor used for the perceptual
//! distance between an input and its reconstruction.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::denoiser::ModelWeights;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Side length every input is resampled to.
pub const INPUT_SIZE: usize = 64;
/// Output widths of the four stride-2 stages.
pub const WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const FEATURE_DIM: usize = 64;
pub const MIN_INPUT: usize = 16;
const LEAK: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    input_channels: usize,
    seed: u64,
    weights: ModelWeights,
}

/// Deterministically builds the extractor for `input_channels` ∈ {1, 3}.
pub fn build_extractor(seed: u64, input_channels: usize) -> Result<FeatureExtractor> {
    FeatureExtractor::new(seed, input_channels)
}

impl FeatureExtractor {
    pub fn new(seed: u64, input_channels: usize) -> Result<Self> {
        if !(input_channels == 1 || input_channels == 3) {
            return Err(Error::InvalidArgument(format!("extractor needs 1 or 3 channels, got {input_channels}")));
        }
        let mut r = rng::seeded(seed);
        let mut weights = ModelWeights::new();
        let mut c = input_channels;
        for (i, &o) in WIDTHS.iter().enumerate() {
            // He-uniform keeps activations from collapsing through four layers
            let a = (6.0 / (c * 9) as f64).sqrt();
            weights.insert(format!("conv{i}.weight"), Tensor::rand_uniform([o, c, 3, 3], -a, a, &mut r));
            weights.insert(format!("conv{i}.bias"), Tensor::rand_uniform([o], -0.1, 0.1, &mut r));
            c = o;
        }
        Ok(Self { input_channels, seed, weights })
    }

    /// Loads externally supplied weights; they must match the built-in layout.
    pub fn from_weights(seed: u64, input_channels: usize, weights: ModelWeights) -> Result<Self> {
        let reference = Self::new(seed, input_channels)?;
        let manifest: Vec<(String, Vec<usize>)> =
            reference.weights.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        weights.check_manifest(&manifest)?;
        Ok(Self { input_channels, seed, weights })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Hash over weight names, shapes and bits.
    pub fn weight_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (k, t) in self.weights.iter() {
            k.hash(&mut h);
            t.hash(&mut h);
        }
        h.finish()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, hh, ww] = shape else {
            return Err(Error::Shape(format!("features expect [N, C, H, W], got {shape:?}")));
        };
        if c != self.input_channels {
            return Err(Error::Shape(format!("extractor built for {} channels, got {c}", self.input_channels)));
        }
        if hh < MIN_INPUT || ww < MIN_INPUT {
            return Err(Error::Shape(format!("feature input {hh}x{ww} below the {MIN_INPUT}x{MIN_INPUT} minimum")));
        }
        Ok(())
    }

    /// Differentiable `[N, C, H, W] -> [N, 64]`. The extractor's own weights
    /// enter `g` as constants and never receive gradients.
    pub fn features<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let mut h = g.resize_bilinear(x, INPUT_SIZE, INPUT_SIZE)?;
        for i in 0..WIDTHS.len() {
            let k = g.constant(self.weights.get(&format!("conv{i}.weight"))?.cast::<T>());
            let b = g.constant(self.weights.get(&format!("conv{i}.bias"))?.cast::<T>());
            h = g.conv2d(&h, &k, 2, 1)?;
            h = g.add_channel_bias(&h, &b)?;
            h = g.leaky_relu(&h, T::lit(LEAK));
        }
        g.global_avg_pool(&h)
    }

    /// Inference-only features of a batch.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        Ok(self.features(&g, &g.constant(x.clone()))?.into_value())
    }

    /// `‖f(a) − f(b)‖²` for each pair of samples in two equal-shape batches.
    pub fn distances(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        a.expect_same_shape(b)?;
        let (fa, fb) = (self.extract(a)?, self.extract(b)?);
        Ok(fa
            .data()
            .chunks(FEATURE_DIM)
            .zip(fb.data().chunks(FEATURE_DIM))
            .map(|(u, v)| u.iter().zip(v).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum())
            .collect())
    }
}

/// Features of a batch `[N, C, H, W]` or single sample `[C, H, W]`.
pub fn extract_features(f: &FeatureExtractor, x: &Tensor) -> Result<Tensor> {
    f.extract(&as_batch(x)?)
}

/// `‖f(a) − f(b)‖²` for one sample, `[C, H, W]` or `[1, C, H, W]`.
pub fn feature_distance(f: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (as_batch(a)?, as_batch(b)?);
    if a.shape()[0] != 1 {
        return Err(Error::Shape(format!("feature_distance takes one sample, got a batch of {}", a.shape()[0])));
    }
    Ok(f.distances(&a, &b)?[0])
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => x.reshape([1, x.shape()[0], x.shape()[1], x.shape()[2]]),
        4 => Ok(x.clone()),
        _ => Err(Error::Shape(format!("expected [C, H, W] or [N, C, H, W], got {:?}", x.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_construction() {
        let a = build_extractor(5, 1).unwrap();
        let b = build_extractor(5, 1).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        assert_ne!(a.weight_hash(), build_extractor(6, 1).unwrap().weight_hash());
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let f = build_extractor(1, 3).unwrap();
        let x = Tensor::randn([3, 20, 24], &mut rng::seeded(2));
        assert_eq!(feature_distance(&f, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn symmetric() {
        let f = build_extractor(1, 1).unwrap();
        let mut r = rng::seeded(3);
        let a = Tensor::randn([1, 32, 32], &mut r);
        let b = Tensor::randn([1, 32, 32], &mut r);
        let d = feature_distance(&f, &a, &b).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, feature_distance(&f, &b, &a).unwrap());
    }

    #[test]
    fn rejects_small_or_mismatched() {
        let f = build_extractor(1, 1).unwrap();
        assert!(extract_features(&f, &Tensor::zeros([1, 8, 8])).is_err());
        assert!(extract_features(&f, &Tensor::zeros([3, 32, 32])).is_err());
        assert_eq!(extract_features(&f, &Tensor::zeros([1, 16, 40])).unwrap().shape(), &[1, 64]);
    }

    #[test]
    fn weights_stay_off_the_tape() {
        let f = build_extractor(1, 1).unwrap();
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::randn([1, 1, 16, 16], &mut rng::seeded(0)));
        let feats = f.features(&g, &x).unwrap();
        let loss = g.sum(&feats);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(&x).is_some());
    }
}
