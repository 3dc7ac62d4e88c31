//! Time-conditioned U-Net noise predictor with wavelet skip features and
//! self-attention on the downsampled stages.

mod layers;
mod weights;

use serde::{Deserialize, Serialize};

pub use layers::{
    hybrid_time_embedding, input_adapter, multi_head_attention, sinusoidal_encoding, AttentionWeights, TIME_KERNEL,
};
pub use weights::{BoundWeights, ModelWeights};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::wavelets::{wavelet_pyramid_axes, Axes, WaveletFilter};
use layers::{conv, spatial_attention};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Number of stride-2 downsampling stages.
    pub depth: usize,
    /// Attention heads; 0 removes every attention block.
    pub heads: usize,
    pub head_dim: usize,
    /// Wavelet pyramid levels fused into the encoder; 0 disables fusion.
    pub wavelet_levels: usize,
    pub wavelet_filter: String,
    pub time_embed_dim: usize,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            heads: 4,
            head_dim: 8,
            wavelet_levels: 2,
            wavelet_filter: "db2".into(),
            time_embed_dim: 64,
            input_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return bad("model.base_channels must be positive".into());
        }
        if self.depth == 0 {
            return bad("model.depth must be at least 1".into());
        }
        if self.heads > 0 && self.head_dim == 0 {
            return bad("model.head_dim must be positive".into());
        }
        if self.wavelet_levels > self.depth {
            return bad(format!(
                "model.wavelet_levels ({}) cannot exceed model.depth ({})",
                self.wavelet_levels, self.depth
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!("model.time_embed_dim must be even and >= 2, got {}", self.time_embed_dim));
        }
        if !(self.input_channels == 1 || self.input_channels == 3) {
            return bad(format!("model.input_channels must be 1 or 3, got {}", self.input_channels));
        }
        WaveletFilter::by_name(&self.wavelet_filter).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Channel width of stage `s` (0 = input resolution).
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    fn attention(&self) -> bool {
        self.heads > 0
    }

    /// Every weight name with its shape, in name order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = Manifest { e: self.time_embed_dim, hd: self.heads * self.head_dim, items: Vec::new() };
        let c0 = self.channels(0);
        m.push("time.conv1d.weight", vec![1, 1, 1, TIME_KERNEL]);
        m.push("adapter.in1.weight", vec![c0, 1, 3, 3]);
        m.push("adapter.in3.weight", vec![c0, 3, 3, 3]);
        m.push("adapter.bias", vec![c0]);
        m.block("enc0", c0, c0);
        for s in 1..=self.depth {
            let (cp, cs) = (self.channels(s - 1), self.channels(s));
            m.conv(&format!("down{s}"), cs, cp, 3);
            let fused = s <= self.wavelet_levels;
            if fused {
                m.conv(&format!("wpm{s}.proj"), cs, 3, 1);
            }
            m.block(&format!("enc{s}"), cs, if fused { 2 * cs } else { cs });
            if self.attention() {
                m.attention(&format!("enc{s}"), cs);
            }
        }
        let cd = self.channels(self.depth);
        m.block("mid", cd, cd);
        if self.attention() {
            m.attention("mid", cd);
        }
        for s in (1..=self.depth).rev() {
            let (cp, cs) = (self.channels(s - 1), self.channels(s));
            m.block(&format!("dec{s}"), cs, 2 * cs);
            if self.attention() {
                m.attention(&format!("dec{s}"), cs);
            }
            m.conv(&format!("up{s}"), cp, cs, 3);
        }
        m.block("dec0", c0, 2 * c0);
        m.conv("out.out1", 1, c0, 3);
        m.conv("out.out3", 3, c0, 3);
        m.items.sort_by(|a, b| a.0.cmp(&b.0));
        m.items
    }
}

struct Manifest {
    e: usize,
    hd: usize,
    items: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    fn push(&mut self, name: &str, shape: Vec<usize>) {
        self.items.push((name.to_string(), shape));
    }

    fn conv(&mut self, name: &str, o: usize, i: usize, k: usize) {
        self.push(&format!("{name}.weight"), vec![o, i, k, k]);
        self.push(&format!("{name}.bias"), vec![o]);
    }

    fn block(&mut self, name: &str, o: usize, i: usize) {
        self.conv(&format!("{name}.conv"), o, i, 3);
        self.push(&format!("{name}.time.weight"), vec![self.e, o]);
        self.push(&format!("{name}.time.bias"), vec![o]);
    }

    fn attention(&mut self, name: &str, c: usize) {
        for p in ["q", "k", "v"] {
            self.push(&format!("{name}.attn.{p}"), vec![c, self.hd]);
        }
        self.push(&format!("{name}.attn.o"), vec![self.hd, c]);
    }
}

/// The noise-prediction network: configuration plus weights.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Denoiser {
    /// Glorot-uniform kernels, zero biases, zero output heads, seeded.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut weights = ModelWeights::new();
        for (name, shape) in config.manifest() {
            let t = if name.ends_with("bias") || name.starts_with("out.") {
                Tensor::zeros(shape)
            } else {
                weights::xavier(&shape, &mut rng)
            };
            weights.insert(name, t);
        }
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_manifest(&config.manifest())?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    /// Checks that `[N, C, H, W]` fits this network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Shape(format!("denoiser input must be [N, C, H, W], got {shape:?}")));
        };
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = 1usize << self.config.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial extent {h}x{w} must be divisible by {m} for depth {}",
                self.config.depth
            )));
        }
        if self.config.wavelet_levels > 0 {
            let filter = WaveletFilter::by_name(&self.config.wavelet_filter)?;
            let min = h.min(w) >> (self.config.wavelet_levels - 1);
            if min < filter.len() {
                return Err(Error::Shape(format!(
                    "{h}x{w} input too small for {} `{}` wavelet levels",
                    self.config.wavelet_levels, self.config.wavelet_filter
                )));
            }
        }
        Ok(())
    }

    /// Detail bands of the channel-mean of `x`, one `[N, 3, H/2^l, W/2^l]`
    /// tensor per fused level.
    fn wavelet_details<T: Element>(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let levels = self.config.wavelet_levels;
        if levels == 0 {
            return Ok(Vec::new());
        }
        let &[n, c, h, w] = x.shape() else { unreachable!("checked by check_input") };
        let inv = T::lit(1.0 / c as f64);
        let lum = Tensor::from_fn([n, h, w], |i| {
            let (b, p) = (i / (h * w), i % (h * w));
            (0..c).map(|ch| x.data()[(b * c + ch) * h * w + p]).fold(T::zero(), |a, v| a + v) * inv
        });
        let filter = WaveletFilter::by_name(&self.config.wavelet_filter)?;
        let pyramid = wavelet_pyramid_axes(&lum, &filter, levels, Axes::Two)?;
        pyramid
            .levels()
            .iter()
            .map(|bands| {
                let (bh, bw) = (bands.details[0].shape()[1], bands.details[0].shape()[2]);
                let plane = bh * bw;
                Tensor::new(
                    [n, 3, bh, bw],
                    (0..n)
                        .flat_map(|b| bands.details.iter().flat_map(move |d| d.data()[b * plane..(b + 1) * plane].iter().copied()))
                        .collect(),
                )
            })
            .collect()
    }

    /// Differentiable forward pass `ε̂ = f(x_t, t)` on graph `g`.
    pub fn forward<T: Element>(&self, g: &Graph<T>, w: &BoundWeights<T>, x: &Var<T>, t: &[usize]) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let cfg = &self.config;
        let n = x.shape()[0];
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for a batch of {n}", t.len())));
        }
        let emb = hybrid_time_embedding(g, t, cfg.time_embed_dim, w.get("time.conv1d.weight")?)?;
        let emb = g.silu(&emb);
        let block = |h: &Var<T>, name: &str| -> Result<Var<T>> {
            let y = conv(g, h, w, &format!("{name}.conv"), 1)?;
            let tb = g.matmul(&emb, w.get(&format!("{name}.time.weight"))?)?;
            let tb = g.add_channel_bias(&tb, w.get(&format!("{name}.time.bias"))?)?;
            let y = g.add_sample_bias(&y, &tb)?;
            Ok(g.silu(&y))
        };
        let attend = |h: Var<T>, name: &str| -> Result<Var<T>> {
            if !cfg.attention() {
                return Ok(h);
            }
            let aw = AttentionWeights::from_bound(w, &format!("{name}.attn"), cfg.heads)?;
            spatial_attention(g, &h, &aw)
        };

        let details = self.wavelet_details(x.value())?;
        let h = g.silu(&input_adapter(g, x, w)?);
        let mut h = block(&h, "enc0")?;
        let mut skips = vec![h.clone()];
        for s in 1..=cfg.depth {
            h = g.silu(&conv(g, &h, w, &format!("down{s}"), 2)?);
            if let Some(d) = details.get(s - 1) {
                let d = g.constant(d.clone());
                let d = conv(g, &d, w, &format!("wpm{s}.proj"), 1)?;
                h = g.concat(&[&h, &d], 1)?;
            }
            h = block(&h, &format!("enc{s}"))?;
            h = attend(h, &format!("enc{s}"))?;
            skips.push(h.clone());
        }
        h = block(&h, "mid")?;
        h = attend(h, "mid")?;
        for s in (1..=cfg.depth).rev() {
            h = g.concat(&[&h, &skips[s]], 1)?;
            h = block(&h, &format!("dec{s}"))?;
            h = attend(h, &format!("dec{s}"))?;
            h = g.upsample2x(&h)?;
            h = g.silu(&conv(g, &h, w, &format!("up{s}"), 1)?);
        }
        h = g.concat(&[&h, &skips[0]], 1)?;
        h = block(&h, "dec0")?;
        conv(g, &h, w, &format!("out.out{}", x.shape()[1]), 1)
    }

    /// Inference-only `ε̂` for a batch.
    pub fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let g = Graph::inference();
        let w = self.weights.bind(&g, false);
        let x = g.constant(x_t.clone());
        Ok(self.forward(&g, &w, &x, t)?.into_value())
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.predict(x_t, t)
    }
}

/// Free-function form of [`Denoiser::predict`].
pub fn predict_noise(model: &Denoiser, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
    model.predict(x_t, t)
}
