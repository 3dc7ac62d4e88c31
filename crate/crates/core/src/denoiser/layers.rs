use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

use super::weights::BoundWeights;

/// Width of the learned 1-D convolution over the sinusoidal vector.
pub const TIME_KERNEL: usize = 3;

/// `[sin(t·ω_0), …, sin(t·ω_{d/2−1}), cos(t·ω_0), …]` with
/// `ω_i = 10000^{−2i/d}`.
pub fn sinusoidal_encoding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sinusoidal dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64)).collect();
    Ok(freqs.iter().map(|w| (t * w).sin()).chain(freqs.iter().map(|w| (t * w).cos())).collect())
}

/// Sinusoidal encodings of each timestep filtered by a small same-padded
/// convolution `kernel[1, 1, 1, k]`, giving `[N, dim]`.
pub fn hybrid_time_embedding<T: Element>(g: &Graph<T>, t: &[usize], dim: usize, kernel: &Var<T>) -> Result<Var<T>> {
    if t.is_empty() {
        return Err(Error::Shape("no timesteps given".into()));
    }
    let k = kernel.shape();
    if k.len() != 4 || k[..3] != [1, 1, 1] || k[3] % 2 == 0 {
        return Err(Error::Shape(format!("time kernel must be [1, 1, 1, odd], got {k:?}")));
    }
    let mut enc = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        enc.extend(sinusoidal_encoding(ti as f64, dim)?.into_iter().map(|v| T::lit(v)));
    }
    let enc = g.constant(Tensor::new([t.len(), 1, 1, dim], enc)?);
    let y = g.conv2d_padded(&enc, kernel, 1, (0, k[3] / 2))?;
    g.reshape(&y, &[t.len(), dim])
}

/// Projection matrices of one attention block.
pub struct AttentionWeights<'a, T: Element> {
    /// `[C, h·d_k]`
    pub q: &'a Var<T>,
    pub k: &'a Var<T>,
    pub v: &'a Var<T>,
    /// `[h·d_k, C]`
    pub o: &'a Var<T>,
    pub heads: usize,
}

impl<'a, T: Element> AttentionWeights<'a, T> {
    pub fn from_bound(w: &'a BoundWeights<T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: w.get(&format!("{prefix}.q"))?,
            k: w.get(&format!("{prefix}.k"))?,
            v: w.get(&format!("{prefix}.v"))?,
            o: w.get(&format!("{prefix}.o"))?,
            heads,
        })
    }
}

/// Multi-head scaled dot-product self-attention over tokens `x[N, L, C]`.
pub fn multi_head_attention<T: Element>(g: &Graph<T>, x: &Var<T>, w: &AttentionWeights<'_, T>) -> Result<Var<T>> {
    let &[n, l, c] = x.shape() else {
        return Err(Error::Shape(format!("attention expects [N, L, C], got {:?}", x.shape())));
    };
    let h = w.heads;
    let proj = w.q.shape();
    if h == 0 || proj.len() != 2 || proj[0] != c || proj[1] % h != 0 {
        return Err(Error::Shape(format!("attention projection {proj:?} for {c} channels and {h} heads")));
    }
    let hd = proj[1];
    let dk = hd / h;
    let flat = g.reshape(x, &[n * l, c])?;
    let split = |m: &Var<T>| -> Result<Var<T>> {
        let p = g.matmul(&flat, m)?;
        let p = g.reshape(&p, &[n, l, h, dk])?;
        let p = g.permute(&p, &[0, 2, 1, 3])?;
        g.reshape(&p, &[n * h, l, dk])
    };
    let (q, k, v) = (split(w.q)?, split(w.k)?, split(w.v)?);
    let scores = g.bmm(&q, &k, true)?;
    let scores = g.mul_scalar(&scores, T::lit(1.0 / (dk as f64).sqrt()));
    let attn = g.softmax(&scores, 2)?;
    let heads = g.bmm(&attn, &v, false)?;
    let heads = g.reshape(&heads, &[n, h, l, dk])?;
    let heads = g.permute(&heads, &[0, 2, 1, 3])?;
    let heads = g.reshape(&heads, &[n * l, hd])?;
    let out = g.matmul(&heads, w.o)?;
    g.reshape(&out, &[n, l, c])
}

/// Residual attention over the spatial positions of `x[N, C, H, W]`.
pub(crate) fn spatial_attention<T: Element>(g: &Graph<T>, x: &Var<T>, w: &AttentionWeights<'_, T>) -> Result<Var<T>> {
    let &[n, c, hh, ww] = x.shape() else {
        return Err(Error::Shape(format!("spatial attention expects [N, C, H, W], got {:?}", x.shape())));
    };
    let tokens = g.reshape(x, &[n, c, hh * ww])?;
    let tokens = g.permute(&tokens, &[0, 2, 1])?;
    let y = multi_head_attention(g, &tokens, w)?;
    let y = g.permute(&y, &[0, 2, 1])?;
    let y = g.reshape(&y, &[n, c, hh, ww])?;
    g.add(x, &y)
}

/// 3×3 same-padded convolution plus bias.
pub(crate) fn conv<T: Element>(g: &Graph<T>, x: &Var<T>, w: &BoundWeights<T>, name: &str, stride: usize) -> Result<Var<T>> {
    let k = w.get(&format!("{name}.weight"))?;
    let pad = k.shape()[2] / 2;
    let y = g.conv2d(x, k, stride, pad)?;
    g.add_channel_bias(&y, w.get(&format!("{name}.bias"))?)
}

/// Maps a 1- or 3-channel input onto the shared trunk width.
pub fn input_adapter<T: Element>(g: &Graph<T>, x: &Var<T>, w: &BoundWeights<T>) -> Result<Var<T>> {
    let c = x.shape().get(1).copied().unwrap_or(0);
    if x.shape().len() != 4 || !(c == 1 || c == 3) {
        return Err(Error::Shape(format!("input must be [N, 1|3, H, W], got {:?}", x.shape())));
    }
    let k = w.get(&format!("adapter.in{c}.weight"))?;
    let y = g.conv2d(x, k, 1, 1)?;
    g.add_channel_bias(&y, w.get("adapter.bias")?)
}
