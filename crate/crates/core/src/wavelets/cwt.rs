//! Morlet continuous wavelet transform and its single-integral inverse.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Morlet centre frequency ω₀.
pub const MORLET_OMEGA0: f64 = 6.0;

/// Wavelet support kept on each side, in units of scale.
const SUPPORT: f64 = 6.0;

pub const MIN_SIGNAL_LEN: usize = 8;
pub const MIN_ICWT_SCALES: usize = 4;

/// Real part of the CWT on a `[scales, time]` grid.
#[derive(Clone, Debug)]
pub struct Scalogram {
    pub coefficients: Tensor,
    /// Seconds, strictly increasing.
    pub scales: Vec<f64>,
    pub sampling_rate: f64,
}

impl Scalogram {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn len(&self) -> usize {
        self.coefficients.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Centre frequency in Hz of each row.
    pub fn frequencies(&self) -> Vec<f64> {
        self.scales.iter().map(|&s| scale_to_frequency(s)).collect()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.len();
        &self.coefficients.data()[i * n..(i + 1) * n]
    }
}

pub fn scale_to_frequency(scale: f64) -> f64 {
    MORLET_OMEGA0 / (2.0 * PI * scale)
}

pub fn frequency_to_scale(freq: f64) -> f64 {
    MORLET_OMEGA0 / (2.0 * PI * freq)
}

/// `count` scales whose centre frequencies are log-spaced over
/// `[f_lo, f_hi]` Hz, returned in increasing-scale order.
pub fn log_scales(f_lo: f64, f_hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(f_lo > 0.0 && f_hi > f_lo) || count < 2 {
        return Err(Error::InvalidArgument(format!(
            "scale band needs 0 < f_lo < f_hi and at least 2 scales (got {f_lo}, {f_hi}, {count})"
        )));
    }
    let ratio = (f_hi / f_lo).ln();
    Ok((0..count)
        .map(|i| frequency_to_scale(f_hi * (-ratio * i as f64 / (count - 1) as f64).exp()))
        .collect())
}

/// 32 scales spanning `sampling_rate/64 ..= sampling_rate/4` Hz.
pub fn default_scales(sampling_rate: f64) -> Vec<f64> {
    log_scales(sampling_rate / 64.0, sampling_rate / 4.0, 32).expect("valid default band")
}

fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("empty scale list".into()));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("scales must be positive and finite".into()));
    }
    if scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("scales must be strictly increasing".into()));
    }
    Ok(())
}

/// Real Morlet taps for one scale: `√(Δt/s) π^{-1/4} cos(ω₀u) e^{-u²/2}`,
/// `u = kΔt/s`, for `k` in `-half..=half`.
fn morlet_taps(scale: f64, dt: f64) -> (usize, Vec<f64>) {
    let half = (SUPPORT * scale / dt).ceil() as usize;
    let norm = (dt / scale).sqrt() * PI.powf(-0.25);
    let taps = (0..=2 * half)
        .map(|i| {
            let u = (i as f64 - half as f64) * dt / scale;
            norm * (MORLET_OMEGA0 * u).cos() * (-0.5 * u * u).exp()
        })
        .collect();
    (half, taps)
}

fn cwt_f64(signal: &[f64], scales: &[f64], sampling_rate: f64) -> Vec<f64> {
    let n = signal.len();
    let dt = 1.0 / sampling_rate;
    let mut out = vec![0.0; scales.len() * n];
    for (row, &s) in out.chunks_mut(n).zip(scales) {
        let (half, taps) = morlet_taps(s, dt);
        for (b, dst) in row.iter_mut().enumerate() {
            // correlation with zero padding: taps index i ↔ sample b + i - half
            let lo = half.saturating_sub(b);
            let hi = (n + half - b).min(taps.len());
            let mut acc = 0.0;
            for i in lo..hi {
                acc += signal[b + i - half] * taps[i];
            }
            *dst = acc;
        }
    }
    out
}

/// Continuous wavelet transform of `signal[n]` on the given scales (seconds),
/// zero-padded at the boundaries.
pub fn cwt(signal: &Tensor, scales: &[f64], sampling_rate: f64) -> Result<Scalogram> {
    if signal.rank() != 1 {
        return Err(Error::Shape(format!("cwt expects a 1-D signal, got {:?}", signal.shape())));
    }
    if signal.numel() < MIN_SIGNAL_LEN {
        return Err(Error::Shape(format!("cwt needs at least {MIN_SIGNAL_LEN} samples")));
    }
    if !(sampling_rate > 0.0) {
        return Err(Error::InvalidArgument("sampling rate must be positive".into()));
    }
    validate_scales(scales)?;
    let x: Vec<f64> = signal.data().iter().map(|&v| v as f64).collect();
    let coeffs = cwt_f64(&x, scales, sampling_rate);
    Ok(Scalogram {
        coefficients: Tensor::from_parts(vec![scales.len(), x.len()], coeffs.into_iter().map(|v| v as f32).collect()),
        scales: scales.to_vec(),
        sampling_rate,
    })
}

/// Per-scale quadrature weights in ln-scale.
fn log_weights(scales: &[f64]) -> Vec<f64> {
    let ln: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let k = ln.len();
    (0..k)
        .map(|j| match j {
            0 => ln[1] - ln[0],
            _ if j == k - 1 => ln[k - 1] - ln[k - 2],
            _ => 0.5 * (ln[j + 1] - ln[j - 1]),
        })
        .collect()
}

/// `Σ_j w_j Re W(s_j, ·)/√s_j · √Δt / ψ(0)` before division by the
/// admissibility constant.
fn raw_reconstruction(coeffs: &[f64], n: usize, scales: &[f64], sampling_rate: f64) -> Vec<f64> {
    let dt = 1.0 / sampling_rate;
    let psi0 = PI.powf(-0.25);
    let weights = log_weights(scales);
    let mut out = vec![0.0; n];
    for ((row, &s), &w) in coeffs.chunks(n).zip(scales).zip(&weights) {
        let factor = w * dt.sqrt() / (psi0 * s.sqrt());
        out.iter_mut().zip(row).for_each(|(o, &c)| *o += factor * c);
    }
    out
}

/// Admissibility constant of the Morlet single-integral inverse, calibrated
/// once by transforming and reconstructing a long in-band reference tone.
pub fn reconstruction_constant() -> f64 {
    static CONSTANT: OnceLock<f64> = OnceLock::new();
    *CONSTANT.get_or_init(|| {
        let (n, rate, freq) = (4096usize, 1.0, 0.05);
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq * i as f64).cos()).collect();
        let scales = log_scales(freq / 32.0, (freq * 8.0).min(0.45), 96).unwrap();
        let coeffs = cwt_f64(&tone, &scales, rate);
        let raw = raw_reconstruction(&coeffs, n, &scales, rate);
        let mid = n / 4..3 * n / 4;
        let num: f64 = mid.clone().map(|i| raw[i] * tone[i]).sum();
        let den: f64 = mid.map(|i| tone[i] * tone[i]).sum();
        num / den
    })
}

/// Inverse CWT via the Morlet single-integral formula.
pub fn icwt(s: &Scalogram) -> Result<Tensor> {
    if s.num_scales() < MIN_ICWT_SCALES {
        return Err(Error::InvalidArgument(format!(
            "icwt needs at least {MIN_ICWT_SCALES} scales, got {}",
            s.num_scales()
        )));
    }
    validate_scales(&s.scales)?;
    let n = s.len();
    let coeffs: Vec<f64> = s.coefficients.data().iter().map(|&v| v as f64).collect();
    let c = reconstruction_constant();
    let raw = raw_reconstruction(&coeffs, n, &s.scales, s.sampling_rate);
    Ok(Tensor::from_parts(vec![n], raw.into_iter().map(|v| (v / c) as f32).collect()))
}
