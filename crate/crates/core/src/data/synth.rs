use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::timeseries::z_normalize_window;
use super::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Sampling rate assigned to synthetic series, in Hz.
pub const SYNTH_SAMPLING_RATE: f64 = 64.0;

// disjoint per-item stream ranges
const TRAIN_STREAM: u64 = 0;
const TEST_NORMAL_STREAM: u64 = 1 << 32;
const ANOMALY_STREAM: u64 = 2 << 32;

fn check_size(size: usize) -> Result<()> {
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("synthetic image size must be a power of two >= 16, got {size}")));
    }
    Ok(())
}

/// Smooth Gaussian blobs over a faint two-grating texture, `[1, size, size]`
/// with values strictly below 1.
pub fn synth_normal_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Tensor {
    let s = size as f64;
    let gratings: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(2.0..5.0) * 2.0 * PI / s;
            (angle, freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            (
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(s / 10.0..s / 5.0),
                rng.random_range(0.25..0.45),
            )
        })
        .collect();
    Tensor::from_fn([1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let texture: f64 =
            gratings.iter().map(|&(a, f, p)| 0.05 * (f * (x * a.cos() + y * a.sin()) + p).sin()).sum();
        let blob: f64 = blobs
            .iter()
            .map(|&(cy, cx, sd, amp)| amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sd * sd)).exp())
            .sum();
        (-0.5 + texture + blob) as f32
    })
}

/// Kind of defect inserted into a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    Patch,
    Scratch,
}

fn insert_defect<R: Rng + ?Sized>(base: &Tensor, rng: &mut R) -> (Tensor, AnomalyKind) {
    let size = base.shape()[1];
    let mut d = base.to_vec();
    let kind = if rng.random_bool(0.5) { AnomalyKind::Patch } else { AnomalyKind::Scratch };
    match kind {
        AnomalyKind::Patch => {
            let side = size / 8;
            let (y0, x0) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    d[y * size + x] = 1.0;
                }
            }
        }
        AnomalyKind::Scratch => {
            let s = size as f64;
            let len = 0.75 * s;
            let half_width = (size / 32).max(2) as f64 / 2.0;
            let angle = rng.random_range(0.0..PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let (cx, cy) = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let along = px * dx + py * dy;
                    let across = -px * dy + py * dx;
                    if along.abs() <= len / 2.0 && across.abs() <= half_width {
                        d[y * size + x] = 1.0;
                    }
                }
            }
        }
    }
    (Tensor::from_fn(base.shape().to_vec(), |i| d[i]), kind)
}

/// The normal image behind anomaly `index` of a dataset, and the defective
/// version of it.
pub fn synth_anomaly_pair(seed: u64, index: usize, size: usize) -> Result<(Tensor, Tensor, AnomalyKind)> {
    check_size(size)?;
    let mut r = rng::for_sample(seed, ANOMALY_STREAM | index as u64);
    let base = synth_normal_image(&mut r, size);
    let (anomalous, kind) = insert_defect(&base, &mut r);
    Ok((base, anomalous, kind))
}

/// `n_normal` training normals; the test split holds `n_anomalous` fresh
/// normals followed by `n_anomalous` anomalies.
pub fn synth_image_dataset(
    seed: u64,
    n_normal: usize,
    n_anomalous: usize,
    size: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    check_size(size)?;
    let normal = |stream: u64, i: usize| synth_normal_image(&mut rng::for_sample(seed, stream | i as u64), size);
    let train = (0..n_normal).map(|i| Sample::image(format!("train_{i:04}"), normal(TRAIN_STREAM, i), 0)).collect();
    let mut test: Vec<Sample> = (0..n_anomalous)
        .map(|i| Sample::image(format!("test_normal_{i:04}"), normal(TEST_NORMAL_STREAM, i), 0))
        .collect();
    for i in 0..n_anomalous {
        let (_, img, _) = synth_anomaly_pair(seed, i, size)?;
        test.push(Sample::image(format!("test_anomaly_{i:04}"), img, 1));
    }
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesAnomaly {
    Spike,
    LevelShift,
    FrequencyDoubling,
}

/// Sets `values[k]` so that its z-score within the window is exactly `z`.
fn set_spike(values: &mut [f64], k: usize, z: f64) {
    let n = values.len() as f64;
    let zscore = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (v[k] - m) / sd
    };
    let sign = z.signum();
    let mut lo = values[k];
    let mut hi = values[k] + sign * 100.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        values[k] = mid;
        if zscore(values) * sign < z.abs() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    values[k] = hi;
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One z-normalized window of length `w`; `anomalous` injects a seeded
/// choice of spike, level shift or frequency doubling.
pub fn synth_window<R: Rng + ?Sized>(rng: &mut R, w: usize, anomalous: bool) -> Vec<f32> {
    let kind = anomalous.then(|| match rng.random_range(0..3) {
        0 => SeriesAnomaly::Spike,
        1 => SeriesAnomaly::LevelShift,
        _ => SeriesAnomaly::FrequencyDoubling,
    });
    synth_window_of(rng, w, kind)
}

pub fn synth_window_of<R: Rng + ?Sized>(rng: &mut R, w: usize, anomaly: Option<SeriesAnomaly>) -> Vec<f32> {
    let dt = 1.0 / SYNTH_SAMPLING_RATE;
    let f1 = rng.random_range(2.5..3.5);
    let f2 = rng.random_range(6.0..8.0);
    let a2 = rng.random_range(0.3..0.6);
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let tone = |t: f64, mult: f64| (2.0 * PI * mult * f1 * t + p1).sin() + a2 * (2.0 * PI * mult * f2 * t + p2).sin();
    let mut v: Vec<f64> = (0..w)
        .map(|i| tone(i as f64 * dt, 1.0) + 0.05 * gauss(rng))
        .collect();
    if let Some(kind) = anomaly {
        let len = rng.random_range(w / 4..=w / 2);
        let start = rng.random_range(0..=w - len);
        match kind {
            SeriesAnomaly::Spike => {
                let k = rng.random_range(0..w);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                set_spike(&mut v, k, 5.0 * sign);
            }
            SeriesAnomaly::LevelShift => {
                let m = v.iter().sum::<f64>() / w as f64;
                let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w as f64).sqrt();
                let shift = if rng.random_bool(0.5) { 2.0 * sd } else { -2.0 * sd };
                v[start..start + len].iter_mut().for_each(|x| *x += shift);
            }
            SeriesAnomaly::FrequencyDoubling => {
                for (i, x) in v.iter_mut().enumerate().skip(start).take(len) {
                    *x = tone(i as f64 * dt, 2.0) + 0.05 * gauss(rng);
                }
            }
        }
    }
    z_normalize_window(&v.iter().map(|&x| x as f32).collect::<Vec<_>>())
}

/// `n_windows` normal training windows; the test split holds `n_windows/2`
/// normals followed by `n_windows/2` anomalies (at least one of each).
pub fn synth_timeseries_dataset(seed: u64, n_windows: usize, w: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if w < 32 {
        return Err(Error::InvalidArgument(format!("synthetic window must be at least 32 long, got {w}")));
    }
    let window = |stream: u64, i: usize, anomalous: bool| -> Result<Tensor> {
        Tensor::new([w], synth_window(&mut rng::for_sample(seed, stream | i as u64), w, anomalous))
    };
    let train = (0..n_windows)
        .map(|i| Ok(Sample::window(format!("train_{i:04}"), window(TRAIN_STREAM, i, false)?, 0)))
        .collect::<Result<Vec<_>>>()?;
    let half = (n_windows / 2).max(1);
    let mut test = Vec::with_capacity(2 * half);
    for i in 0..half {
        test.push(Sample::window(format!("test_normal_{i:04}"), window(TEST_NORMAL_STREAM, i, false)?, 0));
    }
    for i in 0..half {
        test.push(Sample::window(format!("test_anomaly_{i:04}"), window(ANOMALY_STREAM, i, true)?, 1));
    }
    Ok((train, test))
}
