//! Critically sampled discrete wavelet transform with periodized filtering.
//!
//! 1-D transforms act on the last axis, 2-D transforms on the last two; any
//! leading axes are independent planes. Odd extents are padded by repeating
//! the final sample (half-sample symmetric extension) and cropped again on
//! reconstruction.

use super::WaveletFilter;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Number of trailing axes a transform acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axes {
    One,
    Two,
}

impl Axes {
    fn count(self) -> usize {
        match self {
            Axes::One => 1,
            Axes::Two => 2,
        }
    }

    /// 1-D for rank-1 tensors, 2-D otherwise.
    pub fn for_rank(rank: usize) -> Self {
        if rank <= 1 {
            Axes::One
        } else {
            Axes::Two
        }
    }
}

/// One level of decomposition. 2-D details are `[horizontal, vertical, diagonal]`.
#[derive(Clone, Debug)]
pub struct DwtBands<T: Element = f32> {
    pub approx: Tensor<T>,
    pub details: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct WaveletPyramid<T: Element = f32> {
    filter: String,
    axes: Axes,
    /// Input shape of each level, outermost first.
    shapes: Vec<Vec<usize>>,
    levels: Vec<DwtBands<T>>,
}

impl<T: Element> WaveletPyramid<T> {
    pub fn filter_name(&self) -> &str {
        &self.filter
    }

    pub fn axes(&self) -> Axes {
        self.axes
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level `l` (1-based).
    pub fn level(&self, l: usize) -> Option<&DwtBands<T>> {
        l.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn level_mut(&mut self, l: usize) -> Option<&mut DwtBands<T>> {
        l.checked_sub(1).and_then(move |i| self.levels.get_mut(i))
    }

    pub fn levels(&self) -> &[DwtBands<T>] {
        &self.levels
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Σ(A_L² + Σ_l Σ D_l²) using the deepest approximation only.
    pub fn energy(&self) -> f64 {
        let sq = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
        let details: f64 = self.levels.iter().flat_map(|l| l.details.iter()).map(sq).sum();
        details + self.levels.last().map_or(0.0, |l| sq(&l.approx))
    }

    /// Inverse of [`wavelet_pyramid`], driven by the deepest approximation and
    /// every level's details.
    pub fn reconstruct(&self, filter: &WaveletFilter) -> Result<Tensor<T>> {
        if filter.name() != self.filter {
            return Err(Error::InvalidArgument(format!(
                "pyramid was built with `{}`, reconstruction asked for `{}`",
                self.filter,
                filter.name()
            )));
        }
        let mut current = self.levels.last().expect("pyramid has at least one level").approx.clone();
        for (bands, shape) in self.levels.iter().zip(&self.shapes).rev() {
            let level = DwtBands { approx: current, details: bands.details.clone() };
            current = idwt(&level, filter, shape)?;
        }
        Ok(current)
    }
}

fn analyze(x: &[f64], h: &[f64], g: &[f64], a: &mut [f64], d: &mut [f64]) {
    let n = x.len();
    for i in 0..n / 2 {
        let (mut sa, mut sd) = (0.0, 0.0);
        for k in 0..h.len() {
            let v = x[(2 * i + k) % n];
            sa += h[k] * v;
            sd += g[k] * v;
        }
        a[i] = sa;
        d[i] = sd;
    }
}

fn synthesize(a: &[f64], d: &[f64], h: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for i in 0..a.len() {
        for k in 0..h.len() {
            out[(2 * i + k) % n] += h[k] * a[i] + g[k] * d[i];
        }
    }
}

fn even(n: usize) -> usize {
    n + n % 2
}

fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

fn from_f64<T: Element>(shape: Vec<usize>, data: Vec<f64>) -> Tensor<T> {
    Tensor::from_parts(shape, data.into_iter().map(T::lit).collect())
}

fn check_extents(shape: &[usize], axes: Axes, filter: &WaveletFilter) -> Result<()> {
    if shape.len() < axes.count() {
        return Err(Error::Shape(format!("{:?} transform of shape {shape:?}", axes)));
    }
    for &n in &shape[shape.len() - axes.count()..] {
        if n < filter.len() {
            return Err(Error::Shape(format!(
                "extent {n} is shorter than the {}-tap `{}` filter",
                filter.len(),
                filter.name()
            )));
        }
    }
    Ok(())
}

/// Single-level transform: `(A, D)` for rank 1, `(A, Dh, Dv, Dd)` otherwise.
pub fn dwt<T: Element>(x: &Tensor<T>, filter: &WaveletFilter) -> Result<DwtBands<T>> {
    dwt_axes(x, filter, Axes::for_rank(x.rank()))
}

pub fn dwt_axes<T: Element>(x: &Tensor<T>, filter: &WaveletFilter, axes: Axes) -> Result<DwtBands<T>> {
    check_extents(x.shape(), axes, filter)?;
    let (h, g) = (filter.lowpass(), filter.highpass());
    let data = to_f64(x);
    let shape = x.shape();
    match axes {
        Axes::One => {
            let n = shape[shape.len() - 1];
            let half = even(n) / 2;
            let rows = x.numel() / n;
            let mut a = vec![0.0; rows * half];
            let mut d = vec![0.0; rows * half];
            let mut buf = vec![0.0; even(n)];
            for r in 0..rows {
                pad_line(&data[r * n..(r + 1) * n], &mut buf);
                analyze(&buf, h, g, &mut a[r * half..(r + 1) * half], &mut d[r * half..(r + 1) * half]);
            }
            let mut out_shape = shape.to_vec();
            *out_shape.last_mut().unwrap() = half;
            Ok(DwtBands { approx: from_f64(out_shape.clone(), a), details: vec![from_f64(out_shape, d)] })
        }
        Axes::Two => {
            let (hh, ww) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let (eh, ew) = (even(hh), even(ww));
            let (qh, qw) = (eh / 2, ew / 2);
            let planes = x.numel() / (hh * ww);
            let mut bands = vec![vec![0.0; planes * qh * qw]; 4];
            let mut padded = vec![0.0; eh * ew];
            let mut lo = vec![0.0; eh * qw];
            let mut hi = vec![0.0; eh * qw];
            let mut col = vec![0.0; eh];
            let mut ca = vec![0.0; qh];
            let mut cd = vec![0.0; qh];
            for p in 0..planes {
                pad_plane(&data[p * hh * ww..(p + 1) * hh * ww], hh, ww, &mut padded);
                for r in 0..eh {
                    analyze(
                        &padded[r * ew..(r + 1) * ew],
                        h,
                        g,
                        &mut lo[r * qw..(r + 1) * qw],
                        &mut hi[r * qw..(r + 1) * qw],
                    );
                }
                // columns: lo → (LL, Dh), hi → (Dv, Dd)
                for (src, (low_band, high_band)) in [(&lo, (0, 1)), (&hi, (2, 3))] {
                    for c in 0..qw {
                        for r in 0..eh {
                            col[r] = src[r * qw + c];
                        }
                        analyze(&col, h, g, &mut ca, &mut cd);
                        for r in 0..qh {
                            bands[low_band][p * qh * qw + r * qw + c] = ca[r];
                            bands[high_band][p * qh * qw + r * qw + c] = cd[r];
                        }
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            let rank = out_shape.len();
            out_shape[rank - 2] = qh;
            out_shape[rank - 1] = qw;
            let mut bands = bands.into_iter().map(|b| from_f64(out_shape.clone(), b));
            let approx = bands.next().unwrap();
            Ok(DwtBands { approx, details: bands.collect() })
        }
    }
}

fn pad_line(src: &[f64], dst: &mut [f64]) {
    dst[..src.len()].copy_from_slice(src);
    if dst.len() > src.len() {
        dst[src.len()] = src[src.len() - 1];
    }
}

fn pad_plane(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let ew = even(w);
    for r in 0..even(h) {
        let sr = r.min(h - 1);
        pad_line(&src[sr * w..(sr + 1) * w], &mut dst[r * ew..(r + 1) * ew]);
    }
}

/// Inverse of [`dwt`] producing a tensor of `out_shape` (the pre-transform shape).
pub fn idwt<T: Element>(bands: &DwtBands<T>, filter: &WaveletFilter, out_shape: &[usize]) -> Result<Tensor<T>> {
    let axes = match bands.details.len() {
        1 => Axes::One,
        3 => Axes::Two,
        k => return Err(Error::Shape(format!("{k} detail bands: expected 1 or 3"))),
    };
    for d in &bands.details {
        bands.approx.expect_same_shape(d)?;
    }
    let (h, g) = (filter.lowpass(), filter.highpass());
    let rank = out_shape.len();
    let shape = bands.approx.shape();
    let lead_ok = rank == shape.len() && out_shape[..rank - axes.count()] == shape[..rank - axes.count()];
    let tail_ok = out_shape[rank - axes.count()..]
        .iter()
        .zip(&shape[rank - axes.count()..])
        .all(|(&n, &half)| even(n) / 2 == half);
    if !lead_ok || !tail_ok {
        return Err(Error::Shape(format!("bands of shape {shape:?} cannot rebuild {out_shape:?}")));
    }
    let approx = to_f64(&bands.approx);
    let details: Vec<Vec<f64>> = bands.details.iter().map(to_f64).collect();
    match axes {
        Axes::One => {
            let n = out_shape[rank - 1];
            let half = even(n) / 2;
            let rows = bands.approx.numel() / half;
            let mut out = Vec::with_capacity(rows * n);
            let mut buf = vec![0.0; even(n)];
            for r in 0..rows {
                synthesize(&approx[r * half..(r + 1) * half], &details[0][r * half..(r + 1) * half], h, g, &mut buf);
                out.extend_from_slice(&buf[..n]);
            }
            Ok(from_f64(out_shape.to_vec(), out))
        }
        Axes::Two => {
            let (hh, ww) = (out_shape[rank - 2], out_shape[rank - 1]);
            let (eh, ew) = (even(hh), even(ww));
            let (qh, qw) = (eh / 2, ew / 2);
            let planes = bands.approx.numel() / (qh * qw);
            let mut out = Vec::with_capacity(planes * hh * ww);
            let mut lo = vec![0.0; eh * qw];
            let mut hi = vec![0.0; eh * qw];
            let mut ca = vec![0.0; qh];
            let mut cd = vec![0.0; qh];
            let mut col = vec![0.0; eh];
            let mut row = vec![0.0; ew];
            for p in 0..planes {
                let at = |band: &[f64], r: usize, c: usize| band[p * qh * qw + r * qw + c];
                for (dst, (low_band, high_band)) in
                    [(&mut lo, (&approx, &details[0])), (&mut hi, (&details[1], &details[2]))]
                {
                    for c in 0..qw {
                        for r in 0..qh {
                            ca[r] = at(low_band, r, c);
                            cd[r] = at(high_band, r, c);
                        }
                        synthesize(&ca, &cd, h, g, &mut col);
                        for r in 0..eh {
                            dst[r * qw + c] = col[r];
                        }
                    }
                }
                for r in 0..hh {
                    synthesize(&lo[r * qw..(r + 1) * qw], &hi[r * qw..(r + 1) * qw], h, g, &mut row);
                    out.extend_from_slice(&row[..ww]);
                }
            }
            Ok(from_f64(out_shape.to_vec(), out))
        }
    }
}

/// Deepest legal pyramid for `shape`: every level's input extent must be at
/// least the filter length, and the depth at most `floor(log2(min extent))`.
pub fn max_levels(shape: &[usize], axes: Axes, filter: &WaveletFilter) -> usize {
    let mut extents: Vec<usize> = shape[shape.len().saturating_sub(axes.count())..].to_vec();
    let Some(&min) = extents.iter().min() else { return 0 };
    let cap = (usize::BITS - 1 - min.max(1).leading_zeros()) as usize;
    let mut levels = 0;
    while levels < cap && extents.iter().all(|&n| n >= filter.len()) {
        levels += 1;
        extents.iter_mut().for_each(|n| *n = even(*n) / 2);
    }
    levels
}

/// Recursive decomposition of the approximation band, `levels` deep.
pub fn wavelet_pyramid<T: Element>(x: &Tensor<T>, filter: &WaveletFilter, levels: usize) -> Result<WaveletPyramid<T>> {
    wavelet_pyramid_axes(x, filter, levels, Axes::for_rank(x.rank()))
}

pub fn wavelet_pyramid_axes<T: Element>(
    x: &Tensor<T>,
    filter: &WaveletFilter,
    levels: usize,
    axes: Axes,
) -> Result<WaveletPyramid<T>> {
    let max = max_levels(x.shape(), axes, filter);
    if levels == 0 || levels > max {
        return Err(Error::InvalidArgument(format!(
            "{levels} pyramid levels requested; shape {:?} with `{}` allows 1..={max}",
            x.shape(),
            filter.name()
        )));
    }
    let mut shapes = Vec::with_capacity(levels);
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        shapes.push(current.shape().to_vec());
        let bands = dwt_axes(&current, filter, axes)?;
        current = bands.approx.clone();
        out.push(bands);
    }
    Ok(WaveletPyramid { filter: filter.name().to_string(), axes, shapes, levels: out })
}

/// Free-function form of [`WaveletPyramid::reconstruct`].
pub fn pyramid_reconstruct<T: Element>(p: &WaveletPyramid<T>, filter: &WaveletFilter) -> Result<Tensor<T>> {
    p.reconstruct(filter)
}
