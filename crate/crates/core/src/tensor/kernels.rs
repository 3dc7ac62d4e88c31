//! Raw buffer kernels shared by the graph ops. No shape validation here;
//! callers in `graph.rs` check everything first.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[n,o] = Σ_c K[o,c] ⋆ x[n,c]` (no kernel flip).
pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); patch * p] };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let src: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let yn = &mut out[n * g.o * p..(n + 1) * g.o * p];
        T::gemm(g.o, patch, p, k, (patch as isize, 1), src, (p as isize, 1), T::zero(), yn, (p as isize, 1));
    }
    out
}

/// Returns `(dx, dk)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_h() * g.out_w();
    let patch = g.patch();
    let in_len = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_len]);
    let mut dk = want_dk.then(|| vec![T::zero(); g.o * patch]);
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { patch * p }];
    let mut dcols = vec![T::zero(); if want_dx && !g.pointwise() { patch * p } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.o * p..(n + 1) * g.o * p];
        if let Some(dk) = dk.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let src: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dK += dY · colsᵀ
            T::gemm(g.o, p, patch, dyn_, (p as isize, 1), src, (1, p as isize), T::one(), dk, (patch as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.pointwise() {
                T::gemm(patch, g.o, p, k, (1, patch as isize), dyn_, (p as isize, 1), T::zero(), dxn, (p as isize, 1));
            } else {
                T::gemm(patch, g.o, p, k, (1, patch as isize), dyn_, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                col2im_add(g, &dcols, dxn);
            }
        }
    }
    (dx, dk)
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Output `y` with `y.shape[i] = x.shape[axes[i]]`.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 || x.is_empty() {
        return (out_shape, x.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis unrolled as a strided run
        let step = gather[last];
        for i in 0..out_shape[last] {
            out.push(x[offset + i * step]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += gather[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= gather[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                y[base + j * inner] = y[base + j * inner] / total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[base + j * inner] * dy[base + j * inner];
            }
            for j in 0..len {
                let at = base + j * inner;
                dx[at] = y[at] * (dy[at] - dot);
            }
        }
    }
    dx
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward<T: Element>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = src[i * ow + j];
                plane[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += g * (T::one() - fy) * fx;
                plane[y1 * w + x0] += g * fy * (T::one() - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
