use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{is_checked, Element, Tensor};
use crate::error::{Error, Result};

type NodeId = usize;
type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    parents: Vec<Option<NodeId>>,
    /// Recorded for leaves only.
    leaf_shape: Vec<usize>,
    /// `None` marks a leaf whose gradient is reported to the caller.
    backward: Option<BackwardFn<T>>,
}

/// A value flowing through a [`Graph`], optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Var<T: Element = f32> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Gradients of requires-grad leaves, keyed by the leaf's [`Var`].
#[derive(Debug, Default)]
pub struct Gradients<T: Element = f32> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        leaf.node.and_then(|id| self.grads.get(&id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation recorder. A recording graph keeps one node per executed
/// differentiable op; an inference graph evaluates ops and keeps nothing.
pub struct Graph<T: Element = f32> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn same_shape<T: Element>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { recording: true, nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn inference() -> Self {
        Self { recording: false, nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<Option<NodeId>>, leaf_shape: Vec<usize>, backward: Option<BackwardFn<T>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, leaf_shape, backward });
        nodes.len() - 1
    }

    /// Wraps a tensor that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { value: t, node: None }
    }

    /// Wraps a trainable leaf. Records a leaf node when recording.
    pub fn param(&self, t: Tensor<T>) -> Var<T> {
        let node = self.recording.then(|| self.push(Vec::new(), t.shape().to_vec(), None));
        Var { value: t, node }
    }

    /// Leaf if `t.requires_grad()`, constant otherwise.
    pub fn input(&self, t: Tensor<T>) -> Var<T> {
        if t.requires_grad() {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<T> {
        let ids: Vec<Option<NodeId>> = parents.iter().map(|p| p.node).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return Var { value, node: None };
        }
        let node = self.push(ids, Vec::new(), Some(Box::new(backward)));
        Var { value, node: Some(node) }
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Consumes the tape: a second
    /// call fails with [`Error::TapeConsumed`].
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !loss.value.is_scalar() {
            return Err(shape_err(format!("backward needs a scalar loss, got {:?}", loss.shape())));
        }
        let root = loss.node.ok_or(Error::EmptyTape)?;
        self.consumed.set(true);
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        nodes.truncate(root + 1);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            let Some(backward) = node.backward else {
                out.grads.insert(id, Tensor::from_parts(node.leaf_shape, g));
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                match grads[*p].as_mut() {
                    Some(acc) => acc.iter_mut().zip(pg).for_each(|(a, b)| *a += b),
                    None => grads[*p] = Some(pg),
                }
            }
        }
        Ok(out)
    }

    /// Like [`backward`](Self::backward) but reshapes each leaf gradient to its
    /// leaf's shape for the requested leaves.
    pub fn grads_for(&self, loss: &Var<T>, leaves: &[&Var<T>]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward(loss)?;
        Ok(leaves
            .iter()
            .map(|leaf| match grads.get(leaf) {
                Some(g) => Tensor::from_parts(leaf.shape().to_vec(), g.to_vec()),
                None => Tensor::zeros(leaf.shape().to_vec()),
            })
            .collect())
    }

    // ------------------------------------------------------------- elementwise

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let y = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.record(y, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let y = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.record(y, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let y = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(y, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect()),
            ]
        }))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("div", a, b)?;
        if is_checked() && b.data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        let y = a.value.zip_map(&b.value, |x, y| x / y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(y, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bv.data()).map(|(&g, &b)| g / b).collect()),
                needs[1].then(|| {
                    g.iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                }),
            ]
        }))
    }

    pub fn add_scalar(&self, a: &Var<T>, s: T) -> Var<T> {
        let y = a.value.map(|x| x + s);
        self.record(y, &[a], |g, _| vec![Some(g.to_vec())])
    }

    pub fn mul_scalar(&self, a: &Var<T>, s: T) -> Var<T> {
        let y = a.value.map(|x| x * s);
        self.record(y, &[a], move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())])
    }

    pub fn div_scalar(&self, a: &Var<T>, s: T) -> Result<Var<T>> {
        if is_checked() && s.is_zero() {
            return Err(Error::DivisionByZero);
        }
        Ok(self.mul_scalar(a, T::one() / s))
    }

    pub fn sqrt(&self, a: &Var<T>) -> Result<Var<T>> {
        if is_checked() && a.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("sqrt of a negative element".into()));
        }
        let y = a.value.map(|x| x.sqrt());
        let yv = y.clone();
        Ok(self.record(y, &[a], move |g, _| {
            let half = T::lit(0.5);
            vec![Some(g.iter().zip(yv.data()).map(|(&g, &y)| g * half / y).collect())]
        }))
    }

    pub fn square(&self, a: &Var<T>) -> Var<T> {
        let y = a.value.map(|x| x * x);
        let av = a.value.clone();
        self.record(y, &[a], move |g, _| {
            let two = T::lit(2.0);
            vec![Some(g.iter().zip(av.data()).map(|(&g, &a)| two * g * a).collect())]
        })
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&self, a: &Var<T>) -> Var<T> {
        let y = a.value.map(|x| x / (T::one() + (-x).exp()));
        let av = a.value.clone();
        self.record(y, &[a], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(av.data())
                    .map(|(&g, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect(),
            )]
        })
    }

    pub fn leaky_relu(&self, a: &Var<T>, slope: T) -> Var<T> {
        let y = a.value.map(|x| if x > T::zero() { x } else { x * slope });
        let av = a.value.clone();
        self.record(y, &[a], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(av.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                    .collect(),
            )]
        })
    }

    // -------------------------------------------------------------- reductions

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let total = a.data().iter().copied().sum::<T>();
        let n = a.value.numel();
        self.record(Tensor::scalar(total), &[a], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = a.value.numel();
        let s = self.sum(a);
        self.mul_scalar(&s, T::one() / T::from_usize(n).unwrap())
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let d = self.sub(a, b)?;
        let sq = self.square(&d);
        Ok(self.mean(&sq))
    }

    /// Sum over the trailing axes, keeping the leading `keep` axes.
    pub fn sum_trailing(&self, a: &Var<T>, keep: usize) -> Result<Var<T>> {
        if keep == 0 || keep > a.value.rank() {
            return Err(shape_err(format!("sum_trailing keep={keep} for {:?}", a.shape())));
        }
        let outer: usize = a.shape()[..keep].iter().product();
        let inner = a.value.numel() / outer;
        let y: Vec<T> = a.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let y = Tensor::from_parts(a.shape()[..keep].to_vec(), y);
        Ok(self.record(y, &[a], move |g, _| {
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect())]
        }))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self, a: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = nchw(a.shape(), "global_avg_pool")?;
        let s = self.sum_trailing(a, 2)?;
        debug_assert_eq!(s.shape(), &[n, c]);
        Ok(self.mul_scalar(&s, T::one() / T::from_usize(h * w).unwrap()))
    }

    // ----------------------------------------------------------------- shaping

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let y = a.value.reshape(shape.to_vec())?.with_requires_grad(false);
        Ok(self.record(y, &[a], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(&self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let rank = a.value.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let (shape, data) = kernels::permute(a.data(), a.shape(), axes);
        let inv = kernels::inverse_axes(axes);
        let out_shape = shape.clone();
        Ok(self.record(Tensor::from_parts(shape, data), &[a], move |g, _| {
            vec![Some(kernels::permute(g, &out_shape, &inv).1)]
        }))
    }

    /// 2-D transpose.
    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.value.rank() != 2 {
            return Err(shape_err(format!("transpose needs rank 2, got {:?}", a.shape())));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let rank = first.value.rank();
        if axis >= rank {
            return Err(shape_err(format!("concat axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.value.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(format!("concat: {:?} vs {:?} on axis {axis}", p.shape(), first.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner;
        let refs: Vec<&Var<T>> = parts.to_vec();
        Ok(self.record(Tensor::from_parts(shape, data), &refs, move |g, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut out = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * total + start..o * total + start + w]);
                        }
                        out
                    })
                })
                .collect()
        }))
    }

    // ------------------------------------------------------------ broadcasting

    /// Adds `b[C]` along axis 1 of `a[N, C, ...]`.
    pub fn add_channel_bias(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape();
        if shape.len() < 2 || b.shape() != [shape[1]] {
            return Err(shape_err(format!("channel bias {:?} for {:?}", b.shape(), shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = a.value.numel() / (n * c);
        let bias = b.data();
        let mut y = a.value.to_vec();
        for (i, chunk) in y.chunks_mut(inner).enumerate() {
            let v = bias[i % c];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        let shape = shape.to_vec();
        Ok(self.record(Tensor::from_parts(shape, y), &[a, b], move |g, needs| {
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                db
            });
            vec![needs[0].then(|| g.to_vec()), db]
        }))
    }

    /// Adds a per-sample, per-channel `b[N, C]` to `a[N, C, ...]`.
    pub fn add_sample_bias(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape();
        if shape.len() < 2 || b.shape() != &shape[..2] {
            return Err(shape_err(format!("sample bias {:?} for {:?}", b.shape(), shape)));
        }
        let nc = shape[0] * shape[1];
        let inner = a.value.numel() / nc;
        let bias = b.data();
        let mut y = a.value.to_vec();
        for (i, chunk) in y.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|x| *x += bias[i]);
        }
        Ok(self.record(Tensor::from_parts(shape.to_vec(), y), &[a, b], move |g, needs| {
            let db = needs[1].then(|| g.chunks(inner).map(|c| c.iter().copied().sum::<T>()).collect());
            vec![needs[0].then(|| g.to_vec()), db]
        }))
    }

    // ---------------------------------------------------------------- products

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.value.rank() != 2 || b.value.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err(format!("matmul: {:?} · {:?}", a.shape(), b.shape())));
        }
        let a3 = self.reshape(a, &[1, a.shape()[0], a.shape()[1]])?;
        let b3 = self.reshape(b, &[1, b.shape()[0], b.shape()[1]])?;
        let y = self.bmm(&a3, &b3, false)?;
        let (m, n) = (a.shape()[0], b.shape()[1]);
        self.reshape(&y, &[m, n])
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `transpose_b`.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("bmm: {sa:?} · {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err(format!("bmm inner dims: {sa:?} · {sb:?} (transpose_b={transpose_b})")));
        }
        // b as a [k, n] view
        let b_strides: (isize, isize) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut y = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(Tensor::from_parts(vec![batch, m, n], y), &[a, b], move |g, needs| {
            let da = needs[0].then(|| {
                // dA = G · Bᵀ  with B viewed as [k, n]
                let bt: (isize, isize) = (b_strides.1, b_strides.0);
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        bt,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                // dB[k, n] = Aᵀ · G, written back in B's storage layout
                let out_strides: (isize, isize) = b_strides;
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                        out_strides,
                    );
                }
                db
            });
            vec![da, db]
        }))
    }

    // ------------------------------------------------------------ convolutions

    /// Cross-correlation of `input[N, C, H, W]` with `kernel[O, C, kh, kw]`.
    pub fn conv2d(&self, input: &Var<T>, kernel: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        self.conv2d_padded(input, kernel, stride, (padding, padding))
    }

    /// [`conv2d`](Self::conv2d) with separate vertical/horizontal padding.
    pub fn conv2d_padded(
        &self,
        input: &Var<T>,
        kernel: &Var<T>,
        stride: usize,
        (ph, pw): (usize, usize),
    ) -> Result<Var<T>> {
        let [n, c, h, w] = nchw(input.shape(), "conv2d input")?;
        let [o, kc, kh, kw] = nchw(kernel.shape(), "conv2d kernel")?;
        if kc != c {
            return Err(shape_err(format!("conv2d: input has {c} channels, kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let geom = ConvGeom { n, c, h, w, o, kh, kw, stride, ph, pw };
        let y = kernels::conv2d_forward(&geom, input.data(), kernel.data());
        let shape = vec![n, o, geom.out_h(), geom.out_w()];
        let (xv, kv) = (input.value.clone(), kernel.value.clone());
        Ok(self.record(Tensor::from_parts(shape, y), &[input, kernel], move |g, needs| {
            let (dx, dk) = kernels::conv2d_backward(&geom, xv.data(), kv.data(), g, needs[0], needs[1]);
            vec![dx, dk]
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self, a: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = nchw(a.shape(), "upsample2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = Vec::with_capacity(n * c * oh * ow);
        for plane in a.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
                for ox in 0..ow {
                    y.push(row[ox / 2]);
                }
            }
        }
        Ok(self.record(Tensor::from_parts(vec![n, c, oh, ow], y), &[a], move |g, _| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for (p, plane) in g.chunks(oh * ow).enumerate() {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / 2) * w + ox / 2] += plane[oy * ow + ox];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Bilinear resampling of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn resize_bilinear(&self, a: &Var<T>, oh: usize, ow: usize) -> Result<Var<T>> {
        let [n, c, h, w] = nchw(a.shape(), "resize_bilinear")?;
        if oh == 0 || ow == 0 {
            return Err(shape_err("resize to an empty grid".into()));
        }
        if (h, w) == (oh, ow) {
            return Ok(a.clone());
        }
        let y = kernels::resize_bilinear(a.data(), n * c, (h, w), (oh, ow));
        Ok(self.record(Tensor::from_parts(vec![n, c, oh, ow], y), &[a], move |g, _| {
            vec![Some(kernels::resize_bilinear_backward(g, n * c, (h, w), (oh, ow)))]
        }))
    }

    // ----------------------------------------------------------------- softmax

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis >= a.value.rank() {
            return Err(shape_err(format!("softmax axis {axis} for shape {:?}", a.shape())));
        }
        let shape = a.shape().to_vec();
        let y = Tensor::from_parts(shape.clone(), kernels::softmax(a.data(), &shape, axis));
        let yv = y.clone();
        Ok(self.record(y, &[a], move |g, _| {
            vec![Some(kernels::softmax_backward(yv.data(), g, &shape, axis))]
        }))
    }
}

pub(crate) fn nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| shape_err(format!("{what}: expected [N, C, H, W], got {shape:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_sub_mul_div_sqrt() {
        let g = Graph::<f64>::inference();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(g.add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.sub(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        let c = g.constant(t(&[2], &[2.0, 3.0]));
        assert_eq!(g.mul_scalar(&c, 0.0).data(), &[0.0, 0.0]);
        assert_eq!(g.sqrt(&g.constant(t(&[2], &[4.0, 9.0]))).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(g.square(&c).data(), &[4.0, 9.0]);
        assert_eq!(g.div(&b, &c).unwrap().data(), &[1.5, 4.0 / 3.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_and_zero_division() {
        let g = Graph::<f64>::inference();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(&a, &b), Err(Error::Shape(_))));
        let z = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.div(&a, &z), Err(Error::DivisionByZero)));
        assert!(matches!(g.div_scalar(&a, 0.0), Err(Error::DivisionByZero)));
    }

    #[test]
    fn backward_simple_rules() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let loss = g.sum(&g.square(&x));
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);

        let g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[2.0]));
        let b = g.param(t(&[1], &[5.0]));
        let loss = g.sum(&g.mul(&a, &b).unwrap());
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_fails() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let loss = g.sum(&g.square(&x));
        g.backward(&loss).unwrap();
        assert!(matches!(g.backward(&loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(&g.square(&x)), Err(Error::Shape(_))));
        let g = Graph::<f64>::new();
        let c = g.constant(t(&[1], &[1.0]));
        assert!(matches!(g.backward(&c), Err(Error::EmptyTape)));
    }

    #[test]
    fn inference_records_nothing() {
        let g = Graph::<f64>::inference();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.sum(&g.square(&x));
        assert!(!y.is_tracked());
        assert!(g.is_empty());
    }

    #[test]
    fn reused_leaf_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = g.add(&x, &x).unwrap();
        let z = g.mul(&y, &x).unwrap(); // 2x²
        let grads = g.backward(&g.sum(&z)).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[4.0, -8.0]);
    }

    #[test]
    fn matmul_small_cases() {
        let g = Graph::<f64>::inference();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.matmul(&eye, &m).unwrap().data(), m.data());
        assert_eq!(g.matmul(&m, &eye).unwrap().data(), m.data());
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(g.matmul(&r, &c).unwrap().data(), &[11.0]);
        assert!(g.matmul(&r, &r).is_err());
    }

    #[test]
    fn conv2d_trivial_kernels() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(g.conv2d(&x, &one, 1, 0).unwrap().data(), x.data());
        let ones = g.constant(Tensor::ones([1, 1, 3, 3]));
        let k = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
        let big = g.constant(Tensor::ones([1, 1, 5, 5]));
        assert!(g.conv2d(&ones, &big, 1, 0).is_err());
        assert!(g.conv2d(&ones, &big, 1, 1).is_ok());
    }

    #[test]
    fn conv2d_output_extent_formula() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::ones([2, 3, 7, 6]));
        let k = g.constant(Tensor::ones([4, 3, 3, 2]));
        let y = g.conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, (7 + 2 - 3) / 2 + 1, (6 + 2 - 2) / 2 + 1]);
    }

    #[test]
    fn softmax_basics() {
        let g = Graph::<f64>::inference();
        let z = g.softmax(&g.constant(Tensor::zeros([4])), 0).unwrap();
        assert_eq!(z.data(), &[0.25; 4]);
        let s = g.softmax(&g.constant(t(&[2], &[100.0, 0.0])), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-20 && s.data()[1] < 1e-20);
        assert!(g.softmax(&g.constant(Tensor::zeros([4])), 1).is_err());
    }

    #[test]
    fn concat_and_bias() {
        let g = Graph::<f64>::inference();
        let a = g.constant(Tensor::from_fn([2, 1, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]);
        let bias = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let d = g.add_channel_bias(&c, &bias).unwrap();
        assert_eq!(d.data()[..6], [1.0, 2.0, 12.0, 13.0, 15.0, 16.0]);
    }
}
