//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Parameters enter the graph through [`Tape::param`]; only
//! those selected as trainable when the tape was created receive gradients.
//! [`Tape::detach`] copies a value into a fresh leaf, severing the gradient
//! path to whatever produced it.
//!
//! Shape errors inside the graph are programming errors and panic, in the
//! same way slice indexing does. Callers validate user-facing inputs first.

use std::borrow::Cow;

use crate::{gemm, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Watched,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ChannelBias(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<T> },
    MatMulT(Var, Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Crop { x: Var, top: usize, left: usize },
    Concat1(Vec<Var>),
    Slice1 { x: Var, start: usize },
    Broadcast2d(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    watched: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable parameter, or `None` when no path reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient of a watched input created with [`Tape::watch`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.watched.iter().find(|(w, _)| *w == v).map(|(_, g)| g)
    }

    /// Iterates over every parameter that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Sum of squares over all parameter gradients.
    pub fn sq_norm(&self) -> f64 {
        self.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.as_f64().powi(2)).sum()
    }
}

pub struct Tape<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'a, T>>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Creates a tape whose trainable parameters are those whose name
    /// satisfies `trainable`.
    pub fn new(store: &'a ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let trainable = store.iter().map(|(_, name, _)| trainable(name)).collect();
        Self { store, trainable, param_vars: vec![None; store.len()], nodes: Vec::with_capacity(256) }
    }

    /// A tape on which no parameter is trainable (inference).
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients flow through `v` to some trainable parameter or
    /// watched input.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn watch(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Watched, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let grad = self.trainable[id.index()];
        self.nodes.push(Node { value: Cow::Borrowed(self.store.get(id)), op: Op::Param(id), grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Copies the value of `v` into a new leaf with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let grad = self.g(a) || self.g(b);
        self.push(t, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let grad = self.g(a);
        self.push(t, Op::Scale(a, s), grad)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v + s);
        let grad = self.g(a);
        self.push(t, Op::AddScalar(a), grad)
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`[N, C, ...]`).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.shape()[1];
        assert_eq!(tb.numel(), c, "channel_bias: bias length");
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let grad = self.g(x) || self.g(b);
        self.push(out, Op::ChannelBias(x, b), grad)
    }

    /// 2-d convolution of `x` (`[N, Ci, H, W]`) with `w` (`[Co, Ci, K, K]`).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, k) = (tw.shape()[0], tw.shape()[2]);
        assert_eq!(tw.shape()[1], ci, "conv2d: input channels");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = ci * k * k;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); n * ckk * plane];
        let mut out = vec![T::zero(); n * co * plane];
        for s in 0..n {
            let xs = &tx.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let cs = &mut cols[s * ckk * plane..(s + 1) * ckk * plane];
            im2col(xs, ci, h, wd, k, stride, pad, ho, wo, cs);
            gemm(
                co,
                ckk,
                plane,
                T::one(),
                tw.data(),
                false,
                cs,
                false,
                T::zero(),
                &mut out[s * co * plane..(s + 1) * co * plane],
            );
        }
        let t = Tensor::new(&[n, co, ho, wo], out).expect("conv shape");
        let grad = self.g(x) || self.g(w);
        if !grad {
            cols = Vec::new();
        }
        self.push(t, Op::Conv2d { x, w, stride, pad, cols }, grad)
    }

    /// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2, "matmul_t: lhs must be 2-d");
        assert_eq!(tb.shape().len(), 2, "matmul_t: rhs must be 2-d");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        assert_eq!(tb.shape()[1], k, "matmul_t: inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), ta.data(), false, tb.data(), true, T::zero(), &mut out);
        let t = Tensor::new(&[m, n], out).expect("matmul shape");
        let grad = self.g(a) || self.g(b);
        self.push(t, Op::MatMulT(a, b), grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let grad = self.g(a);
        self.push(t, op, grad)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably. `-softplus(-l) = ln σ(l)` and
    /// `-softplus(l) = ln(1 - σ(l))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &ta.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
        let grad = self.g(a);
        self.push(t, Op::Upsample2(a), grad)
    }

    /// 2x2 average pooling of `[N, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &ta.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    out[p * oh * ow + y * ow + x] = s * quarter;
                }
            }
        }
        let t = Tensor::new(&[n, c, oh, ow], out).expect("pool shape");
        let grad = self.g(a);
        self.push(t, Op::AvgPool2(a), grad)
    }

    /// Spatial crop `[.., top..top+h, left..left+w]` of `[N, C, H, W]`.
    pub fn crop(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let ta = self.value(a);
        let (n, c, ih, iw) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        assert!(top + h <= ih && left + w <= iw, "crop: window outside input");
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = p * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&ta.data()[row..row + w]);
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).expect("crop shape");
        let grad = self.g(a);
        self.push(t, Op::Crop { x: a, top, left }, grad)
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat1: no inputs");
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat1: batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat1: trailing shape mismatch");
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let t = Tensor::new(&shape, out).expect("concat shape");
        let grad = parts.iter().any(|&p| self.g(p));
        self.push(t, Op::Concat1(parts.to_vec()), grad)
    }

    /// Channels `start..start+len` of `[N, C, ...]`.
    pub fn slice1(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        assert!(start + len <= shape[1], "slice1: range outside axis");
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for s in 0..shape[0] {
            let base = (s * shape[1] + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let t = Tensor::new(&oshape, out).expect("slice shape");
        let grad = self.g(a);
        self.push(t, Op::Slice1 { x: a, start }, grad)
    }

    /// Tiles `[N, D]` to `[N, D, h, w]`.
    pub fn broadcast2d(&mut self, a: Var, h: usize, w: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "broadcast2d: expects [N, D]");
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(n * d * h * w);
        for &v in ta.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let t = Tensor::new(&[n, d, h, w], out).expect("broadcast shape");
        let grad = self.g(a);
        self.push(t, Op::Broadcast2d(a), grad)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape: element count");
        let grad = self.g(a);
        self.push(t, Op::Reshape(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: T = ta.data().iter().copied().sum();
        let t = Tensor::scalar(s / T::lit(ta.numel() as f64));
        let grad = self.g(a);
        self.push(t, Op::Mean(a), grad)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.shape()[1];
        let eps = T::lit(1e-12);
        let mut norms = Vec::with_capacity(ta.shape()[0]);
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let grad = self.g(a);
        self.push(out, Op::L2NormRows { x: a, norms }, grad)
    }

    /// Mean cross-entropy of row-wise softmax of `[N, M]` logits against
    /// integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        let (n, m) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(targets.len(), n, "softmax_cross_entropy: target count");
        let mut probs = vec![T::zero(); n * m];
        let mut loss = T::zero();
        for (i, row) in tl.data().chunks(m).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..m {
                probs[i * m + j] = (row[j] - mx).exp() / z;
            }
            assert!(targets[i] < m, "softmax_cross_entropy: target out of range");
            loss += z.ln() + mx - row[targets[i]];
        }
        let t = Tensor::scalar(loss / T::lit(n as f64));
        let grad = self.g(logits);
        self.push(t, Op::SoftmaxXent { logits, targets: targets.to_vec(), probs }, grad)
    }

    /// Row gather from a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range {v}");
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out).expect("embedding shape");
        let grad = self.g(table);
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, grad)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { params: vec![None; self.store.len()], watched: Vec::new() };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, gy, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(&self, index: usize, gy: Vec<T>, grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let zero = T::zero();
        // Accumulation target for an input, or None when it needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.g(v) {
                    let len = self.value(v).numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![zero; len]))
                } else {
                    None
                }
            }};
        }
        let node = &self.nodes[index];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Watched => {
                let t = Tensor::new(y.shape(), gy).expect("grad shape");
                out.watched.push((Var(index), t));
            }
            Op::Param(id) => {
                out.params[id.index()] = Some(Tensor::new(y.shape(), gy).expect("grad shape"));
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(&gy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(&gy).zip(vb.data()) {
                        *g += d * o;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((g, &d), &o) in gb.iter_mut().zip(&gy).zip(va.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d * *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::ChannelBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
                let c = y.shape()[1];
                let inner: usize = y.shape()[2..].iter().product();
                if let Some(gb) = slot!(*b) {
                    for (i, chunk) in gy.chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (co, k) = (tw.shape()[0], tw.shape()[2]);
                let (ho, wo) = (y.shape()[2], y.shape()[3]);
                let (ckk, plane) = (ci * k * k, ho * wo);
                if let Some(gw) = slot!(*w) {
                    for s in 0..n {
                        gemm(
                            co,
                            plane,
                            ckk,
                            T::one(),
                            &gy[s * co * plane..(s + 1) * co * plane],
                            false,
                            &cols[s * ckk * plane..(s + 1) * ckk * plane],
                            true,
                            T::one(),
                            gw,
                        );
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dcols = vec![zero; ckk * plane];
                    for s in 0..n {
                        gemm(
                            ckk,
                            co,
                            plane,
                            T::one(),
                            tw.data(),
                            true,
                            &gy[s * co * plane..(s + 1) * co * plane],
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        let dxs = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                        col2im(&dcols, ci, h, wd, k, *stride, *pad, ho, wo, dxs);
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if let Some(ga) = slot!(*a) {
                    gemm(m, n, k, T::one(), &gy, false, tb.data(), false, T::one(), ga);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(n, m, k, T::one(), &gy, true, ta.data(), false, T::one(), gb);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &x) in ga.iter_mut().zip(&gy).zip(ta.data()) {
                        *g += if x > zero { d } else { d * *slope };
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(&gy).zip(y.data()) {
                        *g += d * (T::one() - o * o);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(&gy).zip(y.data()) {
                        *g += d * o * (T::one() - o);
                    }
                }
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &x) in ga.iter_mut().zip(&gy).zip(ta.data()) {
                        *g += d * sigmoid(x);
                    }
                }
            }
            Op::Upsample2(a) => {
                let (n, c, h2, w2) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
                let (h, w) = (h2 / 2, w2 / 2);
                if let Some(ga) = slot!(*a) {
                    for p in 0..n * c {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                ga[p * h * w + (yy / 2) * w + xx / 2] += gy[p * h2 * w2 + yy * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(a) => {
                let (n, c, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
                let (h, w) = (2 * oh, 2 * ow);
                let quarter = T::lit(0.25);
                if let Some(ga) = slot!(*a) {
                    for p in 0..n * c {
                        for yy in 0..h {
                            for xx in 0..w {
                                ga[p * h * w + yy * w + xx] += gy[p * oh * ow + (yy / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                }
            }
            Op::Crop { x, top, left } => {
                let s = self.value(*x).shape();
                let (ih, iw) = (s[2], s[3]);
                let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
                if let Some(gx) = slot!(*x) {
                    for p in 0..n * c {
                        for yy in 0..h {
                            let dst = p * ih * iw + (top + yy) * iw + left;
                            let src = p * h * w + yy * w;
                            for xx in 0..w {
                                gx[dst + xx] += gy[src + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat1(parts) => {
                let n = y.shape()[0];
                let inner: usize = y.shape()[2..].iter().product();
                let total_c = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if let Some(gp) = slot!(p) {
                        for s in 0..n {
                            let src = (s * total_c + offset) * inner;
                            let dst = s * c * inner;
                            for j in 0..c * inner {
                                gp[dst + j] += gy[src + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice1 { x, start } => {
                let c = self.value(*x).shape()[1];
                let (n, len) = (y.shape()[0], y.shape()[1]);
                let inner: usize = y.shape()[2..].iter().product();
                if let Some(gx) = slot!(*x) {
                    for s in 0..n {
                        let dst = (s * c + start) * inner;
                        let src = s * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gy[src + j];
                        }
                    }
                }
            }
            Op::Broadcast2d(a) => {
                let hw = y.shape()[2] * y.shape()[3];
                if let Some(ga) = slot!(*a) {
                    for (g, chunk) in ga.iter_mut().zip(gy.chunks(hw)) {
                        *g += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).numel() as f64);
                if let Some(ga) = slot!(*a) {
                    let d = gy[0] / n;
                    ga.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::L2NormRows { x, norms } => {
                let d = y.shape()[1];
                if let Some(gx) = slot!(*x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let m = self.value(*logits).shape()[1];
                let scale = gy[0] / T::lit(targets.len() as f64);
                if let Some(gl) = slot!(*logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == t { T::one() } else { zero };
                            gl[i * m + j] += (probs[i * m + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = y.shape()[1];
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gy[r * d + j];
                        }
                    }
                }
            }
        }
    }
}
