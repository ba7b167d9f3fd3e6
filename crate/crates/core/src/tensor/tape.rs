use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Mish(Var),
    Tanh(Var),
    Softplus(Var),
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Downsample {
        input: Var,
        factor: usize,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Only nodes that depend on a trainable leaf are differentiated; constant
/// inputs (images, cached features) cost nothing in [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    /// A trainable input whose gradient [`Tape::backward`] reports.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Registers a shared tensor without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, value: Arc<Tensor<T>>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(Arc::new(value), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, Op::Scale(a, factor), &[a])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geometry)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.record(out, Op::Conv2d { input, weight, bias, geometry }, &deps))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geometry)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.record(out, Op::ConvTranspose2d { input, weight, bias, geometry }, &deps))
    }

    /// `x · Wᵀ + b` for `x: [N,Din]`, `W: [Dout,Din]`, `b: [Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, din) = self.value(input).dims2(OP)?;
        let (dout, wdin) = self.value(weight).dims2(OP)?;
        if wdin != din {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "input features",
                expected: wdin,
                actual: din,
            });
        }
        let mut out = vec![T::zero(); n * dout];
        let mut beta = T::zero();
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "bias length",
                    expected: dout,
                    actual: bv.len(),
                });
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        T::gemm(n, din, dout, self.value(input).data(), false, self.value(weight).data(), true, beta, &mut out);
        let out = Tensor::new([n, dout], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.record(out, Op::Linear { input, weight, bias }, &deps))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::mish);
        self.record(out, Op::Mish(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.record(out, Op::Tanh(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::softplus);
        self.record(out, Op::Softplus(x), &[x])
    }

    /// Per-channel `x · scale + shift` on `[N,C,H,W]`, with `scale` and
    /// `shift` shaped `[N,C]` or `[1,C]` (broadcast over the batch).
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        const OP: &str = "channel_affine";
        let x = self.value(input);
        let (n, c, h, w) = x.dims4(OP)?;
        let s = self.value(scale);
        let b = self.value(shift);
        for (t, _name) in [(s, "scale"), (b, "shift")] {
            let (sn, sc) = t.dims2(OP)?;
            if sc != c {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "channels",
                    expected: c,
                    actual: sc,
                });
            }
            if sn != n && sn != 1 {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "batch",
                    expected: n,
                    actual: sn,
                });
            }
        }
        let plane = h * w;
        let row = |t: &Tensor<T>, i: usize| if t.shape()[0] == 1 { 0 } else { i * c };
        let mut out = x.data().to_vec();
        for i in 0..n {
            let (so, bo) = (row(s, i), row(b, i));
            for ch in 0..c {
                let (sv, bv) = (s.data()[so + ch], b.data()[bo + ch]);
                let start = (i * c + ch) * plane;
                out[start..start + plane].iter_mut().for_each(|v| *v = *v * sv + bv);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(out, Op::ChannelAffine { input, scale, shift }, &[input, scale, shift]))
    }

    /// Concatenates along axis 1 (channels / features).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *parts.first().ok_or_else(|| Error::shape(OP, "no inputs"))?;
        let shape0 = self.value(first).shape().to_vec();
        if shape0.len() < 2 {
            return Err(Error::shape(OP, "inputs need at least two axes"));
        }
        let n = shape0[0];
        let inner: usize = shape0[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != shape0.len() || s[0] != n || s[2..] != shape0[2..] {
                return Err(Error::shape(OP, format!("shape {s:?} incompatible with {shape0:?} outside axis 1")));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let stride = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[i * stride..(i + 1) * stride]);
            }
        }
        let mut shape = shape0;
        shape[1] = channels;
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Takes `len` entries of axis 1 starting at `start`.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice";
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape(OP, format!("range {start}..{} outside axis 1 of {shape:?}", start + len)));
        }
        let inner: usize = shape[2..].iter().product();
        let stride = shape[1] * inner;
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for i in 0..shape[0] {
            let base = i * stride + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[1] = len;
        let out = Tensor::new(new_shape, out)?;
        Ok(self.record(out, Op::Slice { input, start }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(input), &[input]))
    }

    /// Nearest-neighbour downsampling: keeps every `factor`-th row and column.
    pub fn downsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "downsample";
        let x = self.value(input);
        let (n, c, h, w) = x.dims4(OP)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(OP, format!("factor {factor} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(plane[y * factor * w + xx * factor]);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.record(out, Op::Downsample { input, factor }, &[input]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.record(out, Op::Mean(x), &[x])
    }

    /// Mean absolute difference. The subgradient at a zero residual is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.expect_same_shape(t, "l1_loss")?;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap_or(f64::NAN))
            .sum();
        let out = Tensor::scalar(T::lit(total / p.len() as f64));
        Ok(self.record(out, Op::L1 { pred, target }, &[pred, target]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[index].take() else { continue };
            let leaf = matches!(node.op, Op::Leaf);
            self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            if leaf {
                grads[index] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, delta: Tensor<T>) {
        if !self.nodes[var.0].tracked {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(delta.data()).for_each(|(e, &d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, a, g.map(|v| v * factor)),
            Op::Conv2d { input, weight, bias, geometry } => {
                let (gi, gw, gb) = kernels::conv2d_backward(self.value(input), self.value(weight), geometry, g, self.requires_grad(input))?;
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi);
                }
                self.accumulate(grads, weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geometry } => {
                let (gi, gw, gb) =
                    kernels::conv_transpose2d_backward(self.value(input), self.value(weight), geometry, g, self.requires_grad(input))?;
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi);
                }
                self.accumulate(grads, weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (n, din) = x.dims2("linear")?;
                let dout = w.shape()[0];
                if self.requires_grad(input) {
                    let mut gx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, g.data(), false, w.data(), false, T::zero(), &mut gx);
                    self.accumulate(grads, input, Tensor::new([n, din], gx)?);
                }
                if self.requires_grad(weight) {
                    let mut gw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, g.data(), true, x.data(), false, T::zero(), &mut gw);
                    self.accumulate(grads, weight, Tensor::new([dout, din], gw)?);
                }
                if let Some(b) = bias {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    self.accumulate(grads, b, Tensor::new([dout], gb)?);
                }
            }
            Op::Mish(x) => {
                let d = self.value(x).zip_map(g, "mish", |v, up| kernels::mish_grad(v) * up)?;
                self.accumulate(grads, x, d);
            }
            Op::Tanh(x) => {
                let d = out.zip_map(g, "tanh", |y, up| (T::one() - y * y) * up)?;
                self.accumulate(grads, x, d);
            }
            Op::Softplus(x) => {
                let d = self.value(x).zip_map(g, "softplus", |v, up| kernels::sigmoid(v) * up)?;
                self.accumulate(grads, x, d);
            }
            Op::ChannelAffine { input, scale, shift } => self.channel_affine_backward(input, scale, shift, g, grads)?,
            Op::Concat(ref parts) => {
                let shape = g.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let width = ps[1] * inner;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * width);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + width]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { input, start } => {
                let shape = self.value(input).shape().to_vec();
                let inner: usize = shape[2..].iter().product();
                let stride = shape[1] * inner;
                let width = g.shape()[1] * inner;
                let mut d = vec![T::zero(); self.value(input).len()];
                for i in 0..shape[0] {
                    let base = i * stride + start * inner;
                    d[base..base + width].copy_from_slice(&g.data()[i * width..(i + 1) * width]);
                }
                self.accumulate(grads, input, Tensor::new(shape, d)?);
            }
            Op::Reshape(x) => {
                let d = g.reshape(self.value(x).shape().to_vec())?;
                self.accumulate(grads, x, d);
            }
            Op::Downsample { input, factor } => {
                let (n, c, h, w) = self.value(input).dims4("downsample")?;
                let (oh, ow) = (h / factor, w / factor);
                let mut d = vec![T::zero(); n * c * h * w];
                for (plane, up) in d.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for y in 0..oh {
                        for x in 0..ow {
                            plane[y * factor * w + x * factor] = up[y * ow + x];
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new([n, c, h, w], d)?);
            }
            Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let v = self.value(x);
                let each = g.data()[0] / T::lit(v.len() as f64);
                self.accumulate(grads, x, Tensor::full(v.shape().to_vec(), each));
            }
            Op::L1 { pred, target } => {
                let p = self.value(pred);
                let t = self.value(target);
                let each = g.data()[0] / T::lit(p.len() as f64);
                let sign = p.zip_map(t, "l1_loss", |a, b| {
                    if a > b {
                        each
                    } else if a < b {
                        -each
                    } else {
                        T::zero()
                    }
                })?;
                if self.requires_grad(target) {
                    self.accumulate(grads, target, sign.map(|v| -v));
                }
                self.accumulate(grads, pred, sign);
            }
        }
        Ok(())
    }

    fn channel_affine_backward(&self, input: Var, scale: Var, shift: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let x = self.value(input);
        let s = self.value(scale);
        let (n, c, h, w) = x.dims4("channel_affine")?;
        let plane = h * w;
        let s_rows = s.shape()[0];
        let b_rows = self.value(shift).shape()[0];
        let srow = |i: usize| if s_rows == 1 { 0 } else { i * c };

        if self.requires_grad(input) {
            let mut gx = g.data().to_vec();
            for i in 0..n {
                for ch in 0..c {
                    let sv = s.data()[srow(i) + ch];
                    let start = (i * c + ch) * plane;
                    gx[start..start + plane].iter_mut().for_each(|v| *v *= sv);
                }
            }
            self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), gx)?);
        }
        let mut gs = vec![T::zero(); s_rows * c];
        let mut gb = vec![T::zero(); b_rows * c];
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                let up = &g.data()[start..start + plane];
                let xs = &x.data()[start..start + plane];
                let mut ds = T::zero();
                let mut db = T::zero();
                for (&u, &xv) in up.iter().zip(xs) {
                    ds += u * xv;
                    db += u;
                }
                gs[if s_rows == 1 { ch } else { i * c + ch }] += ds;
                gb[if b_rows == 1 { ch } else { i * c + ch }] += db;
            }
        }
        self.accumulate(grads, scale, Tensor::new([s_rows, c], gs)?);
        self.accumulate(grads, shift, Tensor::new([b_rows, c], gb)?);
        Ok(())
    }
}
