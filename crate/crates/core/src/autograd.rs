//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: the value is computed when
//! the op is added, and [`Graph::backward`] walks the tape in reverse. Ops
//! are coarse (a whole convolution or a whole LSTM sweep is one node), which
//! keeps the tape short enough for utterance-level training on a CPU.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::stats::exact_sum;
use crate::tensor::{strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Pointwise functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Elu,
    Sin,
    Cos,
    Square,
    Scale(f64),
    Offset(f64),
    /// Clamp to `[lo, hi]`; the derivative is zero outside.
    Clamp(f64, f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => libm::tanh(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    libm::expm1(x)
                }
            }
            Unary::Sin => libm::sin(x),
            Unary::Cos => libm::cos(x),
            Unary::Square => x * x,
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sin => libm::cos(x),
            Unary::Cos => -libm::sin(x),
            Unary::Square => 2.0 * x,
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Zero padding `[top, bottom, left, right]` for a 2-D convolution.
pub type Padding2d = [usize; 4];

/// "Same" padding for a kernel of `kh x kw`; even kernels pad one more
/// sample after than before.
pub fn same_padding(kh: usize, kw: usize) -> Padding2d {
    let (t, l) = ((kh - 1) / 2, (kw - 1) / 2);
    [t, kh - 1 - t, l, kw - 1 - l]
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: Padding2d },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, fh: usize, fw: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Lstm(LstmTape),
    BlockStats { x: Var, mean: Vec<f64>, std: Vec<f64>, argmin: Vec<usize>, argmax: Vec<usize> },
    ComplexAbs(Var, Var),
    WeightedSum { x: Var, weights: Tensor },
    Sum(Var),
}

struct LstmTape {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    reverse: bool,
    /// Activated gates `[i, f, g, o]`, shape `(N, T, 4H)`.
    gates: Vec<f64>,
    /// Cell states, shape `(N, T, H)`.
    cells: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{}: {:?} vs {:?}", what, a.shape(), b.shape());
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        self.push(out, Op::Unary(x, f), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Offset(c))
    }

    /// 2-D cross-correlation. `x` is `(N, C, H, W)`, `w` is `(O, C, KH, KW)`,
    /// `b` is `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding2d) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            bail!(Shape, "conv2d input {:?} with kernel {:?}", xs, ws);
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + pad[0] + pad[1] < kh || wd + pad[2] + pad[3] < kw {
            bail!(Shape, "conv2d kernel {}x{} larger than padded input {}x{}", kh, kw, h, wd);
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                bail!(Shape, "conv2d bias {:?} for {} outputs", self.shape(b), o);
            }
        }
        let oh = h + pad[0] + pad[1] - kh + 1;
        let ow = wd + pad[2] + pad[3] - kw + 1;
        let geo = ConvGeometry { h, w: wd, kh, kw, oh, ow, pad };
        let plane = oh * ow;
        let mut out = vec![0.0; n * o * plane];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bd[i % o]);
            }
        }
        // One shifted input plane per (channel, tap), reused by every output
        // channel, keeps the inner loops long and contiguous.
        let mut shifted = vec![0.0; plane];
        for ni in 0..n {
            for ci in 0..c {
                let xplane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        if !geo.shift(xplane, ki, kj, &mut shifted) {
                            continue;
                        }
                        for oi in 0..o {
                            let wv = wdat[((oi * c + ci) * kh + ki) * kw + kj];
                            let obase = (ni * o + oi) * plane;
                            axpy(wv, &shifted, &mut out[obase..obase + plane]);
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, &inputs))
    }

    /// Non-overlapping max pooling over the last two axes of an
    /// `(N, C, H, W)` tensor. Trailing rows/columns that do not fill a
    /// window are dropped.
    pub fn max_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || kh == 0 || kw == 0 || xs[2] < kh || xs[3] < kw {
            bail!(Shape, "max_pool2d {}x{} on {:?}", kh, kw, xs);
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / kh, w / kw);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + r * kh * w + col * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = base + (r * kh + i) * w + col * kw + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(xd[best]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Nearest-neighbour upsampling of the last two axes of `(N, C, H, W)`.
    pub fn upsample(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || fh == 0 || fw == 0 {
            bail!(Shape, "upsample {}x{} on {:?}", fh, fw, xs);
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * fh, w * fw);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for r in 0..oh {
                for col in 0..ow {
                    out.push(xd[plane * h * w + (r / fh) * w + col / fw]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample { x, fh, fw }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            bail!(InvalidInput, "concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Shape, "concat axis {} for rank {}", axis, base.len());
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                bail!(Shape, "concat along {}: {:?} vs {:?}", axis, s, base);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || core::mem::replace(&mut seen[a], true)) {
            bail!(Shape, "permute {:?} of {:?}", axes, xs);
        }
        let out = permute_data(self.value(x).data(), &xs, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            bail!(Shape, "slice {}..{} of axis {} in {:?}", start, start + len, axis, xs);
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Zero padding of `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            bail!(Shape, "pad axis {} of {:?}", axis, xs);
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let len = xs[axis] + before + after;
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &xd[o * xs[axis] * inner..(o + 1) * xs[axis] * inner];
            let dst = (o * len + before) * inner;
            out[dst..dst + src.len()].copy_from_slice(src);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Pad { x, axis, before }, &[x]))
    }

    /// Affine map of rows: `x` is `(M, In)`, `w` is `(Out, In)`, `b` is `(Out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            bail!(Shape, "linear input {:?} with weight {:?}", xs, ws);
        }
        let (m, k, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                bail!(Shape, "linear bias {:?} for {} outputs", self.shape(b), o);
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; m * o];
        for r in 0..m {
            let row = &xd[r * k..(r + 1) * k];
            for j in 0..o {
                out[r * o + j] = dot(row, &wd[j * k..(j + 1) * k]) + bd.map_or(0.0, |b| b[j]);
            }
        }
        let out = Tensor::from_vec(&[m, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Unidirectional LSTM over `x` of shape `(N, T, F)`; returns every
    /// hidden state, `(N, T, H)`. With `reverse` the sequence is scanned from
    /// the last step to the first; outputs stay at their time positions.
    /// Gate order in `w_ih (4H, F)`, `w_hh (4H, H)` and `b (4H)` is
    /// input, forget, cell, output.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x);
        let (wis, whs, bs) = (self.shape(w_ih), self.shape(w_hh), self.shape(b));
        if xs.len() != 3 || wis.len() != 2 || whs.len() != 2 {
            bail!(Shape, "lstm input {:?}, w_ih {:?}, w_hh {:?}", xs, wis, whs);
        }
        let (n, t, f) = (xs[0], xs[1], xs[2]);
        let hd = whs[1];
        if wis != [4 * hd, f] || whs != [4 * hd, hd] || bs != [4 * hd] {
            bail!(Shape, "lstm weights {:?} {:?} {:?} for input {:?}", wis, whs, bs, xs);
        }
        let xd = self.value(x).data();
        let wi = self.value(w_ih).data();
        let wh = self.value(w_hh).data();
        let bd = self.value(b).data();
        let g4 = 4 * hd;
        let mut gates = vec![0.0; n * t * g4];
        let mut cells = vec![0.0; n * t * hd];
        let mut out = vec![0.0; n * t * hd];
        let mut z = vec![0.0; g4];
        for ni in 0..n {
            let mut h_prev = vec![0.0; hd];
            let mut c_prev = vec![0.0; hd];
            for step in 0..t {
                let ti = if reverse { t - 1 - step } else { step };
                let xt = &xd[(ni * t + ti) * f..(ni * t + ti + 1) * f];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = bd[j] + dot(&wi[j * f..(j + 1) * f], xt) + dot(&wh[j * hd..(j + 1) * hd], &h_prev);
                }
                let gbase = (ni * t + ti) * g4;
                let hbase = (ni * t + ti) * hd;
                for k in 0..hd {
                    let i = sigmoid(z[k]);
                    let fg = sigmoid(z[hd + k]);
                    let g = libm::tanh(z[2 * hd + k]);
                    let o = sigmoid(z[3 * hd + k]);
                    let c = fg * c_prev[k] + i * g;
                    let h = o * libm::tanh(c);
                    gates[gbase + k] = i;
                    gates[gbase + hd + k] = fg;
                    gates[gbase + 2 * hd + k] = g;
                    gates[gbase + 3 * hd + k] = o;
                    cells[hbase + k] = c;
                    out[hbase + k] = h;
                    c_prev[k] = c;
                    h_prev[k] = h;
                }
            }
        }
        let out = Tensor::from_vec(&[n, t, hd], out)?;
        let tape = LstmTape { x, w_ih, w_hh, b, reverse, gates, cells };
        Ok(self.push(out, Op::Lstm(tape), &[x, w_ih, w_hh, b]))
    }

    /// Average, standard deviation, minimum and maximum over the first axis
    /// of a `(B, D)` tensor, concatenated into a `(4D)` vector.
    ///
    /// Sums are exactly rounded, so repeating every row the same number of
    /// times reproduces all four statistics bit for bit. A single row has
    /// standard deviation zero.
    pub fn block_stats(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] == 0 {
            bail!(Shape, "block_stats on {:?}", xs);
        }
        let (bn, d) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut argmin = vec![0; d];
        let mut argmax = vec![0; d];
        let mut col = Vec::with_capacity(bn);
        for j in 0..d {
            col.clear();
            col.extend((0..bn).map(|b| xd[b * d + j]));
            let m = exact_sum(&col) / bn as f64;
            let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            mean[j] = m;
            std[j] = libm::sqrt(exact_sum(&dev) / bn as f64);
            let (mut lo, mut hi) = (0, 0);
            for (b, &v) in col.iter().enumerate() {
                if v < col[lo] {
                    lo = b;
                }
                if v > col[hi] {
                    hi = b;
                }
            }
            argmin[j] = lo;
            argmax[j] = hi;
        }
        let mut out = Vec::with_capacity(4 * d);
        out.extend_from_slice(&mean);
        out.extend_from_slice(&std);
        out.extend((0..d).map(|j| xd[argmin[j] * d + j]));
        out.extend((0..d).map(|j| xd[argmax[j] * d + j]));
        let out = Tensor::from_vec(&[4 * d], out)?;
        Ok(self.push(out, Op::BlockStats { x, mean, std, argmin, argmax }, &[x]))
    }

    /// Elementwise modulus of a complex tensor held as real and imaginary
    /// parts. The derivative at the origin is taken as zero.
    pub fn complex_abs(&mut self, re: Var, im: Var) -> Result<Var> {
        self.binary(re, im, "complex_abs", libm::hypot, Op::ComplexAbs(re, im))
    }

    /// `sum_i weights_i * x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        check_same(self.value(x), &weights, "weighted_sum")?;
        let s = dot(self.value(x).data(), weights.data());
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Hash of every branch choice on the tape: max-pool and min/max
    /// selections and the side of each kink of a piecewise-linear activation
    /// (ELU is continuously differentiable and does not count). Two
    /// recordings with equal signatures evaluate the same smooth piece, which
    /// is what a finite-difference check needs from its stencil.
    pub fn piece_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                Op::BlockStats { argmin, argmax, .. } => argmin.iter().chain(argmax).for_each(|&a| mix(a as u64)),
                Op::Unary(x, f) => {
                    let region = |v: f64| -> u64 {
                        match *f {
                            Unary::Relu | Unary::LeakyRelu(_) => (v > 0.0) as u64,
                            Unary::Clamp(lo, hi) => (v >= lo) as u64 + (v > hi) as u64,
                            _ => 0,
                        }
                    };
                    if matches!(f, Unary::Relu | Unary::LeakyRelu(_) | Unary::Clamp(..)) {
                        mix(i as u64);
                        self.value(*x).data().iter().for_each(|&v| mix(region(v)));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            bail!(Shape, "backward from non-scalar {:?}", self.shape(out));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(acc.data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * vb[i];
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * va[i];
                    }
                });
            }
            Op::Unary(x, f) => {
                let (xv, yv) = (self.value(*x).data(), node.value.data());
                self.accumulate_with(grads, *x, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * f.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Conv2d { x, w, b, pad } => self.backprop_conv(*x, *w, *b, *pad, g, grads),
            Op::MaxPool2d { x, argmax } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (o, &src) in argmax.iter().enumerate() {
                        acc[src] += gd[o];
                    }
                });
            }
            Op::Upsample { x, fh, fw } => {
                let s = node.value.shape();
                let (oh, ow) = (s[2], s[3]);
                let (h, w) = (oh / fh, ow / fw);
                self.accumulate_with(grads, *x, |acc| {
                    for plane in 0..s[0] * s[1] {
                        for r in 0..oh {
                            for c in 0..ow {
                                acc[plane * h * w + (r / fh) * w + c / fw] += gd[(plane * oh + r) * ow + c];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    self.accumulate_with(grads, v, |acc| {
                        for o in 0..outer {
                            let src = &gd[o * row + offset..o * row + offset + chunk];
                            for (a, s) in acc[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                self.accumulate_with(grads, *x, |acc| {
                    for (a, s) in acc.iter_mut().zip(gd) {
                        *a += s;
                    }
                });
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gd, node.value.shape(), &inverse);
                self.accumulate_with(grads, *x, |acc| {
                    for (a, s) in acc.iter_mut().zip(&back) {
                        *a += s;
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let full = xs[*axis];
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (a, s) in acc[dst..dst + len * inner].iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                });
            }
            Op::Pad { x, axis, before } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let n = xs[*axis] * inner;
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        let src = (o * len + before) * inner;
                        for (a, s) in acc[o * n..(o + 1) * n].iter_mut().zip(&gd[src..src + n]) {
                            *a += s;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (m, k) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..m {
                        for j in 0..o {
                            let gv = gd[r * o + j];
                            if gv != 0.0 {
                                axpy(gv, &wd[j * k..(j + 1) * k], &mut acc[r * k..(r + 1) * k]);
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *w, |acc| {
                    for r in 0..m {
                        for j in 0..o {
                            let gv = gd[r * o + j];
                            if gv != 0.0 {
                                axpy(gv, &xd[r * k..(r + 1) * k], &mut acc[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |acc| {
                        for r in 0..m {
                            for j in 0..o {
                                acc[j] += gd[r * o + j];
                            }
                        }
                    });
                }
            }
            Op::Lstm(tape) => self.backprop_lstm(tape, &node.value, g, grads),
            Op::BlockStats { x, mean, std, argmin, argmax } => {
                let xs = self.shape(*x);
                let (bn, d) = (xs[0], xs[1]);
                let xd = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for j in 0..d {
                        let (gm, gs, glo, ghi) = (gd[j], gd[d + j], gd[2 * d + j], gd[3 * d + j]);
                        for b in 0..bn {
                            let mut v = gm / bn as f64;
                            if std[j] > 0.0 {
                                v += gs * (xd[b * d + j] - mean[j]) / (bn as f64 * std[j]);
                            }
                            acc[b * d + j] += v;
                        }
                        acc[argmin[j] * d + j] += glo;
                        acc[argmax[j] * d + j] += ghi;
                    }
                });
            }
            Op::ComplexAbs(re, im) => {
                let (rv, iv, mv) = (self.value(*re).data(), self.value(*im).data(), node.value.data());
                for (part, pv) in [(*re, rv), (*im, iv)] {
                    self.accumulate_with(grads, part, |acc| {
                        for i in 0..acc.len() {
                            if mv[i] > 0.0 {
                                acc[i] += gd[i] * pv[i] / mv[i];
                            }
                        }
                    });
                }
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |acc| axpy(s, weights.data(), acc));
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += s));
            }
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Option<Var>, pad: Padding2d, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let gd = g.data();
        let xdat = self.value(x).data();
        let wdat = self.value(w).data();
        if let Some(b) = b {
            self.accumulate_with(grads, b, |acc| {
                for ni in 0..n {
                    for (oi, a) in acc.iter_mut().enumerate() {
                        let base = (ni * o + oi) * oh * ow;
                        *a += gd[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
            });
        }
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let geo = ConvGeometry { h, w: wd, kh, kw, oh, ow, pad };
        let plane = oh * ow;
        let mut dx = if want_x { vec![0.0; xdat.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wdat.len()] } else { Vec::new() };
        let mut shifted = vec![0.0; plane];
        let mut dshifted = vec![0.0; plane];
        for ni in 0..n {
            for ci in 0..c {
                let xrange = (ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd;
                for ki in 0..kh {
                    for kj in 0..kw {
                        if !geo.shift(&xdat[xrange.clone()], ki, kj, &mut shifted) {
                            continue;
                        }
                        dshifted.iter_mut().for_each(|v| *v = 0.0);
                        for oi in 0..o {
                            let widx = ((oi * c + ci) * kh + ki) * kw + kj;
                            let gplane = &gd[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                            if want_w {
                                dw[widx] += dot(gplane, &shifted);
                            }
                            if want_x {
                                axpy(wdat[widx], gplane, &mut dshifted);
                            }
                        }
                        if want_x {
                            geo.unshift_add(&dshifted, ki, kj, &mut dx[xrange.clone()]);
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_vec(xs, dx).expect("shape"));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_vec(ws, dw).expect("shape"));
        }
    }

    fn backprop_lstm(&self, tape: &LstmTape, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(tape.x);
        let (n, t, f) = (xs[0], xs[1], xs[2]);
        let hd = out.shape()[2];
        let g4 = 4 * hd;
        let xd = self.value(tape.x).data();
        let wi = self.value(tape.w_ih).data();
        let wh = self.value(tape.w_hh).data();
        let hs = out.data();
        let gd = g.data();
        let mut dx = vec![0.0; xd.len()];
        let mut dwi = vec![0.0; wi.len()];
        let mut dwh = vec![0.0; wh.len()];
        let mut db = vec![0.0; g4];
        let mut dz = vec![0.0; g4];
        let zeros = vec![0.0; hd];
        for ni in 0..n {
            let mut dh_next = vec![0.0; hd];
            let mut dc_next = vec![0.0; hd];
            for step in (0..t).rev() {
                let ti = if tape.reverse { t - 1 - step } else { step };
                let prev = if step == 0 {
                    None
                } else if tape.reverse {
                    Some(ti + 1)
                } else {
                    Some(ti - 1)
                };
                let gbase = (ni * t + ti) * g4;
                let hbase = (ni * t + ti) * hd;
                let (h_prev, c_prev) = match prev {
                    Some(p) => (&hs[(ni * t + p) * hd..(ni * t + p + 1) * hd], &tape.cells[(ni * t + p) * hd..(ni * t + p + 1) * hd]),
                    None => (&zeros[..], &zeros[..]),
                };
                for k in 0..hd {
                    let i = tape.gates[gbase + k];
                    let fg = tape.gates[gbase + hd + k];
                    let gg = tape.gates[gbase + 2 * hd + k];
                    let o = tape.gates[gbase + 3 * hd + k];
                    let tc = libm::tanh(tape.cells[hbase + k]);
                    let dh = gd[hbase + k] + dh_next[k];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                    dz[k] = dc * gg * i * (1.0 - i);
                    dz[hd + k] = dc * c_prev[k] * fg * (1.0 - fg);
                    dz[2 * hd + k] = dc * i * (1.0 - gg * gg);
                    dz[3 * hd + k] = d_o * o * (1.0 - o);
                    dc_next[k] = dc * fg;
                }
                let xt = &xd[(ni * t + ti) * f..(ni * t + ti + 1) * f];
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..g4 {
                    let dzj = dz[j];
                    if dzj == 0.0 {
                        continue;
                    }
                    db[j] += dzj;
                    axpy(dzj, xt, &mut dwi[j * f..(j + 1) * f]);
                    axpy(dzj, h_prev, &mut dwh[j * hd..(j + 1) * hd]);
                    axpy(dzj, &wi[j * f..(j + 1) * f], &mut dx[(ni * t + ti) * f..(ni * t + ti + 1) * f]);
                    axpy(dzj, &wh[j * hd..(j + 1) * hd], &mut dh_next);
                }
            }
        }
        let shapes = [(tape.x, dx), (tape.w_ih, dwi), (tape.w_hh, dwh), (tape.b, db)];
        for (v, d) in shapes {
            if self.wants(v) {
                let t = Tensor::from_vec(self.shape(v), d).expect("shape");
                self.accumulate(grads, v, t);
            }
        }
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `out + k - pad` falls inside `[0, len)`.
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index bookkeeping of one zero-padded 2-D correlation plane.
struct ConvGeometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: Padding2d,
}

impl ConvGeometry {
    /// Fills `out` (`oh x ow`) with the input plane as seen by tap
    /// `(ki, kj)`, zero where the tap falls into the padding. Returns false
    /// when the tap never touches the input.
    fn shift(&self, x: &[f64], ki: usize, kj: usize, out: &mut [f64]) -> bool {
        debug_assert!(ki < self.kh && kj < self.kw);
        let (r_lo, r_hi) = valid_range(ki, self.pad[0], self.h, self.oh);
        let (c_lo, c_hi) = valid_range(kj, self.pad[2], self.w, self.ow);
        if r_lo >= r_hi || c_lo >= c_hi {
            return false;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in r_lo..r_hi {
            let src = (r + ki - self.pad[0]) * self.w + c_lo + kj - self.pad[2];
            out[r * self.ow + c_lo..r * self.ow + c_hi].copy_from_slice(&x[src..src + c_hi - c_lo]);
        }
        true
    }

    /// Adjoint of [`ConvGeometry::shift`]: adds `g` back onto the input plane.
    fn unshift_add(&self, g: &[f64], ki: usize, kj: usize, dx: &mut [f64]) {
        let (r_lo, r_hi) = valid_range(ki, self.pad[0], self.h, self.oh);
        let (c_lo, c_hi) = valid_range(kj, self.pad[2], self.w, self.ow);
        for r in r_lo..r_hi {
            let dst = (r + ki - self.pad[0]) * self.w + c_lo + kj - self.pad[2];
            for (d, s) in dx[dst..dst + c_hi - c_lo].iter_mut().zip(&g[r * self.ow + c_lo..r * self.ow + c_hi]) {
                *d += s;
            }
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference check of `build` with respect to every input.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            let mut num = std::vec::Vec::new();
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            }
            let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-6, "input {}: rel err {}", k, diff / scale);
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, &[2, 3, 5, 4]);
        let w = random(&mut rng, &[2, 3, 3, 2]);
        let b = random(&mut rng, &[2]);
        let pad = same_padding(3, 2);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, Some(vb), pad).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 5, 4]);
        let at = |t: &Tensor, i: [usize; 4]| {
            let s = t.shape();
            t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
        };
        for n in 0..2 {
            for o in 0..2 {
                for r in 0..5 {
                    for c in 0..4 {
                        let mut acc = b.data()[o];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..2 {
                                    let ir = r as isize + ki as isize - pad[0] as isize;
                                    let ic = c as isize + kj as isize - pad[2] as isize;
                                    if (0..5).contains(&ir) && (0..4).contains(&ic) {
                                        acc += at(&w, [o, ci, ki, kj]) * at(&x, [n, ci, ir as usize, ic as usize]);
                                    }
                                }
                            }
                        }
                        assert!((acc - at(g.value(y), [n, o, r, c])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, &[2, 2, 6, 4]);
        let w = random(&mut rng, &[3, 2, 3, 4]);
        let b = random(&mut rng, &[3]);
        let probe = random(&mut rng, &[2, 3, 6, 4]);
        check(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), same_padding(3, 4)).unwrap();
            let y = g.unary(y, Unary::Elu);
            let p = g.max_pool2d(y, 2, 2).unwrap();
            let u = g.upsample(p, 2, 2).unwrap();
            g.weighted_sum(u, probe.clone()).unwrap()
        });
    }

    #[test]
    fn lstm_gradients_both_directions() {
        let mut rng = Rng::new(7);
        let x = random(&mut rng, &[2, 4, 3]);
        let wi = random(&mut rng, &[8, 3]).map(|v| 0.5 * v);
        let wh = random(&mut rng, &[8, 2]).map(|v| 0.5 * v);
        let b = random(&mut rng, &[8]);
        let probe = random(&mut rng, &[2, 4, 2]);
        for reverse in [false, true] {
            check(&[x.clone(), wi.clone(), wh.clone(), b.clone()], |g, v| {
                let h = g.lstm(v[0], v[1], v[2], v[3], reverse).unwrap();
                g.weighted_sum(h, probe.clone()).unwrap()
            });
        }
    }

    #[test]
    fn reverse_lstm_matches_forward_on_flipped_input() {
        let mut rng = Rng::new(8);
        let x = random(&mut rng, &[1, 5, 3]);
        let mut flipped = x.clone();
        for t in 0..5 {
            for f in 0..3 {
                flipped.data_mut()[t * 3 + f] = x.data()[(4 - t) * 3 + f];
            }
        }
        let wi = random(&mut rng, &[8, 3]);
        let wh = random(&mut rng, &[8, 2]);
        let b = random(&mut rng, &[8]);
        let mut g = Graph::new();
        let (a, fl) = (g.constant(x), g.constant(flipped));
        let (wi, wh, b) = (g.constant(wi), g.constant(wh), g.constant(b));
        let r = g.lstm(a, wi, wh, b, true).unwrap();
        let f = g.lstm(fl, wi, wh, b, false).unwrap();
        for t in 0..5 {
            for k in 0..2 {
                assert_eq!(g.value(r).data()[t * 2 + k], g.value(f).data()[(4 - t) * 2 + k]);
            }
        }
    }

    #[test]
    fn shape_ops_gradients() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[2, 1, 4]);
        let probe = random(&mut rng, &[4, 5]);
        check(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let c = g.slice(c, 1, 1, 2).unwrap();
            let c = g.pad(c, 2, 0, 1).unwrap();
            let c = g.permute(c, &[2, 0, 1]).unwrap();
            let c = g.reshape(c, &[5, 2, 2]).unwrap();
            let c = g.permute(c, &[2, 1, 0]).unwrap();
            let c = g.reshape(c, &[4, 5]).unwrap();
            g.weighted_sum(c, probe.clone()).unwrap()
        });
    }

    #[test]
    fn linear_stats_and_pointwise_gradients() {
        let mut rng = Rng::new(13);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[5, 4]);
        let b = random(&mut rng, &[5]);
        let probe = random(&mut rng, &[20]);
        check(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = g.tanh(y);
            let s = g.block_stats(y).unwrap();
            let s = g.sigmoid(s);
            g.weighted_sum(s, probe.clone()).unwrap()
        });
        let re = random(&mut rng, &[6]);
        let im = random(&mut rng, &[6]);
        check(&[re, im], |g, v| {
            let m = g.complex_abs(v[0], v[1]).unwrap();
            let c = g.unary(v[0], Unary::Cos);
            let s = g.unary(v[1], Unary::Sin);
            let p = g.mul(c, s).unwrap();
            let q = g.sub(m, p).unwrap();
            let q = g.unary(q, Unary::Square);
            g.sum(q)
        });
    }

    #[test]
    fn block_stats_single_row_has_zero_std() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], std::vec![3.0, -1.0]).unwrap());
        let s = g.block_stats(x).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, -1.0, 0.0, 0.0, 3.0, -1.0, 3.0, -1.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.linear(a, b, None).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn piece_signature_tracks_branch_choices() {
        let sig = |vals: [f64; 4]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vals.to_vec()).unwrap());
            let r = g.unary(x, Unary::Relu);
            g.max_pool2d(r, 2, 2).unwrap();
            g.piece_signature()
        };
        let base = sig([0.5, 1.0, -0.3, 0.2]);
        assert_eq!(base, sig([0.6, 1.1, -0.2, 0.3]));
        assert_ne!(base, sig([0.5, 1.0, 0.3, 0.2]), "relu side changed");
        assert_ne!(base, sig([1.5, 1.0, -0.3, 0.2]), "pooled argmax changed");
    }
}
