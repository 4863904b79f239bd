//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! additively, so shared subexpressions receive the sum of their uses.

use rand::Rng;

use super::array::{Array, Real};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training or inference behaviour for dropout and batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Array<T>,
    pub var: Array<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Array::zeros(&[channels]),
            var: Array::full(&[channels], T::one()),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: (1, 1) }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    SoftmaxXent { logits: Var, probs: Vec<T>, labels: Vec<usize>, weights: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Split a shape around `axis` into (outer, dim, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite output of {name}")));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient (inputs, fixed matrices).
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn binary_shapes(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(va.shape(), data).expect("same shape")
    }

    /// 2-D product `op(a) · op(b)`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul expects 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = Array::zeros(&[m, n]);
        T::gemm(
            m,
            ka,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            T::zero(),
            out.data_mut(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, trans_a, trans_b }, ng, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`, the layout used for weights stored as (out, in).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "add_row: bias {:?} vs rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow { x, bias }, ng, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    /// Logistic sigmoid, evaluated on the branch that avoids overflow.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng, "relu")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err(format!("concat: {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let d = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let out = Array::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, ng, "concat")
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err(format!("slice [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Array::from_vec(&shape, data)?;
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, axis, start }, ng, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("bad permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.value(x), perm, &out_shape);
        let ng = self.ng(x);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, ng, "permute")
    }

    /// Same-padded cross-correlation of `x [B, C_in, H, W]` with `w [C_out, C_in, kh, kw]`.
    /// Output spatial size is `ceil(H / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err(format!("conv2d: input {xs:?} vs kernel {ws:?}")));
        }
        let (sh, sw) = spec.stride;
        if sh == 0 || sw == 0 {
            return Err(shape_err("conv2d: zero stride".into()));
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = h.div_ceil(sh);
        let ow = wd.div_ceil(sw);
        let pad_h = ((oh - 1) * sh + kh).saturating_sub(h);
        let pad_w = ((ow - 1) * sw + kw).saturating_sub(wd);
        if kh > h + pad_h || kw > wd + pad_w {
            return Err(shape_err(format!("conv2d: kernel {ws:?} does not fit input {xs:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err(format!("conv2d bias {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh,
            sw,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            oh,
            ow,
        };
        let kdim = c_in * kh * kw;
        let plane = oh * ow;
        let mut out = Array::zeros(&[batch, c_out, oh, ow]);
        let mut cols = vec![T::zero(); kdim * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..batch {
            im2col(&xv[b * c_in * h * wd..(b + 1) * c_in * h * wd], &geom, &mut cols);
            let dst = &mut out.data_mut()[b * c_out * plane..(b + 1) * c_out * plane];
            T::gemm(c_out, kdim, plane, wv, false, &cols, false, T::zero(), dst);
        }
        if let Some(bv) = bias {
            let bvals = self.value(bv).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let add = bvals[i % c_out];
                chunk.iter_mut().for_each(|v| *v += add);
            }
        }
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, bias, geom }, ng, "conv2d")
    }

    /// Per-channel batch normalisation over axis 1 of `[B, C, ...]`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err(format!("batchnorm expects [B, C, ...], got {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || stats.mean.shape() != [ch] {
            return Err(shape_err(format!("batchnorm parameters do not match {ch} channels")));
        }
        let train = mode == Mode::Train;
        if train && batch < 2 {
            return Err(Error::Config("batchnorm in train mode needs a batch of at least 2".into()));
        }
        let eps = T::lit(BN_EPS);
        let n = batch * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        if train {
            for b in 0..batch {
                for c in 0..ch {
                    let base = (b * ch + c) * spatial;
                    for &v in &xv[base..base + spatial] {
                        mean[c] += v;
                    }
                }
            }
            let nf = T::from_usize(n).unwrap();
            mean.iter_mut().for_each(|m| *m = *m / nf);
            for b in 0..batch {
                for c in 0..ch {
                    let base = (b * ch + c) * spatial;
                    for &v in &xv[base..base + spatial] {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nf);
        } else {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                for i in base..base + spatial {
                    let xh = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g[c] * xh + bt[c];
                }
            }
        }
        if train {
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if n > 1 {
                T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
            } else {
                T::one()
            };
            for c in 0..ch {
                let rm = &mut stats.mean.data_mut()[c];
                *rm = mom * *rm + (T::one() - mom) * mean[c];
                let rv = &mut stats.var.data_mut()[c];
                *rv = mom * *rv + (T::one() - mom) * var[c] * unbias;
            }
        }
        let out = Array::from_vec(&s, out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, ng, "batchnorm")
    }

    /// Non-overlapping max pooling of `[B, C, H, W]` with ceil-mode edges.
    pub fn maxpool(&mut self, x: Var, pool: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (ph, pw) = pool;
        if s.len() != 4 || ph == 0 || pw == 0 {
            return Err(shape_err(format!("maxpool {pool:?} on {s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(ph), w.div_ceil(pw));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for p in 0..bc {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * ph * w + j * pw;
                    for di in 0..ph {
                        let r = i * ph + di;
                        if r >= h {
                            break;
                        }
                        for dj in 0..pw {
                            let c = j * pw + dj;
                            if c >= w {
                                break;
                            }
                            let idx = base + r * w + c;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        let out = Array::from_vec(&[s[0], s[1], oh, ow], out)?;
        let ng = self.ng(x);
        self.push(out, Op::MaxPool { x, argmax }, ng, "maxpool")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(dim).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Array::from_vec(&shape, data)?;
        let ng = self.ng(x);
        self.push(out, Op::MeanAxis { x, axis }, ng, "mean_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::SumAll(x), ng, "sum_all")
    }

    /// Mean negative log-softmax of the labelled class over a `[B, C]` batch.
    /// With `class_weights`, the mean is weighted by the weight of each row's label.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(format!(
                "cross entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(shape_err(format!("{} class weights for {classes} classes", w.len())));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); batch * classes];
        let mut weights = Vec::with_capacity(batch);
        let mut loss = T::zero();
        let mut wsum = T::zero();
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
            let wb = class_weights.map_or(T::one(), |w| w[labels[b]]);
            weights.push(wb);
            wsum += wb;
            loss += wb * (lse - row[labels[b]]);
        }
        if wsum <= T::zero() {
            return Err(Error::Config("class weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w = *w / wsum);
        let out = Array::scalar(loss / wsum);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::SoftmaxXent { logits, probs, labels: labels.to_vec(), weights },
            ng,
            "softmax_cross_entropy",
        )
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Array::from_vec(v.shape(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng, "dropout")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array::full(self.shape(output), T::one()));
        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Array<T>>], v: Var) -> Option<&'a mut Array<T>> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.shape(v)));
        }
        slot.as_mut()
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (gout.shape()[0], gout.shape()[1]);
                let k = if *trans_a { va.shape()[0] } else { va.shape()[1] };
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · op(B)ᵀ, stored in A's layout
                    if *trans_a {
                        // A stored (k, m): dA = op(B) · Gᵀ
                        T::gemm(k, n, m, vb.data(), *trans_b, go, true, T::one(), ga.data_mut());
                    } else {
                        T::gemm(m, n, k, go, false, vb.data(), !*trans_b, T::one(), ga.data_mut());
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // B stored (n, k): dB = Gᵀ · op(A)
                        T::gemm(n, m, k, go, true, va.data(), *trans_a, T::one(), gb.data_mut());
                    } else {
                        T::gemm(k, m, n, va.data(), !*trans_a, go, false, T::one(), gb.data_mut());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.add_assign(gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.add_assign(gout);
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (d, &s) in g.data_mut().iter_mut().zip(go) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(g) = self.acc(grads, *a) {
                    for ((d, &s), &o) in g.data_mut().iter_mut().zip(go).zip(&vb) {
                        *d += s * o;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((d, &s), &o) in g.data_mut().iter_mut().zip(go).zip(&va) {
                        *d += s * o;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(g) = self.acc(grads, *x) {
                    g.add_assign(gout);
                }
                if let Some(g) = self.acc(grads, *bias) {
                    let n = g.len();
                    let gb = g.data_mut();
                    for row in go.chunks(n) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (d, &s) in g.data_mut().iter_mut().zip(go) {
                        *d += s * *c;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &s), &yy) in g.data_mut().iter_mut().zip(go).zip(y) {
                        *d += s * yy * (T::one() - yy);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &s), &yy) in g.data_mut().iter_mut().zip(go).zip(y) {
                        *d += s * (T::one() - yy * yy);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &s), &xx) in g.data_mut().iter_mut().zip(go).zip(&xv) {
                        if xx > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(gout.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    if let Some(g) = self.acc(grads, p) {
                        let gd = g.data_mut();
                        for o in 0..outer {
                            let src = &go[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            for (dst, &s) in gd[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(gout.shape(), *axis);
                let dim = self.shape(*x)[*axis];
                if let Some(g) = self.acc(grads, *x) {
                    let gd = g.data_mut();
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        for (dst, &s) in gd[base..base + len * inner]
                            .iter_mut()
                            .zip(&go[o * len * inner..(o + 1) * len * inner])
                        {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (d, &s) in g.data_mut().iter_mut().zip(go) {
                        *d += s;
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(g) = self.acc(grads, *x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(gout, &inv, &self.shape(*x).to_vec());
                    g.add_assign(&back);
                }
            }
            Op::Conv2d { x, w, bias, geom } => self.conv2d_backward(*x, *w, *bias, geom, go, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x).to_vec();
                let (batch, ch) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * spatial;
                        for i in base..base + spatial {
                            sum_dy[c] += go[i];
                            sum_dy_xhat[c] += go[i] * xhat[i];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *gamma) {
                    for (d, &s) in g.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *d += s;
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for (d, &s) in g.data_mut().iter_mut().zip(&sum_dy) {
                        *d += s;
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let gd = g.data_mut();
                    let nf = T::from_usize(batch * spatial).unwrap();
                    for b in 0..batch {
                        for c in 0..ch {
                            let base = (b * ch + c) * spatial;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + spatial {
                                if *train {
                                    gd[i] += k * (go[i] - sum_dy[c] / nf - xhat[i] * sum_dy_xhat[c] / nf);
                                } else {
                                    gd[i] += k * go[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = self.acc(grads, *x) {
                    let gd = g.data_mut();
                    for (&src, &s) in argmax.iter().zip(go) {
                        gd[src] += s;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&xs, *axis);
                let inv = T::one() / T::from_usize(dim).unwrap();
                if let Some(g) = self.acc(grads, *x) {
                    let gd = g.data_mut();
                    for o in 0..outer {
                        for d in 0..dim {
                            let row = &mut gd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (dst, &s) in row.iter_mut().zip(&go[o * inner..(o + 1) * inner]) {
                                *dst += s * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.data_mut().iter_mut().for_each(|d| *d += go[0]);
                }
            }
            Op::SoftmaxXent { logits, probs, labels, weights } => {
                let classes = self.shape(*logits)[1];
                if let Some(g) = self.acc(grads, *logits) {
                    let gd = g.data_mut();
                    for (b, (&label, &wb)) in labels.iter().zip(weights).enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gd[b * classes + c] += go[0] * wb * (probs[b * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &s), &m) in g.data_mut().iter_mut().zip(go).zip(mask) {
                        *d += s * m;
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        go: &[T],
        grads: &mut [Option<Array<T>>],
    ) {
        let ConvGeom { batch, c_in, h, w: wd, c_out, kh, kw, oh, ow, .. } = *geom;
        let kdim = c_in * kh * kw;
        let plane = oh * ow;
        if let Some(bv) = bias {
            if let Some(g) = self.acc(grads, bv) {
                let gd = g.data_mut();
                for (i, chunk) in go.chunks(plane).enumerate() {
                    gd[i % c_out] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data().to_vec();
        let mut cols = vec![T::zero(); kdim * plane];
        let mut gw = vec![T::zero(); c_out * kdim];
        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        for b in 0..batch {
            let gb = &go[b * c_out * plane..(b + 1) * c_out * plane];
            if need_w {
                im2col(&xv[b * c_in * h * wd..(b + 1) * c_in * h * wd], geom, &mut cols);
                // dW += G_b · colsᵀ
                T::gemm(c_out, plane, kdim, gb, false, &cols, true, T::one(), &mut gw);
            }
            if need_x {
                // dcols = Wᵀ · G_b
                T::gemm(kdim, c_out, plane, &wv, true, gb, false, T::zero(), &mut cols);
                col2im(&cols, geom, &mut dx[b * c_in * h * wd..(b + 1) * c_in * h * wd]);
            }
        }
        if let Some(g) = self.acc(grads, w) {
            for (d, &s) in g.data_mut().iter_mut().zip(&gw) {
                *d += s;
            }
        }
        if let Some(g) = self.acc(grads, x) {
            for (d, &s) in g.data_mut().iter_mut().zip(&dx) {
                *d += s;
            }
        }
    }
}

fn permute_data<T: Real>(src: &Array<T>, perm: &[usize], out_shape: &[usize]) -> Array<T> {
    let s = src.shape();
    let nd = s.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    // stride in the source for each output axis
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let data = src.data();
    let mut idx = vec![0usize; nd];
    let last = nd - 1;
    let mut offset = 0usize;
    while out.len() < total {
        // innermost axis as a strided run
        let run = out_shape[last];
        let stride = st[last];
        for k in 0..run {
            out.push(data[offset + k * stride]);
        }
        // advance the outer index
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Array::from_vec(out_shape, out).expect("permutation preserves size")
}

/// Output columns `lo..hi` whose input column `oj + kj - pad_left` is inside
/// the row, for unit horizontal stride.
fn unit_stride_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad_left.saturating_sub(kj).min(g.ow);
    let hi = (g.w + g.pad_left).saturating_sub(kj).min(g.ow).max(lo);
    (lo, hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.pad_top as isize;
                    let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if g.sw == 1 {
                        let (lo, hi) = unit_stride_span(g, kj);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if hi > lo {
                            drow[lo..hi].copy_from_slice(&src[lo + kj - g.pad_left..hi + kj - g.pad_left]);
                        }
                        continue;
                    }
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.sw + kj) as isize - g.pad_left as isize;
                        *d = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let srow = &src[oi * g.ow..(oi + 1) * g.ow];
                    if g.sw == 1 {
                        let (lo, hi) = unit_stride_span(g, kj);
                        if hi > lo {
                            let dst = &mut drow[lo + kj - g.pad_left..hi + kj - g.pad_left];
                            for (d, &v) in dst.iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (oj, &s) in srow.iter().enumerate() {
                        let jj = (oj * g.sw + kj) as isize - g.pad_left as isize;
                        if jj >= 0 && jj < g.w as isize {
                            drow[jj as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
