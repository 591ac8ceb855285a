//! Primitive operations: forward evaluation on the tape plus their
//! vector-Jacobian products.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Node, Tape, Var};
use crate::tensor::{numel, strides, Tensor};

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, src: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, arg: Vec<usize> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Pow { x: Var, p: T },
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        s: usize,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow { .. } => "pow",
            Op::Clamp { .. } => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x) => vec![*x],
            Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Pow { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()).copied());
                v
            }
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let s = strides(shape);
    (0..nd)
        .map(|d| {
            if d < off || (shape[d - off] == 1 && out[d] != 1) {
                0
            } else {
                s[d - off]
            }
        })
        .collect()
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(out) / last;
    let mut idx = vec![0usize; nd - 1];
    for o in 0..outer {
        let (mut ba, mut bb) = (0, 0);
        for d in 0..nd - 1 {
            ba += idx[d] * sa[d];
            bb += idx[d] * sb[d];
        }
        for j in 0..last {
            f(o * last + j, ba + j * la, bb + j * lb);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Source offset in the input for every output element of a permutation.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let nd = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// View `shape` as `[outer, shape[axis], inner]`.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

// ---------------------------------------------------------------------------
// Forward constructors

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if sa == sb {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            Tensor::new(sa.clone(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())?
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
                shape_err(
                    name,
                    self.next_id(),
                    format!("cannot broadcast {sa:?} (node {}) with {sb:?} (node {})", a.0, b.0),
                )
            })?;
            let (st_a, st_b) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let mut data = vec![T::zero(); numel(&out)];
            for_each_broadcast(&out, &st_a, &st_b, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
            Tensor::new(out, data)?
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        Ok(self.push(value, op))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Op::AddScalar(x))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let id = self.next_id();
        let bad = |detail: String| shape_err("matmul", id, detail);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad(format!("operands {sa:?} and {sb:?} must both be 2-D or 3-D")));
        }
        let nd = sa.len();
        let batch = if nd == 3 { sa[0] } else { 1 };
        if nd == 3 && sb[0] != batch {
            return Err(bad(format!("batch sizes differ: {sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(bad(format!(
                "inner dimensions differ: {sa:?} x {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for bi in 0..batch {
            // SAFETY: offsets stay inside the operand buffers checked above.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    va.as_ptr().add(bi * m * k),
                    k as isize,
                    1,
                    vb.as_ptr().add(bi * k * n),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(bi * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let shape = if nd == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }))
    }

    /// `a · b` for 2-D operands or batched 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (transpose of the last two axes of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                self.next_id(),
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let src = permute_sources(&shape, perm);
        let data = self.value(x).data();
        let out: Vec<T> = src.iter().map(|&s| data[s]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, src }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err("transpose", self.next_id(), "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec()).map_err(|e| {
            shape_err("reshape", self.next_id(), format!("node {}: {e}", x.0))
        })?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let id = self.next_id();
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", id, "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", id, format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    id,
                    format!("node {} has shape {s:?}, incompatible with {base:?} on axis {axis}", p.0),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_view(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut off = 0;
        for p in parts {
            let len = self.shape(*p)[axis];
            let src = self.value(*p).data();
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            off += len;
        }
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                self.next_id(),
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_view(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, name: &'static str) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(name, self.next_id(), format!("axis {axis} out of range for {shape:?}")));
        }
        let view = axis_view(&shape, axis);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok((out_shape, view))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, (outer, n, inner)) = self.reduce_axis(x, axis, "sum_axis")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }))
    }

    /// Mean along `axis` (average pooling), keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, (outer, n, inner)) = self.reduce_axis(x, axis, "mean_axis")?;
        let src = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis }))
    }

    /// Max along `axis` (max pooling), keeping it with size 1. Ties resolve to
    /// the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, (outer, n, inner)) = self.reduce_axis(x, axis, "max_axis")?;
        let src = self.value(x).data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let s = (o * n + j) * inner + i;
                    let d = o * inner + i;
                    if src[s] > out[d] {
                        out[d] = src[s];
                        arg[d] = s;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, arg }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn pow(&mut self, x: Var, p: T) -> Var {
        self.unary(x, |v| v.powf(p), Op::Pow { x, p })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("tensor has at least one axis");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z = z + *e;
            }
            row.iter_mut().for_each(|e| *e = *e / z);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Layer normalisation over the last axis with optional affine terms of
    /// shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensor has at least one axis");
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [d] {
                return Err(shape_err(
                    "layer_norm",
                    self.next_id(),
                    format!("affine node {} has shape {:?}, expected [{d}]", p.0, self.shape(*p)),
                ));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            out.chunks_mut(d).for_each(|row| row.iter_mut().zip(gv).for_each(|(o, &g)| *o = *o * g));
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            out.chunks_mut(d).for_each(|row| row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b));
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Stride-1 2-D convolution with symmetric zero padding `k / 2`.
    ///
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]` with odd `k`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let id = self.next_id();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                id,
                format!("input {sx:?} (node {}) and kernel {sw:?} (node {}) are incompatible", x.0, w.0),
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", id, format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let hw = h * wd;
        let ckk = cin * k * k;
        let cols = im2col(self.value(x).data(), cin, h, wd, k);
        let mut out = vec![T::zero(); cout * hw];
        // SAFETY: buffers have the sizes implied by the gemm dimensions.
        unsafe {
            T::gemm(
                cout,
                ckk,
                hw,
                T::one(),
                self.value(w).data().as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_mut(hw).zip(bv).for_each(|(row, &bb)| row.iter_mut().for_each(|v| *v = *v + bb));
        }
        Ok(self.push(Tensor::new(vec![cout, h, wd], out)?, Op::Conv2d { x, w, b, k, cols }))
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// upsampling by `s`).
    ///
    /// `x: [c_in, h, w]`, `w: [c_in, c_out, s, s]`, `b: [c_out]`; output
    /// `[c_out, h·s, w·s]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let id = self.next_id();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(shape_err(
                "conv_transpose2d",
                id,
                format!("input {sx:?} (node {}) and kernel {sw:?} (node {}) are incompatible", x.0, w.0),
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, s) = (sw[1], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d", id, format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let hw = h * wd;
        let css = cout * s * s;
        let mut y = vec![T::zero(); css * hw];
        // SAFETY: buffers have the sizes implied by the gemm dimensions.
        unsafe {
            T::gemm(
                css,
                cin,
                hw,
                T::one(),
                self.value(w).data().as_ptr(),
                1,
                css as isize,
                self.value(x).data().as_ptr(),
                hw as isize,
                1,
                T::zero(),
                y.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        let (oh, ow) = (h * s, wd * s);
        let mut out = vec![T::zero(); cout * oh * ow];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for co in 0..cout {
            let bb = bias.as_ref().map_or(T::zero(), |b| b[co]);
            for dy in 0..s {
                for dx in 0..s {
                    let row = &y[((co * s + dy) * s + dx) * hw..][..hw];
                    for yy in 0..h {
                        for xx in 0..wd {
                            out[(co * oh + yy * s + dy) * ow + xx * s + dx] = row[yy * wd + xx] + bb;
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![cout, oh, ow], out)?, Op::ConvTranspose2d { x, w, b, s }))
    }
}

fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx >= 0 && sx < w as isize {
                            cols[row + y * w + xx] = x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], dx: &mut [T], cin: usize, h: usize, w: usize, k: usize) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx >= 0 && sx < w as isize {
                            let d = (ci * h + sy as usize) * w + sx as usize;
                            dx[d] = dx[d] + cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reverse pass

fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_binary<T: Scalar>(
    nodes: &[Node<T>],
    out_shape: &[usize],
    a: Var,
    b: Var,
    kind: Binary,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
    let same = va.shape() == vb.shape();
    let (sta, stb) = if same {
        (Vec::new(), Vec::new())
    } else {
        (broadcast_strides(va.shape(), out_shape), broadcast_strides(vb.shape(), out_shape))
    };
    for (target, is_a) in [(a, true), (b, false)] {
        let Some(acc) = slot(nodes, grads, target) else { continue };
        let other = if is_a { vb.data() } else { va.data() };
        let coef = |o: usize, other_idx: usize| -> T {
            match kind {
                Binary::Add => g[o],
                Binary::Sub => {
                    if is_a {
                        g[o]
                    } else {
                        -g[o]
                    }
                }
                Binary::Mul => g[o] * other[other_idx],
            }
        };
        if same {
            for o in 0..g.len() {
                acc[o] = acc[o] + coef(o, o);
            }
        } else {
            for_each_broadcast(out_shape, &sta, &stb, |o, ia, ib| {
                let (mine, theirs) = if is_a { (ia, ib) } else { (ib, ia) };
                acc[mine] = acc[mine] + coef(o, theirs);
            });
        }
    }
}

pub(crate) fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => backprop_binary(nodes, out.shape(), *a, *b, Binary::Add, g, grads),
        Op::Sub(a, b) => backprop_binary(nodes, out.shape(), *a, *b, Binary::Sub, g, grads),
        Op::Mul(a, b) => backprop_binary(nodes, out.shape(), *a, *b, Binary::Mul, g, grads),
        Op::Scale(x, c) => {
            if let Some(acc) = slot(nodes, grads, *x) {
                acc.iter_mut().zip(g).for_each(|(a, &gv)| *a = *a + gv * *c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(acc) = slot(nodes, grads, *x) {
                acc.iter_mut().zip(g).for_each(|(a, &gv)| *a = *a + gv);
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let nd = va.ndim();
            let batch = if nd == 3 { va.shape()[0] } else { 1 };
            let (m, k) = (va.shape()[nd - 2], va.shape()[nd - 1]);
            let n = out.shape()[nd - 1];
            if let Some(acc) = slot(nodes, grads, *a) {
                let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                for bi in 0..batch {
                    // SAFETY: slices sized by the forward shape checks.
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.as_ptr().add(bi * m * n),
                            n as isize,
                            1,
                            vb.data().as_ptr().add(bi * k * n),
                            rsb,
                            csb,
                            T::one(),
                            acc.as_mut_ptr().add(bi * m * k),
                            k as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    // SAFETY: slices sized by the forward shape checks.
                    unsafe {
                        if *trans_b {
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g.as_ptr().add(bi * m * n),
                                1,
                                n as isize,
                                va.data().as_ptr().add(bi * m * k),
                                k as isize,
                                1,
                                T::one(),
                                acc.as_mut_ptr().add(bi * k * n),
                                k as isize,
                                1,
                            );
                        } else {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                va.data().as_ptr().add(bi * m * k),
                                1,
                                k as isize,
                                g.as_ptr().add(bi * m * n),
                                n as isize,
                                1,
                                T::one(),
                                acc.as_mut_ptr().add(bi * k * n),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
        }
        Op::Permute { x, src } => {
            if let Some(acc) = slot(nodes, grads, *x) {
                for (o, &s) in src.iter().enumerate() {
                    acc[s] = acc[s] + g[o];
                }
            }
        }
        Op::Concat { parts, axis } => {
            let total = out.shape()[*axis];
            let (outer, _, inner) = axis_view(out.shape(), *axis);
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if let Some(acc) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner..][..len * inner];
                        acc[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
                off += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape();
            let (outer, n, inner) = axis_view(in_shape, *axis);
            let len = out.shape()[*axis];
            if let Some(acc) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    acc[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            let gv = if matches!(node.op, Op::Mean(_)) {
                g[0] / T::of(n as f64)
            } else {
                g[0]
            };
            if let Some(acc) = slot(nodes, grads, *x) {
                acc.iter_mut().for_each(|a| *a = *a + gv);
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let (outer, n, inner) = axis_view(nodes[x.0].value.shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::of(n as f64)
            } else {
                T::one()
            };
            if let Some(acc) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        acc[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a = *a + b * scale);
                    }
                }
            }
        }
        Op::MaxAxis { x, arg, .. } => {
            if let Some(acc) = slot(nodes, grads, *x) {
                for (o, &s) in arg.iter().enumerate() {
                    acc[s] = acc[s] + g[o];
                }
            }
        }
        Op::Relu(x) => unary_back(nodes, grads, *x, g, |xv, _| if xv > T::zero() { T::one() } else { T::zero() }),
        Op::Gelu(x) => unary_back(nodes, grads, *x, g, |xv, _| gelu_grad(xv)),
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(acc) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    acc[j] = acc[j] + g[j] * y[j] * (T::one() - y[j]);
                }
            }
        }
        Op::Tanh(x) => {
            let y = out.data();
            if let Some(acc) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    acc[j] = acc[j] + g[j] * (T::one() - y[j] * y[j]);
                }
            }
        }
        Op::Exp(x) => {
            let y = out.data();
            if let Some(acc) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    acc[j] = acc[j] + g[j] * y[j];
                }
            }
        }
        Op::Log(x) => unary_back(nodes, grads, *x, g, |xv, _| T::one() / xv),
        Op::Pow { x, p } => {
            let p = *p;
            unary_back(nodes, grads, *x, g, |xv, _| {
                if p == T::zero() {
                    T::zero()
                } else {
                    p * xv.powf(p - T::one())
                }
            })
        }
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary_back(nodes, grads, *x, g, |xv, _| {
                if xv >= lo && xv <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::Softmax(x) => {
            let y = out.data();
            let d = *out.shape().last().expect("non-empty shape");
            if let Some(acc) = slot(nodes, grads, *x) {
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        acc[r * d + j] = acc[r * d + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *out.shape().last().expect("non-empty shape");
            let rows = xhat.len() / d;
            let gvals = gamma.map(|gm| nodes[gm.0].value.data().to_vec());
            if let Some(bt) = beta {
                if let Some(acc) = slot(nodes, grads, *bt) {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] = acc[j] + g[r * d + j];
                        }
                    }
                }
            }
            if let Some(gm) = gamma {
                if let Some(acc) = slot(nodes, grads, *gm) {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] = acc[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *x) {
                let inv_d = T::one() / T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let xr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        let gj = g[r * d + j];
                        dxhat[j] = gvals.as_ref().map_or(gj, |gv| gj * gv[j]);
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        acc[r * d + j] = acc[r * d + j] + rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, k, cols } => {
            let sx = nodes[x.0].value.shape();
            let (cin, h, wd) = (sx[0], sx[1], sx[2]);
            let cout = out.shape()[0];
            let hw = h * wd;
            let ckk = cin * k * k;
            if let Some(bb) = b {
                if let Some(acc) = slot(nodes, grads, *bb) {
                    for co in 0..cout {
                        acc[co] = acc[co] + g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *w) {
                // SAFETY: buffers sized by the forward shape checks.
                unsafe {
                    T::gemm(
                        cout,
                        hw,
                        ckk,
                        T::one(),
                        g.as_ptr(),
                        hw as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        hw as isize,
                        T::one(),
                        acc.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
            }
            if nodes[x.0].needs_grad {
                let mut dcols = vec![T::zero(); ckk * hw];
                // SAFETY: buffers sized by the forward shape checks.
                unsafe {
                    T::gemm(
                        ckk,
                        cout,
                        hw,
                        T::one(),
                        nodes[w.0].value.data().as_ptr(),
                        1,
                        ckk as isize,
                        g.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                let acc = slot(nodes, grads, *x).expect("needs_grad checked");
                col2im_add(&dcols, acc, cin, h, wd, *k);
            }
        }
        Op::ConvTranspose2d { x, w, b, s } => {
            let s = *s;
            let sx = nodes[x.0].value.shape();
            let (cin, h, wd) = (sx[0], sx[1], sx[2]);
            let cout = out.shape()[0];
            let hw = h * wd;
            let css = cout * s * s;
            let (oh, ow) = (h * s, wd * s);
            let mut dy = vec![T::zero(); css * hw];
            for co in 0..cout {
                for sy in 0..s {
                    for sxx in 0..s {
                        let row = &mut dy[((co * s + sy) * s + sxx) * hw..][..hw];
                        for yy in 0..h {
                            for xx in 0..wd {
                                row[yy * wd + xx] = g[(co * oh + yy * s + sy) * ow + xx * s + sxx];
                            }
                        }
                    }
                }
            }
            if let Some(bb) = b {
                if let Some(acc) = slot(nodes, grads, *bb) {
                    let plane = oh * ow;
                    for co in 0..cout {
                        acc[co] = acc[co] + g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *x) {
                // SAFETY: buffers sized by the forward shape checks.
                unsafe {
                    T::gemm(
                        cin,
                        css,
                        hw,
                        T::one(),
                        nodes[w.0].value.data().as_ptr(),
                        css as isize,
                        1,
                        dy.as_ptr(),
                        hw as isize,
                        1,
                        T::one(),
                        acc.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            }
            if let Some(acc) = slot(nodes, grads, *w) {
                // SAFETY: buffers sized by the forward shape checks.
                unsafe {
                    T::gemm(
                        cin,
                        hw,
                        css,
                        T::one(),
                        nodes[x.0].value.data().as_ptr(),
                        hw as isize,
                        1,
                        dy.as_ptr(),
                        1,
                        hw as isize,
                        T::one(),
                        acc.as_mut_ptr(),
                        css as isize,
                        1,
                    );
                }
            }
        }
    }
}

fn unary_back<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    g: &[T],
    local: impl Fn(T, usize) -> T,
) {
    let xv = nodes[x.0].value.data();
    if let Some(acc) = slot(nodes, grads, x) {
        for j in 0..g.len() {
            acc[j] = acc[j] + g[j] * local(xv[j], j);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
