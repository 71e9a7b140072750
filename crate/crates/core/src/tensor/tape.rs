use std::cell::{Cell, Ref, RefCell};

use super::kernels::{gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_row};
use super::{Element, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Broadcast(usize),
    Sum(usize),
    Mean(usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<E>, rstd: Vec<E> },
    Softmax(usize),
    PoolTokens { input: usize, h: usize, w: usize },
    UpsampleTokens { input: usize, h: usize, w: usize },
    Mse(usize, usize),
    L2Norm(usize),
    Gather { input: usize, index: Vec<usize> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Record of one forward computation. Every [`Var`] borrows the tape it was
/// created on; nodes are appended in execution order, so the node list is a
/// topological order by construction.
#[derive(Debug)]
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    swept: Cell<bool>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient for `v`; zeros when `v` is unreachable from the output.
    pub fn get(&self, v: Var<'_, E>) -> Tensor<E> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    pub fn take(&mut self, v: Var<'_, E>) -> Tensor<E> {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            swept: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var<'_, E>) -> Result<Gradients<E>> {
        if self.swept.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.numel() != 1 {
            self.swept.set(false);
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![E::one()]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<E: Element>(slot: &mut Option<Vec<E>>, len: usize) -> &mut Vec<E> {
    slot.get_or_insert_with(|| vec![E::zero(); len])
}

/// Sum `g` (shaped like the broadcast output) back to an operand of `len`
/// elements broadcast along leading axes.
fn reduce_leading<E: Element>(g: &[E], len: usize, dst: &mut [E]) {
    for chunk in g.chunks(len) {
        for (d, &v) in dst.iter_mut().zip(chunk) {
            *d = *d + v;
        }
    }
}

fn backprop<E: Element>(nodes: &[Node<E>], id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -E::one() } else { E::one() };
            if wants(*a) {
                let dst = acc(&mut grads[*a], g.len());
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            if wants(*b) {
                let n = val(*b).numel();
                let dst = acc(&mut grads[*b], n);
                if sign == E::one() {
                    reduce_leading(g, n, dst);
                } else {
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    reduce_leading(&neg, n, dst);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len();
            if wants(*a) {
                let dst = acc(&mut grads[*a], g.len());
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = *d + g[i] * bv[i % nb];
                }
            }
            if wants(*b) {
                let dst = acc(&mut grads[*b], nb);
                for (i, (&gv, &x)) in g.iter().zip(av).enumerate() {
                    dst[i % nb] = dst[i % nb] + gv * x;
                }
            }
        }
        Op::Scale(a, s) => {
            let dst = acc(&mut grads[*a], g.len());
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = *d + v * *s;
            }
        }
        Op::AddScalar(a) => {
            let dst = acc(&mut grads[*a], g.len());
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = *d + v;
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            if wants(*a) {
                let dst = acc(&mut grads[*a], m * k);
                matmul_nt_acc(g, val(*b).data(), dst, m, k, n);
            }
            if wants(*b) {
                let dst = acc(&mut grads[*b], k * n);
                matmul_tn_acc(val(*a).data(), g, dst, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2().unwrap();
            let dst = acc(&mut grads[*a], r * c);
            for i in 0..r {
                for j in 0..c {
                    dst[i * c + j] = dst[i * c + j] + g[j * r + i];
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if wants(inp) {
                    let dst = acc(&mut grads[inp], outer * len * inner);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                        for (x, &y) in d.iter_mut().zip(src) {
                            *x = *x + y;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let total = in_shape[*axis];
            let len = node.value.shape()[*axis];
            let dst = acc(&mut grads[*input], outer * total * inner);
            for o in 0..outer {
                let d = &mut dst[(o * total + start) * inner..(o * total + start + len) * inner];
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (x, &y) in d.iter_mut().zip(src) {
                    *x = *x + y;
                }
            }
        }
        Op::Broadcast(a) => {
            let n = val(*a).numel();
            let dst = acc(&mut grads[*a], n);
            reduce_leading(g, n, dst);
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = val(*a).numel();
            let scale = if matches!(node.op, Op::Mean(_)) {
                E::one() / E::from_usize(n).unwrap()
            } else {
                E::one()
            };
            let dst = acc(&mut grads[*a], n);
            for d in dst.iter_mut() {
                *d = *d + g[0] * scale;
            }
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let dst = acc(&mut grads[*a], x.len());
            for i in 0..x.len() {
                dst[i] = dst[i] + g[i] * gelu_grad(x[i]);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *val(*x).shape().last().unwrap();
            let rows = xhat.len() / c;
            let gm = val(*gamma).data();
            if wants(*gamma) {
                let dst = acc(&mut grads[*gamma], c);
                for r in 0..rows {
                    for j in 0..c {
                        dst[j] = dst[j] + g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if wants(*beta) {
                let dst = acc(&mut grads[*beta], c);
                reduce_leading(g, c, dst);
            }
            if wants(*x) {
                let dst = acc(&mut grads[*x], rows * c);
                let cn = E::from_usize(c).unwrap();
                for r in 0..rows {
                    let mut s1 = E::zero();
                    let mut s2 = E::zero();
                    for j in 0..c {
                        let dxh = g[r * c + j] * gm[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dxh = g[r * c + j] * gm[j];
                        dst[r * c + j] = dst[r * c + j]
                            + rstd[r] * (dxh - s1 / cn - xhat[r * c + j] * s2 / cn);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let c = *node.value.shape().last().unwrap();
            let dst = acc(&mut grads[*a], y.len());
            for r in 0..y.len() / c {
                let yr = &y[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: E = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..c {
                    dst[r * c + j] = dst[r * c + j] + yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::PoolTokens { input, h, w } => {
            let c = *val(*input).shape().last().unwrap();
            let dst = acc(&mut grads[*input], h * w * c);
            let (oh, ow) = (h / 2, w / 2);
            let q = E::lit(0.25);
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oy * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                        for j in 0..c {
                            dst[i + j] = dst[i + j] + g[o + j] * q;
                        }
                    }
                }
            }
        }
        Op::UpsampleTokens { input, h, w } => {
            let c = *val(*input).shape().last().unwrap();
            let dst = acc(&mut grads[*input], h * w * c);
            let ow = 2 * w;
            for y in 0..2 * h {
                for x in 0..ow {
                    let o = (y * ow + x) * c;
                    let i = ((y / 2) * w + x / 2) * c;
                    for j in 0..c {
                        dst[i + j] = dst[i + j] + g[o + j];
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let k = E::lit(2.0) / E::from_usize(av.len()).unwrap() * g[0];
            if wants(*a) {
                let dst = acc(&mut grads[*a], av.len());
                for i in 0..av.len() {
                    dst[i] = dst[i] + k * (av[i] - bv[i]);
                }
            }
            if wants(*b) {
                let dst = acc(&mut grads[*b], bv.len());
                for i in 0..bv.len() {
                    dst[i] = dst[i] - k * (av[i] - bv[i]);
                }
            }
        }
        Op::L2Norm(a) => {
            let x = val(*a).data();
            let norm = node.value.item();
            let dst = acc(&mut grads[*a], x.len());
            if norm > E::zero() {
                for i in 0..x.len() {
                    dst[i] = dst[i] + g[0] * x[i] / norm;
                }
            }
        }
        Op::Reshape(a) => {
            let dst = acc(&mut grads[*a], g.len());
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = *d + v;
            }
        }
        Op::Gather { input, index } => {
            let n = val(*input).numel();
            let dst = acc(&mut grads[*input], n);
            for (o, &i) in index.iter().enumerate() {
                dst[i] = dst[i] + g[o];
            }
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `b` matches `a` exactly or as a trailing-shape suffix (leading-axis
/// expansion).
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t, E: Element> Var<'t, E> {
    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Borrow the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<E>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<E> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> E {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Copy of this value with no gradient path.
    pub fn detach(self) -> Self {
        let v = self.to_tensor();
        self.tape.constant(v)
    }

    fn unary(self, value: Tensor<E>, op: Op<E>) -> Self {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn binary_elementwise(self, other: Self, name: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        let value = {
            let a = self.value();
            let b = other.value();
            if !broadcastable(a.shape(), b.shape()) {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            let nb = b.numel();
            let bd = b.data();
            let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            _ => Op::Mul(self.id, other.id),
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    /// Elementwise sum; `other` may be a trailing-shape suffix of `self`.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_elementwise(other, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_elementwise(other, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_elementwise(other, "mul", |a, b| a * b)
    }

    pub fn scale(self, s: E) -> Self {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: E) -> Self {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![E::zero(); m * n];
            matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new([m, n], out)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn transpose(self) -> Result<Self> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            let d = a.data();
            Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r])
        };
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: format!("axis {axis} out of range for {base:?}"),
                });
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len()
                    || s[..axis] != base[..axis]
                    || s[axis + 1..] != base[axis + 1..]
                {
                    return Err(mismatch("concat", &base, s));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::Concat { inputs: ids, axis }, needs))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if axis >= s.len() || start >= end || end > s[axis] {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!("[{start},{end}) on axis {axis} of {s:?}"),
                });
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * s[axis] + start) * inner..(o * s[axis] + end) * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.unary(value, Op::Slice { input: self.id, axis, start }))
    }

    /// Repeat along a new leading axis of length `n`.
    pub fn broadcast(self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "broadcast" });
        }
        let value = {
            let a = self.value();
            let mut shape = vec![n];
            shape.extend_from_slice(a.shape());
            let mut data = Vec::with_capacity(n * a.numel());
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Tensor::new(shape, data)?
        };
        Ok(self.unary(value, Op::Broadcast(self.id)))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = {
            let a = self.value();
            Tensor::scalar(a.sum() / E::from_usize(a.numel()).unwrap())
        };
        self.unary(v, Op::Mean(self.id))
    }

    pub fn gelu(self) -> Self {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Normalize over the last axis, then `* gamma + beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self) -> Result<Self> {
        let (value, xhat, rstd) = {
            let a = self.value();
            let c = *a.shape().last().ok_or(TensorError::EmptyAxis { op: "layer_norm" })?;
            let (gv, bv) = (gamma.value(), beta.value());
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(mismatch("layer_norm", a.shape(), gv.shape()));
            }
            let cn = E::from_usize(c).unwrap();
            let rows = a.numel() / c;
            let mut xhat = vec![E::zero(); a.numel()];
            let mut rstd = vec![E::zero(); rows];
            let mut out = vec![E::zero(); a.numel()];
            for r in 0..rows {
                let row = &a.data()[r * c..(r + 1) * c];
                let mu = row.iter().copied().sum::<E>() / cn;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<E>() / cn;
                let rs = E::one() / (var + E::lit(LN_EPS)).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mu) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(a.shape().to_vec(), out)?, xhat, rstd)
        };
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Softmax over the last axis of `self + bias`. The bias is a constant of
    /// either the full input shape or the last-axis length.
    pub fn softmax(self, bias: Option<&Tensor<E>>) -> Result<Self> {
        let value = {
            let a = self.value();
            let c = *a.shape().last().ok_or(TensorError::EmptyAxis { op: "softmax" })?;
            if c == 0 {
                return Err(TensorError::EmptyAxis { op: "softmax" });
            }
            let mut data = a.data().to_vec();
            if let Some(b) = bias {
                if b.shape() != a.shape() && b.shape() != [c] {
                    return Err(mismatch("softmax bias", a.shape(), b.shape()));
                }
                // Shift each bias row by its maximum first. Softmax ignores the
                // shift, and a uniform bias then cancels exactly instead of
                // rounding the logits at the bias magnitude.
                let nb = b.numel();
                for (r, row) in data.chunks_mut(c).enumerate() {
                    let brow = &b.data()[(r * c) % nb..(r * c) % nb + c];
                    let bmax = brow.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
                    for (v, &bv) in row.iter_mut().zip(brow) {
                        *v = *v + (bv - bmax);
                    }
                }
            }
            for row in data.chunks_mut(c) {
                softmax_row(row);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(value, Op::Softmax(self.id)))
    }

    /// 2x2 average pooling of `[h*w, c]` tokens laid out row-major on an
    /// `h x w` grid.
    pub fn pool_tokens(self, h: usize, w: usize) -> Result<Self> {
        let value = {
            let a = self.value();
            let (t, c) = a.dims2()?;
            if t != h * w || h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: "pool_tokens",
                    msg: format!("{t} tokens on a {h}x{w} grid"),
                });
            }
            let (oh, ow) = (h / 2, w / 2);
            let d = a.data();
            let q = E::lit(0.25);
            let mut out = vec![E::zero(); oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oy * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                        for j in 0..c {
                            out[o + j] = out[o + j] + d[i + j] * q;
                        }
                    }
                }
            }
            Tensor::new([oh * ow, c], out)?
        };
        Ok(self.unary(value, Op::PoolTokens { input: self.id, h, w }))
    }

    /// Nearest-neighbour 2x upsampling of `[h*w, c]` tokens.
    pub fn upsample_tokens(self, h: usize, w: usize) -> Result<Self> {
        let value = {
            let a = self.value();
            let (t, c) = a.dims2()?;
            if t != h * w {
                return Err(TensorError::Invalid {
                    op: "upsample_tokens",
                    msg: format!("{t} tokens on a {h}x{w} grid"),
                });
            }
            let d = a.data();
            let ow = 2 * w;
            let mut out = Vec::with_capacity(4 * t * c);
            for y in 0..2 * h {
                for x in 0..ow {
                    let i = ((y / 2) * w + x / 2) * c;
                    out.extend_from_slice(&d[i..i + c]);
                }
            }
            Tensor::new([4 * t, c], out)?
        };
        Ok(self.unary(value, Op::UpsampleTokens { input: self.id, h, w }))
    }

    /// Mean squared error over all elements.
    pub fn mse(self, target: Self) -> Result<Self> {
        let value = {
            let a = self.value();
            let b = target.value();
            if a.shape() != b.shape() {
                return Err(mismatch("mse", a.shape(), b.shape()));
            }
            let s: E = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
            Tensor::scalar(s / E::from_usize(a.numel()).unwrap())
        };
        let needs = self.tape.needs(&[self.id, target.id]);
        Ok(self.tape.push(value, Op::Mse(self.id, target.id), needs))
    }

    /// Euclidean norm over all elements. The gradient at zero is taken as
    /// zero.
    pub fn l2_norm(self) -> Self {
        let v = {
            let a = self.value();
            Tensor::scalar(a.data().iter().map(|&x| x * x).sum::<E>().sqrt())
        };
        self.unary(v, Op::L2Norm(self.id))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let value = {
            let a = self.value();
            if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
                return Err(TensorError::Invalid {
                    op: "gather",
                    msg: format!("index {bad} out of range for {} elements", a.numel()),
                });
            }
            let d = a.data();
            Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?
        };
        Ok(self.unary(value, Op::Gather { input: self.id, index }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let value = self.to_tensor().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Rows `ids` of a `[rows, c]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Self> {
        let (_, c) = self.value().dims2()?;
        let index = ids.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(index, [ids.len(), c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([3]));
        let y = x.softmax(None).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_bias_dominates() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([3]));
        let bias = Tensor::new([3], vec![1e4, 0.0, 0.0]).unwrap();
        let y = x.softmax(Some(&bias)).unwrap();
        let d = y.value().data().to_vec();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1].abs() < 1e-6 && d[2].abs() < 1e-6);
    }

    #[test]
    fn uniform_bias_cancels_exactly() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2, 3], vec![0.1, -0.7, 2.3, 1.0, 1.5, -0.2]).unwrap());
        let plain = x.softmax(None).unwrap().to_tensor();
        let shifted = x.softmax(Some(&Tensor::full([3], 1e4))).unwrap().to_tensor();
        assert_eq!(plain, shifted);
    }

    #[test]
    fn softmax_rejects_bad_bias() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        let bias = Tensor::zeros([2]);
        assert!(matches!(x.softmax(Some(&bias)), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let y = x.sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 4]);
    }

    #[test]
    fn mse_uses_mean_convention() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1], vec![2.0]).unwrap(), true);
        let zero = tape.constant(Tensor::zeros([1]));
        let y = x.mse(zero).unwrap();
        assert_eq!(y.item(), 4.0);
        let g = tape.backward(y).unwrap();
        // d/dx mean((x-0)^2) with n=1
        assert_eq!(g.get(x).data(), &[4.0]);

        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([2], vec![2.0, 0.0]).unwrap(), true);
        let zero = tape.constant(Tensor::zeros([2]));
        let y = x.mse(zero).unwrap();
        assert_eq!(y.item(), 2.0);
        assert_eq!(tape.backward(y).unwrap().get(x).data(), &[2.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        let y = x.sum();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        let y = x.scale(2.0);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarOutput(_))));
        // A rejected call does not consume the tape.
        assert!(tape.backward(y.sum()).is_ok());
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([3]), true);
        let unused = tape.leaf(Tensor::zeros([2, 2]), true);
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros([2, 2]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut oracle = [0f32; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    oracle[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let tape = Tape::<f32>::new();
        let va = tape.constant(Tensor::new([2, 3], a).unwrap());
        let vb = tape.constant(Tensor::new([3, 2], b).unwrap());
        let c = va.matmul(vb).unwrap();
        for (x, y) in c.value().data().iter().zip(oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = tape.constant(Tensor::zeros([2]));
        assert!(a.add(c).is_err());
        let d = tape.constant(Tensor::zeros([3]));
        assert_eq!(a.add(d).unwrap().shape(), vec![2, 3]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let s = c.slice(1, 2, 3).unwrap();
        assert_eq!(s.value().data(), &[5., 6.]);
        let r = Var::concat(&[a, a], 0).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([16, 1], |i| i as f64));
        let p = x.pool_tokens(4, 4).unwrap();
        assert_eq!(p.value().data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = p.upsample_tokens(2, 2).unwrap();
        assert_eq!(u.shape(), vec![16, 1]);
        assert_eq!(u.value().data()[0..4], [2.5, 2.5, 4.5, 4.5]);
    }
}
