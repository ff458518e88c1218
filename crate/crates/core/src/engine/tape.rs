//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough state to
//! replay the chain rule. Nodes are appended in evaluation order, so the
//! reverse walk in [`Tape::backward`] is already topological. A tape is
//! built per step and dropped afterwards.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{axis_blocks, strides};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Elementwise op with a user-supplied derivative.
///
/// Exists so callers can extend the op set, and so the gradient checker
/// can be validated against a deliberately wrong backward.
pub trait CustomUnary: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, x: &Tensor) -> Tensor;
    /// Gradient with respect to the input, given input, output and upstream gradient.
    fn backward(&self, x: &Tensor, y: &Tensor, grad: &Tensor) -> Tensor;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    MaxAll { input: usize, argmax: usize },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softmax(usize),
    Silu(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    Repeat { input: usize, axis: usize, n: usize },
    Custom(usize, Arc<dyn CustomUnary>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by node.
#[derive(Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, idx)| self.grads[*idx].as_ref())
    }

    /// Gradient for every registered parameter. Parameters the loss does not
    /// reach get an all-zero gradient.
    pub fn named(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, idx)| {
                let g = self.grads[*idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(tape.nodes[*idx].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

// c[m,n] = a[m,k] b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// da[m,k] = g[m,n] b[k,n]^T
fn mm_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

// db[k,n] = a[m,k]^T g[m,n]
fn mm_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    db
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let nd = out_shape.len();
    // a fixed last axis moves whole contiguous rows
    let inner = if nd > 0 && perm[nd - 1] == nd - 1 {
        in_shape[nd - 1]
    } else {
        1
    };
    let outer_axes = if inner > 1 { nd - 1 } else { nd };
    let src_strides: Vec<usize> = perm[..outer_axes].iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; outer_axes];
    let mut offset = 0usize;
    let src = x.data();
    for _ in 0..n / inner.max(1) {
        out.extend_from_slice(&src[offset..offset + inner]);
        for ax in (0..outer_axes).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes, i.e. evaluated ops.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var, TensorError> {
        self.push("leaf", value, Op::Leaf, needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    /// An anonymous leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    /// A named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var, TensorError> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(TensorError::invalid(
                "param",
                format!("duplicate parameter name {name}"),
            ));
        }
        let v = self.leaf(value, true)?;
        self.params.push((name.to_string(), v.idx));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        let needs = self.needs(&[ia, ib]);
        self.push(name, out, op(ia, ib), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| x + c);
        let needs = self.needs(&[ia]);
        self.push("add_scalar", out, Op::AddScalar(ia), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| x * c);
        let needs = self.needs(&[ia]);
        self.push("mul_scalar", out, Op::MulScalar(ia, c), needs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = Tensor::new(vec![m, n], mm(va.data(), vb.data(), m, k, n))?;
        let needs = self.needs(&[ia, ib]);
        self.push("matmul", out, Op::MatMul(ia, ib), needs)
    }

    /// Batched matrix product `[b,m,k] x [b,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.ndim() != 3 || vb.ndim() != 3 || va.shape()[0] != vb.shape()[0] || va.shape()[2] != vb.shape()[1] {
            return Err(TensorError::shape("bmm", va.shape(), vb.shape()));
        }
        let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        for b in 0..bs {
            data.extend(mm(
                &va.data()[b * m * k..(b + 1) * m * k],
                &vb.data()[b * k * n..(b + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::new(vec![bs, m, n], data)?;
        let needs = self.needs(&[ia, ib]);
        self.push("bmm", out, Op::BatchMatMul(ia, ib), needs)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != va.ndim() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(TensorError::shape("permute", va.shape(), perm));
        }
        let out = permute_data(va, perm);
        let needs = self.needs(&[ia]);
        self.push("permute", out, Op::Permute(ia, perm.to_vec()), needs)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshaped(shape)?;
        let needs = self.needs(&[ia]);
        self.push("reshape", out, Op::Reshape(ia), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::invalid("concat", "no inputs"));
        };
        let base = self.nodes[first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(ax, (x, y))| ax != axis && x != y) {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&idx);
        self.push("concat", out, Op::Concat(idx, axis), needs)
    }

    /// Entries `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if axis >= va.ndim() || start + len > va.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, va.shape()),
            ));
        }
        let (outer, n, inner) = axis_blocks(va.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[ia]);
        self.push("slice", out, Op::Slice { input: ia, axis, start }, needs)
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        scale_by_len: bool,
    ) -> Result<(usize, Tensor), TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if axis >= va.ndim() {
            return Err(TensorError::invalid(
                name,
                format!("axis {axis} out of range for {:?}", va.shape()),
            ));
        }
        let (outer, n, inner) = axis_blocks(va.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &va.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale_by_len {
            let inv = 1.0 / n as f64;
            data.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        Ok((ia, Tensor::new(shape, data)?))
    }

    /// Sum over one axis, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (ia, out) = self.reduce_axis("sum", a, axis, false)?;
        let needs = self.needs(&[ia]);
        self.push("sum", out, Op::Sum(ia, axis), needs)
    }

    /// Mean over one axis, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (ia, out) = self.reduce_axis("mean", a, axis, true)?;
        let needs = self.needs(&[ia]);
        self.push("mean", out, Op::Mean(ia, axis), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let needs = self.needs(&[ia]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(ia), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Maximum over all entries. The gradient flows to the first maximal entry.
    pub fn max_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if va.numel() == 0 {
            return Err(TensorError::invalid("max_all", "empty tensor"));
        }
        let mut argmax = 0;
        for (i, &v) in va.data().iter().enumerate() {
            if v > va.data()[argmax] {
                argmax = i;
            }
        }
        let out = Tensor::scalar(va.data()[argmax]);
        let needs = self.needs(&[ia]);
        self.push("max_all", out, Op::MaxAll { input: ia, argmax }, needs)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let needs = self.needs(&[ia]);
        self.push(name, out, op(ia), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("silu", a, |x| x / (1.0 + (-x).exp()), Op::Silu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let Some(&n) = va.shape().last() else {
            return Err(TensorError::invalid("softmax", "scalar input"));
        };
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[ia]);
        self.push("softmax", out, Op::Softmax(ia), needs)
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let Some(&n) = va.shape().last() else {
            return Err(TensorError::invalid("layer_norm", "scalar input"));
        };
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.numel() / n.max(1));
        for row in data.chunks_mut(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[ia]);
        self.push("layer_norm", out, Op::LayerNorm { input: ia, inv_std }, needs)
    }

    /// Insert a new axis of size `n` at position `axis`, repeating the input.
    pub fn repeat(&mut self, a: Var, axis: usize, n: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if axis > va.ndim() {
            return Err(TensorError::invalid(
                "repeat",
                format!("axis {axis} out of range for {:?}", va.shape()),
            ));
        }
        let outer: usize = va.shape()[..axis].iter().product();
        let inner: usize = va.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &va.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let mut shape = va.shape().to_vec();
        shape.insert(axis, n);
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[ia]);
        self.push("repeat", out, Op::Repeat { input: ia, axis, n }, needs)
    }

    pub fn custom(&mut self, a: Var, f: Arc<dyn CustomUnary>) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = f.forward(&self.nodes[ia].value);
        if out.shape() != self.nodes[ia].value.shape() {
            return Err(TensorError::shape(f.name(), self.nodes[ia].value.shape(), out.shape()));
        }
        let needs = self.needs(&[ia]);
        let name = f.name();
        self.push(name, out, Op::Custom(ia, f), needs)
    }

    /// Reverse pass from a scalar loss. Gradients start from zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let mut grads = Gradients {
            tape: self.id,
            grads: vec![None; self.nodes.len()],
            params: self.params.clone(),
        };
        self.backward_accumulate(loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass that adds into `acc` instead of starting from zero, so
    /// repeated calls sum their gradients.
    pub fn backward_accumulate(&self, loss: Var, acc: &mut Gradients) -> Result<(), TensorError> {
        let il = self.check(loss)?;
        if acc.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        acc.grads.resize(self.nodes.len(), None);
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                accumulate(&mut acc.grads[i], g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.zip_map(val(*b), |x, y| x * y)?);
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if wants(*a) {
                    accumulate(&mut grads[*a], g.zip_map(vb, |x, y| x / y)?);
                }
                if wants(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(&node.value, |x, o| x * o)?;
                    accumulate(&mut grads[*b], t.zip_map(vb, |x, y| -x / y)?);
                }
            }
            Op::AddScalar(a) => accumulate(&mut grads[*a], g.clone()),
            Op::MulScalar(a, c) => accumulate(&mut grads[*a], g.map(|x| x * c)),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(*a) {
                    let d = mm_grad_lhs(g.data(), vb.data(), m, k, n);
                    accumulate(&mut grads[*a], Tensor::new(vec![m, k], d)?);
                }
                if wants(*b) {
                    let d = mm_grad_rhs(va.data(), g.data(), m, k, n);
                    accumulate(&mut grads[*b], Tensor::new(vec![k, n], d)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if wants(*a) {
                    let mut d = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        d.extend(mm_grad_lhs(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    accumulate(&mut grads[*a], Tensor::new(vec![bs, m, k], d)?);
                }
                if wants(*b) {
                    let mut d = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        d.extend(mm_grad_rhs(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    accumulate(&mut grads[*b], Tensor::new(vec![bs, k, n], d)?);
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(&mut grads[*a], permute_data(g, &inv));
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[*a], g.clone().reshaped(val(*a).shape())?);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(&mut grads[p], Tensor::new(val(p).shape().to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let vi = val(*input);
                let (outer, n, inner) = axis_blocks(vi.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; vi.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(&mut grads[*input], Tensor::new(vi.shape().to_vec(), d)?);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let va = val(*a);
                let (outer, n, inner) = axis_blocks(va.shape(), *axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut d = Vec::with_capacity(va.numel());
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        d.extend(src.iter().map(|x| x * scale));
                    }
                }
                accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d)?);
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                accumulate(&mut grads[*a], Tensor::full(val(*a).shape(), gv));
            }
            Op::MaxAll { input, argmax } => {
                let mut d = Tensor::zeros(val(*input).shape());
                d.data_mut()[*argmax] = g.item()?;
                accumulate(&mut grads[*input], d);
            }
            Op::Exp(a) => accumulate(&mut grads[*a], g.zip_map(&node.value, |x, y| x * y)?),
            Op::Log(a) => accumulate(&mut grads[*a], g.zip_map(val(*a), |x, y| x / y)?),
            Op::Sqrt(a) => accumulate(&mut grads[*a], g.zip_map(&node.value, |x, y| 0.5 * x / y)?),
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |x, v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    x * s * (1.0 + v * (1.0 - s))
                })?;
                accumulate(&mut grads[*a], d);
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                accumulate(&mut grads[*a], Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm { input, inv_std } => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let nf = n as f64;
                let mut d = Vec::with_capacity(g.numel());
                for ((gr, yr), inv) in g.data().chunks(n).zip(node.value.data().chunks(n)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / nf;
                    d.extend(gr.iter().zip(yr).map(|(x, y)| inv * (x - mean_g - y * mean_gy)));
                }
                accumulate(&mut grads[*input], Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Repeat { input, axis, n } => {
                let vi = val(*input);
                let outer: usize = vi.shape()[..*axis].iter().product();
                let inner: usize = vi.shape()[*axis..].iter().product();
                let mut d = vec![0.0; vi.numel()];
                for o in 0..outer {
                    let dst = &mut d[o * inner..(o + 1) * inner];
                    for r in 0..*n {
                        let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                accumulate(&mut grads[*input], Tensor::new(vi.shape().to_vec(), d)?);
            }
            Op::Custom(a, f) => {
                let d = f.backward(val(*a), &node.value, g);
                accumulate(&mut grads[*a], d);
            }
        }
        Ok(())
    }
}
