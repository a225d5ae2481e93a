//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! shared [`Tape`]. [`Var::backward`] replays the nodes in reverse order,
//! which is a reverse topological order because inputs always precede their
//! outputs on the tape.
//!
//! A tape is single-writer: it is `!Send` and `!Sync`, so it cannot be
//! shared across threads.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    assemble, broadcast_offsets, broadcast_shapes, check_shape, gemm, numel, permute_data,
    split_axis, Element, MatView, Tensor,
};

enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    AddScalar {
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Expand {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Ln {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    L2Normalize {
        a: usize,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
pub struct Tape<T: Element> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Registers a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<T> {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<T> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

/// A handle to a value recorded on a [`Tape`].
pub struct Var<T: Element> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

/// Gradients produced by [`Var::backward`], indexed by tape position.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

// Elementwise binary op with suffix broadcasting: the shorter operand's
// shape must be a suffix of the longer one and is repeated cyclically.
fn broadcast_binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    name: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let out_shape = if sa.ends_with(sb) {
        sa.to_vec()
    } else if sb.ends_with(sa) {
        sb.to_vec()
    } else {
        return Err(shape_err!(
            "{name}: shapes {sa:?} and {sb:?} do not broadcast"
        ));
    };
    let n = numel(&out_shape);
    let (da, db) = (a.data(), b.data());
    let (la, lb) = (da.len(), db.len());
    let data = if la == n && lb == n {
        da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
    } else if la == n {
        da.chunks(lb)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(db)
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        db.chunks(la)
            .flat_map(|chunk| {
                da.iter()
                    .zip(chunk)
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    Ok(assemble(out_shape, data))
}

/// Sums `g` down to a suffix shape of `target`.
fn reduce_to<T: Element>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let len = numel(target);
    if len == g.len() {
        return assemble(target.to_vec(), g.data().to_vec());
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.data().chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    assemble(target.to_vec(), out)
}

fn repeat_to<T: Element>(small: &Tensor<T>, len: usize) -> Vec<T> {
    small.data().iter().copied().cycle().take(len).collect()
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Normalized dims of a matmul operand pair.
struct MatMulDims {
    m: usize,
    k: usize,
    n: usize,
    flat: bool,
    batch: Vec<usize>,
    off_a: Vec<usize>,
    off_b: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<MatMulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err!(
            "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
        ));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = if trans_b {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if k != kb {
        return Err(shape_err!(
            "matmul inner extents differ: {sa:?} @ {sb:?}{}",
            if trans_b { "^T" } else { "" }
        ));
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    if bb.is_empty() {
        // Shared right operand: fold all batch dims of `a` into its rows.
        return Ok(MatMulDims {
            m: numel(ba) * m,
            k,
            n,
            flat: true,
            batch: ba.to_vec(),
            off_a: vec![0],
            off_b: vec![0],
        });
    }
    let batch = broadcast_shapes(ba, bb)
        .ok_or_else(|| shape_err!("matmul batch extents do not broadcast: {sa:?} @ {sb:?}"))?;
    let off_a = broadcast_offsets(ba, &batch);
    let off_b = broadcast_offsets(bb, &batch);
    Ok(MatMulDims {
        m,
        k,
        n,
        flat: false,
        batch,
        off_a,
        off_b,
    })
}

impl MatMulDims {
    fn out_shape(&self, sa: &[usize]) -> Vec<usize> {
        if self.flat {
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(self.n);
            s
        } else {
            let mut s = self.batch.clone();
            s.push(self.m);
            s.push(self.n);
            s
        }
    }

    fn b_view(&self, off: usize, trans_b: bool) -> MatView {
        let (k, n) = (self.k, self.n);
        if trans_b {
            MatView {
                offset: off * n * k,
                rs: 1,
                cs: k,
            }
        } else {
            MatView {
                offset: off * k * n,
                rs: n,
                cs: 1,
            }
        }
    }
}

impl<T: Element> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<T>) -> Result<()> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(Error::Usage("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value().map(f)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), "add", |x, y| x + y)?;
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(
            v,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), "sub", |x, y| x - y)?;
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(
            v,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), "mul", |x, y| x * y)?;
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(
            v,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn scale(&self, factor: f64) -> Var<T> {
        let factor = T::lit(factor);
        let v = self.map(|x| x * factor);
        self.unary(v, Op::Scale { a: self.id, factor })
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::lit(c);
        let v = self.map(|x| x + c);
        self.unary(v, Op::AddScalar { a: self.id })
    }

    /// Batched matrix product `[..., m, k] @ [..., k, n]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, false)
    }

    /// Batched product with the right operand transposed: `[..., m, k] @ [..., n, k]^T`.
    pub fn matmul_t(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
            let out_shape = d.out_shape(a.shape());
            let mut out = vec![T::zero(); numel(&out_shape)];
            let (m, k, n) = (d.m, d.k, d.n);
            for (i, (&oa, &ob)) in d.off_a.iter().zip(&d.off_b).enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    a.data(),
                    MatView {
                        offset: oa * m * k,
                        rs: k,
                        cs: 1,
                    },
                    b.data(),
                    d.b_view(ob, trans_b),
                    T::zero(),
                    &mut out,
                    MatView {
                        offset: i * m * n,
                        rs: n,
                        cs: 1,
                    },
                );
            }
            assemble(out_shape, out)
        };
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        self.same_tape(w)?;
        if let Some(b) = b {
            self.same_tape(b)?;
        }
        let value = {
            let x = self.value();
            let wv = w.value();
            let sx = x.shape();
            if wv.ndim() != 2 || sx.is_empty() || sx[sx.len() - 1] != wv.shape()[0] {
                return Err(shape_err!(
                    "linear: input {sx:?} incompatible with weight {:?}",
                    wv.shape()
                ));
            }
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let rows = x.len() / k;
            let mut out = vec![T::zero(); rows * n];
            if let Some(b) = b {
                let bv = b.value();
                if bv.shape() != [n] {
                    return Err(shape_err!(
                        "linear: bias {:?} does not match width {n}",
                        bv.shape()
                    ));
                }
                for row in out.chunks_mut(n) {
                    row.copy_from_slice(bv.data());
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(
                rows,
                k,
                n,
                x.data(),
                MatView {
                    offset: 0,
                    rs: k,
                    cs: 1,
                },
                wv.data(),
                MatView {
                    offset: 0,
                    rs: n,
                    cs: 1,
                },
                beta,
                &mut out,
                MatView {
                    offset: 0,
                    rs: n,
                    cs: 1,
                },
            );
            let mut shape = sx.to_vec();
            *shape.last_mut().unwrap() = n;
            assemble(shape, out)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.needs_grad(&ids);
        Ok(self.tape.push(
            value,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let v = self.value().reshape(shape)?.with_requires_grad(false);
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let value = {
            let a = self.value();
            let nd = a.ndim();
            let mut seen = vec![false; nd];
            if perm.len() != nd
                || perm
                    .iter()
                    .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
            {
                return Err(shape_err!(
                    "invalid permutation {perm:?} for shape {:?}",
                    a.shape()
                ));
            }
            let (shape, data) = permute_data(a.data(), a.shape(), perm);
            assemble(shape, data)
        };
        Ok(self.unary(
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Var<T>> {
        let nd = self.value().ndim();
        if ax0 >= nd || ax1 >= nd {
            return Err(shape_err!(
                "transpose axes ({ax0}, {ax1}) out of range for rank {nd}"
            ));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(ax0, ax1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        for p in &parts[1..] {
            first.same_tape(p)?;
        }
        let value = {
            let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(shape_err!("concat axis {axis} out of range for {s0:?}"));
            }
            let mut ext = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != s0.len()
                    || s.iter()
                        .zip(&s0)
                        .enumerate()
                        .any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(shape_err!(
                        "concat: shape {s:?} incompatible with {s0:?} along axis {axis}"
                    ));
                }
                ext += s[axis];
            }
            let (outer, _, inner) = split_axis(&s0, axis);
            let mut data = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                for v in &vals {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = s0;
            shape[axis] = ext;
            assemble(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.needs_grad(&ids);
        Ok(first.tape.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(shape_err!(
                    "slice [{start}, {}) along axis {axis} out of range for {s:?}",
                    start + len
                ));
            }
            let (outer, ext, inner) = split_axis(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            assemble(shape, data)
        };
        Ok(self.unary(
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Selects entries along `axis`; indices may repeat.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Var<T>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if axis >= s.len() || indices.is_empty() || indices.iter().any(|&i| i >= s[axis]) {
                return Err(shape_err!(
                    "gather {indices:?} along axis {axis} out of range for {s:?}"
                ));
            }
            let (outer, ext, inner) = split_axis(s, axis);
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    let base = (o * ext + i) * inner;
                    data.extend_from_slice(&a.data()[base..base + inner]);
                }
            }
            let mut shape = s.to_vec();
            shape[axis] = indices.len();
            assemble(shape, data)
        };
        Ok(self.unary(
            value,
            Op::Gather {
                a: self.id,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Repeats the tensor over new leading axes.
    pub fn expand(&self, leading: &[usize]) -> Result<Var<T>> {
        check_shape(leading)?;
        let value = {
            let a = self.value();
            let mut shape = leading.to_vec();
            shape.extend_from_slice(a.shape());
            let n = numel(&shape);
            assemble(shape, repeat_to(&a, n))
        };
        Ok(self.unary(value, Op::Expand { a: self.id }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let value = {
            let a = self.value();
            if axis >= a.ndim() {
                return Err(shape_err!(
                    "softmax axis {axis} out of range for {:?}",
                    a.shape()
                ));
            }
            if !a.is_finite() {
                return Err(Error::NumericInput(
                    "softmax input contains non-finite values".into(),
                ));
            }
            let (outer, ext, inner) = split_axis(a.shape(), axis);
            let src = a.data();
            let mut out = vec![T::zero(); src.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |e: usize| o * ext * inner + e * inner + j;
                    let mut max = T::neg_infinity();
                    for e in 0..ext {
                        max = max.max(src[at(e)]);
                    }
                    let mut total = T::zero();
                    for e in 0..ext {
                        let v = (src[at(e)] - max).exp();
                        out[at(e)] = v;
                        total += v;
                    }
                    for e in 0..ext {
                        out[at(e)] /= total;
                    }
                }
            }
            assemble(a.shape().to_vec(), out)
        };
        Ok(self.unary(value, Op::Softmax { a: self.id, axis }))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let eps = T::lit(eps);
        let (value, mean, rstd) = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err!(
                    "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                    g.shape(),
                    b.shape()
                ));
            }
            let rows = x.len() / d;
            let mut out = vec![T::zero(); x.len()];
            let mut means = Vec::with_capacity(rows);
            let mut rstds = Vec::with_capacity(rows);
            let inv_d = T::one() / T::lit(d as f64);
            for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps).sqrt();
                for ((o, &v), (&gi, &bi)) in
                    dst.iter_mut().zip(row).zip(g.data().iter().zip(b.data()))
                {
                    *o = (v - mean) * rstd * gi + bi;
                }
                means.push(mean);
                rstds.push(rstd);
            }
            (assemble(x.shape().to_vec(), out), means, rstds)
        };
        let rg = self.tape.needs_grad(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let v = self.map(gelu_scalar);
        self.unary(v, Op::Gelu { a: self.id })
    }

    pub fn relu(&self) -> Var<T> {
        let v = self.map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu { a: self.id })
    }

    pub fn sqrt(&self) -> Var<T> {
        let v = self.map(|x| x.sqrt());
        self.unary(v, Op::Sqrt { a: self.id })
    }

    pub fn ln(&self) -> Var<T> {
        let v = self.map(|x| x.ln());
        self.unary(v, Op::Ln { a: self.id })
    }

    pub fn exp(&self) -> Var<T> {
        let v = self.map(|x| x.exp());
        self.unary(v, Op::Exp { a: self.id })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum { a: self.id })
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Var<T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let v = reduce_axis(&self.value(), axis, false)?;
        Ok(self.unary(v, Op::SumAxis { a: self.id, axis }))
    }

    /// Mean along `axis`, dropping it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<T>> {
        let v = reduce_axis(&self.value(), axis, true)?;
        Ok(self.unary(v, Op::MeanAxis { a: self.id, axis }))
    }

    /// Scales each last-axis row to unit Euclidean norm: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<T>> {
        let eps = T::lit(eps);
        let value = {
            let a = self.value();
            let d = *a
                .shape()
                .last()
                .ok_or_else(|| shape_err!("l2_normalize on a scalar"))?;
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(d) {
                let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
            assemble(a.shape().to_vec(), out)
        };
        Ok(self.unary(value, Op::L2Normalize { a: self.id, eps }))
    }

    /// Reverse pass from a one-element loss.
    ///
    /// Every leaf that requires a gradient receives one of its own shape,
    /// zero-filled when the loss does not depend on it.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[self.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        }
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in backward_node(&nodes, node, g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn reduce_axis<T: Element>(a: &Tensor<T>, axis: usize, mean: bool) -> Result<Tensor<T>> {
    if axis >= a.ndim() {
        return Err(shape_err!(
            "reduction axis {axis} out of range for {:?}",
            a.shape()
        ));
    }
    let (outer, ext, inner) = split_axis(a.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            let src = &a.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    if mean {
        let inv = T::one() / T::lit(ext as f64);
        out.iter_mut().for_each(|v| *v *= inv);
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Ok(assemble(shape, out))
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    assemble(
        a.shape().to_vec(),
        a.data().iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn backward_node<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: Tensor<T>,
) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add { a, b } => vec![
            (*a, reduce_to(&g, val(*a).shape())),
            (*b, reduce_to(&g, val(*b).shape())),
        ],
        Op::Sub { a, b } => {
            let gb = reduce_to(&g, val(*b).shape()).map(|v| -v);
            vec![(*a, reduce_to(&g, val(*a).shape())), (*b, gb)]
        }
        Op::Mul { a, b } => {
            let mut res = Vec::new();
            if wants(*a) {
                let bb = repeat_to(val(*b), g.len());
                res.push((
                    *a,
                    reduce_to(&zip_map(&g, &bb, |x, y| x * y), val(*a).shape()),
                ));
            }
            if wants(*b) {
                let aa = repeat_to(val(*a), g.len());
                res.push((
                    *b,
                    reduce_to(&zip_map(&g, &aa, |x, y| x * y), val(*b).shape()),
                ));
            }
            res
        }
        Op::Scale { a, factor } => {
            let f = *factor;
            vec![(*a, g.map(|v| v * f))]
        }
        Op::AddScalar { a } => vec![(*a, g)],
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let d = matmul_dims(av.shape(), bv.shape(), *trans_b).expect("validated in forward");
            let (m, k, n) = (d.m, d.k, d.n);
            let mut res = Vec::new();
            if wants(*a) {
                let mut ga = vec![T::zero(); av.len()];
                for (i, (&oa, &ob)) in d.off_a.iter().zip(&d.off_b).enumerate() {
                    // dA += dC @ B^T
                    let bt = if *trans_b {
                        MatView {
                            offset: ob * n * k,
                            rs: k,
                            cs: 1,
                        }
                    } else {
                        MatView {
                            offset: ob * k * n,
                            rs: 1,
                            cs: n,
                        }
                    };
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        MatView {
                            offset: i * m * n,
                            rs: n,
                            cs: 1,
                        },
                        bv.data(),
                        bt,
                        T::one(),
                        &mut ga,
                        MatView {
                            offset: oa * m * k,
                            rs: k,
                            cs: 1,
                        },
                    );
                }
                res.push((*a, assemble(av.shape().to_vec(), ga)));
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); bv.len()];
                for (i, (&oa, &ob)) in d.off_a.iter().zip(&d.off_b).enumerate() {
                    if *trans_b {
                        // dB (n×k) += dC^T @ A
                        gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            MatView {
                                offset: i * m * n,
                                rs: 1,
                                cs: n,
                            },
                            av.data(),
                            MatView {
                                offset: oa * m * k,
                                rs: k,
                                cs: 1,
                            },
                            T::one(),
                            &mut gb,
                            MatView {
                                offset: ob * n * k,
                                rs: k,
                                cs: 1,
                            },
                        );
                    } else {
                        // dB (k×n) += A^T @ dC
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            MatView {
                                offset: oa * m * k,
                                rs: 1,
                                cs: k,
                            },
                            g.data(),
                            MatView {
                                offset: i * m * n,
                                rs: n,
                                cs: 1,
                            },
                            T::one(),
                            &mut gb,
                            MatView {
                                offset: ob * k * n,
                                rs: n,
                                cs: 1,
                            },
                        );
                    }
                }
                res.push((*b, assemble(bv.shape().to_vec(), gb)));
            }
            res
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / k;
            let mut res = Vec::new();
            if wants(*x) {
                let mut gx = vec![T::zero(); xv.len()];
                gemm(
                    rows,
                    n,
                    k,
                    g.data(),
                    MatView {
                        offset: 0,
                        rs: n,
                        cs: 1,
                    },
                    wv.data(),
                    MatView {
                        offset: 0,
                        rs: 1,
                        cs: n,
                    },
                    T::zero(),
                    &mut gx,
                    MatView {
                        offset: 0,
                        rs: k,
                        cs: 1,
                    },
                );
                res.push((*x, assemble(xv.shape().to_vec(), gx)));
            }
            if wants(*w) {
                let mut gw = vec![T::zero(); wv.len()];
                gemm(
                    k,
                    rows,
                    n,
                    xv.data(),
                    MatView {
                        offset: 0,
                        rs: 1,
                        cs: k,
                    },
                    g.data(),
                    MatView {
                        offset: 0,
                        rs: n,
                        cs: 1,
                    },
                    T::zero(),
                    &mut gw,
                    MatView {
                        offset: 0,
                        rs: n,
                        cs: 1,
                    },
                );
                res.push((*w, assemble(wv.shape().to_vec(), gw)));
            }
            if let Some(b) = b {
                if wants(*b) {
                    res.push((*b, reduce_to(&g, &[n])));
                }
            }
            res
        }
        Op::Reshape { a } => {
            let shape = val(*a).shape().to_vec();
            vec![(*a, assemble(shape, g.into_data()))]
        }
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (shape, data) = permute_data(g.data(), g.shape(), &inv);
            vec![(*a, assemble(shape, data))]
        }
        Op::Concat { inputs, axis } => {
            let (outer, ext, inner) = split_axis(g.shape(), *axis);
            let mut res = Vec::with_capacity(inputs.len());
            let mut start = 0;
            for &i in inputs {
                let s = val(i).shape();
                let len = s[*axis];
                if wants(i) {
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    res.push((i, assemble(s.to_vec(), data)));
                }
                start += len;
            }
            res
        }
        Op::Slice { a, axis, start } => {
            let s = val(*a).shape();
            let (outer, ext, inner) = split_axis(s, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![T::zero(); val(*a).len()];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, assemble(s.to_vec(), data))]
        }
        Op::Gather { a, axis, indices } => {
            let s = val(*a).shape();
            let (outer, ext, inner) = split_axis(s, *axis);
            let mut data = vec![T::zero(); val(*a).len()];
            let gd = g.data();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = (o * indices.len() + j) * inner;
                    let dst = (o * ext + i) * inner;
                    for (d, &v) in data[dst..dst + inner].iter_mut().zip(&gd[src..src + inner]) {
                        *d += v;
                    }
                }
            }
            vec![(*a, assemble(s.to_vec(), data))]
        }
        Op::Expand { a } => vec![(*a, reduce_to(&g, val(*a).shape()))],
        Op::Softmax { a, axis } => {
            let (outer, ext, inner) = split_axis(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |e: usize| o * ext * inner + e * inner + j;
                    let dot: T = (0..ext).map(|e| y[at(e)] * gd[at(e)]).sum();
                    for e in 0..ext {
                        gx[at(e)] = y[at(e)] * (gd[at(e)] - dot);
                    }
                }
            }
            vec![(*a, assemble(out.shape().to_vec(), gx))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gv = val(*gain).data();
            let d = gv.len();
            let inv_d = T::one() / T::lit(d as f64);
            let mut gx = vec![T::zero(); xv.len()];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for (r, ((row, grow), dst)) in xv
                .data()
                .chunks(d)
                .zip(g.data().chunks(d))
                .zip(gx.chunks_mut(d))
                .enumerate()
            {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_dx = T::zero();
                let mut sum_dxx = T::zero();
                for i in 0..d {
                    xhat[i] = (row[i] - mu) * rs;
                    dxhat[i] = grow[i] * gv[i];
                    gg[i] += grow[i] * xhat[i];
                    gb[i] += grow[i];
                    sum_dx += dxhat[i];
                    sum_dxx += dxhat[i] * xhat[i];
                }
                let (m1, m2) = (sum_dx * inv_d, sum_dxx * inv_d);
                for i in 0..d {
                    dst[i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            vec![
                (*x, assemble(xv.shape().to_vec(), gx)),
                (*gain, assemble(vec![d], gg)),
                (*bias, assemble(vec![d], gb)),
            ]
        }
        Op::Gelu { a } => vec![(
            *a,
            zip_map(&g, val(*a).data(), |gv, x| gv * gelu_grad_scalar(x)),
        )],
        Op::Relu { a } => vec![(
            *a,
            zip_map(&g, val(*a).data(), |gv, x| {
                if x > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }),
        )],
        Op::Sqrt { a } => vec![(*a, zip_map(&g, out.data(), |gv, y| gv / (y + y)))],
        Op::Ln { a } => vec![(*a, zip_map(&g, val(*a).data(), |gv, x| gv / x))],
        Op::Exp { a } => vec![(*a, zip_map(&g, out.data(), |gv, y| gv * y))],
        Op::Sum { a } => {
            let gv = g.data()[0];
            vec![(*a, Tensor::full(val(*a).shape().to_vec(), gv))]
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let s = val(*a).shape();
            let (outer, ext, inner) = split_axis(s, *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::lit(ext as f64)
            } else {
                T::one()
            };
            let mut data = Vec::with_capacity(val(*a).len());
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..ext {
                    data.extend(src.iter().map(|&v| v * scale));
                }
            }
            vec![(*a, assemble(s.to_vec(), data))]
        }
        Op::L2Normalize { a, eps } => {
            let xv = val(*a);
            let d = *xv.shape().last().unwrap();
            let mut gx = vec![T::zero(); xv.len()];
            for ((row, (y, gr)), dst) in xv
                .data()
                .chunks(d)
                .zip(out.data().chunks(d).zip(g.data().chunks(d)))
                .zip(gx.chunks_mut(d))
            {
                let norm = (row.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for i in 0..d {
                    dst[i] = (gr[i] - y[i] * dot) / norm;
                }
            }
            vec![(*a, assemble(xv.shape().to_vec(), gx))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = r.matmul(&c).unwrap();
        assert_eq!(p.shape(), vec![1, 1]);
        assert_eq!(p.value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 0.0], &[0.5, 0.5]),
            (&[1000.0, 1000.0], &[0.5, 0.5]),
            (&[0.0, 3f64.ln()], &[0.25, 0.75]),
        ];
        for (input, want) in cases {
            let x = tape.constant(t(&[2], input));
            let y = x.softmax(0).unwrap();
            for (a, b) in y.value().data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let bad = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(bad.softmax(0), Err(Error::NumericInput(_))));
    }

    #[test]
    fn layer_norm_edge_rows() {
        let tape = Tape::new();
        let gain = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let bias = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let flat = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(
            flat.layer_norm(&gain, &bias, 1e-5).unwrap().value().data(),
            &[0.0, 0.0, 0.0]
        );

        let g2 = tape.constant(t(&[2], &[1.0, 1.0]));
        let b2 = tape.constant(t(&[2], &[0.0, 0.0]));
        let unit = tape.constant(t(&[2], &[-1.0, 1.0]));
        let y = unit.layer_norm(&g2, &b2, 1e-5).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-5);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_closed_forms() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let loss = x.sum();
        assert_eq!(
            loss.backward().unwrap().get(&x).unwrap().data(),
            &[1.0, 1.0]
        );
        let loss = x.mul(&x).unwrap().sum();
        assert_eq!(
            loss.backward().unwrap().get(&x).unwrap().data(),
            &[2.0, 4.0]
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let grads = x.sum().backward().unwrap();
        assert_eq!(grads.get(&unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn chain_rule_on_two_op_compositions() {
        // d/dx sum(exp(2x)) = 2 exp(2x)
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-0.5, 0.1, 0.7]).with_requires_grad(true));
        let grads = x.scale(2.0).exp().sum().backward().unwrap();
        for (g, &xv) in grads.get(&x).unwrap().data().iter().zip(&[-0.5, 0.1, 0.7]) {
            assert!((g - 2.0 * (2.0 * xv as f64).exp()).abs() < 1e-12);
        }
        // d/dx sum(sqrt(x^2 + 1)) = x / sqrt(x^2 + 1)
        let y = x.mul(&x).unwrap().add_scalar(1.0).sqrt().sum();
        let grads = y.backward().unwrap();
        for (g, &xv) in grads
            .get(&x)
            .unwrap()
            .data()
            .iter()
            .zip(&[-0.5f64, 0.1, 0.7])
        {
            assert!((g - xv / (xv * xv + 1.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_skip_constant_subgraphs() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let y = c.scale(3.0);
        assert!(!y.requires_grad());
        let grads = y.mul(&w).unwrap().sum().backward().unwrap();
        assert!(grads.get(&c).is_none());
        assert_eq!(grads.get(&w).unwrap().data(), &[3.0, 6.0]);
    }
}
