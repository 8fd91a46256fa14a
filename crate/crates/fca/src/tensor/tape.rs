//! Wengert tape: records each forward op into an arena, replays in reverse
//! for gradients. Nodes are created in topological order by construction, so
//! reverse creation order is a valid backward order. Values are immutable
//! once recorded; only grad buffers mutate.

use super::ops::{self, BinKind};
use super::{BoolMask, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm { src: Var, eps: f64 },
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: OpKind,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: OpKind, requires_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value out of {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, OpKind::Leaf, requires_grad)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- forward ops ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (shape, data) = ops::binary_broadcast(
            self.shape(a),
            self.value(a).data(),
            self.shape(b),
            self.value(b).data(),
            kind,
        )?;
        let value = Tensor::new(shape, data)?;
        let op = match kind {
            BinKind::Add => OpKind::Add(a, b),
            BinKind::Sub => OpKind::Sub(a, b),
            BinKind::Mul => OpKind::Mul(a, b),
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    /// Multiplication by a compile-time constant (not a tape value).
    pub fn scale(&mut self, src: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(src).map(|x| x * f);
        let rg = self.needs(src);
        self.push(value, OpKind::Scale(src, factor), rg)
    }

    /// Batched matrix product. `a` is [..., m, k]; `b` is [k, n] or has batch
    /// dims equal to `a`'s. Output is [..., m, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Shape(format!("matmul requires rank >= 2: {ash:?} x {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!("matmul inner extents differ: {ash:?} x {bsh:?}")));
        }
        let a_batch: usize = ash[..ash.len() - 2].iter().product();
        let b_batch: usize = bsh[..bsh.len() - 2].iter().product();
        if bsh.len() != 2 && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::Shape(format!(
                "matmul batch dims must match ({ash:?} x {bsh:?})"
            )));
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![T::zero(); a_batch * m * n];
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        for batch in 0..a_batch {
            let a_off = batch * m * k;
            let b_off = if b_batch == 1 && bsh.len() == 2 { 0 } else { batch * k * n };
            ops::matmul_2d(
                &adata[a_off..a_off + m * k],
                &bdata[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut data[batch * m * n..(batch + 1) * m * n],
            );
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, OpKind::Matmul(a, b), rg))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(src).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(src),
                shape
            )));
        }
        let value = Tensor::new(shape.to_vec(), self.value(src).data().to_vec())?;
        let rg = self.needs(src);
        Ok(self.push(value, OpKind::Reshape(src), rg))
    }

    pub fn permute(&mut self, src: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(src).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "invalid permutation {:?} for rank {}",
                axes, rank
            )));
        }
        let (shape, data) = ops::permute_data(self.shape(src), self.value(src).data(), axes);
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(src);
        Ok(self.push(value, OpKind::Permute(src, axes.to_vec()), rg))
    }

    /// Contiguous slice of `len` extents along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice axis {axis} [{start}..{}) out of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mid = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src_data = self.value(src).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * mid + start) * inner;
            data.extend_from_slice(&src_data[from..from + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(src);
        Ok(self.push(value, OpKind::Slice { src, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of rank {}", first.len())));
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat mismatch: {:?} vs {:?} on axis {axis}",
                    sh, first
                )));
            }
            total_axis += sh[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut data = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for &p in parts {
            let mid = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let from = o * mid * inner;
                data[dst..dst + mid * inner].copy_from_slice(&src[from..from + mid * inner]);
            }
            offset += mid;
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            OpKind::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Softmax over the last axis; `mask` marks allowed positions and must be
    /// broadcastable to the logits shape.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&BoolMask>) -> Result<Var> {
        let data = ops::masked_softmax_fwd(self.shape(logits), self.value(logits).data(), mask)?;
        let value = Tensor::new(self.shape(logits).to_vec(), data)?;
        let rg = self.needs(logits);
        Ok(self.push(value, OpKind::MaskedSoftmax(logits), rg))
    }

    pub fn layer_norm(&mut self, src: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0".into()))?;
        let data = ops::layer_norm_fwd(self.value(src).data(), d, eps);
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(src);
        Ok(self.push(value, OpKind::LayerNorm { src, eps }, rg))
    }

    pub fn gelu(&mut self, src: Var) -> Var {
        let data = ops::gelu_fwd(self.value(src).data());
        let value = Tensor::new(self.shape(src).to_vec(), data).expect("same shape");
        let rg = self.needs(src);
        self.push(value, OpKind::Gelu(src), rg)
    }

    /// Mean over every element, yielding a [1] scalar tensor.
    pub fn mean(&mut self, src: Var) -> Var {
        let n = self.value(src).len();
        let mut acc = T::zero();
        for &v in self.value(src).data() {
            acc = acc + v;
        }
        let value = Tensor::scalar(acc / T::from_f64(n as f64));
        let rg = self.needs(src);
        self.push(value, OpKind::Mean(src), rg)
    }

    /// Sum over every element, yielding a [1] scalar tensor.
    pub fn sum(&mut self, src: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(src).data() {
            acc = acc + v;
        }
        let value = Tensor::scalar(acc);
        let rg = self.needs(src);
        self.push(value, OpKind::Sum(src), rg)
    }

    /// Row lookup into a [rows, d] table; ids may repeat. Gradient
    /// scatter-adds into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows table must be rank-2, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        let src = self.value(table).data();
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("row id {id} out of table rows {rows}")));
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(table);
        Ok(self.push(
            value,
            OpKind::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Populates grad buffers on every
    /// reachable node with `requires_grad`; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Contract(
                "loss does not depend on any requires_grad leaf".into(),
            ));
        }
        // local grads for this pass; merged into node grads as we go
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.accumulate(Var(idx), &grad);
            let op = self.nodes[idx].op.clone();
            match op {
                OpKind::Leaf => {}
                OpKind::Add(a, b) => {
                    if self.needs(a) {
                        let ga = ops::reduce_to_shape(self.shape(Var(idx)), &grad, self.shape(a));
                        push_pending(&mut pending, a, ga);
                    }
                    if self.needs(b) {
                        let gb = ops::reduce_to_shape(self.shape(Var(idx)), &grad, self.shape(b));
                        push_pending(&mut pending, b, gb);
                    }
                }
                OpKind::Sub(a, b) => {
                    if self.needs(a) {
                        let ga = ops::reduce_to_shape(self.shape(Var(idx)), &grad, self.shape(a));
                        push_pending(&mut pending, a, ga);
                    }
                    if self.needs(b) {
                        let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                        let gb = ops::reduce_to_shape(self.shape(Var(idx)), &neg, self.shape(b));
                        push_pending(&mut pending, b, gb);
                    }
                }
                OpKind::Mul(a, b) => {
                    let out_shape = self.shape(Var(idx)).to_vec();
                    if self.needs(a) {
                        let (_, prod) = ops::binary_broadcast(
                            &out_shape,
                            &grad,
                            self.shape(b),
                            self.value(b).data(),
                            BinKind::Mul,
                        )?;
                        let ga = ops::reduce_to_shape(&out_shape, &prod, self.shape(a));
                        push_pending(&mut pending, a, ga);
                    }
                    if self.needs(b) {
                        let (_, prod) = ops::binary_broadcast(
                            &out_shape,
                            &grad,
                            self.shape(a),
                            self.value(a).data(),
                            BinKind::Mul,
                        )?;
                        let gb = ops::reduce_to_shape(&out_shape, &prod, self.shape(b));
                        push_pending(&mut pending, b, gb);
                    }
                }
                OpKind::Scale(src, factor) => {
                    if self.needs(src) {
                        let f = T::from_f64(factor);
                        push_pending(&mut pending, src, grad.iter().map(|&g| g * f).collect());
                    }
                }
                OpKind::Matmul(a, b) => {
                    let ash = self.shape(a).to_vec();
                    let bsh = self.shape(b).to_vec();
                    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                    let n = bsh[bsh.len() - 1];
                    let batch: usize = ash[..ash.len() - 2].iter().product();
                    let b_unbatched = bsh.len() == 2 && batch > 1;
                    if self.needs(a) {
                        let mut ga = vec![T::zero(); batch * m * k];
                        let bdata = self.value(b).data();
                        for bi in 0..batch {
                            let b_off = if b_unbatched || bsh.len() == 2 { 0 } else { bi * k * n };
                            ops::matmul_2d_transb(
                                &grad[bi * m * n..(bi + 1) * m * n],
                                &bdata[b_off..b_off + k * n],
                                m,
                                k,
                                n,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                        push_pending(&mut pending, a, ga);
                    }
                    if self.needs(b) {
                        let b_elems: usize = bsh.iter().product();
                        let mut gb = vec![T::zero(); b_elems];
                        let adata = self.value(a).data();
                        for bi in 0..batch {
                            let g_off = bi * m * n;
                            let gb_slice = if bsh.len() == 2 {
                                &mut gb[..]
                            } else {
                                &mut gb[bi * k * n..(bi + 1) * k * n]
                            };
                            ops::matmul_2d_transa(
                                &adata[bi * m * k..(bi + 1) * m * k],
                                &grad[g_off..g_off + m * n],
                                m,
                                k,
                                n,
                                gb_slice,
                            );
                        }
                        push_pending(&mut pending, b, gb);
                    }
                }
                OpKind::Reshape(src) => {
                    if self.needs(src) {
                        push_pending(&mut pending, src, grad.clone());
                    }
                }
                OpKind::Permute(src, axes) => {
                    if self.needs(src) {
                        let inv = ops::invert_permutation(&axes);
                        let (_, g) = ops::permute_data(self.shape(Var(idx)), &grad, &inv);
                        push_pending(&mut pending, src, g);
                    }
                }
                OpKind::Slice { src, axis, start } => {
                    if self.needs(src) {
                        let src_shape = self.shape(src).to_vec();
                        let out_shape = self.shape(Var(idx)).to_vec();
                        let outer: usize = src_shape[..axis].iter().product();
                        let inner: usize = src_shape[axis + 1..].iter().product();
                        let mid = src_shape[axis];
                        let len = out_shape[axis];
                        let mut g = vec![T::zero(); self.value(src).len()];
                        for o in 0..outer {
                            let dst = (o * mid + start) * inner;
                            let from = o * len * inner;
                            g[dst..dst + len * inner].copy_from_slice(&grad[from..from + len * inner]);
                        }
                        push_pending(&mut pending, src, g);
                    }
                }
                OpKind::Concat { parts, axis } => {
                    let out_shape = self.shape(Var(idx)).to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut offset = 0usize;
                    for &p in &parts {
                        let mid = self.shape(p)[axis];
                        if self.needs(p) {
                            let mut g = vec![T::zero(); self.value(p).len()];
                            for o in 0..outer {
                                let from = (o * total + offset) * inner;
                                let dst = o * mid * inner;
                                g[dst..dst + mid * inner]
                                    .copy_from_slice(&grad[from..from + mid * inner]);
                            }
                            push_pending(&mut pending, p, g);
                        }
                        offset += mid;
                    }
                }
                OpKind::MaskedSoftmax(src) => {
                    if self.needs(src) {
                        let d = *self.shape(Var(idx)).last().unwrap();
                        let g = ops::masked_softmax_bwd(self.value(Var(idx)).data(), &grad, d);
                        push_pending(&mut pending, src, g);
                    }
                }
                OpKind::LayerNorm { src, eps } => {
                    if self.needs(src) {
                        let d = *self.shape(src).last().unwrap();
                        let g = ops::layer_norm_bwd(self.value(src).data(), &grad, d, eps);
                        push_pending(&mut pending, src, g);
                    }
                }
                OpKind::Gelu(src) => {
                    if self.needs(src) {
                        let g = ops::gelu_bwd(self.value(src).data(), &grad);
                        push_pending(&mut pending, src, g);
                    }
                }
                OpKind::Mean(src) => {
                    if self.needs(src) {
                        let n = self.value(src).len();
                        let g0 = grad[0] / T::from_f64(n as f64);
                        push_pending(&mut pending, src, vec![g0; n]);
                    }
                }
                OpKind::Sum(src) => {
                    if self.needs(src) {
                        let n = self.value(src).len();
                        push_pending(&mut pending, src, vec![grad[0]; n]);
                    }
                }
                OpKind::GatherRows { table, ids } => {
                    if self.needs(table) {
                        let d = self.shape(table)[1];
                        let mut g = vec![T::zero(); self.value(table).len()];
                        for (row, &id) in ids.iter().enumerate() {
                            let from = row * d;
                            let dst = id * d;
                            for j in 0..d {
                                g[dst + j] = g[dst + j] + grad[from + j];
                            }
                        }
                        push_pending(&mut pending, table, g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn push_pending<T: Scalar>(pending: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut pending[v.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a = *a + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
