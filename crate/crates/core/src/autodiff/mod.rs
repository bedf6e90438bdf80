//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its value and whatever it needs for the
//! vector-Jacobian product. [`Tape::backward`] consumes the tape, so activations are
//! released as soon as gradients have been extracted. Parameters enter the tape through
//! [`Tape::param`]; frozen parameters are recorded as constants and never receive
//! gradient, though gradient still flows *through* the activations they produce.

mod attention;

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

pub use attention::{AttentionLayout, AttnSegment};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    SoftmaxRows(Var),
    Silu(Var),
    Tanh(Var),
    SwiGlu(Var, Var),
    Gather { x: Var, rows: Rc<[usize]> },
    Interleave { a: Var, a_rows: Rc<[usize]>, b: Var, b_rows: Rc<[usize]> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>, probs: Vec<T> },
    MeanSegments { x: Var, segments: Vec<(usize, usize)> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { x: Var, target: Vec<T> },
    CosineDistance { a: Var, b: Var },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameters bound onto a tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n.checked_div(cols).unwrap_or(0), cols)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).1
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ----- leaves -------------------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Leaf(Some(id)),
            !p.frozen,
        )
    }

    /// Records every parameter of the set as a leaf.
    pub fn bind(&mut self, params: &ParameterSet<T>) -> Bound {
        let vars = params.iter().map(|(id, _)| self.param(params, id)).collect();
        Bound { vars }
    }

    // ----- linear algebra -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, (self.value(a), k, 1), (self.value(b), n, 1), &mut out, n, 1, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[.., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.cols(x);
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).to_vec();
        let data = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(&b).map(|(&u, &w)| u + w))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).iter().map(|&u| u * c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by a learnable scalar `s` (shape `[1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.scalar(s);
        let data = self.value(x).iter().map(|&u| u * c).collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::ScaleBy(x, s), rg))
    }

    // ----- nonlinearities -----------------------------------------------------------

    /// Root-mean-square normalization of each trailing slice, scaled by `gain` (ε = 1e-5).
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] || d == 0 {
            return Err(Error::dim("rmsnorm", self.shape(x), self.shape(gain)));
        }
        let eps = T::c(NORM_EPS);
        let inv_d = T::one() / T::c(d as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in xs.chunks(d) {
            let ms: T = row.iter().map(|&u| u * u).sum::<T>() * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&u, &w)| u * r * w));
        }
        let rg = self.rg(x) || self.rg(gain);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::SoftmaxRows(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&u| u * sigmoid(u)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Silu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&u| u.tanh()).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Tanh(x), rg)
    }

    /// `silu(gate) ⊙ up`
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape("swiglu", gate, up)?;
        Ok(self.zip_with(gate, up, Op::SwiGlu(gate, up), |g, u| g * sigmoid(g) * u))
    }

    // ----- row plumbing -------------------------------------------------------------

    /// Selects rows of a 2-D value. An identity selection returns `x` itself.
    pub fn gather_rows(&mut self, x: Var, rows: &Rc<[usize]>) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        if rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(x);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", self.shape(x), &[bad]));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            out.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::Gather {
                x,
                rows: rows.clone(),
            },
            rg,
        ))
    }

    /// Builds a `(a_rows.len() + b_rows.len()) × d` value with `out[a_rows[i]] = a[i]`
    /// and `out[b_rows[j]] = b[j]`. The two row sets must partition the output.
    pub fn interleave(
        &mut self,
        a: Var,
        a_rows: &Rc<[usize]>,
        b: Var,
        b_rows: &Rc<[usize]>,
    ) -> Result<Var> {
        let (na, da) = rows_cols(self.shape(a));
        let (nb, db) = rows_cols(self.shape(b));
        if na != a_rows.len() || nb != b_rows.len() || (nb > 0 && na > 0 && da != db) {
            return Err(Error::dim("interleave", self.shape(a), self.shape(b)));
        }
        let total = na + nb;
        if nb == 0 && a_rows.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(a);
        }
        if na == 0 && b_rows.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(b);
        }
        let d = if na > 0 { da } else { db };
        let mut out = vec![T::nan(); total * d];
        let mut seen = vec![false; total];
        for (src, rows) in [(a, a_rows), (b, b_rows)] {
            let xs = &self.nodes[src.0].data;
            for (i, &r) in rows.iter().enumerate() {
                if r >= total || seen[r] {
                    return Err(Error::contract("interleave rows must partition the output"));
                }
                seen[r] = true;
                out[r * d..(r + 1) * d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![total, d],
            out,
            Op::Interleave {
                a,
                a_rows: a_rows.clone(),
                b,
                b_rows: b_rows.clone(),
            },
            rg,
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::dim("embedding", self.shape(table), &[bad]));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head attention where `q` holds only the rows named by the layout's query
    /// positions while `k` and `v` hold every position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &Rc<AttentionLayout>) -> Result<Var> {
        let (qr, d) = rows_cols(self.shape(q));
        let (kr, dk) = rows_cols(self.shape(k));
        if dk != d || self.shape(v) != self.shape(k) || qr != layout.query_rows() || kr != layout.kv_rows() {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        layout.validate(qr, kr, d)?;
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), d, layout);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![qr, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of each `(start, len)` row segment; yields one row per segment.
    pub fn mean_segments(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        let xs = self.value(x);
        let mut out = vec![T::zero(); segments.len() * d];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > n || len == 0 {
                return Err(Error::dim("mean_segments", self.shape(x), &[start, len]));
            }
            let inv = T::one() / T::c(len as f64);
            let o = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                o.iter_mut().zip(&xs[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![segments.len(), d],
            out,
            Op::MeanSegments {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions and losses ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Mean next-token cross-entropy of `logits[n, vocab]` against `targets[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = rows_cols(self.shape(logits));
        if n != targets.len() || n == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if targets.iter().any(|&t| t >= v) {
            return Err(Error::contract("cross-entropy target outside the vocabulary"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(T::min_positive_value()).ln();
        }
        loss /= T::c(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.value(x).len() != target.len() || target.is_empty() {
            return Err(Error::dim("mse", self.shape(x), &[target.len()]));
        }
        let n = T::c(target.len() as f64);
        let loss = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `1 − cos(a_i, b_i)`; a zero-norm row has cosine 0.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_distance", a, b)?;
        let (n, d) = rows_cols(self.shape(a));
        if n == 0 {
            return Err(Error::dim("cosine_distance", self.shape(a), self.shape(b)));
        }
        let mut total = T::zero();
        for (ra, rb) in self.value(a).chunks(d).zip(self.value(b).chunks(d)) {
            total += T::one() - cosine(ra, rb).0;
        }
        let loss = total / T::c(n as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![loss], Op::CosineDistance { a, b }, rg))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.shape(v) != [1] {
                return Err(Error::dim("weighted_sum", self.shape(v), &[1]));
            }
            s += w * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(vec![1], vec![s], Op::WeightedSum(terms.to_vec()), rg))
    }

    // ----- backward -----------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Every leaf that requires gradient receives one
    /// (zeros when the loss does not depend on it); constants and frozen leaves do not.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if self.shape(loss) != [1] {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, &mut grads, i, &g);
        }
        let mut leaves = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if let Op::Leaf(param) = n.op {
                if n.requires_grad {
                    let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); n.data.len()]);
                    leaves.push((Var(i), param, g));
                }
            }
        }
        Ok(Grads { leaves })
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `(cos, dot, |a|·|b| after the guard)`, with cos clamped into [-1, 1].
fn cosine<T: Real>(a: &[T], b: &[T]) -> (T, T, T) {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let denom = (na * nb).max(T::c(COSINE_EPS));
    let c = (dot / denom).max(-T::one()).min(T::one());
    (c, dot, denom)
}

fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    let val = |v: Var| -> &[T] { &nodes[v.0].data };
    match &node.op {
        Op::Leaf(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                T::gemm(m, n, k, (g, n, 1), (val(*b), 1, n), ga, k, 1, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                T::gemm(k, m, n, (val(*a), 1, k), (g, n, 1), gb, n, 1, true);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &w) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *x += y * w;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, &y), &w) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *x += y * w;
                }
            }
        }
        Op::AddBias(x, bias) => {
            let n = nodes[bias.0].data.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
            }
        }
        Op::ScaleBy(x, s) => {
            let c = val(*s)[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                gs[0] += g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let d = nodes[gain.0].data.len();
            let xs = val(*x);
            let gn = val(*gain);
            if let Some(gg) = slot(nodes, grads, *gain) {
                for ((row, gr), &r) in xs.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    for ((acc, &u), &dy) in gg.iter_mut().zip(row).zip(gr) {
                        *acc += dy * u * r;
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = T::one() / T::c(d as f64);
                for (((row, gr), &r), out) in xs
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(inv_rms)
                    .zip(gx.chunks_mut(d))
                {
                    let dot: T = row
                        .iter()
                        .zip(gr)
                        .zip(gn)
                        .map(|((&u, &dy), &w)| u * dy * w)
                        .sum();
                    let c = r * r * r * dot * inv_d;
                    for (((o, &u), &dy), &w) in out.iter_mut().zip(row).zip(gr).zip(gn) {
                        *o += r * dy * w - u * c;
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = *node.shape.last().unwrap_or(&1);
                for ((y, gy), out) in node.data.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((o, &a), &b) in out.iter_mut().zip(y).zip(gy) {
                        *o += a * (b - dot);
                    }
                }
            }
        }
        Op::Silu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &u), &dy) in gx.iter_mut().zip(val(*x)).zip(g) {
                    let s = sigmoid(u);
                    *o += dy * s * (T::one() + u * (T::one() - s));
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &y), &dy) in gx.iter_mut().zip(&node.data).zip(g) {
                    *o += dy * (T::one() - y * y);
                }
            }
        }
        Op::SwiGlu(gate, up) => {
            let (gv, uv) = (val(*gate), val(*up));
            if let Some(gg) = slot(nodes, grads, *gate) {
                for (((o, &a), &b), &dy) in gg.iter_mut().zip(gv).zip(uv).zip(g) {
                    let s = sigmoid(a);
                    *o += dy * b * s * (T::one() + a * (T::one() - s));
                }
            }
            if let Some(gu) = slot(nodes, grads, *up) {
                for ((o, &a), &dy) in gu.iter_mut().zip(gv).zip(g) {
                    *o += dy * a * sigmoid(a);
                }
            }
        }
        Op::Gather { x, rows } => {
            let d = *node.shape.last().unwrap_or(&1);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Interleave { a, a_rows, b, b_rows } => {
            let d = *node.shape.last().unwrap_or(&1);
            for (src, rows) in [(a, a_rows), (b, b_rows)] {
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        gs[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(p, &q)| *p += q);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = *node.shape.last().unwrap_or(&1);
            if let Some(gt) = slot(nodes, grads, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Attention { q, k, v, layout, probs } => {
            let d = *node.shape.last().unwrap_or(&1);
            // Three distinct slots are needed at once; take them out and put them back.
            let mut take = |var: Var| -> Option<Vec<T>> {
                slot(nodes, grads, var)?;
                grads[var.0].take()
            };
            let (mut dq, mut dk, mut dv) = (take(*q), take(*k), take(*v));
            attention::backward(
                val(*q),
                val(*k),
                val(*v),
                probs,
                g,
                d,
                layout,
                attention::AttentionGrads {
                    dq: dq.as_deref_mut(),
                    dk: dk.as_deref_mut(),
                    dv: dv.as_deref_mut(),
                },
            );
            for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(buf) = buf {
                    match &mut grads[var.0] {
                        // q, k and v may alias the same node
                        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b),
                        None => grads[var.0] = Some(buf),
                    }
                }
            }
        }
        Op::MeanSegments { x, segments } => {
            let d = *node.shape.last().unwrap_or(&1);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = T::one() / T::c(len as f64);
                    let gs = &g[s * d..(s + 1) * d];
                    for r in start..start + len {
                        gx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(a, &b)| *a += b * inv);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let v = nodes[logits.0].shape[1];
                let c = g[0] / T::c(targets.len() as f64);
                for (r, &t) in targets.iter().enumerate() {
                    let p = &probs[r * v..(r + 1) * v];
                    let o = &mut gl[r * v..(r + 1) * v];
                    for (j, (oj, &pj)) in o.iter_mut().zip(p).enumerate() {
                        let y = if j == t { T::one() } else { T::zero() };
                        *oj += c * (pj - y);
                    }
                }
            }
        }
        Op::Mse { x, target } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = T::c(2.0) * g[0] / T::c(target.len() as f64);
                for ((o, &p), &t) in gx.iter_mut().zip(val(*x)).zip(target) {
                    *o += c * (p - t);
                }
            }
        }
        Op::CosineDistance { a, b } => {
            let (n, d) = rows_cols(&nodes[a.0].shape);
            let c = -g[0] / T::c(n as f64);
            let eps = T::c(COSINE_EPS);
            for (target, other) in [(*a, *b), (*b, *a)] {
                if let Some(gt) = slot(nodes, grads, target) {
                    for ((rt, ro), out) in val(target)
                        .chunks(d)
                        .zip(val(other).chunks(d))
                        .zip(gt.chunks_mut(d))
                    {
                        let (cos, _, denom) = cosine(rt, ro);
                        let nt2: T = rt.iter().map(|&x| x * x).sum();
                        if denom > eps {
                            // d cos / d rt = ro/(|rt||ro|) − cos · rt/|rt|²
                            for ((o, &x), &y) in out.iter_mut().zip(rt).zip(ro) {
                                *o += c * (y / denom - cos * x / nt2);
                            }
                        } else {
                            for (o, &y) in out.iter_mut().zip(ro) {
                                *o += c * y / eps;
                            }
                        }
                    }
                }
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, w) in terms {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv[0] += w * g[0];
                }
            }
        }
    }
}

/// Gradients of every grad-requiring leaf, extracted by [`Tape::backward`].
pub struct Grads<T> {
    leaves: Vec<(Var, Option<ParamId>, Vec<T>)>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(var, _, _)| *var == v)
            .map(|(_, _, g)| g.as_slice())
    }

    /// Adds parameter gradients into the set's accumulators.
    pub fn accumulate_into(&self, params: &mut ParameterSet<T>) -> Result<()> {
        for (_, id, g) in &self.leaves {
            if let Some(id) = id {
                params.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }
}
