//! Multi-head scaled dot-product attention over packed sequences, with queries computed
//! only for a declared subset of positions while keys and values cover every position.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// One sequence inside a packed attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnSegment {
    /// First row of this sequence in the key/value matrices.
    pub kv_offset: usize,
    /// Number of positions in the sequence.
    pub kv_len: usize,
    /// First row of this sequence's queries in the query matrix.
    pub q_offset: usize,
    /// Sequence positions that issue queries, in query-row order.
    pub q_positions: Vec<usize>,
    /// Half-open span of positions that attend to each other bidirectionally.
    pub bidirectional: Option<(usize, usize)>,
}

impl AttnSegment {
    /// Causal visibility, widened to full visibility inside the bidirectional span.
    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        if key <= query {
            return true;
        }
        match self.bidirectional {
            Some((b, e)) => query >= b && query < e && key < e,
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
}

impl AttentionLayout {
    pub fn query_rows(&self) -> usize {
        self.segments.iter().map(|s| s.q_positions.len()).sum()
    }

    pub fn kv_rows(&self) -> usize {
        self.segments.iter().map(|s| s.kv_len).sum()
    }

    fn probs_len(&self) -> usize {
        self.heads
            * self
                .segments
                .iter()
                .map(|s| s.q_positions.len() * s.kv_len)
                .sum::<usize>()
    }

    pub(crate) fn validate(&self, q_rows: usize, kv_rows: usize, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::config(alloc::format!(
                "{} heads do not divide model dim {dim}",
                self.heads
            )));
        }
        for s in &self.segments {
            if s.kv_offset + s.kv_len > kv_rows || s.q_offset + s.q_positions.len() > q_rows {
                return Err(Error::dim("attention", &[q_rows, kv_rows], &[s.q_offset, s.kv_offset]));
            }
            if s.q_positions.iter().any(|&p| p >= s.kv_len) {
                return Err(Error::contract("query position outside its sequence"));
            }
        }
        Ok(())
    }
}

pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>) {
    let heads = layout.heads;
    let dh = dim / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = vec![T::zero(); layout.query_rows() * dim];
    let mut probs = vec![T::zero(); layout.probs_len()];
    let mut p_off = 0;
    for seg in &layout.segments {
        let nq = seg.q_positions.len();
        let len = seg.kv_len;
        if nq == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &mut probs[p_off..p_off + nq * len];
            T::gemm(
                nq,
                dh,
                len,
                (&q[seg.q_offset * dim + h * dh..], dim, 1),
                (&k[seg.kv_offset * dim + h * dh..], 1, dim),
                p,
                len,
                1,
                false,
            );
            for (r, &qp) in seg.q_positions.iter().enumerate() {
                let row = &mut p[r * len..(r + 1) * len];
                let mut max = T::neg_infinity();
                for (j, x) in row.iter_mut().enumerate() {
                    if seg.allowed(qp, j) {
                        *x *= scale;
                        if *x > max {
                            max = *x;
                        }
                    }
                }
                let mut sum = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if seg.allowed(qp, j) {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = T::zero();
                    }
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            T::gemm(
                nq,
                len,
                dh,
                (p, len, 1),
                (&v[seg.kv_offset * dim + h * dh..], dim, 1),
                &mut out[seg.q_offset * dim + h * dh..],
                dim,
                1,
                false,
            );
            p_off += nq * len;
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    dim: usize,
    layout: &AttentionLayout,
    mut grads: AttentionGrads<'_, T>,
) {
    let heads = layout.heads;
    let dh = dim / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut p_off = 0;
    let mut ds = Vec::new();
    for seg in &layout.segments {
        let nq = seg.q_positions.len();
        let len = seg.kv_len;
        if nq == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &probs[p_off..p_off + nq * len];
            let d_o = (&d_out[seg.q_offset * dim + h * dh..], dim, 1);
            if let Some(dv) = grads.dv.as_deref_mut() {
                T::gemm(
                    len,
                    nq,
                    dh,
                    (p, 1, len),
                    d_o,
                    &mut dv[seg.kv_offset * dim + h * dh..],
                    dim,
                    1,
                    true,
                );
            }
            if grads.dq.is_some() || grads.dk.is_some() {
                ds.clear();
                ds.resize(nq * len, T::zero());
                T::gemm(
                    nq,
                    dh,
                    len,
                    d_o,
                    (&v[seg.kv_offset * dim + h * dh..], 1, dim),
                    &mut ds,
                    len,
                    1,
                    false,
                );
                for r in 0..nq {
                    let pr = &p[r * len..(r + 1) * len];
                    let dr = &mut ds[r * len..(r + 1) * len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                if let Some(dq) = grads.dq.as_deref_mut() {
                    T::gemm(
                        nq,
                        len,
                        dh,
                        (&ds, len, 1),
                        (&k[seg.kv_offset * dim + h * dh..], dim, 1),
                        &mut dq[seg.q_offset * dim + h * dh..],
                        dim,
                        1,
                        true,
                    );
                }
                if let Some(dk) = grads.dk.as_deref_mut() {
                    T::gemm(
                        len,
                        nq,
                        dh,
                        (&ds, 1, len),
                        (&q[seg.q_offset * dim + h * dh..], dim, 1),
                        &mut dk[seg.kv_offset * dim + h * dh..],
                        dim,
                        1,
                        true,
                    );
                }
            }
            p_off += nq * len;
        }
    }
}
