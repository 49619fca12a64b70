//! Batched matrix multiplication and axis swaps.
//!
//! `matmul` treats the last two axes as the matrix and broadcasts the leading
//! (batch) axes right-aligned, so `[B,H,T,d] x [B,H,d,T]` and `[B,T,D] x [D,P]`
//! both work. Backward accumulates `dA = dC·Bᵀ` and `dB = Aᵀ·dC` per batch
//! element; batch positions that were broadcast sum naturally because they map
//! to the same source block.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, for_each_broadcast2, numel_of, Scalar, Tensor};

use super::{GradSink, Tape, Var};

/// out[m,p] += a[m,k] * b[k,p]; i-k-j loop keeps all rows contiguous.
fn mm_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,k] += sum_p g[m,p] * b[k,p]  (i.e. out += g · bᵀ), dot-product form.
fn mm_nt_acc<E: Scalar>(g: &[E], b: &[E], out: &mut [E], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut s = E::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s = s + gv * bv;
            }
            *o = *o + s;
        }
    }
}

/// out[k,p] += sum_m a[m,k] * g[m,p]  (i.e. out += aᵀ · g), axpy form.
fn mm_tn_acc<E: Scalar>(a: &[E], g: &[E], out: &mut [E], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let o_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o = *o + av * gv;
            }
        }
    }
}

fn split_batch(shape: &[usize]) -> (&[usize], usize, usize) {
    let r = shape.len();
    (&shape[..r - 2], shape[r - 2], shape[r - 1])
}

impl<E: Scalar> Tape<E> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be rank >= 2, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (a_batch, m, ka) = split_batch(av.shape());
        let (b_batch, kb, p) = split_batch(bv.shape());
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let batch = broadcast_shapes(a_batch, b_batch)
            .map_err(|_| Error::shape("matmul", format!("batch dims: {:?} x {:?}", av.shape(), bv.shape())))?;
        let k = ka;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, p]);
        let mut out = vec![E::zero(); numel_of(&out_shape)];
        let (amk, bkp, omp) = (m * k, k * p, m * p);
        for_each_broadcast2(&batch, a_batch, b_batch, |oi, ai, bi| {
            mm_acc(
                &av.as_slice()[ai * amk..ai * amk + amk],
                &bv.as_slice()[bi * bkp..bi * bkp + bkp],
                &mut out[oi * omp..oi * omp + omp],
                m,
                k,
                p,
            );
        });
        let out = Tensor::from_vec(out_shape, out)?;
        let a_batch = a_batch.to_vec();
        let b_batch = b_batch.to_vec();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            let mut da = vec![E::zero(); av.numel()];
            let mut db = vec![E::zero(); bv.numel()];
            for_each_broadcast2(&batch, &a_batch, &b_batch, |oi, ai, bi| {
                let g_blk = &g[oi * omp..oi * omp + omp];
                mm_nt_acc(
                    g_blk,
                    &bv.as_slice()[bi * bkp..bi * bkp + bkp],
                    &mut da[ai * amk..ai * amk + amk],
                    m,
                    k,
                    p,
                );
                mm_tn_acc(
                    &av.as_slice()[ai * amk..ai * amk + amk],
                    g_blk,
                    &mut db[bi * bkp..bi * bkp + bkp],
                    m,
                    k,
                    p,
                );
            });
            sink.accumulate(a, &da);
            sink.accumulate(b, &db);
        };
        Ok(self.push_op(out, &[a, b], Box::new(back)))
    }

    /// Materialized transpose of two axes. Its own inverse, so backward just
    /// swaps the gradient back.
    pub fn swap_axes(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let rank = xv.rank();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::shape(
                "swap_axes",
                format!("axes ({ax1},{ax2}) out of range for shape {:?}", xv.shape()),
            ));
        }
        let out = swapped_axes_copy(&xv, ax1, ax2);
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            let gt = Tensor::from_vec(
                {
                    let mut s = xv.shape().to_vec();
                    s.swap(ax1, ax2);
                    s
                },
                g.to_vec(),
            )
            .expect("gradient matches output shape");
            let restored = swapped_axes_copy(&gt, ax1, ax2);
            sink.accumulate(x, restored.as_slice());
        };
        Ok(self.push_op(out, &[x], Box::new(back)))
    }
}

fn swapped_axes_copy<E: Scalar>(x: &Tensor<E>, ax1: usize, ax2: usize) -> Tensor<E> {
    if ax1 == ax2 {
        return x.clone();
    }
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut out_strides = in_strides.clone();
    out_strides.swap(ax1, ax2);

    let n = x.numel();
    let mut data = vec![E::zero(); n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let s = x.as_slice();
    for d in data.iter_mut() {
        *d = s[src];
        for dim in (0..rank).rev() {
            idx[dim] += 1;
            src += out_strides[dim];
            if idx[dim] < out_shape[dim] {
                break;
            }
            idx[dim] = 0;
            src -= out_strides[dim] * out_shape[dim];
        }
    }
    Tensor::from_vec(out_shape, data).expect("permutation preserves count")
}
