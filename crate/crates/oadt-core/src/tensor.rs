//! Dense row-major tensors over `f32` or `f64`.
//!
//! Tensors are immutable after construction; `clone` is cheap (the buffer is
//! behind an `Arc`), which is what makes the autodiff tape practical: backward
//! closures capture value clones instead of borrowing the tape.
//!
//! Precision is a type parameter rather than a runtime tag. Training runs in
//! `f32`; gradient checks build the same graphs in `f64` where central
//! differences are trustworthy.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type for all numeric code in this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// f64 -> E, used all over the numeric code. Cannot fail for f32/f64.
pub(crate) fn sc<E: Scalar>(v: f64) -> E {
    E::from_f64(v).expect("float-to-float conversion")
}

/// E -> f64.
pub(crate) fn fd<E: Scalar>(v: E) -> f64 {
    v.to_f64().expect("float-to-float conversion")
}

/// Immutable dense tensor. Rank 0 (shape `[]`) is a scalar with one element.
#[derive(Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<[E]>,
}

impl<E: Scalar> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        // No finite check here: non-finite values are a checked-error concern
        // at the consumers that promise one (losses, optimizer, file loads).
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    /// Build from a generator over flat (row-major) indices.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n = numel_of(&shape);
        let data: Vec<E> = (0..n).map(&mut f).collect();
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v].into(),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![v; n].into(),
        }
    }

    /// Uniform samples from `[lo, hi)`. Sampling happens in f64 so that seeded
    /// streams agree between the f32 and f64 instantiations.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| sc(rng.gen_range(lo..hi)))
    }

    /// Standard normal samples (again drawn in f64 for cross-precision parity).
    pub fn rand_normal(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            sc(v)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the elements, copy-on-write when the buffer is shared.
    pub fn as_mut_slice(&mut self) -> &mut [E] {
        if Arc::get_mut(&mut self.data).is_none() {
            self.data = self.data.to_vec().into();
        }
        Arc::get_mut(&mut self.data).expect("unique after copy-on-write")
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    /// Extract the value of a rank-0 or single-element tensor.
    pub fn scalar_value(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "scalar_value on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> E {
        self.data[self.flat_index(idx)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise to another precision.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| sc::<F>(fd(v)))
                .collect::<Vec<_>>()
                .into(),
        }
    }
}

/// Right-aligned broadcast of two shapes (extents must match or be 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        };
    }
    Ok(out)
}

/// Strides of `shape` with broadcast dims zeroed, right-aligned to `out_rank`.
/// Walking the output odometer with these strides yields the source offset.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_rank = out_shape.len();
    let pad = out_rank - shape.len();
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[pad + i] = acc;
        }
        acc *= shape[i];
    }
    // Dimensions the source lacks entirely keep stride 0 (already zeroed).
    for (i, s) in strides.iter().enumerate() {
        debug_assert!(shape.len() <= i + shape.len() || *s == 0 || out_shape[i] > 0);
    }
    strides
}

/// Visit every output position of `out_shape`, yielding the flat offsets into
/// two broadcast sources. `f(out_idx, a_idx, b_idx)`.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel_of(out_shape);
    if n == 0 {
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for oi in 0..n {
        f(oi, ai, bi);
        // Odometer increment, maintaining ai/bi incrementally.
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
        }
    }
}

/// Split a shape at `axis` into (outer, axis extent, inner) for lane walks.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank0_is_scalar() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.scalar_value().unwrap(), 3.5);
    }

    #[test]
    fn flat_index_row_major() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 4], |i| i as f32);
        assert_eq!(t.get(&[0, 0, 0]), 0.0);
        assert_eq!(t.get(&[0, 1, 2]), 6.0);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[1, 3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shapes(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn broadcast_walk_matches_naive() {
        let a = Tensor::<f64>::from_fn(vec![2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![4, 1], |i| 100.0 + i as f64);
        let out_shape = broadcast_shapes(a.shape(), b.shape()).unwrap();
        assert_eq!(out_shape, vec![2, 4, 3]);
        let mut got = vec![];
        for_each_broadcast2(&out_shape, a.shape(), b.shape(), |_, ai, bi| {
            got.push(a.as_slice()[ai] + b.as_slice()[bi]);
        });
        // Naive reference.
        let mut want = vec![];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    want.push(a.get(&[i, 0, k]) + b.get(&[j, 0]));
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn tensors_are_send_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor<f32>>();
        assert_send_sync::<Tensor<f64>>();
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::rand_normal(vec![16], &mut r1);
        let b = Tensor::<f32>::rand_normal(vec![16], &mut r2);
        assert_eq!(a.to_vec(), b.to_vec());
    }
}
