//! Shape-preserving data movement: reshape, slice, concat. All are linear, so
//! backward is pure index bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Scalar, Tensor};

use super::{GradSink, Tape, Var};

impl<E: Scalar> Tape<E> {
    /// New shape over the same row-major data.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).clone();
        let out = xv.reshaped(shape)?;
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            // Data order is unchanged; the gradient passes straight through.
            sink.accumulate(x, g);
        };
        Ok(self.push_op(out, &[x], Box::new(back)))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if axis >= xv.rank() {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} exceeds extent {n}", start + len),
            ));
        }
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.as_slice()[base..base + len * inner]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let x_numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            if let Some(slot) = sink.slot(x, x_numel) {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        slot[dst + i] = slot[dst + i] + g[src + i];
                    }
                }
            }
        };
        Ok(self.push_op(out, &[x], Box::new(back)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {:?}", first),
            ));
        }
        let mut axis_extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", s, first),
                ));
            }
            axis_extents.push(s[axis]);
        }
        let total: usize = axis_extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![E::zero(); outer * total * inner];
        let mut offset = 0usize;
        let values: Vec<Tensor<E>> = xs.iter().map(|&v| self.value(v).clone()).collect();
        for (t, &ext) in values.iter().zip(&axis_extents) {
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * total + offset) * inner;
                data[dst..dst + ext * inner].copy_from_slice(&t.as_slice()[src..src + ext * inner]);
            }
            offset += ext;
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let xs_owned: Vec<Var> = xs.to_vec();
        let inputs = xs_owned.clone();
        let numels: Vec<usize> = values.iter().map(|t| t.numel()).collect();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            let mut offset = 0usize;
            for ((&v, &ext), &numel) in xs_owned.iter().zip(&axis_extents).zip(&numels) {
                if let Some(slot) = sink.slot(v, numel) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        for i in 0..ext * inner {
                            slot[dst + i] = slot[dst + i] + g[src + i];
                        }
                    }
                }
                offset += ext;
            }
        };
        Ok(self.push_op(out, &inputs, Box::new(back)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_preserves_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64), true);
        let y = tape.reshape(x, vec![3, 2]).unwrap();
        assert_eq!(tape.value(y).to_vec(), (0..6).map(|i| i as f64).collect::<Vec<_>>());
        assert!(tape.reshape(x, vec![4, 2]).is_err());
    }

    #[test]
    fn slice_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 4, 3], |i| i as f64), true);
        let y = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert_eq!(tape.value(y).get(&[0, 0, 0]), 3.0);
        assert_eq!(tape.value(y).get(&[1, 1, 2]), 20.0);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let dx = grads.get(x).unwrap();
        // Only rows 1..3 of axis 1 receive gradient.
        assert_eq!(dx.get(&[0, 0, 0]), 0.0);
        assert_eq!(dx.get(&[0, 1, 0]), 1.0);
        assert_eq!(dx.get(&[0, 2, 2]), 1.0);
        assert_eq!(dx.get(&[0, 3, 0]), 0.0);
    }

    #[test]
    fn concat_then_slice_restores_parts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 2], |i| i as f64), true);
        let b = tape.leaf(Tensor::from_fn(vec![2, 3], |i| 10.0 + i as f64), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        let a2 = tape.slice(c, 1, 0, 2).unwrap();
        let b2 = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(a2).to_vec(), tape.value(a).to_vec());
        assert_eq!(tape.value(b2).to_vec(), tape.value(b).to_vec());
    }

    #[test]
    fn concat_gradient_splits() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![1, 2]), true);
        let b = tape.leaf(Tensor::ones(vec![1, 3]), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        let w = tape.constant(Tensor::from_vec(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().to_vec(), vec![1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().to_vec(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![3, 3]), false);
        assert!(tape.concat(&[a, b], 1).is_err());
    }
}
