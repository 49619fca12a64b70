//! Reductions: full-tensor sum/mean and single-axis sum.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, sc, Scalar, Tensor};

use super::{GradSink, Tape, Var};

impl<E: Scalar> Tape<E> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let mut acc = E::zero();
        for &v in xv.as_slice() {
            acc = acc + v;
        }
        let out = Tensor::scalar(acc);
        let numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            let gv = g[0];
            if let Some(slot) = sink.slot(x, numel) {
                for s in slot.iter_mut() {
                    *s = *s + gv;
                }
            }
        };
        self.push_op(out, &[x], Box::new(back))
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, sc::<E>(1.0 / n as f64))
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if axis >= xv.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out_shape = xv.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] = data[dst + i] + xv.as_slice()[base + i];
                }
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            if let Some(slot) = sink.slot(x, numel) {
                for o in 0..outer {
                    for j in 0..n {
                        let dst = (o * n + j) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            slot[dst + i] = slot[dst + i] + g[src + i];
                        }
                    }
                }
            }
        };
        Ok(self.push_op(out, &[x], Box::new(back)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_mean_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let s = tape.sum_all(x);
        let m = tape.mean_all(x);
        assert_eq!(tape.value(s).scalar_value().unwrap(), 10.0);
        assert_eq!(tape.value(m).scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let m = tape.mean_all(x);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn sum_axis_middle() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3, 2], |i| i as f64), true);
        let y = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        // [0,2,4]+[ ...]: indices (0,*,0) are 0,2,4 -> 6; (0,*,1): 1,3,5 -> 9.
        assert_eq!(tape.value(y).to_vec(), vec![6.0, 9.0, 24.0, 27.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().to_vec(), vec![1.0; 12]);
    }
}
