//! Fused ops with bespoke backward rules: softmax over an axis, layer
//! normalization over the last axis, and non-overlapping temporal max pooling.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, sc, Scalar, Tensor};

use super::{GradSink, Tape, Var};

impl<E: Scalar> Tape<E> {
    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if axis >= xv.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut data = vec![E::zero(); xv.numel()];
        let src = xv.as_slice();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..n {
                    if src[at(j)] > mx {
                        mx = src[at(j)];
                    }
                }
                let mut denom = E::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom = denom + e;
                }
                for j in 0..n {
                    data[at(j)] = data[at(j)] / denom;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        let yv = out.clone();
        let numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            if let Some(slot) = sink.slot(x, numel) {
                let y = yv.as_slice();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut dot = E::zero();
                        for j in 0..n {
                            dot = dot + g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            slot[at(j)] = slot[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        };
        Ok(self.push_op(out, &[x], Box::new(back)))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    /// Uses population variance; `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        if xv.rank() == 0 {
            return Err(Error::shape("layer_norm", "input must have rank >= 1".to_string()));
        }
        let n = *xv.shape().last().expect("rank checked");
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{n}] for input {:?}",
                    gv.shape(),
                    bv.shape(),
                    xv.shape()
                ),
            ));
        }
        let rows = xv.numel() / n;
        let epse = sc::<E>(eps);
        let ne = sc::<E>(n as f64);
        let mut data = vec![E::zero(); xv.numel()];
        let mut xhat = vec![E::zero(); xv.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let src = xv.as_slice();
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / ne;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / ne;
            let is = E::one() / (var + epse).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                data[r * n + j] = gv.as_slice()[j] * xh + bv.as_slice()[j];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        let numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            // dgamma/dbeta reduce over rows; dx uses the standard
            // mean-removed form per row.
            let mut dgamma = vec![E::zero(); n];
            let mut dbeta = vec![E::zero(); n];
            let mut dx = vec![E::zero(); numel];
            for r in 0..rows {
                let base = r * n;
                let is = inv_std[r];
                let mut m1 = E::zero();
                let mut m2 = E::zero();
                for j in 0..n {
                    let gg = g[base + j] * gv.as_slice()[j];
                    m1 = m1 + gg;
                    m2 = m2 + gg * xhat[base + j];
                }
                m1 = m1 / ne;
                m2 = m2 / ne;
                for j in 0..n {
                    let gg = g[base + j] * gv.as_slice()[j];
                    dx[base + j] = is * (gg - m1 - xhat[base + j] * m2);
                    dgamma[j] = dgamma[j] + g[base + j] * xhat[base + j];
                    dbeta[j] = dbeta[j] + g[base + j];
                }
            }
            sink.accumulate(x, &dx);
            sink.accumulate(gamma, &dgamma);
            sink.accumulate(beta, &dbeta);
        };
        Ok(self.push_op(out, &[x, gamma, beta], Box::new(back)))
    }

    /// Non-overlapping max pooling along axis 1 of a `[B, T, D]` tensor.
    /// Output length is `ceil(T / stride)`; a short trailing window is taken
    /// as-is. Gradient flows to the argmax (first index on ties).
    pub fn max_pool1d(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 {
            return Err(Error::shape(
                "max_pool1d",
                format!("expected [B, T, D], got {:?}", xv.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("max_pool1d stride must be >= 1".into()));
        }
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let t_out = t.div_ceil(stride);
        let mut data = vec![E::zero(); b * t_out * d];
        let mut argmax = vec![0u32; b * t_out * d];
        let src = xv.as_slice();
        for bi in 0..b {
            for w in 0..t_out {
                let lo = w * stride;
                let hi = ((w + 1) * stride).min(t);
                for di in 0..d {
                    let mut best = src[(bi * t + lo) * d + di];
                    let mut best_j = lo;
                    for j in lo + 1..hi {
                        let v = src[(bi * t + j) * d + di];
                        if v > best {
                            best = v;
                            best_j = j;
                        }
                    }
                    data[(bi * t_out + w) * d + di] = best;
                    argmax[(bi * t_out + w) * d + di] = best_j as u32;
                }
            }
        }
        let out = Tensor::from_vec(vec![b, t_out, d], data)?;
        let numel = xv.numel();
        let back = move |g: &[E], sink: &mut GradSink<E>| {
            if let Some(slot) = sink.slot(x, numel) {
                for (i, &gi) in g.iter().enumerate() {
                    let w_pos = i / d;
                    let di = i % d;
                    let bi = w_pos / t_out;
                    let j = argmax[i] as usize;
                    let dst = (bi * t + j) * d + di;
                    slot[dst] = slot[dst] + gi;
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
    fn softmax_uniform_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 4], 3.0), false);
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![3, 5], |i| (i as f64).sin() * 4.0), false);
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).clone();
        for r in 0..3 {
            let s: f64 = (0..5).map(|j| v.get(&[r, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 3], vec![1000.0, 0.0, -1000.0]).unwrap(),
            false,
        );
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).to_vec();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] < 1e-300 && v[2] < 1e-300);
    }

    /// sum(softmax(x)) is constant, so its gradient must vanish.
    #[test]
    fn softmax_sum_gradient_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 6], |i| (i as f64) * 0.3 - 1.0), true);
        let y = tape.softmax(x, 1).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        for &g in grads.get(x).unwrap().as_slice() {
            assert!(g.abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 5], 7.0), false);
        let gamma = tape.leaf(Tensor::ones(vec![5]), false);
        let beta = tape.leaf(Tensor::zeros(vec![5]), false);
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).as_slice() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // [1,3] normalizes to [-1,1] as eps -> 0 (population variance = 1).
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap(), false);
        let gamma = tape.leaf(Tensor::ones(vec![2]), false);
        let beta = tape.leaf(Tensor::zeros(vec![2]), false);
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = tape.value(y).to_vec();
        assert!((v[0] + 1.0).abs() < 1e-6);
        assert!((v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 4]), false);
        let gamma = tape.leaf(Tensor::ones(vec![4]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        assert!(tape.layer_norm(x, gamma, gamma, 0.0).is_err());
        assert!(tape.layer_norm(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn max_pool_halves_with_ceil() {
        let mut tape = Tape::<f64>::new();
        // T = 5 -> 3 windows: {0,1}, {2,3}, {4}.
        let x = tape.leaf(
            Tensor::from_vec(
                vec![1, 5, 2],
                vec![1.0, 10.0, 5.0, 2.0, 3.0, 3.0, 4.0, 8.0, 7.0, 0.0],
            )
            .unwrap(),
            true,
        );
        let y = tape.max_pool1d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2]);
        assert_eq!(tape.value(y).to_vec(), vec![5.0, 10.0, 4.0, 8.0, 7.0, 0.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let dx = grads.get(x).unwrap().to_vec();
        assert_eq!(dx, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_takes_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2, 1], vec![4.0, 4.0]).unwrap(), true);
        let y = tape.max_pool1d(x, 2).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().to_vec(), vec![1.0, 0.0]);
    }
}
