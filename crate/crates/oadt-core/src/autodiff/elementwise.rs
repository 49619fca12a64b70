//! Elementwise ops: binary with right-aligned broadcasting, unary maps, and
//! scalar-parameter variants. Backward for a broadcast op sum-reduces each
//! input's gradient over the axes that were expanded.

use crate::error::Result;
use crate::tensor::{broadcast_shapes, for_each_broadcast2, sc, Scalar, Tensor};

use super::{GradSink, Tape, Var};

impl<E: Scalar> GradSink<E> {
    fn needs(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

impl<E: Scalar> Tape<E> {
    /// `f` computes the value, `df` the pair of partials (dout/da, dout/db)
    /// at one element.
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E + 'static,
        df: impl Fn(E, E) -> (E, E) + 'static,
    ) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out_shape = broadcast_shapes(av.shape(), bv.shape())
            .map_err(|_| crate::error::Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
        let mut out = vec![E::zero(); crate::tensor::numel_of(&out_shape)];
        for_each_broadcast2(&out_shape, av.shape(), bv.shape(), |oi, ai, bi| {
            out[oi] = f(av.as_slice()[ai], bv.as_slice()[bi]);
        });
        let out = Tensor::from_vec(out_shape.clone(), out)?;
        let back = {
            let (av, bv, out_shape) = (av.clone(), bv.clone(), out_shape);
            move |g: &[E], sink: &mut GradSink<E>| {
                let need_a = sink.needs(a);
                let need_b = sink.needs(b);
                let mut da = if need_a { vec![E::zero(); av.numel()] } else { vec![] };
                let mut db = if need_b { vec![E::zero(); bv.numel()] } else { vec![] };
                for_each_broadcast2(&out_shape, av.shape(), bv.shape(), |oi, ai, bi| {
                    let (pa, pb) = df(av.as_slice()[ai], bv.as_slice()[bi]);
                    if need_a {
                        da[ai] = da[ai] + g[oi] * pa;
                    }
                    if need_b {
                        db[bi] = db[bi] + g[oi] * pb;
                    }
                });
                if need_a {
                    sink.accumulate(a, &da);
                }
                if need_b {
                    sink.accumulate(b, &db);
                }
            }
        };
        Ok(self.push_op(out, &[a, b], Box::new(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (E::one(), E::one()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (E::one(), -E::one()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y| (E::one() / y, -x / (y * y)),
        )
    }

    /// Elementwise minimum. On ties the gradient routes to the first operand;
    /// the choice is arbitrary but fixed, keeping replay deterministic.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            |x, y| {
                if x <= y {
                    (E::one(), E::zero())
                } else {
                    (E::zero(), E::one())
                }
            },
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            |x, y| {
                if x >= y {
                    (E::one(), E::zero())
                } else {
                    (E::zero(), E::one())
                }
            },
        )
    }

    /// Shared unary skeleton; `df(x, y)` is the local derivative given input
    /// and output values.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var {
        let xv = self.value(x).clone();
        let out = xv.map(f);
        let back = {
            let (xv, yv) = (xv, out.clone());
            move |g: &[E], sink: &mut GradSink<E>| {
                if let Some(slot) = sink.slot(x, g.len()) {
                    for i in 0..g.len() {
                        slot[i] = slot[i] + g[i] * df(xv.as_slice()[i], yv.as_slice()[i]);
                    }
                }
            }
        };
        self.push_op(out, &[x], Box::new(back))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -E::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: E) -> Var {
        self.unary(x, move |v| v + c, |_, _| E::one())
    }

    pub fn mul_scalar(&mut self, x: Var, c: E) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > E::zero() { v } else { E::zero() },
            |v, _| if v > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |v, _| E::one() / v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_stable, |_, y| y * (E::one() - y))
    }

    /// `ln(1 + e^x)`, computed in its overflow-free form.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_stable, |v, _| sigmoid_stable(v))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, |v, _| gelu_deriv(v))
    }

    /// `x^p` for a fixed exponent; inputs are expected non-negative when `p`
    /// is fractional. The derivative at exactly zero is defined as zero to
    /// keep saturated focal terms from producing infinities.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        let pe = sc::<E>(p);
        self.unary(
            x,
            move |v| v.powf(pe),
            move |v, _| {
                if v == E::zero() {
                    E::zero()
                } else {
                    pe * v.powf(pe - E::one())
                }
            },
        )
    }
}

pub(crate) fn sigmoid_stable<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softplus_stable<E: Scalar>(x: E) -> E {
    // max(x, 0) + ln(1 + e^{-|x|})
    let m = if x > E::zero() { x } else { E::zero() };
    m + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value<E: Scalar>(x: E) -> E {
    let c = sc::<E>(GELU_C);
    let a = sc::<E>(GELU_A);
    let u = c * (x + a * x * x * x);
    sc::<E>(0.5) * x * (E::one() + u.tanh())
}

fn gelu_deriv<E: Scalar>(x: E) -> E {
    let c = sc::<E>(GELU_C);
    let a = sc::<E>(GELU_A);
    let half = sc::<E>(0.5);
    let three = sc::<E>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}
