//! Shared test support: the finite-difference gradient checker and seeded
//! tensor generators.
//!
//! The checker is the independent oracle for every backward rule in the
//! crate: it rebuilds the forward graph from scratch per perturbation, so it
//! shares no code path with tape replay.

#![allow(dead_code)]

use oadt_core::tensor::Tensor;
use oadt_core::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Per-op tolerance on |analytic - numeric| / max(1, |numeric|).
pub const FD_TOL_OP: f64 = 1e-5;
/// Looser budget for deep compositions (full model + loss).
pub const FD_TOL_DEEP: f64 = 1e-3;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi), deterministic per seed.
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Uniform values bounded away from zero (for kinked ops like relu/min/max,
/// where finite differences straddling the kink are meaningless).
pub fn rand_tensor_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn eval_scalar<F>(leaves: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out)
        .scalar_value()
        .expect("grad_check build must produce a scalar")
}

/// Result of one gradient check, for reporting.
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare tape gradients of `build(leaves)` against central differences for
/// every element of every leaf. Panics with context on the first violation.
pub fn grad_check<F>(name: &str, leaves: &[Tensor<f64>], build: F, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(
        tape.value(out).numel(),
        1,
        "{name}: build must produce a scalar"
    );
    let grads = tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, leaf)| {
            grads
                .get(v)
                .map(|t| t.to_vec())
                .unwrap_or_else(|| vec![0.0; leaf.numel()])
        })
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.numel() {
            let perturbed = |delta: f64| -> Vec<Tensor<f64>> {
                leaves
                    .iter()
                    .enumerate()
                    .map(|(lj, t)| {
                        if lj == li {
                            let mut data = t.to_vec();
                            data[ei] += delta;
                            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
                        } else {
                            t.clone()
                        }
                    })
                    .collect()
            };
            let fp = eval_scalar(&perturbed(FD_STEP), &build);
            let fm = eval_scalar(&perturbed(-FD_STEP), &build);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[li][ei];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
            assert!(
                rel <= tol,
                "{name}: gradient mismatch at leaf {li} element {ei}: \
                 analytic {a:.9e}, numeric {numeric:.9e}, rel err {rel:.3e} > {tol:.1e}"
            );
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}
