//! Finite-difference checks for every differentiable operation.
//!
//! Each op's output is contracted against a fixed random weight tensor so the
//! scalar loss exercises the whole Jacobian, not just row sums. Kinked ops
//! (relu, min/max, pooling) get inputs bounded away from their kinks; a
//! central difference across a kink says nothing about the subgradient.

mod common;

use common::{grad_check, rand_tensor, rand_tensor_off_zero, seeded_rng, FD_TOL_OP};
use oadt_core::tensor::Tensor;
use oadt_core::{Tape, Var};

/// sum(y ⊙ w) with w baked in as a tape constant.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).expect("projection shapes match");
    tape.sum_all(p)
}

fn proj_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    rand_tensor(shape, -1.0, 1.0, &mut rng)
}

#[test]
fn fd_add_sub_with_broadcast() {
    let mut rng = seeded_rng(1);
    let x = rand_tensor(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let b = rand_tensor(&[4], -2.0, 2.0, &mut rng);
    let w = proj_weights(&[2, 3, 4], 100);
    grad_check("add_broadcast", &[x.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("sub_broadcast", &[x, b], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_mul_div_with_broadcast() {
    let mut rng = seeded_rng(2);
    let x = rand_tensor(&[3, 1, 4], -2.0, 2.0, &mut rng);
    // Denominator bounded away from zero.
    let y = Tensor::from_fn(vec![2, 1], |i| 0.5 + 0.3 * i as f64);
    let w = proj_weights(&[3, 2, 4], 101);
    grad_check("mul_broadcast", &[x.clone(), y.clone()], |t, v| {
        let p = t.mul(v[0], v[1]).unwrap();
        project(t, p, &w)
    }, FD_TOL_OP);
    grad_check("div_broadcast", &[x, y], |t, v| {
        let q = t.div(v[0], v[1]).unwrap();
        project(t, q, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_minimum_maximum() {
    let mut rng = seeded_rng(3);
    // Keep |a - b| > 0.05 so no pair straddles the selection boundary.
    let a = Tensor::from_fn(vec![3, 4], |i| (i as f64) * 0.37 - 2.0);
    let b = Tensor::from_fn(vec![3, 4], |i| (i as f64) * 0.37 - 2.0 + if i % 2 == 0 { 0.5 } else { -0.5 });
    let w = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    grad_check("minimum", &[a.clone(), b.clone()], |t, v| {
        let m = t.minimum(v[0], v[1]).unwrap();
        project(t, m, &w)
    }, FD_TOL_OP);
    grad_check("maximum", &[a, b], |t, v| {
        let m = t.maximum(v[0], v[1]).unwrap();
        project(t, m, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_unary_smooth_ops() {
    let mut rng = seeded_rng(4);
    let x = rand_tensor(&[2, 5], -2.0, 2.0, &mut rng);
    let w = proj_weights(&[2, 5], 102);
    grad_check("neg", &[x.clone()], |t, v| {
        let y = t.neg(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("add_scalar", &[x.clone()], |t, v| {
        let y = t.add_scalar(v[0], 1.7);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("mul_scalar", &[x.clone()], |t, v| {
        let y = t.mul_scalar(v[0], -0.6);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("exp", &[x.clone()], |t, v| {
        let y = t.exp(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("sigmoid", &[x.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("softplus", &[x.clone()], |t, v| {
        let y = t.softplus(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("gelu", &[x], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_log_and_pow_on_positive_inputs() {
    let mut rng = seeded_rng(5);
    let x = rand_tensor(&[2, 4], 0.2, 3.0, &mut rng);
    let w = proj_weights(&[2, 4], 103);
    grad_check("log", &[x.clone()], |t, v| {
        let y = t.log(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("pow_scalar_2", &[x.clone()], |t, v| {
        let y = t.pow_scalar(v[0], 2.0);
        project(t, y, &w)
    }, FD_TOL_OP);
    grad_check("pow_scalar_fractional", &[x], |t, v| {
        let y = t.pow_scalar(v[0], 1.7);
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_relu_off_kink() {
    let mut rng = seeded_rng(6);
    let x = rand_tensor_off_zero(&[3, 5], &mut rng);
    let w = proj_weights(&[3, 5], 104);
    grad_check("relu", &[x], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_matmul_plain_and_batched() {
    let mut rng = seeded_rng(7);
    let a = rand_tensor(&[4, 5], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[5, 3], -1.0, 1.0, &mut rng);
    let w = proj_weights(&[4, 3], 105);
    grad_check("matmul_2d", &[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        project(t, c, &w)
    }, FD_TOL_OP);

    // Batched with a broadcast rhs: [2,3,4] x [4,2].
    let a = rand_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[4, 2], -1.0, 1.0, &mut rng);
    let w = proj_weights(&[2, 3, 2], 106);
    grad_check("matmul_batched_broadcast", &[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        project(t, c, &w)
    }, FD_TOL_OP);

    // Fully batched: [2,2,3] x [2,3,2].
    let a = rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[2, 3, 2], -1.0, 1.0, &mut rng);
    let w = proj_weights(&[2, 2, 2], 107);
    grad_check("matmul_batched", &[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        project(t, c, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_shape_movement_ops() {
    let mut rng = seeded_rng(8);
    let x = rand_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let w_t = proj_weights(&[2, 4, 3], 108);
    grad_check("swap_axes", &[x.clone()], |t, v| {
        let y = t.swap_axes(v[0], 1, 2).unwrap();
        project(t, y, &w_t)
    }, FD_TOL_OP);
    let w_r = proj_weights(&[6, 4], 109);
    grad_check("reshape", &[x.clone()], |t, v| {
        let y = t.reshape(v[0], vec![6, 4]).unwrap();
        project(t, y, &w_r)
    }, FD_TOL_OP);
    let w_s = proj_weights(&[2, 2, 4], 110);
    grad_check("slice", &[x.clone()], |t, v| {
        let y = t.slice(v[0], 1, 1, 2).unwrap();
        project(t, y, &w_s)
    }, FD_TOL_OP);
    let other = rand_tensor(&[2, 2, 4], -1.0, 1.0, &mut rng);
    let w_c = proj_weights(&[2, 5, 4], 111);
    grad_check("concat", &[x, other], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1).unwrap();
        project(t, y, &w_c)
    }, FD_TOL_OP);
}

#[test]
fn fd_reductions() {
    let mut rng = seeded_rng(9);
    let x = rand_tensor(&[3, 4], -2.0, 2.0, &mut rng);
    grad_check("sum_all", &[x.clone()], |t, v| t.sum_all(v[0]), FD_TOL_OP);
    grad_check("mean_all", &[x.clone()], |t, v| t.mean_all(v[0]), FD_TOL_OP);
    let w = proj_weights(&[4], 112);
    grad_check("sum_axis", &[x], |t, v| {
        let y = t.sum_axis(v[0], 0).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_softmax() {
    let mut rng = seeded_rng(10);
    let x = rand_tensor(&[2, 5], -3.0, 3.0, &mut rng);
    let w = proj_weights(&[2, 5], 113);
    grad_check("softmax_last", &[x.clone()], |t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
    // Non-trailing axis.
    let x3 = rand_tensor(&[2, 4, 3], -3.0, 3.0, &mut rng);
    let w3 = proj_weights(&[2, 4, 3], 114);
    grad_check("softmax_mid_axis", &[x3], |t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        project(t, y, &w3)
    }, FD_TOL_OP);
}

#[test]
fn fd_layer_norm() {
    let mut rng = seeded_rng(11);
    let x = rand_tensor(&[3, 6], -2.0, 2.0, &mut rng);
    let gamma = rand_tensor(&[6], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[6], -0.5, 0.5, &mut rng);
    let w = proj_weights(&[3, 6], 115);
    grad_check("layer_norm", &[x, gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
}

#[test]
fn fd_max_pool1d() {
    // Values spaced so windows have clear winners (no FD across argmax flips).
    let x = Tensor::from_fn(vec![2, 5, 3], |i| {
        let phase = (i * 7919 % 100) as f64;
        phase * 0.01 + (i as f64) * 0.11
    });
    let w = proj_weights(&[2, 3, 3], 116);
    grad_check("max_pool1d", &[x], |t, v| {
        let y = t.max_pool1d(v[0], 2).unwrap();
        project(t, y, &w)
    }, FD_TOL_OP);
}

/// A small composite expression touching many rules at once; catches
/// accumulation bugs that per-op checks cannot (shared subexpressions).
#[test]
fn fd_composite_with_shared_subexpressions() {
    let mut rng = seeded_rng(12);
    let x = rand_tensor(&[2, 4], -1.0, 1.0, &mut rng);
    let y = rand_tensor(&[4, 3], -1.0, 1.0, &mut rng);
    grad_check("composite", &[x, y], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let s = t.sigmoid(h);
        let g = t.gelu(h); // h consumed twice
        let p = t.mul(s, g).unwrap();
        let e = t.exp(p);
        t.mean_all(e)
    }, FD_TOL_OP);
}

/// Whole transformer layer (attention + MLP + masked downsampling) against
/// finite differences, over the input and every parameter.
#[test]
fn fd_transformer_layer() {
    use oadt_core::nn::{Ctx, Module, PaddingMask, Param, TransformerLayer};

    let mut rng = seeded_rng(41);
    let layer = TransformerLayer::<f64>::new(4, 2, 2, 0.0, true, &mut rng).unwrap();
    let x = rand_tensor(&[2, 5, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![x];
    let mut params: Vec<Param<f64>> = vec![];
    layer.visit_params("", &mut |_, p| {
        leaves.push(p.value().clone());
        params.push(p.clone());
    });
    let mask = PaddingMask::from_lengths(&[5, 4], 5).unwrap();
    let w_full = proj_weights(&[2, 5, 4], 140);
    // Project only valid pooled windows: fully padded windows hold the huge
    // negative floor constant, and a loss offset that large drowns the finite
    // difference in rounding noise.
    let w_pool = {
        let raw = proj_weights(&[2, 3, 4], 141);
        let pm = mask.pooled(2);
        Tensor::from_fn(vec![2, 3, 4], |i| {
            let (b, w) = (i / 12, (i / 4) % 3);
            if pm.is_valid(b, w) {
                raw.as_slice()[i]
            } else {
                0.0
            }
        })
    };
    grad_check("transformer_layer", &leaves, |t, v| {
        let mut ctx = Ctx::inference(t);
        for (i, p) in params.iter().enumerate() {
            ctx.bind(p, v[i + 1]);
        }
        let out = layer.forward(&mut ctx, v[0], &mask).unwrap();
        let a = project(ctx.tape, out.full, &w_full);
        let (pooled, _) = out.pooled.unwrap();
        let b = project(ctx.tape, pooled, &w_pool);
        ctx.tape.add(a, b).unwrap()
    }, FD_TOL_OP);
}

/// IoU regression loss against finite differences; offsets kept away from
/// the targets so min/max selections are stable across the probe step.
#[test]
fn fd_iou_loss() {
    use oadt_core::loss::iou_loss;

    let offsets = Tensor::from_vec(
        vec![1, 4, 2],
        vec![0.8, 2.1, 3.4, 0.6, 1.9, 1.2, 0.4, 2.8],
    )
    .unwrap();
    let targets = Tensor::from_vec(
        vec![1, 4, 2],
        vec![1.5, 1.4, 2.2, 1.8, 0.7, 2.4, 1.0, 1.0],
    )
    .unwrap();
    let weights = Tensor::from_vec(vec![1, 4, 1], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
    grad_check("iou_loss", &[offsets], |t, v| {
        iou_loss(t, v[0], targets.clone(), weights.clone(), 3).unwrap()
    }, FD_TOL_OP);
}
