//! Elementwise/matmul/softmax/conv oracles and backward checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s6mod::tensor::gradcheck::{finite_difference_check, loss_fn};
use s6mod::tensor::{Tape, Tensor};
use s6mod::Error;

fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tol {tol})"
    );
}

#[test]
fn silu_values() {
    let tape = Tape::new();
    let x = tape.variable(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
    let y = x.silu().value();
    assert_eq!(y[0], 0.0);
    assert_close(y[1], 0.7310585786300049, 1e-12);
    assert_close(y[2], -2.0 / (1.0 + 2f64.exp()), 1e-12);
}

#[test]
fn softplus_at_zero_is_ln_two() {
    let tape = Tape::new();
    let x = tape.variable(vec![1], vec![0.0]).unwrap();
    assert_close(x.softplus().item(), std::f64::consts::LN_2, 1e-12);
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(eye.matmul(m).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(a.matmul(b).unwrap().value(), vec![11.0]);
}

#[test]
fn matmul_inner_dim_mismatch_is_dimension_error() {
    let tape = Tape::new();
    let a = tape.constant(vec![1, 3], vec![1.0; 3]).unwrap();
    let b = tape.constant(vec![2, 1], vec![1.0; 2]).unwrap();
    assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_backward_all_ones_pattern() {
    // d/dA sum(A·B) with B = [[1],[1]] is the all-ones matrix.
    let tape = Tape::new();
    let a = tape.variable(vec![2, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
    let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let loss = a.matmul(b).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn softmax_symmetry_derived_and_stability() {
    let tape = Tape::new();
    let a = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    assert_eq!(a.softmax(0).unwrap().value(), vec![0.5, 0.5]);

    let b = tape.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
    let sb = b.softmax(0).unwrap().value();
    assert_close(sb[0], 0.25, 1e-12);
    assert_close(sb[1], 0.75, 1e-12);

    let c = tape.constant(vec![2], vec![1000.0, 1000.0]).unwrap();
    assert_eq!(c.softmax(0).unwrap().value(), vec![0.5, 0.5]);
}

#[test]
fn softmax_sums_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tape = Tape::new();
        let a = tape.constant(vec![3, 3], logits.clone()).unwrap();
        let s = a.softmax(1).unwrap().value();
        for row in s.chunks(3) {
            assert_close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }
        let shifted: Vec<f64> = logits.iter().map(|v| v + 41.5).collect();
        let b = tape.constant(vec![3, 3], shifted).unwrap();
        let s2 = b.softmax(1).unwrap().value();
        for (x, y) in s.iter().zip(s2.iter()) {
            assert_close(*x, *y, 1e-12);
        }
    }
}

#[test]
fn broadcast_shapes_are_closed_under_elementwise_max() {
    let tape = Tape::new();
    let a = tape.constant(vec![3, 1, 2], vec![1.0; 6]).unwrap();
    let b = tape.constant(vec![1, 4, 2], vec![2.0; 8]).unwrap();
    let c = a.mul(b).unwrap();
    assert_eq!(c.shape(), vec![3, 4, 2]);
    assert!(c.value().iter().all(|&v| v == 2.0));

    // scalar broadcasts against anything
    let s = tape.scalar(3.0);
    assert_eq!(c.add(s).unwrap().shape(), vec![3, 4, 2]);

    // mismatched non-unit dims are rejected
    let d = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let e = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(d.add(e), Err(Error::Dimension { .. })));
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let tape = Tape::new();
    let x = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(x.log(), Err(Error::Domain { .. })));
    let y = tape.constant(vec![1], vec![-3.0]).unwrap();
    assert!(matches!(y.log(), Err(Error::Domain { .. })));
}

#[test]
fn dwconv_identity_kernel_is_identity() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_data: Vec<f64> = (0..4 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = tape.constant(vec![4, 4, 2], x_data.clone()).unwrap();
    // delta kernel: center 1, else 0, per channel
    let mut k_data = vec![0.0; 3 * 3 * 2];
    k_data[(1 * 3 + 1) * 2] = 1.0;
    k_data[(1 * 3 + 1) * 2 + 1] = 1.0;
    let k = tape.constant(vec![3, 3, 2], k_data).unwrap();
    assert_eq!(x.dwconv2d(k).unwrap().value(), x_data);
}

#[test]
fn dwconv_on_single_pixel_keeps_center_tap() {
    let tape = Tape::new();
    let x = tape.constant(vec![1, 1, 1], vec![2.5]).unwrap();
    let k_data: Vec<f64> = (1..=9).map(|v| v as f64).collect();
    let k = tape.constant(vec![3, 3, 1], k_data.clone()).unwrap();
    // zero padding collapses all neighbours; only the center tap (index 4) survives
    assert_eq!(x.dwconv2d(k).unwrap().value(), vec![2.5 * k_data[4]]);
}

#[test]
fn dwconv_matches_naive_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, c, ks) = (4usize, 4usize, 2usize, 3usize);
    let x: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..ks * ks * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // independent nested-loop convolution
    let pad = ks as isize / 2;
    let mut want = vec![0.0; h * w * c];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for ci in 0..c {
                let mut acc = 0.0;
                for dy in 0..ks as isize {
                    for dx in 0..ks as isize {
                        let (sy, sx) = (y + dy - pad, xx + dx - pad);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += x[(sy as usize * w + sx as usize) * c + ci]
                                * k[(dy as usize * ks + dx as usize) * c + ci];
                        }
                    }
                }
                want[(y as usize * w + xx as usize) * c + ci] = acc;
            }
        }
    }

    let tape = Tape::new();
    let xv = tape.constant(vec![h, w, c], x).unwrap();
    let kv = tape.constant(vec![ks, ks, c], k).unwrap();
    let got = xv.dwconv2d(kv).unwrap().value();
    for (g, w_) in got.iter().zip(want.iter()) {
        assert_close(*g, *w_, 1e-12);
    }
}

#[test]
fn even_kernel_is_configuration_error() {
    let tape = Tape::new();
    let x = tape.constant(vec![4, 4, 1], vec![0.0; 16]).unwrap();
    let k = tape.constant(vec![2, 2, 1], vec![0.0; 4]).unwrap();
    assert!(matches!(x.dwconv2d(k), Err(Error::Config(_))));
}

#[test]
fn backward_of_square_and_constant() {
    let tape = Tape::new();
    let x = tape.variable(vec![1], vec![3.0]).unwrap();
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    assert_close(x.grad().unwrap()[0], 6.0, 1e-12);

    // constant loss: gradient never reaches x
    let tape = Tape::new();
    let x = tape.variable(vec![1], vec![3.0]).unwrap();
    let c = tape.scalar(5.0);
    tape.backward(c).unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_accumulates() {
    let tape = Tape::new();
    let x = tape.variable(vec![1], vec![3.0]).unwrap();
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_close(x.grad().unwrap()[0], 12.0, 1e-12);
}

#[test]
fn composite_backward_matches_finite_differences() {
    let params = vec![
        Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.9, 0.1, -0.7, 0.3]).unwrap(),
        Tensor::new(vec![3, 2], vec![0.5, 1.2, -0.4, 0.8, 0.2, -0.9]).unwrap(),
    ];
    let check = finite_difference_check(
        &loss_fn(|_tape, vars| Ok(vars[0].matmul(vars[1])?.silu().sum())),
        &params,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn gradcheck_exact_on_quadratic_and_linear() {
    let params = vec![Tensor::new(vec![3], vec![0.7, -1.1, 0.4]).unwrap()];
    let quad = finite_difference_check(
        &loss_fn(|_tape, vars| vars[0].mul(vars[0])?.sum().mul_scalar(0.5).add(vars[0].sum())),
        &params,
        1e-5,
    )
    .unwrap();
    assert!(quad.max_rel_err < 1e-8, "quadratic rel err {}", quad.max_rel_err);

    let linear = finite_difference_check(
        &loss_fn(|_tape, vars| Ok(vars[0].mul_scalar(3.25).sum())),
        &params,
        1e-5,
    )
    .unwrap();
    assert!(linear.max_rel_err < 1e-10, "linear rel err {}", linear.max_rel_err);
}

#[test]
fn primitive_ops_pass_gradient_checks_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let a = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let b = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(0.2..1.8)).collect()).unwrap();
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let params = vec![a, b, w];

        macro_rules! check_op {
            ($name:literal, $f:expr) => {{
                let case = loss_fn($f);
                let check = finite_difference_check(&case, &params, 1e-5).unwrap();
                assert!(
                    check.max_rel_err < 1e-6,
                    "trial {trial}: {} rel err {} at {:?}",
                    $name,
                    check.max_rel_err,
                    check.worst
                );
            }};
        }

        check_op!("add", |_t, v| Ok(v[0].add(v[1])?.mul(v[0])?.sum()));
        check_op!("sub_mul", |_t, v| Ok(v[0].sub(v[1])?.mul(v[1])?.sum()));
        check_op!("div", |_t, v| Ok(v[0].div(v[1])?.sum()));
        check_op!("exp", |_t, v| Ok(v[0].exp().mul(v[1])?.sum()));
        check_op!("log", |_t, v| Ok(v[1].log()?.sum()));
        check_op!("sqrt", |_t, v| Ok(v[1].sqrt()?.sum()));
        check_op!("silu", |_t, v| Ok(v[0].silu().sum()));
        check_op!("softplus", |_t, v| Ok(v[0].softplus().sum()));
        check_op!("neg", |_t, v| Ok(v[0].neg().mul(v[0])?.sum()));
        check_op!("matmul", |_t, v| Ok(v[0].matmul(v[2])?.sum()));
        check_op!("mean_axis", |_t, v| Ok(v[0].mean_axis(0)?.mul(v[0].mean_axis(0)?)?.sum()));
        check_op!("permute", |_t, v| Ok(v[0].permute_rows(&[1, 0])?.mul(v[1])?.sum()));
        check_op!("broadcast_mul", |_t, v| {
            Ok(v[0].reshape(vec![2, 3, 1])?.mul(v[2].reshape(vec![1, 3, 2])?)?.sum())
        });

        // softmax chains get the relaxed composition bound
        let softmax_case = loss_fn(|_t, v| {
            let picked = v[0].softmax(1)?.get(1)?;
            picked.mul(picked)
        });
        let check = finite_difference_check(&softmax_case, &params, 1e-5).unwrap();
        assert!(check.max_rel_err < 1e-4, "trial {trial}: softmax rel err {}", check.max_rel_err);
    }
}

#[test]
fn conv_ops_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::new(vec![4, 4, 2], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let k = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
    let dk = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let params = vec![x, k, b, dk];

    let conv = loss_fn(|_t, v| Ok(v[0].conv2d(v[1], Some(v[2]))?.silu().sum()));
    let check = finite_difference_check(&conv, &params, 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-6, "conv2d rel err {}", check.max_rel_err);

    let dw = loss_fn(|_t, v| Ok(v[0].dwconv2d(v[3])?.sum()));
    let check = finite_difference_check(&dw, &params, 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-6, "dwconv2d rel err {}", check.max_rel_err);

    let pool = loss_fn(|_t, v| Ok(v[0].avg_pool2()?.mul(v[0].avg_pool2()?)?.sum()));
    let check = finite_difference_check(&pool, &params, 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-6, "avg_pool2 rel err {}", check.max_rel_err);
}
