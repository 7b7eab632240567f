//! ZOH discretization, selective recurrence, and cross-scan
//! serialization against independent oracles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s6mod::params::{Linear, ParamStore};
use s6mod::scan::{
    inverse_permutation, scan_recurrence, selective_scan, serialize, ss2d, zoh_discretize,
    Direction, DirectionProjections, ZohMode,
};
use s6mod::tensor::gradcheck::{finite_difference_check, loss_fn};
use s6mod::tensor::{Tape, Tensor};
use s6mod::Error;

fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tol {tol})"
    );
}

/// Upper-right block of exp([[a,b],[0,0]]·Δ) by scaling-and-squaring
/// with a Taylor series — an independent route to the ZOH input matrix.
fn zoh_via_matrix_exponential(a: f64, delta: f64, b: f64) -> (f64, f64) {
    // m = [[a*Δ, b*Δ], [0, 0]]
    let mut m = [a * delta, b * delta, 0.0, 0.0];
    let norm = m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let squarings = norm.log2().ceil().max(0.0) as u32 + 4;
    let scale = 0.5f64.powi(squarings as i32);
    for v in &mut m {
        *v *= scale;
    }
    // exp by Taylor series on the scaled matrix
    let mut result = [1.0, 0.0, 0.0, 1.0];
    let mut term = [1.0, 0.0, 0.0, 1.0];
    for k in 1..30 {
        let t = [
            term[0] * m[0] + term[1] * m[2],
            term[0] * m[1] + term[1] * m[3],
            term[2] * m[0] + term[3] * m[2],
            term[2] * m[1] + term[3] * m[3],
        ];
        term = t.map(|v| v / k as f64);
        for i in 0..4 {
            result[i] += term[i];
        }
    }
    for _ in 0..squarings {
        result = [
            result[0] * result[0] + result[1] * result[2],
            result[0] * result[1] + result[1] * result[3],
            result[2] * result[0] + result[3] * result[2],
            result[2] * result[1] + result[3] * result[3],
        ];
    }
    (result[0], result[1])
}

#[test]
fn zoh_exact_scalar_hand_case() {
    let tape = Tape::new();
    let a = tape.constant(vec![1, 1], vec![-1.0]).unwrap();
    let delta = tape.constant(vec![1, 1], vec![std::f64::consts::LN_2]).unwrap();
    let b = tape.constant(vec![1, 1], vec![1.0]).unwrap();
    let (abar, bbar) = zoh_discretize(a, delta, b, ZohMode::Exact).unwrap();
    assert_close(abar.value()[0], 0.5, 1e-15);
    assert_close(bbar.value()[0], 0.5, 1e-15);

    let (abar, bbar) = zoh_discretize(a, delta, b, ZohMode::Simplified).unwrap();
    assert_close(abar.value()[0], 0.5, 1e-15);
    assert_close(bbar.value()[0], std::f64::consts::LN_2, 1e-15);
}

#[test]
fn zoh_zero_step_limit() {
    let tape = Tape::new();
    let a = tape.constant(vec![1, 1], vec![-1.0]).unwrap();
    let delta = tape.constant(vec![1, 1], vec![1e-12]).unwrap();
    let b = tape.constant(vec![1, 1], vec![1.0]).unwrap();
    let (abar, bbar) = zoh_discretize(a, delta, b, ZohMode::Exact).unwrap();
    assert_close(abar.value()[0], 1.0, 1e-9);
    assert_close(bbar.value()[0], 0.0, 1e-9);
}

#[test]
fn zoh_domain_errors() {
    let tape = Tape::new();
    let good_a = tape.constant(vec![1, 1], vec![-1.0]).unwrap();
    let bad_a = tape.constant(vec![1, 1], vec![0.0]).unwrap();
    let good_d = tape.constant(vec![1, 1], vec![0.5]).unwrap();
    let bad_d = tape.constant(vec![1, 1], vec![0.0]).unwrap();
    let b = tape.constant(vec![1, 1], vec![1.0]).unwrap();
    assert!(matches!(zoh_discretize(bad_a, good_d, b, ZohMode::Exact), Err(Error::Domain { .. })));
    assert!(matches!(zoh_discretize(good_a, bad_d, b, ZohMode::Exact), Err(Error::Domain { .. })));
}

#[test]
fn zoh_exact_matches_matrix_exponential_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = -rng.gen_range(0.01..5.0);
        let delta = rng.gen_range(0.001..3.0);
        let b = rng.gen_range(-2.0..2.0);
        let tape = Tape::new();
        let av = tape.constant(vec![1, 1], vec![a]).unwrap();
        let dv = tape.constant(vec![1, 1], vec![delta]).unwrap();
        let bv = tape.constant(vec![1, 1], vec![b]).unwrap();
        let (abar, bbar) = zoh_discretize(av, dv, bv, ZohMode::Exact).unwrap();
        let (abar_m, bbar_m) = zoh_via_matrix_exponential(a, delta, b);
        worst = worst.max((abar.value()[0] - abar_m).abs()).max((bbar.value()[0] - bbar_m).abs());
    }
    assert!(worst < 1e-10, "worst abs deviation {worst}");
}

#[test]
fn abar_strictly_decays_for_valid_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let a: Vec<f64> = (0..12).map(|_| -rng.gen_range(0.05..4.0)).collect();
    let d: Vec<f64> = (0..20).map(|_| rng.gen_range(0.001..2.5)).collect();
    let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let av = tape.constant(vec![4, 3], a).unwrap();
    let dv = tape.constant(vec![5, 4], d).unwrap();
    let bv = tape.constant(vec![5, 3], b).unwrap();
    let (abar, _) = zoh_discretize(av, dv, bv, ZohMode::Exact).unwrap();
    assert!(abar.value().iter().all(|&v| v > 0.0 && v < 1.0));
}

/// Naive per-step recurrence on plain arrays with its own
/// expm1-based discretization.
fn naive_scan(
    x: &[f64],
    a: &[f64],
    delta: &[f64],
    b_seq: &[f64],
    c_seq: &[f64],
    l: usize,
    d: usize,
    n: usize,
    mode: ZohMode,
) -> Vec<f64> {
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for di in 0..d {
            let dt = delta[t * d + di];
            let xv = x[t * d + di];
            let mut acc = 0.0;
            for ni in 0..n {
                let av = a[di * n + ni];
                let abar = (dt * av).exp();
                let bbar = match mode {
                    ZohMode::Exact => (dt * av).exp_m1() / av * b_seq[t * n + ni],
                    ZohMode::Simplified => dt * b_seq[t * n + ni],
                };
                let idx = di * n + ni;
                h[idx] = abar * h[idx] + bbar * xv;
                acc += c_seq[t * n + ni] * h[idx];
            }
            y[t * d + di] = acc;
        }
    }
    y
}

#[test]
fn scan_hand_unrolled_two_steps() {
    let tape = Tape::new();
    let ln2 = std::f64::consts::LN_2;
    let x = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let a = tape.constant(vec![1, 1], vec![-1.0]).unwrap();
    let delta = tape.constant(vec![2, 1], vec![ln2, ln2]).unwrap();
    let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let c = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let y = selective_scan(&tape, x, a, delta, b, c, ZohMode::Exact).unwrap();
    let y = y.value();
    assert_close(y[0], 0.5, 1e-15);
    assert_close(y[1], 0.75, 1e-15);
}

#[test]
fn scan_zero_input_gives_zero_output() {
    let tape = Tape::new();
    let x = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    let a = tape.constant(vec![2, 2], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
    let delta = tape.constant(vec![3, 2], vec![0.3; 6]).unwrap();
    let b = tape.constant(vec![3, 2], vec![0.7; 6]).unwrap();
    let c = tape.constant(vec![3, 2], vec![0.9; 6]).unwrap();
    let y = selective_scan(&tape, x, a, delta, b, c, ZohMode::Exact).unwrap();
    assert!(y.value().iter().all(|&v| v == 0.0));
}

#[test]
fn scan_matches_naive_recurrence_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let l = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let mode = if trial % 2 == 0 { ZohMode::Exact } else { ZohMode::Simplified };
        let x: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..d * n).map(|_| -rng.gen_range(0.05..3.0)).collect();
        let delta: Vec<f64> = (0..l * d).map(|_| rng.gen_range(0.01..1.5)).collect();
        let b: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let want = naive_scan(&x, &a, &delta, &b, &c, l, d, n, mode);

        let tape = Tape::new();
        let xv = tape.constant(vec![l, d], x).unwrap();
        let av = tape.constant(vec![d, n], a).unwrap();
        let dv = tape.constant(vec![l, d], delta).unwrap();
        let bv = tape.constant(vec![l, n], b).unwrap();
        let cv = tape.constant(vec![l, n], c).unwrap();
        let y = selective_scan(&tape, xv, av, dv, bv, cv, mode).unwrap().value();
        for (g, w) in y.iter().zip(want.iter()) {
            assert_close(*g, *w, 1e-12);
        }
    }
}

#[test]
fn scan_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (l, d, n) = (6usize, 3usize, 4usize);
    let a: Vec<f64> = (0..d * n).map(|_| -rng.gen_range(0.1..2.0)).collect();
    let delta: Vec<f64> = (0..l * d).map(|_| rng.gen_range(0.05..1.0)).collect();
    let b: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x1: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x2: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (alpha, beta) = (0.7, -1.3);

    let run = |x: Vec<f64>| -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.constant(vec![l, d], x).unwrap();
        let av = tape.constant(vec![d, n], a.clone()).unwrap();
        let dv = tape.constant(vec![l, d], delta.clone()).unwrap();
        let bv = tape.constant(vec![l, n], b.clone()).unwrap();
        let cv = tape.constant(vec![l, n], c.clone()).unwrap();
        selective_scan(&tape, xv, av, dv, bv, cv, ZohMode::Exact).unwrap().value()
    };

    let y1 = run(x1.clone());
    let y2 = run(x2.clone());
    let mixed: Vec<f64> =
        x1.iter().zip(&x2).map(|(&u, &v)| alpha * u + beta * v).collect();
    let ym = run(mixed);
    for i in 0..l * d {
        assert_close(ym[i], alpha * y1[i] + beta * y2[i], 1e-10);
    }
}

#[test]
fn scan_gradients_pass_finite_difference_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (l, d, n) = (4usize, 2usize, 3usize);
    // theta parameterizes a = −exp(theta); delta_raw is softplused, so
    // both stay inside the domain at every probe point.
    let params = vec![
        Tensor::new(vec![l, d], (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(vec![d, n], (0..d * n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        Tensor::new(vec![l, d], (0..l * d).map(|_| rng.gen_range(-1.0..0.5)).collect()).unwrap(),
        Tensor::new(vec![l, n], (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(vec![l, n], (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
    ];
    for mode in [ZohMode::Exact, ZohMode::Simplified] {
        let case = loss_fn(move |tape, v| {
            let a = v[1].exp().neg();
            let delta = v[2].softplus();
            Ok(selective_scan(tape, v[0], a, delta, v[3], v[4], mode)?.silu().sum())
        });
        let check = finite_difference_check(&case, &params, 1e-5).unwrap();
        assert!(
            check.max_rel_err < 1e-5,
            "{mode:?} scan rel err {} at {:?}",
            check.max_rel_err,
            check.worst
        );
    }
}

#[test]
fn serialization_orders_on_two_by_two() {
    // grid [a,b;c,d] has row-major indices [0,1,2,3]
    assert_eq!(Direction::RowForward.order(2, 2), vec![0, 1, 2, 3]);
    assert_eq!(Direction::ColForward.order(2, 2), vec![0, 2, 1, 3]);
    assert_eq!(Direction::RowBackward.order(2, 2), vec![3, 2, 1, 0]);
    assert_eq!(Direction::ColBackward.order(2, 2), vec![3, 1, 2, 0]);
}

#[test]
fn direction_out_of_range_is_configuration_error() {
    assert!(matches!(Direction::from_index(4), Err(Error::Config(_))));
}

#[test]
fn serialize_then_deserialize_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for (h, w) in [(1usize, 1usize), (2, 3), (5, 4), (3, 7)] {
        let l = h * w;
        let data: Vec<f64> = (0..l * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for dir in Direction::ALL {
            let tape = Tape::new();
            let tokens = tape.constant(vec![l, 2], data.clone()).unwrap();
            let ser = serialize(tokens, dir, h, w).unwrap();
            let de = ser.permute_rows(&inverse_permutation(&dir.order(h, w))).unwrap();
            assert_eq!(de.value(), data);
        }
    }
}

fn build_dirs(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, n: usize, count: usize) -> Vec<DirectionProjections> {
    (0..count)
        .map(|i| DirectionProjections {
            f_b: Linear::new(store, &format!("dir{i}.b"), d, n, rng),
            f_c: Linear::new(store, &format!("dir{i}.c"), d, n, rng),
        })
        .collect()
}

#[test]
fn ss2d_on_degenerate_grid_is_four_times_single_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (d, n) = (3usize, 2usize);
    let mut store = ParamStore::new();
    let one_dir = build_dirs(&mut store, &mut rng, d, n, 1);
    // reuse the same projections for all four directions
    let four_dirs: Vec<DirectionProjections> = (0..4).map(|_| one_dir[0].clone()).collect();

    let tape = Tape::new();
    let p = store.bind(&tape);
    let tokens = tape.constant(vec![1, d], vec![0.4, -0.9, 1.3]).unwrap();
    let a = tape.constant(vec![d, n], vec![-1.0, -2.0, -0.4, -1.5, -0.8, -2.5]).unwrap();
    let delta = tape.constant(vec![1, d], vec![0.2, 0.5, 0.9]).unwrap();

    let four = ss2d(&tape, tokens, 1, 1, a, delta, &four_dirs, &p, ZohMode::Exact).unwrap();
    let single = ss2d(&tape, tokens, 1, 1, a, delta, &one_dir, &p, ZohMode::Exact).unwrap();
    for (f, s) in four.value().iter().zip(single.value()) {
        assert_close(*f, 4.0 * s, 1e-12);
    }
}

#[test]
fn ss2d_zero_input_gives_zero_output() {
    // zero-bias projections keep B/C finite; zero input zeroes the scan
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let (h, w, d, n) = (2usize, 2usize, 2usize, 2usize);
    let mut store = ParamStore::new();
    let dirs = build_dirs(&mut store, &mut rng, d, n, 4);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let tokens = tape.constant(vec![h * w, d], vec![0.0; h * w * d]).unwrap();
    let a = tape.constant(vec![d, n], vec![-1.0; d * n]).unwrap();
    let delta = tape.constant(vec![h * w, d], vec![0.3; h * w * d]).unwrap();
    let y = ss2d(&tape, tokens, h, w, a, delta, &dirs, &p, ZohMode::Exact).unwrap();
    assert!(y.value().iter().all(|&v| v == 0.0));
}

#[test]
fn ss2d_matches_composition_of_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let (h, w, d, n) = (2usize, 2usize, 3usize, 2usize);
    let l = h * w;
    let mut store = ParamStore::new();
    let dirs = build_dirs(&mut store, &mut rng, d, n, 4);

    let tokens_data: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a_data: Vec<f64> = (0..d * n).map(|_| -rng.gen_range(0.2..2.0)).collect();
    let delta_data: Vec<f64> = (0..l * d).map(|_| rng.gen_range(0.05..0.8)).collect();

    for mode in [ZohMode::Exact, ZohMode::Simplified] {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tokens = tape.constant(vec![l, d], tokens_data.clone()).unwrap();
        let a = tape.constant(vec![d, n], a_data.clone()).unwrap();
        let delta = tape.constant(vec![l, d], delta_data.clone()).unwrap();
        let fused = ss2d(&tape, tokens, h, w, a, delta, &dirs, &p, mode).unwrap().value();

        // explicit composition: serialize → project → discretize → scan
        // → deserialize, summed over directions
        let mut want = vec![0.0; l * d];
        for (i, proj) in dirs.iter().enumerate() {
            let dir = Direction::from_index(i).unwrap();
            let order = dir.order(h, w);
            let xs = serialize(tokens, dir, h, w).unwrap();
            let b_seq = proj.f_b.forward(&p, xs).unwrap();
            let c_seq = proj.f_c.forward(&p, xs).unwrap();
            let delta_s = delta.permute_rows(&order).unwrap();
            let (abar, bbar) = zoh_discretize(a, delta_s, b_seq, mode).unwrap();
            let y = scan_recurrence(xs, abar, bbar, c_seq, &tape).unwrap();
            let y = y.permute_rows(&inverse_permutation(&order)).unwrap().value();
            for (dst, v) in want.iter_mut().zip(y) {
                *dst += v;
            }
        }
        for (f, w_) in fused.iter().zip(want.iter()) {
            assert_close(*f, *w_, 1e-12);
        }
    }
}
