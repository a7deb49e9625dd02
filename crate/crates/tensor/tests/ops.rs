use glied_tensor::gradcheck::{self, DEFAULT_STEP};
use glied_tensor::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> glied_tensor::Result<Var> {
    // sum(x ⊙ w) for a fixed random w, so gradients are not all equal.
    let w = random(tape.value(x).shape(), seed);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_identity_and_selector() {
    let mut t = Tape::new();
    let i2 = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let y = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sel = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    let b = t.constant(m(2, 2, &[5.0, 6.0, 7.0, 8.0]));
    let y = t.matmul(sel, b).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(random(&[3, 4], 1));
    let b = t.constant(random(&[3, 2], 2));
    assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_central_difference() {
    let report = gradcheck::check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        },
        &[random(&[3, 4], 3), random(&[4, 2], 4)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn relu_concat_sum_basics() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let a = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::vector(vec![3.0]).unwrap());
    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

    let ones = t.leaf(Tensor::ones(&[5, 5]).unwrap());
    let s = t.sum(ones).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 25.0);
    t.backward(s).unwrap();
    assert!(t.grad(ones).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn relu_backward_passes_only_positive_inputs() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0, 0.5]).unwrap());
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn elementwise_errors() {
    let mut t = Tape::new();
    let a = t.constant(random(&[2, 3], 1));
    let b = t.constant(random(&[3, 2], 2));
    assert!(t.add(a, b).is_err());
    assert!(t.sub(a, b).is_err());
    let c = t.constant(random(&[2, 2], 3));
    assert!(t.concat(&[a, c], 0).is_err());
    assert!(matches!(t.apply("tanh", &[a]), Err(TensorError::UnknownOp(_))));
}

#[test]
fn scalar_broadcast_only() {
    let mut t = Tape::new();
    let a = t.leaf(random(&[2, 3], 5));
    let s = t.leaf(Tensor::scalar(2.0));
    let y = t.mul(a, s).unwrap();
    let y = t.add(y, s).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 3]);
    let row = t.constant(random(&[3], 6));
    assert!(t.add(a, row).is_err(), "row broadcasting must be rejected");
}

#[test]
fn composite_primitives_gradcheck() {
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> glied_tensor::Result<Var>>)> = vec![
        (
            "add/sub/mul",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                weighted_sum(t, c, 10)
            }),
        ),
        (
            "scalar broadcast",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.sum(v[1])?;
                let a = t.mul(v[0], s)?;
                let b = t.add(a, s)?;
                weighted_sum(t, b, 11)
            }),
        ),
        (
            "transpose/concat/narrow",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let tr = t.transpose(v[0])?;
                let tr2 = t.transpose(v[1])?;
                let c = t.concat(&[tr, tr2], 1)?;
                let n = t.narrow(c, 1, 1, 3)?;
                weighted_sum(t, n, 12)
            }),
        ),
        (
            "sum/mean axis",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let a = t.sum_axis(v[0], 0)?;
                let b = t.mean_axis(v[1], 1)?;
                let wa = weighted_sum(t, a, 13)?;
                let wb = weighted_sum(t, b, 14)?;
                t.add(wa, wb)
            }),
        ),
        (
            "masked fill + scale",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let keep = [true, false, true, true, false, true];
                let a = t.masked_fill(v[0], &keep, -3.0)?;
                let b = t.scale(a, 0.7)?;
                weighted_sum(t, b, 15)
            }),
        ),
        (
            "log_softmax + pick",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let l = t.log_softmax(v[0], 1)?;
                let p = t.pick(l, &[2, 0])?;
                t.sum(p)
            }),
        ),
        (
            "relu away from kinks",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let r = t.relu(v[0])?;
                weighted_sum(t, r, 16)
            }),
        ),
    ];
    for (name, build) in cases {
        let report =
            gradcheck::check(build, &[random(&[2, 3], 20), random(&[2, 3], 21)], DEFAULT_STEP)
                .unwrap();
        assert!(report.max_rel_err < 1e-5, "{name}: {report:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
}

#[test]
fn softmax_jacobian_matches_central_difference() {
    let report = gradcheck::check(
        |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y, 30)
        },
        &[random(&[6], 31)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");

    // Non-trailing axis.
    let report = gradcheck::check(
        |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y, 32)
        },
        &[random(&[3, 4], 33)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::ones(&[3]).unwrap());
    let b = t.constant(Tensor::zeros(&[3]).unwrap());
    let x = t.constant(Tensor::matrix(1, 3, vec![3.0, 3.0, 3.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-6).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g = t.constant(Tensor::ones(&[2]).unwrap());
    let b = t.constant(Tensor::zeros(&[2]).unwrap());
    let x = t.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-6).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);

    let bad = t.constant(Tensor::ones(&[3]).unwrap());
    assert!(t.layer_norm(x, bad, b, 1e-6).is_err());
}

#[test]
fn layer_norm_gradient_matches_central_difference() {
    let report = gradcheck::check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(t, y, 40)
        },
        &[random(&[4, 8], 41), random(&[8], 42), random(&[8], 43)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn dropout_eval_and_zero_rate_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.leaf(random(&[4, 4], 50));
    let y = t.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(y, x);
    assert_eq!(t.value(y), t.value(x));
    let y = t.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(t.value(y), t.value(x));
    assert!(matches!(
        t.dropout(x, 1.0, true, &mut rng),
        Err(TensorError::Parameter(_))
    ));
}

#[test]
fn dropout_is_unbiased_within_three_sigma() {
    // Each survivor is 2.0 with probability 1/2: per-element variance is 1,
    // so the mean of n samples has σ = 1/√n.
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[n]).unwrap());
    let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = t.value(y).sum() / n as f64;
    let sigma = 1.0 / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    assert!(t.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn embedding_lookup_and_accumulation() {
    let table = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut t = Tape::new();
    let tv = t.leaf(table);
    let row = t.gather_rows(tv, &[0]).unwrap();
    assert_eq!(t.value(row).data(), &[1.0, 2.0]);

    let rows = t.gather_rows(tv, &[1, 1]).unwrap();
    let s = t.sum(rows).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(tv).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

    assert!(matches!(
        t.gather_rows(tv, &[3]),
        Err(TensorError::Index { index: 3, size: 3 })
    ));
}

#[test]
fn embedding_gradient_matches_central_difference() {
    let report = gradcheck::check(
        |t, v| {
            let r = t.gather_rows(v[0], &[2, 0, 2, 4])?;
            weighted_sum(t, r, 60)
        },
        &[random(&[5, 3], 61)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let uniform = t.constant(Tensor::zeros(&[2, 4]).unwrap());
    let loss = t.cross_entropy(uniform, &[1, 3], 0).unwrap();
    assert!((t.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 40.0] {
        let l = t.constant(m(1, 3, &[0.0, margin, 0.0]));
        let loss = t.cross_entropy(l, &[1], 99).unwrap();
        let v = t.value(loss).item().unwrap();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-16);

    let l = t.constant(random(&[2, 3], 70));
    assert!(matches!(
        t.cross_entropy(l, &[0, 0], 0),
        Err(TensorError::Degenerate(_))
    ));
}

#[test]
fn cross_entropy_ignores_padding_and_matches_central_difference() {
    let report = gradcheck::check(
        |t, v| t.cross_entropy(v[0], &[4, 0, 2], 0),
        &[random(&[3, 5], 80)],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");

    let mut t = Tape::new();
    let l = t.leaf(random(&[3, 5], 81));
    let loss = t.cross_entropy(l, &[4, 0, 2], 0).unwrap();
    t.backward(loss).unwrap();
    assert!(t.grad(l).unwrap().row(1).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_examples_and_accumulation() {
    let mut t = Tape::new();
    let w = t.leaf(random(&[2, 3], 90));
    let s = t.sum(w).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(w).unwrap().data().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let w = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let sq = t.mul(w, w).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    // Second backward without zeroing accumulates.
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);
    t.zero_grad();
    assert!(t.grad(w).is_none());

    let err = t.backward(sq).unwrap_err();
    assert!(matches!(err, TensorError::Contract(_)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let w = t.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let p = t.mul(c, w).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(w).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn apply_dispatches_named_kinds() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![-2.0, 3.0]).unwrap());
    let r = t.apply("relu", &[a]).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 3.0]);
    let s = t.apply("sum", &[a]).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 1.0);
    assert!(t.apply("add", &[a]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = t.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = t.value(y).row(r).unwrap();
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn dropout_eval_is_bitwise_identity(
        vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
        rate in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vals).unwrap());
        let y = t.dropout(x, rate, false, &mut rng).unwrap();
        prop_assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn transpose_is_an_involution(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut t = Tape::new();
        let x = t.constant(random(&[r, c], seed));
        let y = t.transpose(x).unwrap();
        let z = t.transpose(y).unwrap();
        prop_assert_eq!(t.value(z), t.value(x));
    }
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let suite = gradcheck::op_suite(DEFAULT_STEP).unwrap();
    assert!(suite.len() >= 20);
    for (name, report) in suite {
        assert!(report.max_rel_err < 1e-6, "{name}: {report:?}");
    }
}
