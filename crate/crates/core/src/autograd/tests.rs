use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{
    check_primitive, check_primitive_with_fault, finite_diff_check, DEFAULT_EPS,
};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_by_identity() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_uniform_logits() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::zeros(vec![4]));
    let p = tape.softmax(z, 0).unwrap();
    assert_eq!(tape.value(p).data(), &[0.25; 4]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.l2_normalize(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
}

#[test]
fn derivative_of_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
    let mut tape = Tape::<f64>::new();
    let z = tape.param(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
    let loss = tape.cross_entropy_from_logits(z, &[Some(2)]).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut p = [0.3f64, -1.0, 2.0, 0.5].map(f64::exp);
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p[2] -= 1.0;
    for (a, b) in g.get(z).unwrap().data().iter().zip(p) {
        assert!((a - b).abs() < 1e-12);
    }

    // Same thing spelled out as -(onehot · log softmax(z)).
    let mut tape = Tape::<f64>::new();
    let z = tape.param(t(&[4], &[0.3, -1.0, 2.0, 0.5]));
    let sm = tape.softmax(z, 0).unwrap();
    let logp = tape.log(sm);
    let onehot = tape.constant(t(&[4], &[0.0, 0.0, 1.0, 0.0]));
    let picked = tape.mul(logp, onehot).unwrap();
    let s = tape.sum(picked);
    let loss = tape.scale(s, -1.0);
    let g2 = tape.backward(loss).unwrap();
    for (a, b) in g2.get(z).unwrap().data().iter().zip(p) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_three_op_graphs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(1..5);
        let x = Tensor::new(
            vec![n],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::new(
            vec![n],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let wiring = rng.random_range(0..3);
        let report = finite_diff_check(
            move |tape: &mut Tape<f64>, v: &[Var]| {
                let a = match wiring {
                    0 => tape.mul(v[0], v[1])?,
                    1 => tape.add(v[0], v[1])?,
                    _ => tape.sub(v[0], v[1])?,
                };
                let b = tape.gelu(a);
                let c = tape.mul(b, v[0])?;
                Ok(tape.sum(c))
            },
            &[x, y],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}

#[test]
fn finite_diff_sum_of_squares_and_constant() {
    let x = t(&[5], &[0.3, -1.2, 2.0, 0.01, -0.7]);
    let sq = finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let s = tape.mul(v[0], v[0])?;
            Ok(tape.sum(s))
        },
        std::slice::from_ref(&x),
        1e-3,
    )
    .unwrap();
    assert!(sq.max_rel_error < 1e-4, "{sq:?}");

    let constant = finite_diff_check(
        |tape: &mut Tape<f64>, _v: &[Var]| Ok(tape.constant(Tensor::scalar(2.5))),
        &[x],
        1e-3,
    )
    .unwrap();
    assert_eq!(constant.max_rel_error, 0.0);
}

#[test]
fn finite_diff_rejects_nondeterministic_functions() {
    let calls = std::cell::Cell::new(0.0);
    let err = finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            calls.set(calls.get() + 1.0);
            let s = tape.sum(v[0]);
            Ok(tape.scale(s, calls.get()))
        },
        &[t(&[2], &[1.0, 2.0])],
        1e-3,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
    assert!(finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| Ok(tape.sum(v[0])),
        &[t(&[1], &[1.0])],
        0.0
    )
    .is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(vec![3]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_operation_and_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = tape.constant(Tensor::zeros(vec![3]));
    let msg = tape.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3]"), "{msg}");
    assert!(matches!(
        tape.softmax(a, 2),
        Err(Error::InvalidAxis { op: "softmax", .. })
    ));
    assert!(matches!(
        tape.layer_norm(a, 5, 1e-5),
        Err(Error::InvalidAxis { .. })
    ));
    let table = tape.constant(Tensor::zeros(vec![4, 2]));
    assert!(matches!(
        tape.embedding_gather(table, &[4]),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn constants_never_receive_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let unused = tape.param(t(&[1], &[9.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
}

#[test]
fn every_primitive_passes_two_hundred_random_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in PRIMITIVES {
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let r = check_primitive(op, &mut rng, DEFAULT_EPS).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-3, "{op}: {worst}");
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = check_primitive_with_fault("matmul", &mut rng, 1e-3, Some("matmul")).unwrap();
    assert!(r.max_rel_error > 1e-3);
}

#[test]
fn softmax_rows_normalized_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..9));
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let shift: f32 = rng.random_range(-10.0..10.0);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data.clone()).unwrap());
        let xs = tape.constant(
            Tensor::new(vec![rows, cols], data.iter().map(|v| v + shift).collect()).unwrap(),
        );
        let p = tape.softmax(x, 1).unwrap();
        let ps = tape.softmax(xs, 1).unwrap();
        for r in 0..rows {
            let s: f32 = tape.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
        assert!(tape.value(p).max_abs_diff(tape.value(ps)) <= 1e-6);
    }
}

#[test]
fn backward_twice_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![2, 3, 4], data).unwrap());
    let w = tape.param(Tensor::full(vec![2, 4, 3], 0.1));
    let y = tape.matmul(x, w).unwrap();
    let y = tape.layer_norm(y, 2, 1e-5).unwrap();
    let y = tape.gelu(y);
    let y = tape.softmax(y, 1).unwrap();
    let l = tape.mean(y);
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    for v in [x, w] {
        let (a, b) = (g1.get(v).unwrap().data(), g2.get(v).unwrap().data());
        assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn layer_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let d = rng.random_range(8..64);
        let data: Vec<f32> = (0..3 * d).map(|_| rng.random_range(-4.0..9.0)).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3, d], data).unwrap());
        let y = tape.layer_norm(x, 1, 1e-5).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}

#[test]
fn fully_masked_softmax_row_is_zero_not_nan() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3]));
    let m = tape.masked_fill(x, &[true; 3], f64::NEG_INFINITY).unwrap();
    let p = tape.softmax(m, 1).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0; 3]);
}
