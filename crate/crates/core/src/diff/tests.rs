use super::gradcheck::{check_gradients, uniform_values, CheckSettings};
use super::{DiffError, ReduceKind, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: got {a}, expected {e}"
        );
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.input(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let a = tape.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let out = tape.matmul(eye, a).unwrap();
    assert_close(tape.values(out), &[1.0, 2.0, 3.0, 4.0], 0.0);
}

#[test]
fn matmul_analytic() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = tape.input(vec![3.0, 4.0], &[2, 1]).unwrap();
    let out = tape.matmul(a, b).unwrap();
    assert_close(tape.values(out), &[11.0], 0.0);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(vec![0.0; 6], &[2, 3]).unwrap();
    let b = tape.input(vec![0.0; 8], &[2, 4]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        (uniform_values::<f64>(&mut rng, 12), vec![4, 3]),
        (uniform_values::<f64>(&mut rng, 15), vec![3, 5]),
    ];
    let report = check_gradients(&inputs, CheckSettings::double(), |tape, ids| {
        let prod = tape.matmul(ids[0], ids[1])?;
        let flat = tape.reshape(prod, &[1, 20])?;
        let s = tape.reduce(ReduceKind::Sum, flat, 1)?;
        tape.reduce(ReduceKind::Sum, s, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = uniform_values(&mut rng, 6);
    let b: Vec<f64> = uniform_values(&mut rng, 8);
    let mut tape = Tape::<f64>::new();
    let aid = tape.input(a.clone(), &[3, 2]).unwrap();
    let bid = tape.input(b.clone(), &[4, 2]).unwrap();
    let out = tape.matmul_nt(aid, bid).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let expect = a[i * 2] * b[j * 2] + a[i * 2 + 1] * b[j * 2 + 1];
            assert!((tape.values(out)[i * 4 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_equal_logits_are_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    assert_close(tape.values(y), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_survives_huge_logits() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![1000.0, 0.0], &[1, 2]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let v = tape.values(y);
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![(uniform_values::<f64>(&mut rng, 35), vec![5, 7])];
    // Weighted sum downstream so the gradient is not identically zero.
    let coeffs: Vec<f64> = uniform_values(&mut rng, 35);
    let report = check_gradients(&inputs, CheckSettings::double(), move |tape, ids| {
        let y = tape.softmax_rows(ids[0])?;
        let c = tape.input(coeffs.clone(), &[5, 7])?;
        let prod = tape.mul(y, c)?;
        let rows = tape.reduce(ReduceKind::Sum, prod, 1)?;
        tape.reduce(ReduceKind::Sum, rows, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn linear_identity_weights_pass_input_through() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let w = tape.input(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = tape.input(vec![0.0, 0.0], &[2]).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_close(tape.values(y), &[1.0, 2.0, 3.0, 4.0], 0.0);
}

#[test]
fn linear_analytic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![1.0, 1.0], &[1, 2]).unwrap();
    let w = tape.input(vec![1.0, 1.0], &[2, 1]).unwrap();
    let b = tape.input(vec![1.0], &[1]).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_close(tape.values(y), &[3.0], 0.0);
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        (uniform_values::<f64>(&mut rng, 12), vec![3, 4]),
        (uniform_values::<f64>(&mut rng, 8), vec![4, 2]),
        (uniform_values::<f64>(&mut rng, 2), vec![2]),
    ];
    let report = check_gradients(&inputs, CheckSettings::double(), |tape, ids| {
        let y = tape.linear(ids[0], ids[1], ids[2])?;
        let flat = tape.reshape(y, &[1, 6])?;
        let s = tape.reduce(ReduceKind::Sum, flat, 1)?;
        tape.reduce(ReduceKind::Sum, s, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn elementwise_trivia() {
    let mut tape = Tape::<f64>::new();
    let zero = tape.input(vec![0.0], &[1]).unwrap();
    let e = tape.exp(zero).unwrap();
    assert_close(tape.values(e), &[1.0], 0.0);

    let z = tape.input(vec![0.0], &[1]).unwrap();
    let r = tape.reciprocal_eps(z, 1e-8).unwrap();
    assert_close(tape.values(r), &[1e8], 1e-4);

    let a = tape.input(vec![1.0, 2.0], &[2]).unwrap();
    let b = tape.input(vec![3.0, 4.0], &[2]).unwrap();
    let h = tape.mul(a, b).unwrap();
    assert_close(tape.values(h), &[3.0, 8.0], 0.0);
}

#[test]
fn elementwise_broadcast_mismatch_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(vec![0.0; 4], &[2, 2]).unwrap();
    let b = tape.input(vec![0.0; 6], &[2, 3]).unwrap();
    assert!(matches!(
        tape.add(a, b),
        Err(DiffError::Dimension { .. })
    ));
}

#[test]
fn unary_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Offset away from zero so abs/reciprocal_eps are smooth at the probes.
    let values: Vec<f64> = uniform_values::<f64>(&mut rng, 9)
        .into_iter()
        .map(|v: f64| v + 1.5)
        .collect();
    let inputs = vec![(values, vec![3, 3])];
    for build_kind in 0..4 {
        let report = check_gradients(&inputs, CheckSettings::double(), |tape, ids| {
            let y = match build_kind {
                0 => tape.exp(ids[0])?,
                1 => tape.neg(ids[0])?,
                2 => tape.abs(ids[0])?,
                _ => tape.reciprocal_eps(ids[0], 1e-8)?,
            };
            let s = tape.reduce(ReduceKind::Sum, y, 1)?;
            tape.reduce(ReduceKind::Sum, s, 0)
        })
        .unwrap();
        assert!(report.passed(1e-5), "kind {build_kind}: {report:?}");
    }
}

#[test]
fn reduce_trivia() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let s = tape.reduce(ReduceKind::Sum, a, 0).unwrap();
    assert_close(tape.values(s), &[6.0], 0.0);

    let c = tape.input(vec![5.0; 8], &[2, 4]).unwrap();
    let m = tape.reduce(ReduceKind::Mean, c, 1).unwrap();
    assert_close(tape.values(m), &[5.0, 5.0], 0.0);

    let bad = tape.reduce(ReduceKind::Sum, a, 1);
    assert!(matches!(bad, Err(DiffError::Axis { .. })));
}

#[test]
fn reduce_mean_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let inputs = vec![(uniform_values::<f64>(&mut rng, 12), vec![3, 4])];
    let report = check_gradients(&inputs, CheckSettings::double(), |tape, ids| {
        let m = tape.reduce(ReduceKind::Mean, ids[0], 1)?;
        let sq = tape.mul(m, m)?;
        tape.reduce(ReduceKind::Sum, sq, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn reduce_max_routes_gradient_to_first_maximum() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(&[2.0, 5.0, 5.0, 1.0], &[1, 4]).unwrap();
    let m = tape.reduce(ReduceKind::Max, a, 1).unwrap();
    let root = tape.reduce(ReduceKind::Sum, m, 0).unwrap();
    tape.backward(root).unwrap();
    assert_close(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0, 0.0], 0.0);
}

#[test]
fn backward_square_function() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&[3.0], &[1]).unwrap();
    let y = tape.mul(x, x).unwrap();
    let root = tape.reduce(ReduceKind::Sum, y, 0).unwrap();
    tape.backward(root).unwrap();
    assert_close(tape.grad(x).unwrap(), &[6.0], 0.0);
}

#[test]
fn backward_of_softmax_sum_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&[0.3, -1.2, 2.0, 0.7], &[1, 4]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let s = tape.reduce(ReduceKind::Sum, y, 1).unwrap();
    let root = tape.reduce(ReduceKind::Sum, s, 0).unwrap();
    tape.backward(root).unwrap();
    for g in tape.grad(x).unwrap() {
        assert!(g.abs() < 1e-12, "row-sum-constant gradient leak: {g}");
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&[1.0, 2.0], &[2]).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(DiffError::NonScalarRoot { .. })
    ));
}

#[test]
fn tape_is_single_use() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&[2.0], &[1]).unwrap();
    let y = tape.mul(x, x).unwrap();
    let root = tape.reduce(ReduceKind::Sum, y, 0).unwrap();
    tape.backward(root).unwrap();
    assert!(matches!(tape.mul(x, x), Err(DiffError::Consumed)));
    // Values and gradients stay readable after consumption.
    assert_close(tape.values(y), &[4.0], 0.0);
    assert_close(tape.grad(x).unwrap(), &[4.0], 0.0);
}

#[test]
fn gather_rows_and_backward_scatter() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
    let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
    assert_close(tape.values(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0);
    let flat = tape.reshape(g, &[1, 6]).unwrap();
    let s = tape.reduce(ReduceKind::Sum, flat, 1).unwrap();
    let root = tape.reduce(ReduceKind::Sum, s, 0).unwrap();
    tape.backward(root).unwrap();
    assert_close(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
}

#[test]
fn gather_rows_rejects_out_of_range() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![0.0; 4], &[2, 2]).unwrap();
    assert!(matches!(
        tape.gather_rows(x, &[2]),
        Err(DiffError::RowIndex { .. })
    ));
}

#[test]
fn neighbor_weighted_sum_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let indices: Vec<u32> = vec![0, 1, 2, 1, 3, 0, 2, 2, 3, 0, 1, 3];
    let inputs = vec![
        (uniform_values::<f64>(&mut rng, 12), vec![4, 3]), // values 4×3
        (uniform_values::<f64>(&mut rng, 12), vec![4, 3]), // weights 4×3
    ];
    let report = check_gradients(&inputs, CheckSettings::double(), move |tape, ids| {
        let out = tape.neighbor_weighted_sum(ids[0], ids[1], &indices)?;
        let sq = tape.mul(out, out)?;
        let s = tape.reduce(ReduceKind::Sum, sq, 1)?;
        tape.reduce(ReduceKind::Sum, s, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn normalize_rows_sums_to_one_and_flags_zero_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .input(vec![1.0, 3.0, 0.0, 0.0, 2.0, 2.0], &[3, 2])
        .unwrap();
    let norm = tape.normalize_rows(x).unwrap();
    assert_eq!(norm.fallback_rows, vec![1]);
    assert_close(
        tape.values(norm.id),
        &[0.25, 0.75, 0.5, 0.5, 0.5, 0.5],
        1e-15,
    );
}

#[test]
fn normalize_rows_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let values: Vec<f64> = uniform_values::<f64>(&mut rng, 12)
        .into_iter()
        .map(|v: f64| v + 2.0) // keep rows away from zero sums
        .collect();
    let coeffs: Vec<f64> = uniform_values(&mut rng, 12);
    let inputs = vec![(values, vec![3, 4])];
    let report = check_gradients(&inputs, CheckSettings::double(), move |tape, ids| {
        let y = tape.normalize_rows(ids[0])?.id;
        let c = tape.input(coeffs.clone(), &[3, 4])?;
        let prod = tape.mul(y, c)?;
        let s = tape.reduce(ReduceKind::Sum, prod, 1)?;
        tape.reduce(ReduceKind::Sum, s, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn concat_slice_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let inputs = vec![
        (uniform_values::<f64>(&mut rng, 6), vec![2, 3]),
        (uniform_values::<f64>(&mut rng, 4), vec![2, 2]),
    ];
    let report = check_gradients(&inputs, CheckSettings::double(), |tape, ids| {
        let cat = tape.concat_cols(ids[0], ids[1])?;
        let band = tape.slice_cols(cat, 1, 3)?;
        let sq = tape.mul(band, band)?;
        let s = tape.reduce(ReduceKind::Sum, sq, 1)?;
        tape.reduce(ReduceKind::Sum, s, 0)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.input(vec![0.0; 13], &[1, 13]).unwrap();
    let loss = tape.cross_entropy(logits, &[4]).unwrap();
    assert!((tape.values(loss)[0] - (13.0f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.input(vec![100.0, 0.0, 0.0], &[1, 3]).unwrap();
    let loss = tape.cross_entropy(logits, &[0]).unwrap();
    assert!(tape.values(loss)[0] < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.input(vec![0.0; 4], &[1, 4]).unwrap();
    assert!(matches!(
        tape.cross_entropy(logits, &[4]),
        Err(DiffError::Label { .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let inputs = vec![(uniform_values::<f64>(&mut rng, 24), vec![6, 4])];
    let labels = vec![0u32, 3, 1, 2, 2, 0];
    let report = check_gradients(&inputs, CheckSettings::double(), move |tape, ids| {
        tape.cross_entropy(ids[0], &labels)
    })
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn identical_seeds_give_bit_identical_tapes() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a: Vec<f32> = uniform_values(&mut rng, 24);
        let b: Vec<f32> = uniform_values(&mut rng, 24);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&a, &[4, 6]).unwrap();
        let w = tape.param(&b, &[6, 4]).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let sm = tape.softmax_rows(y).unwrap();
        let loss = tape.cross_entropy(sm, &[0, 1, 2, 3]).unwrap();
        let v = tape.values(loss)[0];
        tape.backward(loss).unwrap();
        (v, tape.grad_or_zeros(x), tape.grad_or_zeros(w))
    };
    let (v1, gx1, gw1) = run();
    let (v2, gx2, gw2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn flop_counter_tracks_matmul_cost() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(vec![0.0; 12], &[4, 3]).unwrap();
    let b = tape.input(vec![0.0; 15], &[3, 5]).unwrap();
    let before = tape.flops();
    tape.matmul(a, b).unwrap();
    assert_eq!(tape.flops() - before, 4 * 3 * 5);
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_stay_positive(
            rows in 1usize..6,
            cols in 1usize..8,
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-30.0..30.0))
                .collect();
            let mut tape = Tape::<f64>::new();
            let x = tape.input(values, &[rows, cols]).unwrap();
            let y = tape.softmax_rows(x).unwrap();
            for r in 0..rows {
                let row = &tape.values(y)[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|v| *v > 0.0));
            }
        }

        #[test]
        fn exp_of_negated_abs_is_in_unit_interval(x in -100.0f64..100.0) {
            let mut tape = Tape::<f64>::new();
            let v = tape.input(vec![x], &[1]).unwrap();
            let a = tape.abs(v).unwrap();
            let n = tape.neg(a).unwrap();
            let e = tape.exp(n).unwrap();
            let y = tape.values(e)[0];
            prop_assert!(y > 0.0 && y <= 1.0);
        }
    }
}
