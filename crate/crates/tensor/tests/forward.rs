use hcgl_tensor::{AttentionMask, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let params = [t(1, 3, &[1.0, 1.0, 1.0])];
    let mut tape = Tape::new(&params);
    let x = tape.param(0);
    let p = tape.softmax_rows(x).unwrap();
    for &v in tape.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn single_key_attention_returns_the_value_row() {
    let params = [
        t(2, 3, &[0.3, -4.0, 2.0, 9.0, 1.0, -1.0]),
        t(1, 3, &[1.0, 2.0, 3.0]),
        t(1, 2, &[7.0, -5.0]),
    ];
    let mut tape = Tape::new(&params);
    let (q, k, v) = (tape.param(0), tape.param(1), tape.param(2));
    let o = tape.attention(q, k, v, 1, &AttentionMask::None).unwrap();
    assert_eq!(tape.value(o).data(), &[7.0, -5.0, 7.0, -5.0]);
}

#[test]
fn layer_normalize_standardizes_rows() {
    let params = [t(1, 3, &[2.0, 4.0, 6.0])];
    let mut tape = Tape::new(&params);
    let x = tape.param(0);
    let y = tape.layer_normalize(x, 1e-5).unwrap();
    let d = tape.value(y).data();
    // population variance of (2,4,6) is 8/3
    let s = 1.0 / (8.0f64 / 3.0 + 1e-5).sqrt();
    let want = [-2.0 * s, 0.0, 2.0 * s];
    for (a, b) in d.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean: f64 = d.iter().sum::<f64>() / 3.0;
    let var: f64 = d.iter().map(|x| x * x).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn square_derivative() {
    let params = [Tensor::scalar(3.0)];
    let mut tape = Tape::new(&params);
    let x = tape.param(0);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(0).unwrap().item(), 6.0);
}

#[test]
fn sum_of_product_gradient_is_the_other_factor() {
    let a = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = t(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
    let params = [a, b.clone()];
    let mut tape = Tape::new(&params);
    let (va, vb) = (tape.param(0), tape.param(1));
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    // d/dA sum(AB) = 1 Bᵀ: every row of the gradient is the row sums of B
    let row_sums: Vec<f64> = (0..3).map(|r| b.row(r).iter().sum()).collect();
    let ga = g.get(0).unwrap();
    for r in 0..2 {
        assert_eq!(ga.row(r), row_sums.as_slice());
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let params = [t(1, 2, &[1.0, 2.0])];
    let tape = Tape::new(&params);
    let x = tape.param(0);
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn shape_mismatch_is_an_error() {
    let params = [t(2, 3, &[0.0; 6]), t(2, 3, &[0.0; 6])];
    let mut tape = Tape::new(&params);
    let (a, b) = (tape.param(0), tape.param(1));
    assert!(matches!(
        tape.matmul(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn non_finite_output_is_an_error() {
    let params = [t(1, 1, &[1000.0])];
    let mut tape = Tape::new(&params);
    let x = tape.param(0);
    assert!(matches!(
        tape.exp(x),
        Err(TensorError::NonFinite { op: "exp" })
    ));
}

#[test]
fn masked_keys_get_exactly_zero_weight() {
    let params = [
        t(1, 2, &[0.1, 0.2]),
        t(3, 2, &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0]),
        t(3, 1, &[1.0, 2.0, 100.0]),
    ];
    let mut tape = Tape::new(&params);
    let (q, k, v) = (tape.param(0), tape.param(1), tape.param(2));
    let o = tape
        .attention(q, k, v, 1, &AttentionMask::Keys(vec![true, true, false]))
        .unwrap();
    let w = tape.attention_weights(o).unwrap();
    assert_eq!(w[2], 0.0);
    assert!(tape.value(o).item() < 2.0);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let params = [Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        let p = tape.softmax_rows(x).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(p).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values(
        q in prop::collection::vec(-3.0f64..3.0, 6),
        k in prop::collection::vec(-3.0f64..3.0, 8),
        v in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let params = [
            Tensor::new(vec![3, 2], q).unwrap(),
            Tensor::new(vec![4, 2], k).unwrap(),
            Tensor::new(vec![4, 1], v.clone()).unwrap(),
        ];
        let mut tape = Tape::new(&params);
        let (a, b, c) = (tape.param(0), tape.param(1), tape.param(2));
        let o = tape.attention(a, b, c, 1, &AttentionMask::None).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &x in tape.value(o).data() {
            prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
        }
        let w = tape.attention_weights(o).unwrap();
        for row in w.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn forward_is_bit_deterministic(data in prop::collection::vec(-2.0f64..2.0, 12)) {
        let run = || {
            let params = [Tensor::new(vec![3, 4], data.clone()).unwrap()];
            let mut tape = Tape::new(&params);
            let x = tape.param(0);
            let s = tape.softmax_rows(x).unwrap();
            let l = tape.layer_normalize(s, 1e-5).unwrap();
            tape.value(l).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
