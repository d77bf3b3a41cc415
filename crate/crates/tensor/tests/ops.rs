use proptest::prelude::*;
use translocator_tensor::{Tape, Tensor, TensorError};

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_hand_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(tape.shape(c), &[2, 2]);
}

#[test]
fn matmul_identity() {
    let a = t2(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, 5.0]]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let i = tape.constant(Tensor::eye(3));
    let c = tape.matmul(av, i).unwrap();
    assert_eq!(tape.value(c), a.data());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[2.0, 2.0, 2.0], &[0.0, 3f64.ln(), 0.0]]));
    let x = tape.slice_cols(x, 0, 2).unwrap();
    let s = tape.softmax(x, 1).unwrap();
    let v = tape.value(s);
    assert!((v[0] - 0.5).abs() < 1e-15);
    assert!((v[2] - 0.25).abs() < 1e-12);
    assert!((v[3] - 0.75).abs() < 1e-12);

    let u = tape.constant(Tensor::filled(&[1, 3], 4.2));
    let su = tape.softmax(u, 1).unwrap();
    for p in tape.value(su) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_shift_invariance() {
    let base = [0.3, -1.2, 2.4, 0.0];
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 4], base.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 4], base.iter().map(|v| v + 7.0).collect()).unwrap());
    let sa = tape.softmax(a, 1).unwrap();
    let sb = tape.softmax(b, 1).unwrap();
    for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::filled(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t2(&[&[1.0, 3.0], &[5.0, 5.0]]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y);
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn layer_norm_rejects_length_one_axis() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::filled(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let x = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(tape.layer_norm(x, g, b, 1e-6).is_err());
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, 10.0]).unwrap());
    let y = tape.gelu(x);
    let v = tape.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841345).abs() < 1e-6);
    assert!((v[2] - 10.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let confident = tape.constant(t2(&[&[80.0, 0.0, 0.0]]));
    let l = tape.cross_entropy(confident, &[0]).unwrap();
    assert!(tape.value(l)[0] < 1e-30);

    let k = 7;
    let uniform = tape.constant(Tensor::zeros(&[2, k]));
    let l = tape.cross_entropy(uniform, &[3, 6]).unwrap();
    assert!((tape.value(l)[0] - (k as f64).ln()).abs() < 1e-14);

    let err = tape.cross_entropy(uniform, &[3, 7]).unwrap_err();
    assert_eq!(
        err,
        TensorError::TargetOutOfRange {
            target: 7,
            classes: 7
        }
    );
}

#[test]
fn cross_entropy_gradient_is_p_minus_y() {
    let logits = t2(&[&[0.3, -1.0, 2.0, 0.5]]);
    let mut tape = Tape::new();
    let x = tape.param(&logits);
    let l = tape.cross_entropy(x, &[2]).unwrap();
    let grads = tape.backward(l).unwrap();
    let max = 2.0f64;
    let z: f64 = logits.data().iter().map(|v| (v - max).exp()).sum();
    for (j, g) in grads.get(x).unwrap().iter().enumerate() {
        let p = (logits.data()[j] - max).exp() / z;
        let y = if j == 2 { 1.0 } else { 0.0 };
        assert!((g - (p - y)).abs() < 1e-10);
    }
}

#[test]
fn backward_square_sum() {
    let xs = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&xs);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_isolates_disjoint_branches() {
    let a = Tensor::filled(&[2], 3.0);
    let b = Tensor::filled(&[2], 5.0);
    let mut tape = Tape::new();
    let va = tape.param(&a);
    let vb = tape.param(&b);
    let _other = tape.sum(vb);
    let la = tape.sum(va);
    let grads = tape.backward(la).unwrap();
    assert_eq!(grads.get(va).unwrap(), &[1.0, 1.0]);
    assert_eq!(grads.get(vb).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let a = Tensor::filled(&[2], 3.0);
    let mut tape = Tape::new();
    let va = tape.param(&a);
    assert!(matches!(
        tape.backward(va),
        Err(TensorError::NonScalarRoot(_))
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let w = Tensor::new(
            vec![3, 3],
            (0..9).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&w);
        let y = tape.matmul(x, x).unwrap();
        let z = tape.attention(y, y, x, 1, 1).unwrap();
        tape.tensor(z)
    };
    assert_eq!(run(), run());
}

/// The fused attention op against the same computation spelled out with
/// slices, matmuls and a softmax.
#[test]
fn fused_attention_matches_composed_reference() {
    let (batch, seq, width, heads) = (2, 3, 4, 2);
    let d = width / heads;
    let mk = |s: f64| {
        Tensor::new(
            vec![batch * seq, width],
            (0..batch * seq * width)
                .map(|i| (i as f64 * s).cos())
                .collect(),
        )
        .unwrap()
    };
    let (q, k, v) = (mk(0.31), mk(0.57), mk(1.13));
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let fused = tape.attention(qv, kv, vv, batch, heads).unwrap();

    let mut rows = Vec::new();
    for b in 0..batch {
        let qb = tape.slice_rows(qv, b * seq, seq).unwrap();
        let kb = tape.slice_rows(kv, b * seq, seq).unwrap();
        let vb = tape.slice_rows(vv, b * seq, seq).unwrap();
        let mut cols = Vec::new();
        for h in 0..heads {
            let qh = tape.slice_cols(qb, h * d, d).unwrap();
            let kh = tape.slice_cols(kb, h * d, d).unwrap();
            let vh = tape.slice_cols(vb, h * d, d).unwrap();
            let s = tape.matmul_nt(qh, kh).unwrap();
            let s = tape.scale(s, 1.0 / (d as f64).sqrt());
            let p = tape.softmax(s, 1).unwrap();
            cols.push(tape.matmul(p, vh).unwrap());
        }
        rows.push(tape.concat_cols(&cols).unwrap());
    }
    let reference = tape.concat_rows(&rows).unwrap();
    for (a, b) in tape.value(fused).iter().zip(tape.value(reference)) {
        assert!((a - b).abs() < 1e-13);
    }
    let probs = tape.attention_probs(fused).unwrap();
    for b in 0..batch {
        for h in 0..heads {
            for row in probs.map(b, h).chunks(seq) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in prop::collection::vec(-50.0f64..50.0, 16)) {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[8], 1.7));
        let b = tape.constant(Tensor::zeros(&[8]));
        let x = tape.constant(Tensor::new(vec![2, 8], vals).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for row in tape.value(y).chunks(8) {
            prop_assert!((row.iter().sum::<f64>() / 8.0).abs() < 1e-10);
        }
    }
}
