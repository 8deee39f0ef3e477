use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]), false).unwrap();
    let y = tape.softmax_lastdim(x, false).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.leaf(Tensor::eye(3), false).unwrap();
    let mv = tape.leaf(m.clone(), false).unwrap();
    let y = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(y), &m);
}

#[test]
fn layer_norm_matches_direct_formula() {
    // Oracle: mean 2, biased variance 2/3, y = (x - mean) / sqrt(var + eps).
    let eps = 1e-5f64;
    let var = 2.0f64 / 3.0;
    let expected: Vec<f64> = [1.0f64, 2.0, 3.0]
        .iter()
        .map(|x| (x - 2.0) / (var + eps).sqrt())
        .collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false).unwrap();
    let g = tape.leaf(Tensor::full(&[3], 1.0), false).unwrap();
    let b = tape.leaf(Tensor::zeros(&[3]), false).unwrap();
    let y = tape.layer_norm(x, g, b, eps).unwrap();
    for (got, want) in tape.value(y).data().iter().zip(&expected) {
        assert!(close(*got as f64, *want, 1e-6), "{got} vs {want}");
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
    let b = tape.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn embedding_index_out_of_bounds_reports_index() {
    let mut tape = Tape::<f32>::new();
    let t = tape.leaf(Tensor::zeros(&[4, 2]), false).unwrap();
    match tape.embedding(t, &[1, 7]) {
        Err(crate::Error::IndexOutOfBounds { index, limit, .. }) => {
            assert_eq!((index, limit), (7, 4));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::from_vec(vec![3.0e38]), false).unwrap();
    assert!(matches!(tape.scale(a, 10.0), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::<f32>::new();
    let id = store.insert("x", Tensor::from_vec(vec![3.0]), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id).unwrap();
    let y = tape.mul(x, x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]), true).unwrap();
    let s = tape.softmax_lastdim(z, false).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward_grads(l).unwrap();
    for v in g.get(z).unwrap().data() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let z = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
    assert!(tape.backward_grads(z).is_err());
}

#[test]
fn unreachable_params_keep_their_gradient() {
    let mut store = ParamStore::<f32>::new();
    let a = store.insert("a", Tensor::from_vec(vec![1.0]), true).unwrap();
    let b = store.insert("b", Tensor::from_vec(vec![1.0]), true).unwrap();
    store.get_mut(b).grad = Some(Tensor::from_vec(vec![42.0]));
    let mut tape = Tape::new();
    let x = tape.param(&store, a).unwrap();
    let l = tape.sum(x).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[42.0]);
    assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[1.0]);
}

#[test]
fn causal_softmax_rows_are_normalized_and_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::randn(&[5, 5], 2.0, &mut rng), false).unwrap();
    let y = tape.softmax_lastdim(x, true).unwrap();
    let v = tape.value(y);
    for i in 0..5 {
        let s: f64 = v.row(i).iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        for j in i + 1..5 {
            assert_eq!(v.at(i, j), 0.0);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[6, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(a, false).unwrap();
        let b = tape.leaf(b, false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let e = tape.softmax_lastdim(d, false).unwrap();
        tape.value(e).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
