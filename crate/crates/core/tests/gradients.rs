mod common;

use proptest::prelude::*;
use wavedino::tensor::{Graph, Tensor};

#[test]
fn every_op_matches_central_differences_in_f64() {
    for (i, op) in common::OPS.iter().enumerate() {
        for seed in 0..3 {
            let err = common::check_op::<f64>(op, 100 * i as u64 + seed, 1e-5).unwrap();
            assert!(err < 1e-4, "{op} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn every_op_matches_central_differences_in_f32() {
    for (i, op) in common::OPS.iter().enumerate() {
        let err = common::check_op::<f32>(op, 7 + i as u64, 1e-5).unwrap();
        assert!(err < 1e-3, "{op}: relative error {err:e}");
    }
}

#[test]
fn composed_model_matches_central_differences() {
    let err = common::check_model::<f64>(3, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err:e}");
    let err = common::check_model::<f32>(4, 1e-5).unwrap();
    assert!(err < 1e-3, "f32 relative error {err:e}");
}

#[test]
fn second_backward_is_rejected() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let y = x.mul(x).unwrap().reduce_sum(None).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    assert!(g.backward(y).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_pass(op in 0usize..common::OPS.len(), seed in 1000u64..100_000) {
        let err = common::check_op::<f64>(common::OPS[op], seed, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{} relative error {err:e}", common::OPS[op]);
    }
}
