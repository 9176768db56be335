mod common;

use common::gradcheck::{self, Report, TOLERANCE};
use sparsenet_core::{Graph, Tensor};

fn assert_family(report: sparsenet_core::Result<Report>) {
    let r = report.unwrap();
    assert!(r.worst < TOLERANCE, "{}: relative error {:e} over {} shapes", r.family, r.worst, r.cases);
}

#[test]
fn matmul_and_dense() {
    assert_family(gradcheck::matmul());
    assert_family(gradcheck::dense());
    assert_family(gradcheck::masked_dense());
}

#[test]
fn conv_and_pool() {
    assert_family(gradcheck::conv2d());
    assert_family(gradcheck::maxpool2());
}

#[test]
fn activations() {
    assert_family(gradcheck::relu());
    assert_family(gradcheck::sigmoid());
    assert_family(gradcheck::kwta());
    assert_family(gradcheck::softmax_xent());
    assert_family(gradcheck::elementwise());
}

#[test]
fn dendrite_gates() {
    assert_family(gradcheck::gate_dense());
    assert_family(gradcheck::gate_conv());
}

#[test]
fn whole_models() {
    assert_family(gradcheck::model_layers());
}

#[test]
fn unselected_segments_get_exactly_zero_gradient() {
    let mut g = Graph::new();
    let ff = g.param(Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    // channel 0 picks segment 1 (|-3| > 2), channel 1 picks segment 0
    let u = g.param(Tensor::from_vec(vec![2, 2, 2], vec![2.0, 0.0, 0.0, -3.0, 0.0, 4.0, 1.0, 1.0]).unwrap());
    let ctx = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
    let out = g.gate(ff, u, &ctx).unwrap();
    assert_eq!(g.gate_state(out).unwrap().1, &[1, 0]);
    let loss = g.sum(out);
    g.backward(loss).unwrap();
    let grad = g.grad(u).unwrap().data();
    assert_eq!(&grad[0..2], &[0.0, 0.0]);
    assert_eq!(&grad[6..8], &[0.0, 0.0]);
    assert!(grad[2..4].iter().all(|v| *v != 0.0) && grad[4..6].iter().all(|v| *v != 0.0));
}
