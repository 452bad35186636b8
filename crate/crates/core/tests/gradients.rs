mod support;

use support::gradients::{self, INSTANCES};

fn check(op: fn(usize) -> gradients::OpReport) {
    let r = op(INSTANCES);
    assert!(r.ok(), "{}: worst relative error {:.3e} over {} instances", r.name, r.worst, r.instances);
}

#[test]
fn channel_softmax() {
    check(gradients::channel_softmax_op);
}

#[test]
fn soft_argmax() {
    check(gradients::soft_argmax_op);
}

#[test]
fn spatial_variance() {
    check(gradients::spatial_variance_op);
}

#[test]
fn render() {
    check(gradients::render_op);
}

#[test]
fn normalize() {
    check(gradients::normalize_op);
}

#[test]
fn masked_pool() {
    check(gradients::masked_pool_op);
}

#[test]
fn unpool() {
    check(gradients::unpool_op);
}

#[test]
fn losses() {
    for op in [
        gradients::concentration_op,
        gradients::separation_op,
        gradients::equivariance_op,
        gradients::flow_preference_op,
        gradients::reconstruction_op,
    ] {
        check(op);
    }
}

#[test]
fn decode_through_landmarks() {
    check(gradients::decode_op);
}

#[test]
fn encoder_parameters() {
    check(gradients::encode_op);
}
