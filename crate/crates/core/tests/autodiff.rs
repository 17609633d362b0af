use std::collections::HashMap;

use atlasforge::autodiff::{backward, check_gradients, forward, Axis, Graph, DEFAULT_EPSILON};
use atlasforge::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params_for(g: &Graph, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, shape) in g.param_specs() {
        p.insert(name, Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
    }
    p
}

#[test]
fn conv_stride_two_halves_the_grid() {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 3, 8, 6]).unwrap();
    let w = g.param("w", &[4, 3, 3, 3]).unwrap();
    let b = g.param("b", &[4]).unwrap();
    let y = g.conv2d(x, w, b, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 3]);
    let up = g.upsample2(y).unwrap();
    assert_eq!(g.shape(up), &[2, 4, 8, 6]);
    let cat = g.concat(&[up, x]).unwrap();
    assert_eq!(g.shape(cat), &[2, 7, 8, 6]);
}

#[test]
fn graph_construction_rejects_bad_shapes() {
    let mut g = Graph::new();
    let a = g.input("a", &[2, 3]).unwrap();
    let b = g.input("b", &[3, 2]).unwrap();
    assert!(g.add(a, b).is_err());
    let img = g.input("img", &[1, 1, 4, 4]).unwrap();
    let field = g.input("field", &[1, 1, 4, 4]).unwrap();
    assert!(g.grid_sample(img, field).is_err());
    assert!(g.input("a", &[1]).is_err());
}

#[test]
fn composite_network_passes_gradient_check() {
    let mut g = Graph::new();
    let x = g.param("x", &[1, 2, 8, 8]).unwrap();
    let w1 = g.param("w1", &[3, 2, 3, 3]).unwrap();
    let b1 = g.param("b1", &[3]).unwrap();
    let h = g.conv2d(x, w1, b1, 2).unwrap();
    let h = g.leaky_relu(h, 0.2);
    let h = g.upsample2(h).unwrap();
    let h = g.concat(&[h, x]).unwrap();
    let dx = g.forward_diff(h, Axis::X).unwrap();
    let dy = g.forward_diff(h, Axis::Y).unwrap();
    let s = g.square(dx);
    let t = g.square(dy);
    let a = g.mean(s);
    let b = g.mean(t);
    let m = g.mul(a, b).unwrap();
    let loss = g.sigmoid(m);
    let report = check_gradients(&g, loss, &HashMap::new(), &params_for(&g, 4), DEFAULT_EPSILON).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn quadratic_check_is_exact_to_roundoff() {
    let mut g = Graph::new();
    let x = g.param("x", &[5]).unwrap();
    let s = g.square(x);
    let loss = g.sum(s);
    let report = check_gradients(&g, loss, &HashMap::new(), &params_for(&g, 1), DEFAULT_EPSILON).unwrap();
    assert!(report.strict_max_rel_error() < 1e-8);
}

#[test]
fn gradients_are_reported_for_inputs_too() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]).unwrap();
    let w = g.param("w", &[3]).unwrap();
    let p = g.mul(x, w).unwrap();
    let loss = g.sum(p);
    let mut params = ParamStore::new();
    params
        .insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let inputs = HashMap::from([("x".to_string(), Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap())]);
    let acts = forward(&g, &inputs, &params).unwrap();
    let grads = backward(&g, &acts, loss).unwrap();
    assert_eq!(grads.input("x").unwrap().data(), &[1.0, -2.0, 0.5]);
    assert_eq!(grads.param("w").unwrap().data(), &[4.0, 5.0, 6.0]);
}

proptest! {
    #[test]
    fn sum_of_squares_gradient(xs in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.input("x", &[xs.len()]).unwrap();
        let s = g.square(x);
        let loss = g.sum(s);
        let inputs = HashMap::from([("x".to_string(), Tensor::new(vec![xs.len()], xs.clone()).unwrap())]);
        let acts = forward(&g, &inputs, &ParamStore::new()).unwrap();
        let grad = backward(&g, &acts, loss).unwrap().input("x").unwrap();
        for (gv, xv) in grad.data().iter().zip(&xs) {
            prop_assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn relu_gradient_is_the_step_function(xs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.input("x", &[xs.len()]).unwrap();
        let r = g.relu(x);
        let loss = g.sum(r);
        let inputs = HashMap::from([("x".to_string(), Tensor::new(vec![xs.len()], xs.clone()).unwrap())]);
        let acts = forward(&g, &inputs, &ParamStore::new()).unwrap();
        let grad = backward(&g, &acts, loss).unwrap().input("x").unwrap();
        for (gv, xv) in grad.data().iter().zip(&xs) {
            prop_assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn dense_with_identity_weights_is_identity(xs in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 4]).unwrap();
        let w = g.param("w", &[4, 4]).unwrap();
        let b = g.param("b", &[4]).unwrap();
        let y = g.dense(x, w, b).unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 })).unwrap();
        p.insert("b", Tensor::zeros(&[4])).unwrap();
        let inputs = HashMap::from([("x".to_string(), Tensor::new(vec![1, 4], xs.clone()).unwrap())]);
        let acts = forward(&g, &inputs, &p).unwrap();
        prop_assert_eq!(acts.value(y).data(), &xs[..]);
    }
}
