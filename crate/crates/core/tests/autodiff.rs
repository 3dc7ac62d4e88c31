mod common;

use diffusion_ad::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_operation_passes_finite_differences() {
    let mut failures = Vec::new();
    for c in common::op_cases() {
        let r = common::check(&c);
        assert_eq!(r.analytic.len(), c.point.numel(), "{}", c.name);
        if !r.passes(1e-3) {
            failures.push(format!("{}: {:.3e}", c.name, r.max_rel_error));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn gradients_have_the_shape_of_their_tensors() {
    let g = Graph::<f32>::new();
    let a = g.param(Tensor::from_fn([2, 3], |i| i as f32));
    let b = g.param(Tensor::from_fn([3, 4], |i| i as f32 * 0.5));
    let y = g.matmul(&a, &b).unwrap();
    let loss = g.sum(&y);
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&a).unwrap().shape(), &[2, 3]);
    assert_eq!(grads.get(&b).unwrap().shape(), &[3, 4]);
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // small integers are exact in f64, so the blocked kernel must agree bit for bit
    #[test]
    fn matmul_matches_triple_loop_exactly(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a = Tensor::<f64>::rand_uniform([m, k], -8.0, 8.0, &mut r).map(f64::round);
        let b = Tensor::<f64>::rand_uniform([k, n], -8.0, 8.0, &mut r).map(f64::round);
        let g = Graph::inference();
        let y = g.matmul(&g.constant(a.clone()), &g.constant(b.clone())).unwrap();
        prop_assert_eq!(y.data().to_vec(), naive_matmul(a.data(), b.data(), m, k, n));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let x = Tensor::<f64>::rand_uniform([rows, cols], -30.0, 30.0, &mut common::rng(seed));
        let g = Graph::inference();
        let y = g.softmax(&g.constant(x), 1).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn addition_gradient_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let y = g.add(&g.mul_scalar(&x, a), &g.mul_scalar(&x, b)).unwrap();
        let loss = g.sum(&y);
        let grad = g.backward(&loss).unwrap().get(&x).unwrap().to_vec();
        prop_assert!((grad[0] - (a + b)).abs() < 1e-12 && (grad[1] - (a + b)).abs() < 1e-12);
    }
}
