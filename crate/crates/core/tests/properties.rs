use loraroute::memory::capacity;
use loraroute::router::{gumbel_sigmoid, Relaxation, RouterStack};
use loraroute::tensor::gradcheck::max_gradient_error;
use loraroute::tensor::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: &[f64]) -> Tensor {
    let data = (0..rows * cols).map(|i| seed[i % seed.len()] * (1.0 + i as f64 * 0.01)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_block_gradients(
        n in 1usize..4,
        d in 1usize..5,
        vals in prop::collection::vec(-1.5f64..1.5, 8),
    ) {
        let x = tensor(n, d, &vals);
        let w = tensor(d, d, &vals[3..]);
        let err = max_gradient_error(&[x, w], 1e-6, |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let kt = t.transpose(q)?;
            let s = t.matmul(q, kt)?;
            let a = t.softmax(s);
            let o = t.matmul(a, v[0])?;
            let g = t.gelu(o);
            Ok(t.mean(g))
        }).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn capacity_rounds_half_up(n in 0usize..5000, p in 0.001f64..1.0) {
        let k = capacity(p, n);
        prop_assert!((k as f64 - p * n as f64).abs() <= 0.5 + 1e-9);
        prop_assert!(k <= n);
    }

    #[test]
    fn gates_stay_open_interval(z in -1e6f64..1e6, u in 0.0f64..=1.0, tau in 0.05f64..5.0) {
        let g = gumbel_sigmoid(z, u, tau);
        prop_assert!(g.is_finite());
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn routing_vectors_respect_their_relaxation(
        vals in prop::collection::vec(-3.0f64..3.0, 16),
        h in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        for relaxation in [Relaxation::GumbelSigmoid, Relaxation::Softmax] {
            let mut stack = RouterStack::zeros(1, 4, 3, relaxation, 1.0).unwrap();
            for (i, t) in stack.tensors_mut().into_iter().enumerate() {
                for (j, x) in t.data_mut().iter_mut().enumerate() {
                    *x = vals[(i * 7 + j) % vals.len()];
                }
            }
            let r = stack.route(0, &h, None).unwrap();
            match relaxation {
                Relaxation::GumbelSigmoid => prop_assert!(r.iter().all(|&v| v > 0.0 && v < 1.0)),
                Relaxation::Softmax => prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12),
            }
        }
    }
}
