use ospatialnet::autodiff::gradcheck::{sample_tensor, weighted_sum, GradCheck};
use ospatialnet::autodiff::{ConvPadding, Graph, Var};
use ospatialnet::tensor::Tensor;
use ospatialnet::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> ospatialnet::Result<Var<f64>>) {
    let report = GradCheck::default().run(inputs, f).unwrap();
    assert!(report.max_rel_err <= 1e-4, "gradient mismatch: {:?}", report.worst);
}

#[test]
fn matmul_examples() {
    let g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(eye.matmul(&col).unwrap().data(), &[3.0, 4.0]);

    let a = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
    let prod = a.matmul(&col).unwrap();
    assert_eq!(prod.data(), &[11.0]);
    let grads = g.backward(&prod.sum()).unwrap();
    assert_eq!(grads.get(&a).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn matmul_grad_matches_finite_differences() {
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[2, 1], &[3.0, 4.0]);
    let report = GradCheck::default()
        .run(&[a, b], |v| Ok(v[0].matmul(&v[1])?.sum()))
        .unwrap();
    assert!(report.max_rel_err <= 1e-4);
    // batched with a shared right operand
    check(
        &[
            sample_tensor(&[3, 4, 5], 1, -2.0, 2.0),
            sample_tensor(&[5, 2], 2, -2.0, 2.0),
        ],
        |v| weighted_sum(&v[0].matmul(&v[1])?, 3),
    );
    check(
        &[
            sample_tensor(&[2, 3, 4], 4, -2.0, 2.0),
            sample_tensor(&[2, 4, 3], 5, -2.0, 2.0),
        ],
        |v| weighted_sum(&v[0].matmul(&v[1])?, 6),
    );
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn backward_scalar_examples() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let grads = g.backward(&x.square()).unwrap();
    assert_eq!(grads.get(&x).unwrap().item().unwrap(), 6.0);

    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let grads = g.backward(&x.silu()).unwrap();
    assert!((grads.get(&x).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![2]), true);
    assert!(matches!(g.backward(&x.exp()), Err(Error::Contract(_))));
}

#[test]
fn elementwise_ops_pass_gradcheck() {
    let a = sample_tensor(&[3, 5], 10, -2.0, 2.0);
    let b = sample_tensor(&[3, 5], 11, -2.0, 2.0);
    check(&[a.clone(), b.clone()], |v| weighted_sum(&v[0].add(&v[1])?, 1));
    check(&[a.clone(), b.clone()], |v| weighted_sum(&v[0].sub(&v[1])?, 2));
    check(&[a.clone(), b.clone()], |v| weighted_sum(&v[0].mul(&v[1])?, 3));
    check(&[a.clone(), b.clone(), a.clone()], |v| {
        weighted_sum(&v[0].mul_add(&v[1], &v[2])?, 4)
    });
    check(&[a.clone()], |v| weighted_sum(&v[0].exp(), 5));
    check(&[a.clone()], |v| weighted_sum(&v[0].silu(), 6));
    check(&[a.clone()], |v| weighted_sum(&v[0].sigmoid(), 7));
    check(&[a.clone()], |v| weighted_sum(&v[0].softplus(), 8));
    check(&[a.clone()], |v| weighted_sum(&v[0].square().add_scalar(1.0).ln(), 9));
    check(&[a.clone()], |v| Ok(v[0].scale(-0.7).mean()));
    check(&[a.clone()], |v| weighted_sum(&v[0].softmax(), 12));
    check(&[a.clone(), sample_tensor(&[5], 13, -2.0, 2.0)], |v| {
        weighted_sum(&v[0].mul_last(&v[1])?, 14)
    });
    check(&[a.clone(), sample_tensor(&[5], 15, -2.0, 2.0)], |v| {
        weighted_sum(&v[0].add_last(&v[1])?, 16)
    });
    check(&[a.clone()], |v| weighted_sum(&v[0].slice_last(1, 3)?, 17));
    check(&[a.clone(), b.clone()], |v| {
        weighted_sum(&Var::concat_last(&[&v[0], &v[1]])?, 18)
    });
    check(&[a], |v| weighted_sum(&v[0].reshape(vec![5, 3])?, 19));
}

#[test]
fn layer_norm_and_linear_pass_gradcheck() {
    let x = sample_tensor(&[2, 3, 6], 20, -2.0, 2.0);
    let gamma = sample_tensor(&[6], 21, 0.5, 1.5);
    let beta = sample_tensor(&[6], 22, -0.5, 0.5);
    check(&[x.clone(), gamma, beta], |v| {
        weighted_sum(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, 23)
    });
    let w = sample_tensor(&[6, 4], 24, -1.0, 1.0);
    let b = sample_tensor(&[4], 25, -1.0, 1.0);
    check(&[x.clone(), w.clone(), b], |v| {
        weighted_sum(&v[0].linear(&v[1], Some(&v[2]))?, 26)
    });
    check(&[x, w], |v| weighted_sum(&v[0].linear(&v[1], None)?, 27));
}

#[test]
fn convolutions_and_mixing_pass_gradcheck() {
    let x = sample_tensor(&[2, 7, 3], 30, -2.0, 2.0);
    let w = sample_tensor(&[3, 4], 31, -1.0, 1.0);
    let b = sample_tensor(&[3], 32, -1.0, 1.0);
    check(&[x.clone(), w, b], |v| {
        weighted_sum(&v[0].dwconv(&v[1], &v[2], 1, ConvPadding::Causal)?, 33)
    });
    let x4 = sample_tensor(&[2, 6, 3, 4], 34, -2.0, 2.0);
    let w5 = sample_tensor(&[4, 5], 35, -1.0, 1.0);
    let b4 = sample_tensor(&[4], 36, -1.0, 1.0);
    check(&[x4, w5, b4], |v| {
        weighted_sum(&v[0].dwconv(&v[1], &v[2], 1, ConvPadding::Same)?, 37)
    });
    check(&[x], |v| weighted_sum(&v[0].unfold_time(3)?, 38));
    let xb = sample_tensor(&[2, 5, 3, 2], 39, -2.0, 2.0);
    let wb = sample_tensor(&[2, 5, 5], 40, -1.0, 1.0);
    let bb = sample_tensor(&[2, 5], 41, -1.0, 1.0);
    check(&[xb, wb, bb], |v| weighted_sum(&v[0].band_mix(&v[1], &v[2])?, 42));
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let g = Graph::<f64>::inference();
    let x = sample_tensor(&[4, 9], 50, -2.0, 2.0);
    let y = g.constant(x.clone()).softmax();
    for row in y.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let shifted = g.constant(x.map(|v| v + 3.5)).softmax();
    assert!(y.value().max_abs_diff(shifted.value()).unwrap() <= 1e-12);
}

#[test]
fn causal_conv_ignores_future_frames() {
    let g = Graph::<f32>::inference();
    let x = sample_tensor(&[3, 20, 4], 60, -2.0, 2.0).cast::<f32>();
    let w = g.constant(sample_tensor(&[4, 5], 61, -1.0, 1.0).cast::<f32>());
    let b = g.constant(sample_tensor(&[4], 62, -1.0, 1.0).cast::<f32>());
    let base = g.constant(x.clone()).dwconv(&w, &b, 1, ConvPadding::Causal).unwrap();
    for cut in [0usize, 7, 19] {
        let mut xp = x.clone();
        for s in 0..3 {
            for tt in cut + 1..20 {
                for c in 0..4 {
                    xp.data_mut()[(s * 20 + tt) * 4 + c] += 10.0;
                }
            }
        }
        let pert = g.constant(xp).dwconv(&w, &b, 1, ConvPadding::Causal).unwrap();
        for s in 0..3 {
            let a = &base.data()[s * 80..s * 80 + (cut + 1) * 4];
            let p = &pert.data()[s * 80..s * 80 + (cut + 1) * 4];
            assert_eq!(a, p);
        }
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, -2.0]), true);
    let y = x.add(&x).unwrap().mul(&x).unwrap().sum(); // 2x^2
    let grads = g.backward(&y).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[4.0, -8.0]);
}
