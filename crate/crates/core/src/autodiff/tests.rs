use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// 0.5 * x^T A x with `x` a parameter.
fn quadratic(a: [[f64; 2]; 2], x: [f64; 2]) -> (Graph, NodeId, NodeId) {
    let mut g = Graph::new();
    let xn = g.param(t(&[2, 1], &x));
    let an = g.constant(t(&[2, 2], &[a[0][0], a[0][1], a[1][0], a[1][1]]));
    let ax = g.matmul(an, xn).unwrap();
    let xax = g.mul(xn, ax).unwrap();
    let s = g.sum_all(xax).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    (g, loss, xn)
}

/// Two-layer tanh-free MLP with smooth loss: softmax CE over a fixed batch.
fn tiny_mlp(seed: u64) -> (Graph, NodeId, Vec<NodeId>) {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);
    let mut rand_t = |shape: &[usize], scale: f64| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let x = rand_t(&[4, 3], 1.0);
    let w1 = rand_t(&[3, 4], 0.8);
    let b1 = rand_t(&[4], 0.3);
    let w2 = rand_t(&[4, 3], 0.8);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let w1n = g.param(w1);
    let b1n = g.param(b1);
    let w2n = g.param(w2);
    let h = g.dense(xn, w1n, Some(b1n)).unwrap();
    // softplus-free smooth nonlinearity: h * h keeps everything twice differentiable
    let h2 = g.mul(h, h).unwrap();
    let logits = g.dense(h2, w2n, None).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 2, 1, 2]).unwrap();
    (g, loss, vec![w1n, b1n, w2n])
}

fn flat_grad(g: &mut Graph, loss: NodeId, params: &[NodeId]) -> Vec<f64> {
    let grads = g.grad(loss, None, params).unwrap();
    grads
        .iter()
        .flat_map(|&n| g.value(n).unwrap().data().to_vec())
        .collect()
}

fn param_values(g: &Graph, params: &[NodeId]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|&p| g.value(p).unwrap().data().to_vec())
        .collect()
}

fn set_params(g: &mut Graph, params: &[NodeId], flat: &[f64]) {
    let mut off = 0;
    for &p in params {
        let shape = g.shape(p).unwrap().to_vec();
        let n: usize = shape.iter().product();
        g.assign(p, t(&shape, &flat[off..off + n])).unwrap();
        off += n;
    }
    g.recompute_from(NodeId(0)).unwrap();
}

#[test]
fn forward_square() {
    let mut g = Graph::new();
    let x = g.input(&[1]);
    let y = g.mul(x, x).unwrap();
    g.set_outputs(&[y]);
    let out = g.forward(&[Tensor::scalar(3.0)]).unwrap();
    assert_eq!(out[0].item(), 9.0);
}

#[test]
fn forward_identity() {
    let mut g = Graph::new();
    let x = g.input(&[2, 3]);
    g.set_outputs(&[x]);
    let v = t(&[2, 3], &[1., -2., 3.5, 0., 7., 1e-9]);
    assert_eq!(g.forward(std::slice::from_ref(&v)).unwrap()[0].data(), v.data());
}

#[test]
fn forward_unit_convolution() {
    let mut g = Graph::new();
    let x = g.input(&[1, 1, 2, 2]);
    let w = g.param(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    g.set_outputs(&[y]);
    let out = g.forward(&[t(&[1, 1, 2, 2], &[1., 2., 3., 4.])]).unwrap();
    assert_eq!(out[0].shape(), &[1, 1, 2, 2]);
    assert_eq!(out[0].data(), &[2., 4., 6., 8.]);
}

#[test]
fn forward_rejects_shape_mismatch_with_node() {
    let mut g = Graph::new();
    let x = g.input(&[2, 2]);
    let w = g.param(t(&[2, 3], &[0.0; 6]));
    let y = g.matmul(x, w).unwrap();
    g.set_outputs(&[y]);
    match g.forward(&[t(&[2, 3], &[0.0; 6])]) {
        Err(AutodiffError::ShapeMismatch { node, .. }) => assert_eq!(node, x.index()),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    // an op whose operands disagree names the op node
    let a = g.param(t(&[3], &[0.0; 3]));
    let b = g.param(t(&[2], &[0.0; 2]));
    match g.add(a, b) {
        Err(AutodiffError::ShapeMismatch { node, .. }) => assert_eq!(node, b.index() + 1),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn backward_square() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y, Some(&Tensor::scalar(1.0))).unwrap();
    assert_eq!(grads[0].grad.item(), 6.0);
    assert_eq!(g.value(x).unwrap().grad().unwrap(), &[6.0]);
}

#[test]
fn backward_constant_graph_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.scale(c, 2.0).unwrap();
    let grads = g.grad(y, None, &[x]).unwrap();
    assert_eq!(g.value(grads[0]).unwrap().item(), 0.0);
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut g = Graph::new();
    let z = g.param(t(&[1, 2], &[0.0, 0.0]));
    let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
    assert_abs_diff_eq!(g.value(loss).unwrap().item(), 2f64.ln(), epsilon = 1e-15);
    let grads = g.grad(loss, None, &[z]).unwrap();
    assert_eq!(g.value(grads[0]).unwrap().data(), &[-0.5, 0.5]);
}

#[test]
fn backward_before_forward_is_state_error() {
    let mut g = Graph::new();
    let x = g.input(&[1]);
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.backward(y, None).unwrap_err(), AutodiffError::NotForwarded);
    g.set_outputs(&[y]);
    g.forward(&[Tensor::scalar(2.0)]).unwrap();
    assert!(g.backward(y, None).is_ok());
}

#[test]
fn backward_rejects_wrong_seed_shape() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.mul(x, x).unwrap();
    assert!(g.grad(y, Some(&Tensor::scalar(1.0)), &[x]).is_err());
}

#[test]
fn grad_check_square_and_linear() {
    let mut g = Graph::new();
    let x = g.input(&[1]);
    let y = g.mul(x, x).unwrap();
    g.set_outputs(&[y]);
    assert!(grad_check(&mut g, &[Tensor::scalar(3.0)], 1e-5).unwrap() <= 1e-6);

    let mut g = Graph::new();
    let x = g.input(&[3]);
    let y = g.scale(x, 2.5).unwrap();
    let z = g.offset(y, -1.0).unwrap();
    g.set_outputs(&[z]);
    let err = grad_check(&mut g, &[t(&[3], &[0.1, -4.0, 2.0])], 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_leaves_graph_size_unchanged() {
    let mut g = Graph::new();
    let x = g.input(&[2]);
    let y = g.mul(x, x).unwrap();
    g.set_outputs(&[y]);
    let len = g.len();
    for _ in 0..3 {
        grad_check(&mut g, &[t(&[2], &[0.5, -1.5])], 1e-5).unwrap();
    }
    assert_eq!(g.len(), len);
    assert!(g.truncate(1).is_err());
}

#[test]
fn grad_check_rejects_bad_arguments() {
    let mut g = Graph::new();
    let x = g.input(&[1]);
    g.set_outputs(&[x]);
    assert!(grad_check(&mut g, &[Tensor::scalar(1.0)], 0.0).is_err());
    assert!(grad_check(&mut g, &[Tensor::scalar(1.0)], 0.1).is_err());
    assert!(matches!(
        grad_check(&mut g, &[Tensor::scalar(f64::NAN)], 1e-5),
        Err(AutodiffError::NonFinite(_))
    ));
}

#[test]
fn grad_check_three_layer_relu_mlp() {
    let mut g = Graph::new();
    let x = g.input(&[2, 3]);
    let w1 = g.input(&[3, 5]);
    let w2 = g.input(&[5, 4]);
    let w3 = g.input(&[4, 3]);
    let h1 = g.matmul(x, w1).unwrap();
    let a1 = g.relu(h1).unwrap();
    let h2 = g.matmul(a1, w2).unwrap();
    let a2 = g.relu(h2).unwrap();
    let logits = g.matmul(a2, w3).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[1, 2]).unwrap();
    g.set_outputs(&[loss]);
    let vals = |n: usize, k: f64| -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 1.37 + k).sin() * 0.9).collect()
    };
    let inputs = vec![
        t(&[2, 3], &vals(6, 0.1)),
        t(&[3, 5], &vals(15, 0.7)),
        t(&[5, 4], &vals(20, 1.9)),
        t(&[4, 3], &vals(12, 2.3)),
    ];
    g.forward(&inputs).unwrap();
    // stay away from ReLU kinks
    for pre in [h1, h2] {
        assert!(g.value(pre).unwrap().data().iter().all(|v| v.abs() > 1e-3));
    }
    let err = grad_check(&mut g, &inputs, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn hvp_quadratic() {
    let a = [[2.0, 1.0], [1.0, 3.0]];
    let (mut g, loss, x) = quadratic(a, [0.3, -0.7]);
    assert_eq!(hessian_vector_product(&mut g, loss, &[x], &[1.0, 0.0]).unwrap(), vec![2.0, 1.0]);
    assert_eq!(hessian_vector_product(&mut g, loss, &[x], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn hvp_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.mul(x, x).unwrap();
    assert!(matches!(
        hessian_vector_product(&mut g, y, &[x], &[1.0, 0.0]),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn hvp_matches_gradient_differences() {
    let (mut g, loss, params) = tiny_mlp(11);
    let theta = param_values(&g, &params);
    let n = theta.len();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.91).cos()).collect();
    let program = HvpProgram::new(&mut g, loss, &params).unwrap();
    let hv = program.apply(&mut g, &v).unwrap();

    let h = 1e-5;
    let mut fd_graph = tiny_mlp(11);
    let shifted = |sign: f64| -> Vec<f64> {
        theta.iter().zip(&v).map(|(t, d)| t + sign * h * d).collect()
    };
    set_params(&mut fd_graph.0, &fd_graph.2, &shifted(1.0));
    let gp = flat_grad(&mut fd_graph.0, fd_graph.1, &fd_graph.2);
    let mut fd_graph = tiny_mlp(11);
    set_params(&mut fd_graph.0, &fd_graph.2, &shifted(-1.0));
    let gm = flat_grad(&mut fd_graph.0, fd_graph.1, &fd_graph.2);
    let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..n {
        let fd = (gp[i] - gm[i]) / (2.0 * h);
        assert!((hv[i] - fd).abs() / norm.max(1e-12) <= 1e-4, "entry {i}: {} vs {fd}", hv[i]);
    }
}

#[test]
fn exact_hessian_of_quadratic_and_linear() {
    let a = [[2.0, 1.0], [1.0, 3.0]];
    let (mut g, loss, x) = quadratic(a, [1.0, 1.0]);
    let h = exact_hessian(&mut g, loss, &[x]).unwrap();
    assert_eq!(h.matrix.as_slice(), &[2.0, 1.0, 1.0, 3.0]);
    assert_eq!(h.max_asymmetry, 0.0);

    let mut g = Graph::new();
    let w = g.param(t(&[3], &[0.5, -1.0, 2.0]));
    let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let p = g.mul(w, c).unwrap();
    let loss = g.sum_all(p).unwrap();
    let h = exact_hessian(&mut g, loss, &[w]).unwrap();
    assert!(h.matrix.iter().all(|&v| v == 0.0));
}

#[test]
fn exact_hessian_matches_finite_differences() {
    let (mut g, loss, params) = tiny_mlp(5);
    let theta = param_values(&g, &params);
    let n = theta.len();
    let h = exact_hessian(&mut g, loss, &params).unwrap();
    assert!(h.max_asymmetry <= 1e-8, "{}", h.max_asymmetry);
    let step = 1e-4;
    let (mut fg, floss, fparams) = tiny_mlp(5);
    for j in 0..n {
        let mut plus = theta.clone();
        plus[j] += step;
        set_params(&mut fg, &fparams, &plus);
        let gp = flat_grad(&mut fg, floss, &fparams);
        let mut minus = theta.clone();
        minus[j] -= step;
        set_params(&mut fg, &fparams, &minus);
        let gm = flat_grad(&mut fg, floss, &fparams);
        for i in 0..n {
            let fd = (gp[i] - gm[i]) / (2.0 * step);
            assert!((h.matrix[(i, j)] - fd).abs() <= 1e-3, "H[{i},{j}]");
        }
    }
}

#[test]
fn exact_hessian_rejects_large_models() {
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(&[ORACLE_PARAM_LIMIT + 1]));
    let s = g.sum_all(w).unwrap();
    assert!(matches!(
        exact_hessian(&mut g, s, &[w]),
        Err(AutodiffError::OracleLimit { .. })
    ));
}

#[test]
fn replay_is_bit_identical() {
    let (mut g, loss, _) = tiny_mlp(3);
    let before = g.value(loss).unwrap().clone();
    g.recompute_from(NodeId(0)).unwrap();
    assert_eq!(g.value(loss).unwrap().data(), before.data());
    let mut g2 = tiny_mlp(3).0;
    g2.recompute_from(NodeId(0)).unwrap();
    assert_eq!(g2.value(loss).unwrap().data(), before.data());
}

#[test]
fn max_pool_routes_to_first_max() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 4], &[1., 3., 3., 0., 3., 2., 0., 3.]));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[3., 3.]);
    let s = g.sum_all(y).unwrap();
    let grads = g.grad(s, None, &[x]).unwrap();
    assert_eq!(g.value(grads[0]).unwrap().data(), &[0., 1., 1., 0., 0., 0., 0., 0.]);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.grad(s, None, &[x]).unwrap();
    assert_eq!(g.value(grads[0]).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn batch_norm_normalizes_channels() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2, 1, 2], &[1., 2., 10., 20., 3., 4., 30., 40.]));
    let gamma = g.param(t(&[2], &[1.0, 1.0]));
    let beta = g.param(t(&[2], &[0.0, 0.0]));
    let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
    assert_eq!(g.value(mean).unwrap().data(), &[2.5, 25.0]);
    assert_abs_diff_eq!(g.value(var).unwrap().data()[0], 1.25, epsilon = 1e-12);
    let y = g.value(y).unwrap().data().to_vec();
    let c0: f64 = [y[0], y[1], y[4], y[5]].iter().sum();
    assert_abs_diff_eq!(c0, 0.0, epsilon = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hvp_is_linear(
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let (mut g, loss, params) = tiny_mlp(seed);
        let n = param_values(&g, &params).len();
        let u: Vec<f64> = (0..n).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.13 - seed as f64).cos()).collect();
        let program = HvpProgram::new(&mut g, loss, &params).unwrap();
        let hu = program.apply(&mut g, &u).unwrap();
        let hv = program.apply(&mut g, &v).unwrap();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let hmix = program.apply(&mut g, &mix).unwrap();
        for i in 0..n {
            prop_assert!((hmix[i] - (alpha * hu[i] + beta * hv[i])).abs() <= 1e-10);
        }
    }
}
