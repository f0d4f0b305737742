use super::*;
use rand::Rng;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

/// Central finite differences of a scalar-valued graph builder with respect
/// to one leaf input, evaluated entirely outside the autodiff path.
fn finite_diff(build: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize) -> Vec<f64> {
    let h = 1e-5;
    let mut out = vec![0.0; inputs[which].len()];
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which][i] += h;
        let mut minus = inputs.to_vec();
        minus[which][i] -= h;
        out[i] = (build(&plus) - build(&minus)) / (2.0 * h);
    }
    out
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_vec(vec![3.0, -1.0, 2.5, 7.0], &[2, 2]);
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let out = eye.matmul(&a).unwrap();
    assert_eq!(out.to_vec(), a.to_vec());
}

#[test]
fn matmul_hand_oracle() {
    // [[1,2],[3,4]] x [[0],[1]] = [[2],[4]]
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.to_vec(), vec![2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "unhelpful error: {msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // f = ||A B||^2 with respect to A
    let a0 = vec![0.3, -1.2, 0.7, 1.5, -0.4, 0.9];
    let b0 = vec![1.1, -0.6, 0.2, 0.8, -1.3, 0.5];
    let build = |inputs: &[Vec<f64>]| -> f64 {
        let a = Tensor::from_vec(inputs[0].clone(), &[2, 3]);
        let b = Tensor::from_vec(inputs[1].clone(), &[3, 2]);
        let c = a.matmul(&b).unwrap();
        let v: f64 = c.data().iter().map(|v| v * v).sum();
        v
    };
    let a = Tensor::leaf(a0.clone(), &[2, 3], true);
    let b = Tensor::leaf(b0.clone(), &[3, 2], true);
    let c = a.matmul(&b).unwrap();
    let loss = c.mul(&c).unwrap().sum_all();
    loss.backward().unwrap();
    let fd = finite_diff(&build, &[a0, b0], 0);
    let rel = max_rel_err(&a.grad().unwrap(), &fd);
    assert!(rel < 1e-6, "rel err {rel}");
}

#[test]
fn softmax_uniform() {
    let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]);
    let s = x.softmax(0).unwrap();
    for v in s.data().iter() {
        assert_close(*v, 1.0 / 3.0, 1e-12);
    }
}

#[test]
fn softmax_closed_form() {
    // softmax([0, ln 3]) = [1/4, 3/4]
    let x = Tensor::from_vec(vec![0.0, 3.0f64.ln()], &[2]);
    let s = x.softmax(0).unwrap();
    assert_close(s.data()[0], 0.25, 1e-12);
    assert_close(s.data()[1], 0.75, 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = seeded_rng(7, "softmax-test");
    let data: Vec<f64> = (0..24).map(|_| sample_normal(&mut rng, 3.0)).collect();
    let x = Tensor::from_vec(data, &[2, 3, 4]);
    let s = x.softmax(2).unwrap();
    let d = s.data();
    for r in 0..6 {
        let sum: f64 = d[r * 4..(r + 1) * 4].iter().sum();
        assert_close(sum, 1.0, 1e-9);
    }
}

#[test]
fn cross_entropy_uniform_is_ln_c() {
    for c in [2usize, 3, 7] {
        let logits = Tensor::zeros(&[4, c]);
        let loss = logits.cross_entropy(&vec![0; 4]).unwrap();
        assert_close(loss.item(), (c as f64).ln(), 1e-12);
    }
}

#[test]
fn cross_entropy_confident_correct_goes_to_zero() {
    let logits = Tensor::from_vec(vec![50.0, 0.0, 0.0], &[1, 3]);
    let loss = logits.cross_entropy(&[0]).unwrap();
    assert!(loss.item() < 1e-12, "loss {}", loss.item());
}

#[test]
fn cross_entropy_index_out_of_range() {
    let logits = Tensor::zeros(&[2, 3]);
    assert!(logits.cross_entropy(&[0, 3]).is_err());
}

#[test]
fn soft_cross_entropy_of_matching_distribution_is_entropy() {
    // teacher distribution equal to student softmax -> H(p)
    let logits = Tensor::from_vec(vec![0.2, -1.0, 0.9, 1.4], &[1, 4]);
    let p = ops::row_softmax(&logits.data(), 1, 4);
    let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    let loss = logits.cross_entropy_soft(&p).unwrap();
    assert_close(loss.item(), entropy, 1e-12);
}

#[test]
fn soft_cross_entropy_rejects_unnormalized_rows() {
    let logits = Tensor::zeros(&[1, 3]);
    assert!(logits.cross_entropy_soft(&[0.5, 0.2, 0.1]).is_err());
}

#[test]
fn mse_oracles() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]);
    assert_eq!(x.mse(&x).unwrap().item(), 0.0);
    let a = Tensor::from_vec(vec![0.0, 0.0], &[2]);
    let b = Tensor::from_vec(vec![1.0, 1.0], &[2]);
    assert_eq!(a.mse(&b).unwrap().item(), 1.0);
    // symmetry
    let c = Tensor::from_vec(vec![0.4, -1.7], &[2]);
    assert_eq!(a.mse(&c).unwrap().item(), c.mse(&a).unwrap().item());
    // shape mismatch
    assert!(a.mse(&x).is_err());
}

#[test]
fn cosine_similarity_oracles() {
    assert_close(cosine_similarity(&[2.0, 1.0], &[2.0, 1.0]), 1.0, 1e-12);
    assert_close(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0, 1e-12);
    assert_close(
        cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]),
        (2.0f64).sqrt() / 2.0,
        1e-12,
    );
    // zero vectors are defined to give 0
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::leaf(vec![0.5, -2.0, 3.0], &[3], true);
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2], true);
    let y = x.scale(2.0);
    assert!(matches!(
        y.backward(),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn backward_linear_regression_matches_finite_differences() {
    // loss = mse(W x, y)
    let w0 = vec![0.3, -0.8, 1.2, 0.5, 0.1, -0.4];
    let x0 = vec![1.0, -2.0, 0.5];
    let y0 = vec![0.7, -0.3];
    let build = |inputs: &[Vec<f64>]| -> f64 {
        let w = Tensor::from_vec(inputs[0].clone(), &[2, 3]);
        let x = Tensor::from_vec(inputs[1].clone(), &[3, 1]);
        let y = Tensor::from_vec(inputs[2].clone(), &[2, 1]);
        w.matmul(&x).unwrap().mse(&y).unwrap().item()
    };
    let w = Tensor::leaf(w0.clone(), &[2, 3], true);
    let x = Tensor::from_vec(x0.clone(), &[3, 1]);
    let y = Tensor::from_vec(y0.clone(), &[2, 1]);
    let loss = w.matmul(&x).unwrap().mse(&y).unwrap();
    loss.backward().unwrap();
    let fd = finite_diff(&build, &[w0, x0, y0], 0);
    let rel = max_rel_err(&w.grad().unwrap(), &fd);
    assert!(rel < 1e-6, "rel err {rel}");
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2], true);
    let loss = x.sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn diamond_graph_visits_nodes_once() {
    // y = x + x reused twice downstream; d/dx (2x * 2x) = 8x
    let x = Tensor::leaf(vec![3.0], &[1], true);
    let two_x = x.add(&x).unwrap();
    let loss = two_x.mul(&two_x).unwrap().sum_all();
    loss.backward().unwrap();
    assert_close(x.grad().unwrap()[0], 8.0 * 3.0, 1e-12);
}

#[test]
fn adam_zero_grad_leaves_parameters_unchanged() {
    let p = Parameter::new("w", vec![1.0, -2.0], &[2], true);
    p.tensor.accumulate_grad(|_| {}); // allocate an all-zero gradient
    let mut opt = Adam::new(0.1);
    opt.step(&[&p]).unwrap();
    assert_eq!(p.tensor.to_vec(), vec![1.0, -2.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // g=1: m_hat = 1, v_hat = 1 -> update = lr / (1 + eps) ~ lr
    let p = Parameter::new("w", vec![0.0], &[1], true);
    p.tensor.accumulate_grad(|g| g[0] += 1.0);
    let mut opt = Adam::new(0.05);
    opt.step(&[&p]).unwrap();
    assert_close(p.tensor.to_vec()[0], -0.05, 1e-9);
}

#[test]
fn adam_missing_gradient_names_parameter() {
    let p = Parameter::new("encoder.w", vec![0.0], &[1], true);
    let mut opt = Adam::new(0.05);
    let err = opt.step(&[&p]).unwrap_err();
    assert!(err.to_string().contains("encoder.w"));
}

#[test]
fn adam_converges_on_quadratic() {
    // minimize (theta - 3)^2 from theta = 0
    let p = Parameter::new("theta", vec![0.0], &[1], true);
    let target = Tensor::scalar(3.0);
    let mut opt = Adam::new(0.05);
    let mut steps = 0;
    for _ in 0..2000 {
        steps += 1;
        let diff = p.tensor.sub(&target).unwrap();
        let loss = diff.mul(&diff).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step(&[&p]).unwrap();
        if (p.tensor.to_vec()[0] - 3.0).abs() < 1e-2 {
            break;
        }
    }
    let theta = p.tensor.to_vec()[0];
    assert!(
        (theta - 3.0).abs() < 1e-2,
        "theta {theta} after {steps} steps"
    );
}

#[test]
fn check_finite_flags_nan() {
    let p = Parameter::new("w", vec![1.0, f64::NAN], &[2], true);
    assert!(check_finite(&[&p]).is_err());
}

#[test]
fn gather_rows_and_scatter_grad() {
    let table = Tensor::leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true);
    let rows = table.gather_rows(&[2, 0, 2]).unwrap();
    assert_eq!(rows.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    rows.sum_all().backward().unwrap();
    // row 2 picked twice, row 0 once, row 1 never
    assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(table.gather_rows(&[3]).is_err());
}

#[test]
fn masked_pool_mean_and_sum() {
    // two sequences of two 2-d tokens, second position of row 1 masked
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0, 9.0], &[2, 2, 2]);
    let mask = [1.0, 1.0, 1.0, 0.0];
    let mean = x.masked_pool_seq(&mask, true).unwrap();
    assert_eq!(mean.to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
    let sum = x.masked_pool_seq(&mask, false).unwrap();
    assert_eq!(sum.to_vec(), vec![4.0, 6.0, 5.0, 6.0]);
    // all-masked row errors
    assert!(x.masked_pool_seq(&[1.0, 1.0, 0.0, 0.0], true).is_err());
}

#[test]
fn dropout_zero_rate_is_identity_and_scales_otherwise() {
    let x = Tensor::from_vec(vec![1.0; 1000], &[1000]);
    let mut rng = seeded_rng(3, "dropout");
    let kept = x.dropout(0.5, &mut rng);
    let d = kept.data();
    let nonzero = d.iter().filter(|v| **v != 0.0).count();
    assert!(d.iter().all(|v| *v == 0.0 || (*v - 2.0).abs() < 1e-12));
    assert!(nonzero > 400 && nonzero < 600, "kept {nonzero}");
}

#[test]
fn seeded_rng_streams_are_stable_and_distinct() {
    let mut a = seeded_rng(11, "init");
    let mut b = seeded_rng(11, "init");
    let mut c = seeded_rng(11, "shuffle");
    let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
    assert_eq!(x, y);
    assert_ne!(x, z);
}
