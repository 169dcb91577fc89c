use super::gradcheck::check;
use super::*;
use crate::error::Error;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert_eq!(Tensor::zeros(&[3, 2]).len(), 6);
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t = Tape::new();
    let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = t.constant(m(2, 2, &[5.0, 6.0, 7.0, 8.0]));
    let c = t.matmul(i, b).unwrap();
    assert_eq!(t.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = t.constant(m(1, 2, &[1.0, 2.0]));
    let b = t.constant(m(2, 1, &[3.0, 4.0]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
}

#[test]
fn matmul_rejects_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(m(1, 2, &[1.0, 2.0]));
    let b = t.constant(m(3, 1, &[3.0, 4.0, 5.0]));
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = m(1, 2, &[1.0, 2.0]);
    let b = m(2, 1, &[3.0, 4.0]);
    let gc = check(&[a, b], 1e-6, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!((gc.numeric[0][0] - 3.0).abs() < 1e-6);
    assert!((gc.numeric[0][1] - 4.0).abs() < 1e-6);
    assert_eq!(gc.analytic[0], vec![3.0, 4.0]);
    assert!(gc.max_rel_err < 1e-4);
}

#[test]
fn elementwise_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
    let e = t.elementwise(Elementwise::Exp, x, None).unwrap();
    let v = t.value(e).data();
    assert_eq!(v[0], 1.0);
    assert!((v[1] - 2.0).abs() < 1e-15);

    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 3.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn elementwise_domain_and_shape_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    let y = t.constant(Tensor::vector(vec![1.0, -1.0]));
    assert!(matches!(t.sqrt(y), Err(Error::Domain { .. })));
    let z = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.add(x, z), Err(Error::Dimension { .. })));
    assert!(t.elementwise(Elementwise::Mul, x, None).is_err());
}

#[test]
fn scalar_operand_broadcasts() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.param(Tensor::scalar(2.0));
    let y = t.mul(x, s).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(s).unwrap(), &[6.0]);
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn square_gradient() {
    let gc = check(&[Tensor::vector(vec![1.0, 2.0, 3.0])], 1e-6, |t, v| {
        let s = t.square(v[0]);
        Ok(t.sum(s))
    })
    .unwrap();
    for (n, want) in gc.numeric[0].iter().zip([2.0, 4.0, 6.0]) {
        assert!((n - want).abs() < 1e-6);
    }
    assert!(gc.max_rel_err < 1e-4);
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::new();
    let l = t.constant(m(1, 2, &[0.0, 0.0]));
    let ce = t.softmax_cross_entropy(l, &m(1, 2, &[1.0, 0.0])).unwrap();
    assert!((t.value(ce).item() - 2f64.ln()).abs() < 1e-15);

    let l = t.constant(m(1, 2, &[1000.0, 0.0]));
    let ce = t.softmax_cross_entropy(l, &m(1, 2, &[1.0, 0.0])).unwrap();
    let v = t.value(ce).item();
    assert!(v.is_finite() && v.abs() < 1e-12);

    // -log softmax_3 at [1,2,3] = log(e^-2 + e^-1 + 1)
    let l = t.constant(m(1, 3, &[1.0, 2.0, 3.0]));
    let ce = t.softmax_cross_entropy(l, &m(1, 3, &[0.0, 0.0, 1.0])).unwrap();
    let oracle = ((-2f64).exp() + (-1f64).exp() + 1.0).ln();
    assert!((t.value(ce).item() - oracle).abs() < 1e-12);
    assert!((t.value(ce).item() - 0.40761).abs() < 1e-5);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut t = Tape::new();
    let l = t.constant(m(1, 2, &[0.0, 0.0]));
    assert!(matches!(t.softmax_cross_entropy(l, &m(1, 2, &[0.7, 0.7])), Err(Error::Validation(_))));
    assert!(matches!(t.softmax_cross_entropy(l, &m(1, 2, &[1.5, -0.5])), Err(Error::Validation(_))));
    assert!(t.softmax_cross_entropy(l, &m(2, 1, &[1.0, 1.0])).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_target() {
    let logits = m(2, 3, &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]);
    let targets = m(2, 3, &[0.0, 0.0, 1.0, 0.25, 0.25, 0.5]);
    let gc = check(&[logits], 1e-6, |t, v| t.softmax_cross_entropy(v[0], &targets)).unwrap();
    assert!(gc.max_rel_err < 1e-8, "{}", gc.max_rel_err);
}

#[test]
fn backward_basics_and_accumulation() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    t.zero_grads();
    assert!(t.grad(x).is_none());

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![2.0]));
    let y = t.mul(x, x).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0]);
    assert!(t.backward(y).is_ok(), "single-element tensor is a valid loss");

    let z = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(z), Err(Error::Dimension { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.mul(x, c).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn write_grad_accumulates_into_tensor() {
    let mut p = Tensor::vector(vec![1.0, -1.0]).with_grad();
    let mut t = Tape::new();
    let x = t.leaf(&p);
    let s = t.square(x);
    let l = t.sum(s);
    t.backward(l).unwrap();
    t.write_grad(x, &mut p).unwrap();
    t.write_grad(x, &mut p).unwrap();
    assert_eq!(p.grad().unwrap(), &[4.0, -4.0]);
}

#[test]
fn pairwise_and_rbf_gradients() {
    let a = m(2, 3, &[0.1, -0.4, 0.9, 1.2, 0.0, -0.3]);
    let b = m(3, 3, &[0.5, 0.5, 0.5, -1.0, 0.2, 0.0, 0.3, 0.3, -0.7]);
    let gc = check(&[a, b], 1e-6, |t, v| {
        let d = t.pairwise_sq_dist(v[0], v[1])?;
        let k = t.multi_rbf(d, &[0.5, 1.0, 2.0], Some(&[true, false, true]))?;
        Ok(t.sum(k))
    })
    .unwrap();
    assert!(gc.max_rel_err < 1e-6, "{}", gc.max_rel_err);
}

#[test]
fn rbf_rejects_bad_bandwidths() {
    let mut t = Tape::new();
    let d = t.constant(m(1, 1, &[1.0]));
    assert!(t.multi_rbf(d, &[], None).is_err());
    assert!(t.multi_rbf(d, &[1.0, -1.0], None).is_err());
}

#[test]
fn composite_graph_gradient() {
    let x = m(3, 2, &[0.2, -0.5, 1.0, 0.3, -0.7, 0.8]);
    let w = m(2, 4, &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
    let b = Tensor::vector(vec![0.01, -0.02, 0.03, 0.5]);
    let targets = m(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let gc = check(&[x, w, b], 1e-6, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_bias(h, v[2])?;
        let e = t.scale(h, 0.5);
        let e = t.exp(e);
        let s = t.sqrt(e)?;
        let lg = t.log(s)?;
        let r = t.relu(lg);
        let mixed = t.add(r, h)?;
        t.softmax_cross_entropy(mixed, &targets)
    })
    .unwrap();
    assert!(gc.max_rel_err < 1e-4, "{}", gc.max_rel_err);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = Tensor::vector(vec![0.3, -1.2, 0.7]);
    let grads = |a: f64, b: f64| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let sq = t.square(x);
        let l1 = t.sum(sq);
        let e = t.exp(x);
        let l2 = t.mean(e).unwrap();
        let s1 = t.scale(l1, a);
        let s2 = t.scale(l2, b);
        let l = t.add(s1, s2).unwrap();
        t.backward(l).unwrap();
        t.grad(x).unwrap().to_vec()
    };
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    let g = grads(2.5, -0.75);
    for i in 0..3 {
        assert!((g[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn group_mean_values_and_gradient() {
    let x = m(4, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.5]);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let g = t.group_mean(v, &[vec![0, 2], vec![3]]).unwrap();
    assert_eq!(t.value(g).data(), &[2.0, 3.0, -1.0, 0.5]);
    assert!(t.group_mean(v, &[vec![]]).is_err());
    assert!(t.group_mean(v, &[vec![9]]).is_err());

    let w = m(2, 1, &[0.3, -0.8]);
    let gc = check(&[x, w], 1e-6, |t, v| {
        let g = t.group_mean(v[0], &[vec![1, 0, 3], vec![2]])?;
        let p = t.matmul(g, v[1])?;
        let s = t.square(p);
        Ok(t.sum(s))
    })
    .unwrap();
    assert!(gc.max_rel_err < 1e-6);
}
