use proptest::prelude::*;

use super::*;

fn scalar_leaf(g: &mut Graph, v: f64) -> Var {
    g.leaf(Tensor::scalar(v))
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = scalar_leaf(&mut g, 0.0);
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data(), &[0.5]);
}

#[test]
fn power_rule() {
    let mut g = Graph::new();
    let x = scalar_leaf(&mut g, 3.0);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn softmax_of_equal_logits() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![1.0, 1.0]));
    let y = g.softmax_rows(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn squared_error_grads() {
    let mut g = Graph::new();
    let a = scalar_leaf(&mut g, 2.0);
    let b = scalar_leaf(&mut g, 1.0);
    let loss = g.squared_error(a, b).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[2.0]);
    assert_eq!(g.grad(b).unwrap(), &[-2.0]);
}

#[test]
fn two_paths_accumulate() {
    // loss = 3x + x^2 at x = 2 -> 3 + 4
    let mut g = Graph::new();
    let x = scalar_leaf(&mut g, 2.0);
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x).unwrap();
    let s = g.add(a, b).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[7.0]);
}

#[test]
fn length_mismatch_is_rejected() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::row(vec![1.0, 2.0]));
    let b = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(GradError::ShapeMismatch { .. })));
    let w = g.leaf(Tensor::zeros(3, 2));
    let bias = g.leaf(Tensor::zeros(1, 2));
    assert!(g.affine(a, w, bias).is_err());
    assert!(g.gather(a, vec![0, 5], 1, 2).is_err());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::row(vec![1.0, 2.0]));
    assert_eq!(g.backward(a), Err(GradError::NonScalarLoss((1, 2))));
}

fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn step_identity(g: &mut Graph, x: Var) -> Var {
    g.custom_op(
        &[x],
        |ins| {
            let t = ins[0];
            Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| heaviside(v)).collect())
        },
        |up, _, _| vec![up.to_vec()],
    )
}

#[test]
fn custom_op_step_with_identity_backward() {
    for (x, up, out) in [(0.7, 1.0, 1.0), (-0.7, 2.5, 0.0)] {
        let mut g = Graph::new();
        let xv = scalar_leaf(&mut g, x);
        let y = step_identity(&mut g, xv);
        let w = g.constant(Tensor::scalar(up));
        let l = g.mul(y, w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(y).data(), &[out]);
        assert_eq!(g.grad(xv).unwrap(), &[up]);
    }
}

#[test]
fn custom_op_step_with_sigmoid_derivative_backward() {
    let mut g = Graph::new();
    let x = scalar_leaf(&mut g, 0.0);
    let noise = 0.0;
    let y = g.custom_op(
        &[x],
        |ins| Tensor::scalar(heaviside(ins[0].data()[0] + noise)),
        move |up, ins, _| {
            let s = sigmoid(ins[0].data()[0] + noise);
            vec![vec![up[0] * s * (1.0 - s)]]
        },
    );
    g.backward(y).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn custom_backward_length_is_checked() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
    let y = g.custom_op(&[x], |ins| ins[0].clone(), |_, _, _| vec![vec![1.0]]);
    let s = g.sum(y);
    assert!(matches!(
        g.backward(s),
        Err(GradError::CustomBackwardShape { .. })
    ));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = scalar_leaf(&mut g, 3.0);
    let y = g.mul(c, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn sgd_examples() {
    let mut set = ParamSet::new();
    set.push("p", Tensor::scalar(1.0));
    set.iter_mut().next().unwrap().grad = vec![0.5];
    let mut opt = Optimizer::sgd(0.1);
    opt.step(&mut [&mut set]).unwrap();
    assert!((set.get(0).value.data()[0] - 0.95).abs() < 1e-15);
    assert_eq!(set.get(0).grad, vec![0.0]);

    // zero gradient leaves the parameter alone
    opt.step(&mut [&mut set]).unwrap();
    assert!((set.get(0).value.data()[0] - 0.95).abs() < 1e-15);
}

#[test]
fn sgd_on_square() {
    let mut set = ParamSet::new();
    set.push("p", Tensor::scalar(1.0));
    let mut opt = Optimizer::sgd(0.1);
    for _ in 0..2 {
        let mut g = Graph::new();
        let vars = set.bind(&mut g);
        let f = g.mul(vars[0], vars[0]).unwrap();
        g.backward(f).unwrap();
        set.accumulate_grads(&g, &vars);
        opt.step(&mut [&mut set]).unwrap();
    }
    assert!((set.get(0).value.data()[0] - 0.64).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_aborts_step() {
    let mut set = ParamSet::new();
    set.push("w", Tensor::scalar(1.0));
    set.iter_mut().next().unwrap().grad = vec![f64::NAN];
    let mut opt = Optimizer::new(OptimizerKind::Rms, 0.1);
    assert_eq!(
        opt.step(&mut [&mut set]),
        Err(GradError::NonFiniteGradient("w".into()))
    );
    assert_eq!(set.get(0).value.data(), &[1.0]);
}

#[test]
fn clipping_bounds_the_update() {
    let mut set = ParamSet::new();
    set.push("w", Tensor::row(vec![0.0, 0.0]));
    set.iter_mut().next().unwrap().grad = vec![30.0, 40.0];
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0);
    let stats = opt.step(&mut [&mut set]).unwrap();
    assert!(stats.clipped);
    assert_eq!(stats.grad_norm, 50.0);
    assert_eq!(set.get(0).value.data(), &[-6.0, -8.0]);
}

#[test]
fn rms_first_step_is_normalised() {
    let mut set = ParamSet::new();
    set.push("w", Tensor::scalar(0.0));
    set.iter_mut().next().unwrap().grad = vec![2.0];
    let mut opt = Optimizer::new(OptimizerKind::Rms, 0.01);
    opt.step(&mut [&mut set]).unwrap();
    // s = 0.01 * 4, step = 0.01 * 2 / (0.2 + 1e-5)
    let expected = -0.01 * 2.0 / (0.04f64.sqrt() + 1e-5);
    assert!((set.get(0).value.data()[0] - expected).abs() < 1e-15);
}

// ---- finite-difference oracle -------------------------------------------

/// A small random composite exercising every smooth built-in op.
fn composite(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let h = g.affine(x, w, b).unwrap(); // 2x3
    let t = g.tanh(h);
    let s = g.sigmoid(h);
    let p = g.mul(t, s).unwrap();
    let sm = g.softmax_rows(p);
    let lg = g.log(sm);
    let cat = g.concat_cols(lg, t).unwrap(); // 2x6
    let idx: Vec<usize> = vec![0, 7, 3, 11, 5, 2];
    let ga = g.gather(cat, idx, 2, 3).unwrap();
    let fl = g.flip(ga, vec![true, false, false, true, false, true]).unwrap();
    let rows = g.concat_rows(&[fl, s]).unwrap(); // 4x3
    let mx = g.max_rows(rows).unwrap();
    let sc = g.scale(mx, 0.5);
    let target = g.constant(Tensor::from_vec(4, 1, vec![0.1, -0.2, 0.3, 0.0]));
    let d = g.sub(sc, target).unwrap();
    let se = g.squared_error(d, target).unwrap();
    let total = g.sum(rows);
    g.add(se, total).unwrap()
}

fn eval_composite(x: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
    let out = composite(&mut g, xv, wv, bv);
    g.value(out).data()[0]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn check_fd(tensors: &[Tensor; 3]) -> std::result::Result<(), TestCaseError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let out = composite(&mut g, vars[0], vars[1], vars[2]);
    g.backward(out).unwrap();
    let h = 1e-4;
    for which in 0..3 {
        let analytic = g.grad(vars[which]).map(<[f64]>::to_vec).unwrap_or_default();
        for k in 0..tensors[which].len() {
            let mut plus = tensors.clone();
            plus[which].data_mut()[k] += h;
            let mut minus = tensors.clone();
            minus[which].data_mut()[k] -= h;
            let fd = (eval_composite(&plus[0], &plus[1], &plus[2])
                - eval_composite(&minus[0], &minus[1], &minus[2]))
                / (2.0 * h);
            let an = analytic.get(k).copied().unwrap_or(0.0);
            prop_assert!(
                rel_err(an, fd) <= 1e-4,
                "input {which}[{k}]: analytic {an} vs fd {fd}"
            );
        }
    }
    Ok(())
}

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::from_vec(rows, cols, d))
}

fn far_from_ties(t: &[Tensor; 3]) -> bool {
    // the max node is non-differentiable where two row entries coincide
    let mut g = Graph::new();
    let vars: Vec<Var> = t.iter().map(|t| g.leaf(t.clone())).collect();
    let h = g.affine(vars[0], vars[1], vars[2]).unwrap();
    let th = g.tanh(h);
    let s = g.sigmoid(h);
    let p = g.mul(th, s).unwrap();
    let sm = g.softmax_rows(p);
    let lg = g.log(sm);
    let cat = g.concat_cols(lg, th).unwrap();
    let ga = g
        .gather(cat, vec![0, 7, 3, 11, 5, 2], 2, 3)
        .unwrap();
    let fl = g
        .flip(ga, vec![true, false, false, true, false, true])
        .unwrap();
    let rows = g.concat_rows(&[fl, s]).unwrap();
    let v = g.value(rows);
    (0..v.rows()).all(|r| {
        let mut row = v.row_slice(r).to_vec();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        row[0] - row[1] > 1e-2
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(
        x in tensor_strategy(2, 4),
        w in tensor_strategy(4, 3),
        b in tensor_strategy(1, 3),
    ) {
        let t = [x, w, b];
        prop_assume!(far_from_ties(&t));
        check_fd(&t)?;
    }

    #[test]
    fn relu_and_matmul_match_central_differences(
        a in tensor_strategy(3, 2),
        b in tensor_strategy(2, 4),
    ) {
        prop_assume!(a.matmul(&b).data().iter().all(|v| v.abs() > 1e-3));
        let f = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let m = g.matmul(av, bv).unwrap();
            let r = g.relu(m);
            let q = g.mul(r, r).unwrap();
            let s = g.sum(q);
            (g, av, bv, s)
        };
        let (mut g, av, bv, s) = f(&a, &b);
        g.backward(s).unwrap();
        let h = 1e-5;
        for k in 0..a.len() {
            let mut p = a.clone(); p.data_mut()[k] += h;
            let mut m = a.clone(); m.data_mut()[k] -= h;
            let (gp, _, _, sp) = f(&p, &b);
            let (gm, _, _, sm) = f(&m, &b);
            let fd = (gp.value(sp).data()[0] - gm.value(sm).data()[0]) / (2.0 * h);
            prop_assert!(rel_err(g.grad(av).unwrap()[k], fd) <= 1e-4);
        }
        for k in 0..b.len() {
            let mut p = b.clone(); p.data_mut()[k] += h;
            let mut m = b.clone(); m.data_mut()[k] -= h;
            let (gp, _, _, sp) = f(&a, &p);
            let (gm, _, _, sm) = f(&a, &m);
            let fd = (gp.value(sp).data()[0] - gm.value(sm).data()[0]) / (2.0 * h);
            prop_assert!(rel_err(g.grad(bv).unwrap()[k], fd) <= 1e-4);
        }
    }

    #[test]
    fn custom_forward_is_bit_identical(xs in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let f = |v: f64| (v * 1.7).sin() + heaviside(v);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(xs.clone()));
        let y = g.custom_op(
            &[x],
            |ins| Tensor::row(ins[0].data().iter().map(|&v| f(v)).collect()),
            |up, _, _| vec![up.to_vec()],
        );
        let direct: Vec<f64> = xs.iter().map(|&v| f(v)).collect();
        prop_assert_eq!(g.value(y).data(), direct.as_slice());
    }

    #[test]
    fn evaluation_is_deterministic(
        x in tensor_strategy(2, 4),
        w in tensor_strategy(4, 3),
        b in tensor_strategy(1, 3),
    ) {
        let a = eval_composite(&x, &w, &b);
        let c = eval_composite(&x, &w, &b);
        prop_assert_eq!(a.to_bits(), c.to_bits());
    }
}

