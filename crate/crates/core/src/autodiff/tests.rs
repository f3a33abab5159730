use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every input gradient of `build` against central differences.
fn check_gradients(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn masked_mean_all_true() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap());
    let m = tape.masked_mean(x, &[true, true]).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0, 4.0]);
}

#[test]
fn masked_mean_empty_is_zero_with_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap(), true);
    let m = tape.masked_mean(x, &[false, false]).unwrap();
    assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0; 4]);
}

#[test]
fn batchnorm_train_two_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
    let gamma = tape.constant(Tensor::vector(vec![1.0]));
    let beta = tape.constant(Tensor::vector(vec![0.0]));
    let (y, stats) = tape.batch_norm_train(x, gamma, beta).unwrap();
    // mean 2, biased variance 1
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = tape.value(y).data();
    assert!((out[0] + expected).abs() < 1e-15);
    assert!((out[1] - expected).abs() < 1e-15);
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![1.0]);
}

#[test]
fn batchnorm_eval_requires_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
    let gamma = tape.constant(Tensor::vector(vec![1.0]));
    let beta = tape.constant(Tensor::vector(vec![0.0]));
    assert_eq!(
        tape.batch_norm_eval(x, gamma, beta, None).unwrap_err(),
        AutodiffError::UninitializedRunningStats
    );
}

#[test]
fn batchnorm_eval_is_affine() {
    let stats = RunningStats {
        mean: vec![0.5, -1.0],
        var: vec![4.0, 0.25],
    };
    let gamma = Tensor::vector(vec![2.0, -1.0]);
    let beta = Tensor::vector(vec![0.1, 0.3]);
    let run = |x: Vec<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 2, x).unwrap());
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        let y = tape.batch_norm_eval(xv, g, b, Some(&stats)).unwrap();
        tape.value(y).data().to_vec()
    };
    let (a, b, mid) = (run(vec![1.0, 2.0]), run(vec![3.0, -4.0]), run(vec![2.0, -1.0]));
    for j in 0..2 {
        assert!((mid[j] - 0.5 * (a[j] + b[j])).abs() < 1e-12);
    }
    assert_eq!(run(vec![1.0, 2.0]), a);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -2.0, 7.0]), true);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn dot_gradient_is_weights() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.7, 1.9]), true);
    let w = tape.constant(Tensor::vector(vec![2.0, -1.0]));
    let p = tape.mul(x, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -1.0]);
    assert!(g.get(w).is_none());
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert_eq!(tape.backward(x).unwrap_err(), AutodiffError::NotScalar(vec![2]));
    assert_eq!(tape.backward(Var(99)).unwrap_err(), AutodiffError::UnknownVar(99));
    let y = tape.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(
        tape.add(x, y),
        Err(AutodiffError::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let c = random_tensor(&mut rng, &[3, 4]);
    let row = random_tensor(&mut rng, &[4]);

    let worst = check_gradients(&[a.clone(), b.clone()], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let sq = t.square(m).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(worst < 1e-6, "matmul {worst}");

    let worst = check_gradients(&[a.clone(), c.clone(), row.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let r = t.add_row(m, v[2]).unwrap();
        let k = t.scale(r, -0.7).unwrap();
        let q = t.square(k).unwrap();
        t.sum(q).unwrap()
    });
    assert!(worst < 1e-6, "elementwise {worst}");

    let worst = check_gradients(&[a.clone(), c.clone()], |t, v| {
        let cat = t.concat_cols(&[v[0], v[1]]).unwrap();
        let mr = t.mean_rows(cat).unwrap();
        let mc = t.mean_cols(cat).unwrap();
        let mr2 = t.square(mr).unwrap();
        let mc2 = t.square(mc).unwrap();
        let s1 = t.sum(mr2).unwrap();
        let s2 = t.sum(mc2).unwrap();
        t.add(s1, s2).unwrap()
    });
    assert!(worst < 1e-6, "reductions {worst}");

    // 3 edges, d = 2
    let w = random_tensor(&mut rng, &[3, 4]);
    let h = random_tensor(&mut rng, &[4, 2]);
    let worst = check_gradients(&[w, h], |t, v| {
        let src = t.gather_rows(v[1], &[0, 2, 2]).unwrap();
        let msg = t.row_matvec(v[0], src).unwrap();
        let agg = t.scatter_mean(msg, &[1, 1, 3], 4).unwrap();
        let resh = t.reshape(agg, vec![2, 4]).unwrap();
        let sq = t.square(resh).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(worst < 1e-6, "message passing {worst}");

    let x = random_tensor(&mut rng, &[5, 3]);
    let gamma = random_tensor(&mut rng, &[3]);
    let beta = random_tensor(&mut rng, &[3]);
    let weights = random_tensor(&mut rng, &[5, 3]);
    let worst = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2]).unwrap();
        let w = t.constant(weights.clone());
        let p = t.mul(y, w).unwrap();
        let q = t.square(p).unwrap();
        t.sum(q).unwrap()
    });
    assert!(worst < 1e-6, "batchnorm train {worst}");

    let stats = RunningStats {
        mean: vec![0.1, 0.2, -0.3],
        var: vec![0.5, 2.0, 1.0],
    };
    let worst = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], Some(&stats)).unwrap();
        let m = t.masked_mean(y, &[true, false, true, true, false]).unwrap();
        let q = t.square(m).unwrap();
        t.sum(q).unwrap()
    });
    assert!(worst < 1e-6, "batchnorm eval {worst}");

    let worst = check_gradients(&[x, gamma, beta], |t, v| {
        let (y, _) = t.batch_norm_centered(v[0], v[1], v[2], &stats.var).unwrap();
        let m = t.masked_mean(y, &[true, false, true, true, false]).unwrap();
        let w = t.constant(Tensor::matrix(1, 3, weights.row(0).to_vec()).unwrap());
        let p = t.mul(m, w).unwrap();
        let q = t.square(p).unwrap();
        t.sum(q).unwrap()
    });
    assert!(worst < 1e-6, "batchnorm centered {worst}");
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut seed = 0;
    while checked < 10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let x = random_tensor(&mut rng, &[4, 3]);
        let w1 = random_tensor(&mut rng, &[3, 5]);
        let b1 = random_tensor(&mut rng, &[5]);
        let w2 = random_tensor(&mut rng, &[5, 1]);
        let build = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let h = t.relu(h).unwrap();
            let o = t.matmul(h, v[3]).unwrap();
            t.sum(o).unwrap()
        };
        let mut probe = Tape::new();
        let vars: Vec<Var> = [&x, &w1, &b1, &w2]
            .iter()
            .map(|t| probe.leaf((*t).clone(), true))
            .collect();
        build(&mut probe, &vars);
        if probe.relu_margin() < 1e-3 {
            continue;
        }
        worst = worst.max(check_gradients(&[x, w1, b1, w2], build));
        checked += 1;
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[3, 3]);
    let (a, b) = (1.7, -0.4);
    let grad_of = |coef_f: f64, coef_g: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let sq = tape.square(xv).unwrap();
        let f = tape.sum(sq).unwrap();
        let r = tape.relu(xv).unwrap();
        let g = tape.mean_rows(r).unwrap();
        let g = tape.sum(g).unwrap();
        let fa = tape.scale(f, coef_f).unwrap();
        let gb = tape.scale(g, coef_g).unwrap();
        let total = tape.add(fa, gb).unwrap();
        tape.backward(total).unwrap().get(xv).unwrap().clone()
    };
    let combined = grad_of(a, b);
    let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
    for i in 0..9 {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[6, 4]);
    let w = random_tensor(&mut rng, &[4, 4]);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let h = tape.matmul(xv, wv).unwrap();
        let ones = tape.constant(Tensor::filled(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let (h, _) = tape.batch_norm_train(h, ones, zeros).unwrap();
        let h = tape.relu(h).unwrap();
        let s = tape.sum(h).unwrap();
        let g = tape.backward(s).unwrap();
        (
            tape.value(s).data().to_vec(),
            g.get(xv).unwrap().clone(),
            g.get(wv).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn running_stats_momentum() {
    let mut stats = RunningStats::identity(2);
    stats.update(
        &BatchStats {
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        },
        0.1,
    );
    assert!((stats.mean[0] - 0.1).abs() < 1e-15);
    assert!((stats.mean[1] - 0.2).abs() < 1e-15);
    assert!((stats.var[0] - 1.2).abs() < 1e-15);
    assert!((stats.var[1] - 1.4).abs() < 1e-15);
}

#[test]
fn centered_batchnorm_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 4.0, 6.0, 4.0]).unwrap(), false);
    let gamma = tape.leaf(Tensor::vector(vec![2.0, 1.0]), false);
    let beta = tape.leaf(Tensor::vector(vec![0.5, -1.0]), false);
    let (y, stats) = tape.batch_norm_centered(x, gamma, beta, &[4.0 - 1e-5, 1.0]).unwrap();
    assert_eq!(stats.mean, vec![3.0, 4.0]);
    assert!((stats.var[0] - 14.0 / 3.0).abs() < 1e-12);
    let expect = [2.0 * -2.0 / 2.0 + 0.5, -1.0, 2.0 * -1.0 / 2.0 + 0.5, -1.0, 2.0 * 3.0 / 2.0 + 0.5, -1.0];
    for (a, b) in tape.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }
}
