use eri_core::diffcore::{grad_check, sinusoidal_encoding, DropoutKey, Graph, Tensor, Var};
use eri_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed pseudo-random weights.
fn project(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = rand_tensor(&mut rng, &shape);
    g.dot_const(v, &w)
}

const EPS: f64 = 1e-5;

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let w = Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(w).unwrap();
    let bv = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv1d_ones_matches_direct_sum() {
    // Direct sum oracle: y[t] = sum of in-range x[t-1..=t+1].
    let x: Vec<f64> = vec![1.0; 4];
    let oracle: Vec<f64> = (0..4)
        .map(|t: i64| (t - 1..=t + 1).filter(|s| (0..4).contains(s)).map(|s| x[s as usize]).sum())
        .collect();
    assert_eq!(oracle, vec![2.0, 3.0, 3.0, 2.0]);

    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::matrix(4, 1, x).unwrap()).unwrap();
    let wv = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap()).unwrap();
    let bv = g.constant(Tensor::zeros(&[1])).unwrap();
    let y = g.conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), oracle.as_slice());
}

#[test]
fn conv1d_rejects_mismatch_and_even_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[4, 3])).unwrap();
    let w = g.constant(Tensor::zeros(&[3, 2, 5])).unwrap();
    let b = g.constant(Tensor::zeros(&[5])).unwrap();
    assert!(g.conv1d(x, w, b).is_err());
    let w2 = g.constant(Tensor::zeros(&[2, 3, 5])).unwrap();
    assert!(g.conv1d(x, w2, b).is_err());
}

#[test]
fn conv1d_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[9, 3]);
    let w = rand_tensor(&mut rng, &[5, 3, 2]);
    let b = rand_tensor(&mut rng, &[2]);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(w.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let y = g.conv1d(xv, wv, bv).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for t in 0..9 {
        let mut xp = x.clone();
        xp.data_mut()[t * 3 + 1] += 0.5;
        let yp = run(&xp);
        for s in 0..9usize {
            let changed = yp.row(s) != base.row(s);
            assert_eq!(changed, s.abs_diff(t) <= 2, "frame {t} output {s}");
        }
    }
}

#[test]
fn conv1d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        rand_tensor(&mut rng, &[5, 3]),
        rand_tensor(&mut rng, &[3, 3, 2]),
        rand_tensor(&mut rng, &[2]),
    ];
    let r = grad_check(
        |g, v| {
            let y = g.conv1d(v[0], v[1], v[2])?;
            project(g, y)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn attention_uniform_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let krow = rand_tensor(&mut rng, &[1, 4]);
    let k = Tensor::matrix(5, 4, krow.data().repeat(5)).unwrap();
    let v = rand_tensor(&mut rng, &[5, 4]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q).unwrap(),
        g.constant(k).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let out = g.attention(qv, kv, vv, 2, &[true; 5]).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mean: f64 = (0..5).map(|r| v.get2(r, j)).sum::<f64>() / 5.0;
            assert!((g.value(out).get2(i, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_masked_key_is_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[4, 4]);
    let v = rand_tensor(&mut rng, &[4, 4]);
    let mask = [true, true, true, false];
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()).unwrap(),
            g.constant(k.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let o = g.attention(qv, kv, vv, 2, &mask).unwrap();
        g.value(o).clone()
    };
    let base = run(&k, &v);
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for j in 0..4 {
        k2.data_mut()[12 + j] = 100.0 * (j as f64 + 1.0);
        v2.data_mut()[12 + j] = -55.0;
    }
    assert_eq!(base, run(&k2, &v2));
}

#[test]
fn attention_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 6])).unwrap();
    assert!(g.attention(x, x, x, 4, &[true, true]).is_err());
    assert!(g.attention(x, x, x, 2, &[false, false]).is_err());
    assert!(g.attention(x, x, x, 2, &[true]).is_err());
}

#[test]
fn attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 4])).collect();
    let r = grad_check(
        |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, &[true, true, true])?;
            project(g, y)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn affine_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let r = grad_check(
        |g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            project(g, y)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn layer_norm_constant_row_is_zero_before_affine() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.1, 0.1, -7.3, -7.3, -7.3]).unwrap()).unwrap();
    let gamma = g.constant(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_uniform_and_normalized() {
    let mut g = Graph::<f64>::new();
    for n in 1..8 {
        let x = g.constant(Tensor::full(&[1, n], 0.37)).unwrap();
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / n as f64).abs() < 1e-15);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = rand_tensor(&mut rng, &[5, 9]).map(|v| v * 30.0);
    let x = g.constant(t).unwrap();
    let y = g.softmax(x).unwrap();
    for i in 0..5 {
        let row = g.value(y).row(i);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_eval_identity_and_train_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = rand_tensor(&mut rng, &[6, 5]);
    let key = DropoutKey {
        seed: 9,
        instance: 2,
        step: 4,
    };
    let mut g = Graph::new();
    let x = g.constant(t.clone()).unwrap();
    assert_eq!(g.dropout(x, 0.5, key, false).unwrap(), x);
    let a = g.dropout(x, 0.5, key, true).unwrap();
    let b = g.dropout(x, 0.5, key, true).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let c = g.dropout(x, 0.5, DropoutKey { step: 5, ..key }, true).unwrap();
    assert_ne!(g.value(a), g.value(c));
    let zeros = g.value(a).data().iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 0 && zeros < 30);
    for (&o, &i) in g.value(a).data().iter().zip(t.data()) {
        assert!(o == 0.0 || (o - 2.0 * i).abs() < 1e-15);
    }
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2], 1e300)).unwrap();
    assert!(g.mul(x, x).is_err());
}

#[test]
fn unreachable_param_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[2], 1.0)).unwrap();
    let b = g.param(Tensor::full(&[3], 1.0)).unwrap();
    let s = g.dot_const(a, &Tensor::full(&[2], 2.0)).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0; 3]);
}

#[test]
fn positional_encoding_shape_and_first_row() {
    let pe = sinusoidal_encoding::<f64>(4, 6);
    assert_eq!(pe.shape(), &[4, 6]);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn masked_pool_ignores_masked_rows() {
    let mut g = Graph::<f64>::new();
    let x = g
        .constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 99., -99.]).unwrap())
        .unwrap();
    let p = g.masked_mean_pool(x, &[true, true, false]).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 3.0]);
    assert!(g.masked_mean_pool(x, &[false; 3]).is_err());
}
