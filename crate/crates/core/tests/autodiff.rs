use kinegraph::autodiff::gradcheck::relative_error;
use kinegraph::autodiff::{Adam, ParamStore, Tape, Tensor};
use kinegraph::verify::op_gradcheck;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let y = t.matmul(i, a).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_is_a_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(kinegraph::Error::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_column_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    let av = t.variable(a.clone());
    let bv = t.constant(b.clone());
    let y = t.matmul(av, bv).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    let ga = g.get(av).unwrap();
    for r in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b.row(k).iter().sum();
            assert!((ga[r * 4 + k] - row_sum).abs() < 1e-14);
        }
    }
    let err = op_gradcheck(vec![a, b], 2, |t, v| t.matmul(v[0], v[1])).unwrap();
    assert!(err <= 1e-6, "{err}");
}

/// Direct six-loop valid cross-correlation.
fn conv_oracle(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], c_out: usize, ks: usize, bias: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h - ks + 1, w - ks + 1);
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for dy in 0..ks {
                        for dx in 0..ks {
                            acc += k[((o * c_in + c) * ks + dy) * ks + dx] * x[(c * h + y + dy) * w + xx + dx];
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[1, 8, 8]);
    let k = randn(&mut rng, &[2, 1, 5, 5]);
    let b = randn(&mut rng, &[2]);
    let mut t = Tape::new();
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, kv, bv).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 4, 4]);
    let want = conv_oracle(x.data(), 1, 8, 8, k.data(), 2, 5, b.data());
    for (a, b) in t.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }

    // Multi-channel, batched.
    let x = randn(&mut rng, &[3, 2, 9, 7]);
    let k = randn(&mut rng, &[4, 2, 5, 5]);
    let b = randn(&mut rng, &[4]);
    let mut t = Tape::new();
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, kv, bv).unwrap();
    assert_eq!(t.value(y).shape(), &[3, 4, 5, 3]);
    for i in 0..3 {
        let img = &x.data()[i * 2 * 63..(i + 1) * 2 * 63];
        let want = conv_oracle(img, 2, 9, 7, k.data(), 4, 5, b.data());
        let got = &t.value(y).data()[i * 60..(i + 1) * 60];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv_shapes_and_constant_case() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[1, 100, 100], 0.3));
    let k = t.constant(Tensor::zeros(&[6, 1, 5, 5]));
    let b = t.constant(Tensor::new(&[6], (0..6).map(f64::from).collect()).unwrap());
    let y = t.conv2d(x, k, b).unwrap();
    assert_eq!(t.value(y).shape(), &[6, 96, 96]);
    for (c, plane) in t.value(y).data().chunks(96 * 96).enumerate() {
        assert!(plane.iter().all(|&v| v == c as f64));
    }
    let small = t.constant(Tensor::zeros(&[1, 4, 9]));
    assert!(t.conv2d(small, k, b).is_err());
}

#[test]
fn conv_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 2, 8, 8]);
    let k = randn(&mut rng, &[3, 2, 5, 5]);
    let b = randn(&mut rng, &[3]);
    let err = op_gradcheck(vec![x, k, b], 5, |t, v| t.conv2d(v[0], v[1], v[2])).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn max_pool_window_and_ties() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap());
    let y = t.max_pool2x2(x).unwrap();
    assert_eq!(t.value(y).data(), &[3.0]);
    let s = t.sum(y);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);

    let x = t.variable(Tensor::filled(&[1, 2, 2], 2.5));
    let y = t.max_pool2x2(x).unwrap();
    assert_eq!(t.value(y).data(), &[2.5]);
    let s = t.sum(y);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

    let c = t.constant(Tensor::filled(&[6, 96, 96], 0.7));
    let y = t.max_pool2x2(c).unwrap();
    assert_eq!(t.value(y).shape(), &[6, 48, 48]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.7));
    let odd = t.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(t.max_pool2x2(odd).is_err());
}

#[test]
fn relu_and_tanh_values_and_gradients() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = t.sum(r);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);
    let z = t.constant(Tensor::scalar(0.0));
    let th = t.tanh(z);
    assert_eq!(t.value(th).item(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = randn(&mut rng, &[12]);
    assert!(op_gradcheck(vec![v.clone()], 1, |t, v| Ok(t.relu(v[0]))).unwrap() <= 1e-6);
    assert!(op_gradcheck(vec![v], 1, |t, v| Ok(t.tanh(v[0]))).unwrap() <= 1e-6);
}

#[test]
fn gaussian_log_prob_analytic_and_formula() {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut t = Tape::new();
    let m = t.constant(Tensor::new(&[1], vec![0.4]).unwrap());
    let ls = t.constant(Tensor::scalar(0.0));
    let lp = t.gaussian_log_prob(&[0.4], m, ls).unwrap();
    assert!((t.value(lp).item() + half_log_2pi).abs() < 1e-15);

    let m = t.constant(Tensor::new(&[3], vec![0.1, -2.0, 5.0]).unwrap());
    let ls = t.constant(Tensor::scalar(-0.7));
    let lp = t.gaussian_log_prob(&[0.1, -2.0, 5.0], m, ls).unwrap();
    assert!((t.value(lp).item() + 3.0 * (-0.7 + half_log_2pi)).abs() < 1e-14);

    // Density formula evaluated as the log of a product of pdfs.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mean: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let action: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let log_sigma: f64 = rng.gen_range(-1.0..0.5);
        let sigma = log_sigma.exp();
        let pdf: f64 = action
            .iter()
            .zip(&mean)
            .map(|(a, m)| (-(a - m).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
            .product();
        let mut t = Tape::new();
        let mv = t.constant(Tensor::new(&[4], mean).unwrap());
        let lsv = t.constant(Tensor::scalar(log_sigma));
        let lp = t.gaussian_log_prob(&action, mv, lsv).unwrap();
        assert!(relative_error(t.value(lp).item(), pdf.ln()) < 1e-12);
    }
}

#[test]
fn backward_simple_losses_and_non_scalar_rejection() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = randn(&mut rng, &[3, 3]);
    let mut t = Tape::new();
    let wv = t.variable(w.clone());
    let s = t.sum(wv);
    assert!(t.backward(s).unwrap().get(wv).unwrap().iter().all(|&g| g == 1.0));
    let sq = t.square(wv);
    let l = t.sum(sq);
    let g = t.backward(l).unwrap();
    for (gi, wi) in g.get(wv).unwrap().iter().zip(w.data()) {
        assert_eq!(*gi, 2.0 * wi);
    }
    assert!(matches!(t.backward(wv), Err(kinegraph::Error::Contract(_))));
}

#[test]
fn backward_into_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -3.0]).unwrap()).unwrap();
    for k in 1..=3 {
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let l = t.sum(w);
        t.backward_into(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[k as f64, k as f64]);
    }
    store.zero_grad();
    assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
}

#[test]
fn adam_matches_scalar_reference() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[2], vec![0.5, -1.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store, vec![id]);
    let grads = [[1.0, -0.2], [0.3, 0.0], [-2.0, 0.5]];
    let lr = 0.01;

    // Independent scalar implementation of the bias-corrected update.
    let (mut x, mut m, mut v) = ([0.5, -1.0], [0.0; 2], [0.0; 2]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            x[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        store.get_mut(id).grad = Tensor::new(&[2], g.to_vec()).unwrap();
        adam.step(&mut store, lr);
        assert_eq!(adam.step_count(), t as u64);
    }
    for i in 0..2 {
        assert!((store.value(id).data()[i] - x[i]).abs() <= 1e-12);
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[2], vec![2.0, 2.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store, vec![id]);
    store.get_mut(id).grad = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    adam.step(&mut store, 0.1);
    assert!((store.value(id).data()[0] - 1.9).abs() < 1e-6);
    assert_eq!(store.value(id).data()[1], 2.0);
}

#[test]
fn backward_visits_each_op_once_in_reverse() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(1.5));
    let a = t.tanh(x);
    let b = t.square(a);
    let c = t.add(a, b).unwrap();
    let l = t.sum(c);
    let g = t.backward(l).unwrap();
    let order = g.visit_order();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), order.len());
    assert!(order.windows(2).all(|w| w[0] > w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composed_ops_pass_gradcheck(seed in any::<u64>(), rows in 1usize..4, inner in 1usize..5, cols in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[rows, inner]);
        let b = randn(&mut rng, &[inner, cols]);
        let bias = randn(&mut rng, &[cols]);
        let err = op_gradcheck(vec![a, b, bias], seed, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_bias(y, v[2])?;
            let y = t.tanh(y);
            let e = t.exp(y);
            Ok(t.scale(e, 0.5))
        }).unwrap();
        prop_assert!(err <= 1e-4, "rel err {}", err);
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, 1, 10, 10]);
        let k = randn(&mut rng, &[3, 1, 5, 5]);
        let b = randn(&mut rng, &[3]);
        let run = || {
            let mut t = Tape::new();
            let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, kv, bv).unwrap();
            let y = t.max_pool2x2(y).unwrap();
            t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
