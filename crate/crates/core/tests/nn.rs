use nriqa::nn::layers::Linear;
use nriqa::nn::{grad_check, hamming_window, Graph, HammingKernel2D, Init, Mode, ParamStore};
use nriqa::{Error, Tensor};
use proptest::prelude::*;

fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::new(seed).normal(shape, 1.0)
}

fn eval<F>(inputs: &[Tensor<f64>], f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Graph<f64>, &[nriqa::nn::Var]) -> nriqa::nn::Var,
{
    let mut g = Graph::new(Mode::Eval, 0);
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars);
    g.value(y).clone()
}

/// Direct convolution with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xa = |n: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((n * c + ch) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::new();
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((oc * c + ic) * k + ky) * k + kx] * xa(n, ic, iy, ix);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Mirror padding that never repeats the edge sample, written as a lookup
/// over the doubled sequence `0, 1, .., n-1, n-2, .., 1`.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        period as usize - m
    }
}

fn l2pool_oracle(x: &[f64], h: usize, w: usize, weights: &[f64], m: usize, stride: usize) -> Vec<f64> {
    let r = (m as isize - 1) / 2;
    let mut out = Vec::new();
    for oy in (0..h).step_by(stride) {
        for ox in (0..w).step_by(stride) {
            let mut acc = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let v = x[mirror(oy as isize + a as isize - r, h) * w + mirror(ox as isize + b as isize - r, w)];
                    acc += weights[a * m + b] * v * v;
                }
            }
            out.push(acc.max(1e-12).sqrt());
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    let x = rand64(&[1, 2, 5, 5], 1);
    let w = rand64(&[3, 2, 3, 3], 2);
    let y = eval(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, 1, 1).unwrap());
    let oracle = conv_oracle(&x, &w, 1, 1);
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.input(rand64(&[1, 2, 5, 5], 1));
    let w = g.input(rand64(&[3, 4, 3, 3], 2));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("conv2d") && msg.contains("axis 1"), "{msg}");
}

#[test]
fn relu_zeroes_negatives() {
    let x = Tensor::from_fn(&[2, 4], |i| -1.0 - i as f64);
    let y = eval(&[x], |g, v| g.relu(v[0]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_standardizes_rows() {
    let x = rand64(&[4, 7], 3).map(|v| 3.0 * v + 2.0);
    let y = eval(&[x, Tensor::full(&[7], 1.0), Tensor::zeros(&[7])], |g, v| {
        g.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    for row in y.data().chunks(7) {
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn euclid_normalize_examples() {
    let zero = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    let y = eval(&[zero], |g, v| g.euclid_normalize(v[0], 1e-10).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = rand64(&[1, 2, 3, 3], 4);
    let n = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit = x.map(|v| v / n);
    let y = eval(std::slice::from_ref(&unit), |g, v| g.euclid_normalize(v[0], 1e-10).unwrap());
    assert!(y.max_abs_diff(&unit) <= 1e-7);

    let five = unit.map(|v| 5.0 * v);
    let y = eval(&[five], |g, v| g.euclid_normalize(v[0], 1e-10).unwrap());
    let mut norm = 0.0;
    for v in y.data().iter().rev() {
        norm += v * v;
    }
    assert!((norm.sqrt() - 1.0).abs() <= 1e-6);
}

#[test]
fn euclid_normalize_rejects_non_positive_eps() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.input(rand64(&[1, 1, 2, 2], 0));
    assert!(g.euclid_normalize(x, 0.0).is_err());
}

#[test]
fn hamming_examples() {
    assert_eq!(HammingKernel2D::new(1).unwrap().weights(), &[1.0]);
    let w = hamming_window(3);
    let oracle: Vec<f64> = (0..3)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / 2.0).cos())
        .collect();
    for (a, b) in w.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((w[0] - 0.08).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
    assert!(HammingKernel2D::new(4).is_err());
    assert!(HammingKernel2D::new(0).is_err());
}

#[test]
fn l2pool_matches_nested_loops() {
    let x = rand64(&[1, 1, 8, 8], 5);
    let k = HammingKernel2D::new(3).unwrap();
    let y = eval(std::slice::from_ref(&x), |g, v| g.l2pool(v[0], &k, 2).unwrap());
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    let oracle = l2pool_oracle(x.data(), 8, 8, k.weights(), 3, 2);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn l2pool_constant_and_stride_errors() {
    let k = HammingKernel2D::new(5).unwrap();
    let x = Tensor::full(&[1, 2, 6, 6], -1.5);
    let y = eval(std::slice::from_ref(&x), |g, v| g.l2pool(v[0], &k, 2).unwrap());
    assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let v = g.input(x);
    assert!(g.l2pool(v, &k, 0).is_err());
}

#[test]
fn grad_check_examples() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, &mut Init::new(7), "lin", 4, 3);
    let x = rand64(&[2, 4], 8);
    let err = grad_check(|g, v| lin.forward(g, &store, v[0]), &[x], 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");

    let away = rand64(&[10], 9).map(|v| if v.abs() < 0.1 { v.signum() * 0.2 + v } else { v });
    let err = grad_check(|g, v| Ok(g.relu(v[0])), &[away], 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");

    let err = grad_check(
        |g, v| {
            let z = g.scale(v[0], 0.0);
            Ok(g.sum(z))
        },
        &[rand64(&[3], 10)],
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap();
    assert!(matches!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5), Err(Error::NonFinite(_))));
}

#[test]
fn zero_grad_resets_exactly() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", rand64(&[3, 2], 1));
    store.get_mut(id).grad.add_assign(&rand64(&[3, 2], 2));
    store.zero_grad();
    let p = store.get(id);
    assert_eq!(p.grad.shape(), p.value.shape());
    assert!(p.grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_is_identity_in_eval_and_scales_in_train() {
    let x = rand64(&[4, 50], 3);
    let y = eval(std::slice::from_ref(&x), |g, v| g.dropout(v[0], 0.3).unwrap());
    assert_eq!(y.data(), x.data());
    let mut g = Graph::<f64>::new(Mode::Train, 1);
    let v = g.input(x.clone());
    let d = g.dropout(v, 0.3).unwrap();
    for (a, b) in g.value(d).data().iter().zip(x.data()) {
        assert!(*a == 0.0 || (a - b / 0.7).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_oracle_any_geometry(seed in 0u64..1000, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, size in 3usize..7) {
        prop_assume!(size + 2 * pad >= k);
        let x = rand64(&[2, 2, size, size], seed);
        let w = rand64(&[3, 2, k, k], seed + 1);
        let y = eval(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, stride, pad).unwrap());
        let oracle = conv_oracle(&x, &w, stride, pad);
        prop_assert_eq!(y.len(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let x = rand64(&[3, 7], seed).map(|v| v * scale);
        let y = eval(&[x], |g, v| g.softmax(v[0]));
        for row in y.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn l2pool_is_even_and_non_negative(seed in 0u64..1000, m in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..4) {
        let k = HammingKernel2D::new(m).unwrap();
        let x = rand64(&[1, 2, 7, 6], seed);
        let y = eval(std::slice::from_ref(&x), |g, v| g.l2pool(v[0], &k, stride).unwrap());
        let yn = eval(&[x.map(|v| -v)], |g, v| g.l2pool(v[0], &k, stride).unwrap());
        prop_assert_eq!(y.shape(), &[1, 2, 7usize.div_ceil(stride), 6usize.div_ceil(stride)][..]);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(y.data(), yn.data());
    }

    #[test]
    fn hamming_kernel_invariants(half in 0usize..8) {
        let m = 2 * half + 1;
        let k = HammingKernel2D::new(m).unwrap();
        prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let c = k.at(half, half);
        for r in 0..m {
            for col in 0..m {
                let v = k.at(r, col);
                prop_assert_eq!(v, k.at(col, r));
                prop_assert_eq!(v, k.at(m - 1 - r, col));
                prop_assert_eq!(v, k.at(r, m - 1 - col));
                prop_assert!(v > 0.0 && v <= c);
            }
        }
    }

    #[test]
    fn euclid_normalize_keeps_direction(seed in 0u64..1000, alpha in 0.01f64..100.0) {
        let x = rand64(&[2, 3, 2, 2], seed);
        let y = eval(std::slice::from_ref(&x), |g, v| g.euclid_normalize(v[0], 1e-10).unwrap());
        let ya = eval(&[x.map(|v| v * alpha)], |g, v| g.euclid_normalize(v[0], 1e-10).unwrap());
        prop_assert!(y.max_abs_diff(&ya) <= 1e-9);
        for s in y.data().chunks(12) {
            prop_assert!((s.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn relative_error_floor() {
    use nriqa::nn::{relative_error, GRAD_FLOOR};
    assert_eq!(relative_error(2.0, 1.0), 0.5);
    assert_eq!(relative_error(1.0, 2.0), 0.5);
    approx::assert_relative_eq!(relative_error(3e-8, 2e-8), 1e-8 / GRAD_FLOOR, max_relative = 1e-12);
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}
