use nriqa::encoder::{flatten_grid, mhsa, positional_encoding, unflatten_grid, Encoder, EncoderConfig};
use nriqa::nn::{grad_check, Graph, Init, ParamStore};
use nriqa::Tensor;
use proptest::prelude::*;

fn encoder(in_c: usize, config: &EncoderConfig, seed: u64) -> (ParamStore<f64>, Encoder) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(seed), in_c, config).unwrap();
    (store, enc)
}

fn tiny(n_layers: usize, pe: bool) -> EncoderConfig {
    EncoderConfig {
        n_layers,
        width: 8,
        heads: 2,
        ffn_dim: 16,
        positional_encoding: pe,
        ..EncoderConfig::default()
    }
}

fn run(store: &ParamStore<f64>, enc: &Encoder, x: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let t = enc.forward_traced(&mut g, store, v).unwrap();
    (g.value(t.output).clone(), t.attention.iter().map(|&a| g.value(a).clone()).collect())
}

/// Reorders the spatial positions of `(b, c, m, n)` so that output position
/// `i` holds input position `perm[i]`.
fn permute_positions(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut out = x.clone();
    for s in 0..b * c {
        for (i, &p) in perm.iter().enumerate() {
            out.data_mut()[s * l + i] = x.data()[s * l + p];
        }
    }
    out
}

fn shuffled(l: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut p: Vec<usize> = (0..l).collect();
    p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    if p.iter().enumerate().all(|(i, &v)| i == v) {
        p.swap(0, l - 1);
    }
    p
}

#[test]
fn project_tokens_shapes_and_zero_weights() {
    let (mut store, enc) = encoder(120, &EncoderConfig::default(), 0);
    let x: Tensor<f64> = Init::new(1).normal(&[2, 120, 4, 4], 1.0);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let seq = enc.project_tokens(&mut g, &store, v).unwrap();
    assert_eq!(g.shape(seq.tokens), [2, 16, 64]);
    assert_eq!(seq.grid, (4, 4));

    for p in store.iter_mut().filter(|p| p.name.starts_with("encoder.input_proj")) {
        p.value.data_mut().fill(0.0);
    }
    let mut g = Graph::inference();
    let v = g.constant(x);
    let seq = enc.project_tokens(&mut g, &store, v).unwrap();
    assert!(g.value(seq.tokens).data().iter().all(|&t| t == 0.0));
}

#[test]
fn flatten_round_trip() {
    let x: Tensor<f64> = Init::new(2).normal(&[2, 5, 3, 4], 1.0);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let f = flatten_grid(&mut g, v).unwrap();
    assert_eq!(g.shape(f), [2, 12, 5]);
    // token (row 1, col 2) of channel 3
    assert_eq!(g.value(f).data()[(6) * 5 + 3], x.data()[3 * 12 + 6]);
    let u = unflatten_grid(&mut g, f, (3, 4)).unwrap();
    assert_eq!(g.value(u), &x);
    assert!(unflatten_grid(&mut g, f, (4, 4)).is_err());
}

#[test]
fn positional_encoding_rows_are_distinct_and_bounded() {
    let pe: Tensor<f64> = positional_encoding(16, 16, 64, 10000.0).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let rows: Vec<&[f64]> = pe.data().chunks(64).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d > 1e-9, "positions {i} and {j} collide");
        }
    }
    let again: Tensor<f64> = positional_encoding(16, 16, 64, 10000.0).unwrap();
    assert_eq!(pe, again);
    assert!(positional_encoding::<f64>(4, 4, 6, 10000.0).is_err());
}

#[test]
fn positional_encoding_layout() {
    let pe: Tensor<f64> = positional_encoding(3, 5, 8, 10000.0).unwrap();
    // position (row 2, col 3): first half encodes the row, second the column
    let row = &pe.data()[(2 * 5 + 3) * 8..(2 * 5 + 4) * 8];
    let f1 = 10000f64.powf(-2.0 / 4.0);
    let oracle = [2f64.sin(), 2f64.cos(), (2.0 * f1).sin(), (2.0 * f1).cos(), 3f64.sin(), 3f64.cos(), (3.0 * f1).sin(), (3.0 * f1).cos()];
    for (a, b) in row.iter().zip(oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let (store, enc) = encoder(4, &tiny(1, false), 3);
    let p = &enc.layers()[0];
    let x: Tensor<f64> = Init::new(4).normal(&[2, 1, 8], 1.0);
    let mut g = Graph::inference();
    let v = g.constant(x);
    let (out, probs) = mhsa(&mut g, &store, v, None, p, 2).unwrap();
    assert!(g.value(probs).data().iter().all(|&w| w == 1.0));
    let val = p.value.forward(&mut g, &store, v).unwrap();
    let oracle = p.output.forward(&mut g, &store, val).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(oracle)) < 1e-12);
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let (mut store, enc) = encoder(4, &tiny(1, true), 5);
    let p = enc.layers()[0].clone();
    for id in [p.query.weight, p.query.bias, p.key.weight, p.key.bias] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let x: Tensor<f64> = Init::new(6).normal(&[1, 5, 8], 1.0);
    let mut g = Graph::inference();
    let v = g.constant(x);
    let (_, probs) = mhsa(&mut g, &store, v, None, &p, 2).unwrap();
    assert!(g.value(probs).data().iter().all(|&w| (w - 0.2).abs() < 1e-12));
}

#[test]
fn mhsa_is_permutation_equivariant_without_pe() {
    let (store, enc) = encoder(4, &tiny(1, false), 7);
    let p = &enc.layers()[0];
    let x: Tensor<f64> = Init::new(8).normal(&[1, 6, 8], 1.0);
    let perm = shuffled(6, 9);
    let px = Tensor::from_fn(&[1, 6, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
    let mut g = Graph::inference();
    let (a, b) = (g.constant(x), g.constant(px));
    let (ya, _) = mhsa(&mut g, &store, a, None, p, 2).unwrap();
    let (yb, _) = mhsa(&mut g, &store, b, None, p, 2).unwrap();
    let ya = g.value(ya);
    let yb = g.value(yb);
    for i in 0..6 {
        for c in 0..8 {
            assert!((yb.data()[i * 8 + c] - ya.data()[perm[i] * 8 + c]).abs() <= 1e-5);
        }
    }
}

#[test]
fn paper_sized_encoder_shape() {
    let (store, enc) = encoder(120, &EncoderConfig::default(), 10);
    let x: Tensor<f64> = Init::new(11).normal(&[2, 120, 4, 4], 1.0);
    let (y, att) = run(&store, &enc, &x);
    assert_eq!(y.shape(), &[2, 64, 4, 4]);
    assert_eq!(att.len(), 2);
    assert_eq!(att[0].shape(), &[2, 16, 16, 16]);
}

#[test]
fn empty_stack_returns_projected_tokens() {
    let (store, enc) = encoder(6, &tiny(0, true), 12);
    let x: Tensor<f64> = Init::new(13).normal(&[1, 6, 2, 3], 1.0);
    let (y, _) = run(&store, &enc, &x);
    let mut g = Graph::inference();
    let v = g.constant(x);
    let seq = enc.project_tokens(&mut g, &store, v).unwrap();
    let u = unflatten_grid(&mut g, seq.tokens, seq.grid).unwrap();
    assert_eq!(&y, g.value(u));
}

#[test]
fn encoder_is_not_homogeneous() {
    let (store, enc) = encoder(6, &tiny(2, true), 14);
    let x: Tensor<f64> = Init::new(15).normal(&[1, 6, 2, 2], 1.0);
    let (y, _) = run(&store, &enc, &x);
    let (y2, _) = run(&store, &enc, &x.map(|v| 2.0 * v));
    assert!(y.map(|v| 2.0 * v).max_abs_diff(&y2) > 1e-3);
}

#[test]
fn full_encoder_gradient() {
    let (store, enc) = encoder(3, &tiny(2, true), 16);
    let x: Tensor<f64> = Init::new(17).normal(&[1, 3, 2, 2], 1.0);
    // a plain sum of layer-normalized rows is constant, so weight the outputs
    let w: Tensor<f64> = Init::new(18).normal(&[1, 8, 2, 2], 1.0);
    let err = grad_check(
        |g, v| {
            let y = enc.forward(g, &store, v[0])?;
            let w = g.constant(w.clone());
            g.mul(y, w)
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn head_count_must_divide_width() {
    let cfg = EncoderConfig { width: 10, heads: 4, ..EncoderConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(EncoderConfig::default().validate().is_ok());
    assert_eq!(EncoderConfig::default().head_dim(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, m in 1usize..4, n in 1usize..5) {
        let (store, enc) = encoder(5, &tiny(2, true), seed);
        let x: Tensor<f64> = Init::new(seed + 1).normal(&[2, 5, m, n], 3.0);
        let (_, att) = run(&store, &enc, &x);
        for a in &att {
            for row in a.data().chunks(m * n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn equivariant_without_positional_encoding(seed in 0u64..1000, m in 1usize..5, n in 2usize..5) {
        let (store, enc) = encoder(5, &tiny(2, false), seed);
        let x: Tensor<f64> = Init::new(seed + 1).normal(&[1, 5, m, n], 1.0);
        let perm = shuffled(m * n, seed);
        let (y, _) = run(&store, &enc, &x);
        let (yp, _) = run(&store, &enc, &permute_positions(&x, &perm));
        prop_assert!(permute_positions(&y, &perm).max_abs_diff(&yp) <= 1e-5);
    }

    #[test]
    fn positional_encoding_breaks_equivariance(seed in 0u64..1000) {
        let (store, enc) = encoder(5, &tiny(2, true), seed);
        let x: Tensor<f64> = Init::new(seed + 1).normal(&[1, 5, 3, 3], 1.0);
        let perm = shuffled(9, seed);
        let (y, _) = run(&store, &enc, &x);
        let (yp, _) = run(&store, &enc, &permute_positions(&x, &perm));
        prop_assert!(permute_positions(&y, &perm).max_abs_diff(&yp) > 1e-5);
    }
}
