#![allow(dead_code)]

use nriqa::encoder::{ffn, mhsa, positional_encoding, Encoder, EncoderConfig};
use nriqa::losses::{quality_loss_var, ranking_loss_var, self_consistency_var, BranchPair, LossNorm};
use nriqa::nn::layers::ChannelNorm;
use nriqa::nn::{grad_check, grad_check_params, Graph, HammingKernel2D, Init, ParamStore, Var};
use nriqa::{ModelConfig, Result, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

/// `sum(y * r)` for a fixed random `r`, so no output direction is degenerate.
pub fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r: Tensor<f64> = Init::new(seed ^ 0x5eed).normal(g.shape(y), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn normals(init: &mut Init, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| init.normal(s, 1.0)).collect()
}

fn small_encoder(seed: u64) -> (ParamStore<f64>, Encoder) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        n_layers: 1,
        width: 8,
        heads: 2,
        ffn_dim: 16,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(&mut store, &mut Init::new(seed), 4, &cfg).unwrap();
    (store, enc)
}

/// Worst relative error over `points` random points for every differentiable
/// op, the three losses and the full tiny model on 16×16 inputs.
pub fn gradient_suite(points: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => out.push((name, err)),
    };
    for seed in 0..points {
        let mut init = Init::new(seed);

        let stride = 1 + seed as usize % 2;
        let x = normals(&mut init, &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]]);
        let err = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("conv2d", err);

        let x = normals(&mut init, &[&[3, 5], &[5, 4], &[4]]);
        let err = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("linear", err);

        let x = normals(&mut init, &[&[3, 6], &[6], &[6]]);
        let err = grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("layer_norm", err);

        let x = normals(&mut init, &[&[2, 3, 5]]);
        let err = grad_check(
            |g, v| {
                let y = g.softmax(v[0]);
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("softmax", err);

        let kernel = HammingKernel2D::new(5).unwrap();
        let x = normals(&mut init, &[&[2, 2, 8, 8]]);
        let err = grad_check(
            |g, v| {
                let y = g.l2pool(v[0], &kernel, 2)?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("l2pool", err);

        let mut store = ParamStore::<f64>::new();
        let norm = ChannelNorm::new(&mut store, "cn", 3);
        let x = normals(&mut init, &[&[4, 3, 3, 3]]);
        let err = grad_check(
            |g, v| {
                let y = norm.forward(g, &store, v[0])?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("channel_norm", err);

        let (mut store, enc) = small_encoder(seed);
        let p = enc.layers()[0].clone();
        let pe: Tensor<f64> = positional_encoding(2, 3, 8, 10000.0).unwrap();
        let pe = pe.reshape(&[1, 6, 8]).unwrap();
        let pe = Tensor::stack(&[pe.clone(), pe]).unwrap().reshape(&[2, 6, 8]).unwrap();
        let x = normals(&mut init, &[&[2, 6, 8]]);
        let err = grad_check(
            |g, v| {
                let pe = g.constant(pe.clone());
                let (y, _) = mhsa(g, &store, v[0], Some(pe), &p, 2)?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        let tokens = x[0].clone();
        let ids: Vec<_> = [p.query.weight, p.key.weight, p.value.weight, p.output.weight, p.output.bias].to_vec();
        let err_p = grad_check_params(
            &mut store,
            &ids,
            |g, s| {
                let t = g.constant(tokens.clone());
                let (y, _) = mhsa(g, s, t, None, &p, 2)?;
                weighted(g, y, seed)
            },
            FD_STEP,
            10,
        )
        .unwrap();
        record("attention", err.max(err_p));

        let err = grad_check(
            |g, v| {
                let y = ffn(g, &store, v[0], &p)?;
                weighted(g, y, seed)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        let err_p = grad_check_params(
            &mut store,
            &[p.ffn_in.weight, p.ffn_in.bias, p.ffn_out.weight],
            |g, s| {
                let t = g.constant(tokens.clone());
                let y = ffn(g, s, t, &p)?;
                weighted(g, y, seed)
            },
            FD_STEP,
            10,
        )
        .unwrap();
        record("ffn", err.max(err_p));

        let s: Vec<f64> = (0..8).map(|i| (i as f64 * 0.13 + seed as f64 * 0.07) % 1.0).collect();
        let x = normals(&mut init, &[&[8]]);
        for (name, norm) in [("quality_loss_l1", LossNorm::L1), ("quality_loss_l2", LossNorm::L2)] {
            let err = grad_check(|g, v| quality_loss_var(g, v[0], &s, norm), &x, FD_STEP).unwrap();
            record(name, err);
        }

        // Predictions squeezed towards each other keep the hinges active.
        let q: Vec<Tensor<f64>> = vec![x[0].map(|v| 0.5 + 0.05 * v)];
        let err = grad_check(
            |g, v| Ok(ranking_loss_var(g, v[0], &s)?.expect("distinct targets").loss),
            &q,
            FD_STEP,
        )
        .unwrap();
        record("ranking_loss", err);

        let x = normals(&mut init, &[&[8], &[8], &[8], &[8]]);
        let err = grad_check(
            |g, v| {
                let rb = ranking_loss_var(g, v[0], &s)?.unwrap().loss;
                let rt = ranking_loss_var(g, v[1], &s)?.unwrap().loss;
                let pairs = [
                    BranchPair { original: v[0], transformed: v[1] },
                    BranchPair { original: v[2], transformed: v[3] },
                ];
                self_consistency_var(g, &pairs, Some((rb, rt)), 0.5, LossNorm::L1)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        record("consistency_loss", err);

        let worst = nriqa::model::model_grad_check(&ModelConfig::tiny(), 2, 16, seed, 10)
            .unwrap()
            .into_iter()
            .fold(0.0f64, |m, (_, e)| m.max(e));
        record("model", worst);
    }
    out
}

/// Average ranks by counting: `rank = #below + (#equal + 1) / 2`, 1-based.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn srocc_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

/// Small integers so ties are frequent; retried until neither side is constant.
pub fn tied_vectors(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    loop {
        let n = rng.gen_range(3..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
        let varies = |v: &[f64]| v.iter().any(|&a| a != v[0]);
        if varies(&x) && varies(&y) {
            return (x, y);
        }
    }
}

/// Monotone but non-linear ground truth for random predictions.
pub fn monotone_dataset(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let n = rng.gen_range(20..60);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let kind = rng.gen_range(0..3);
    let y = x
        .iter()
        .map(|&v: &f64| match kind {
            0 => v.powi(3),
            1 => v.exp(),
            _ => 100.0 / (1.0 + (-2.0 * v).exp()),
        })
        .collect();
    (x, y)
}

/// Manifest with `refs` references of `per_ref` images each, scores `0..n`.
pub fn grouped_manifest(refs: usize, per_ref: usize) -> nriqa::data::DatasetManifest {
    let records = (0..refs * per_ref)
        .map(|i| nriqa::data::Record {
            path: format!("img_{i}.ppm"),
            score: i as f64,
            ref_id: format!("r{}", i / per_ref),
            tags: Default::default(),
        })
        .collect();
    nriqa::data::DatasetManifest::new("grouped", "", records, None).unwrap()
}

/// Train and test share no reference, and together hold every record once,
/// for each seed in `0..seeds`.
pub fn split_is_disjoint(seeds: u64) -> std::result::Result<(), String> {
    use std::collections::HashSet;
    let m = grouped_manifest(25, 17);
    for seed in 0..seeds {
        let (train, test) = nriqa::data::split(&m, seed, 0.8).map_err(|e| e.to_string())?;
        let a: HashSet<_> = train.records.iter().map(|r| r.ref_id.clone()).collect();
        let b: HashSet<_> = test.records.iter().map(|r| r.ref_id.clone()).collect();
        if !a.is_disjoint(&b) {
            return Err(format!("seed {seed}: shared reference"));
        }
        if (a.len(), b.len()) != (20, 5) {
            return Err(format!("seed {seed}: {} / {} references", a.len(), b.len()));
        }
        let mut paths: Vec<_> = train.records.iter().chain(&test.records).map(|r| r.path.clone()).collect();
        paths.sort();
        paths.dedup();
        if paths.len() != m.len() {
            return Err(format!("seed {seed}: {} of {} records kept", paths.len(), m.len()));
        }
    }
    Ok(())
}

pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Generates the same small dataset with 1 and 3 workers and compares every file.
pub fn synth_is_deterministic() -> std::result::Result<usize, String> {
    let spec = nriqa::data::SyntheticSpec { n_refs: 4, height: 32, width: 48, seed: 9, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    nriqa::data::synth_generate(&spec, a.path(), 1).map_err(|e| e.to_string())?;
    nriqa::data::synth_generate(&spec, b.path(), 3).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    if fa.len() != spec.image_count() + 1 {
        return Err(format!("{} files for {} images", fa.len(), spec.image_count()));
    }
    if fa != fb {
        return Err("outputs differ between runs".into());
    }
    Ok(fa.len())
}

/// Every sampled patch carries exactly its source image's score and pixels.
pub fn patches_inherit_scores(seed: u64) -> std::result::Result<(), String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor<f32>> = (0..5)
        .map(|i| Tensor::from_fn(&[3, 40 + 8 * i, 48], |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..100.0)).collect();
    for (img, &s) in images.iter().zip(&scores) {
        let batch = nriqa::data::sample_patches(img, s, 6, 32, &mut rng).map_err(|e| e.to_string())?;
        if batch.scores.iter().any(|&b| b.to_bits() != s.to_bits()) {
            return Err("patch score differs from image score".into());
        }
        let w = img.shape()[2];
        let h = img.shape()[1];
        for (k, &(top, left)) in batch.corners.iter().enumerate() {
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let got = batch.patches.data()[((k * 3 + c) * 32 + y) * 32 + x];
                        let want = img.data()[(c * h + top + y) * w + left + x];
                        if got.to_bits() != want.to_bits() {
                            return Err(format!("pixel mismatch in patch {k}"));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Small synthetic dataset in a temp dir: the split halves, loaded.
pub struct SmallData {
    pub dir: tempfile::TempDir,
    pub train: nriqa::data::DatasetManifest,
    pub test: nriqa::data::DatasetManifest,
}

pub fn small_data(n_refs: usize, side: usize, seed: u64) -> SmallData {
    let dir = tempfile::tempdir().unwrap();
    let spec = nriqa::data::SyntheticSpec { n_refs, height: side, width: side, seed, ..Default::default() };
    let m = nriqa::data::synth_generate(&spec, dir.path(), 1).unwrap();
    let (train, test) = nriqa::data::split(&m, seed, 0.8).unwrap();
    SmallData { dir, train, test }
}

/// Tiny model, 16-pixel patches, validation on the test half every 4 steps.
pub fn tiny_train_config(seed: u64) -> nriqa::trainer::TrainConfig {
    nriqa::trainer::TrainConfig {
        epochs: 2,
        batch_size: 8,
        patch_size: 16,
        eval_patches: 2,
        eval_every: 4,
        seed,
        ..nriqa::trainer::TrainConfig::toy()
    }
}

/// Trains the same configuration twice into separate directories and
/// byte-compares the checkpoints, the logs and the test metric rows.
pub fn training_is_reproducible() -> std::result::Result<usize, String> {
    use nriqa::trainer::{evaluate_set, train_with_outputs, LoadedSet, TrainOutputs};
    let data = small_data(3, 32, 4);
    let train_set = LoadedSet::load(&data.train).map_err(|e| e.to_string())?;
    let test_set = LoadedSet::load(&data.test).map_err(|e| e.to_string())?;
    let scale = nriqa::ScoreScale::new(0.0, 100.0);
    let config = tiny_train_config(7);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let model = nriqa::Model::new(&ModelConfig::tiny()).map_err(|e| e.to_string())?;
        let outputs = TrainOutputs { dir: Some(out.path().to_path_buf()) };
        let echo = [("train.seed".to_string(), "7".to_string())];
        let outcome = train_with_outputs(&config, model, &train_set, Some(&test_set), scale, &outputs, &echo)
            .map_err(|e| e.to_string())?;
        let report = evaluate_set(&outcome.model, &test_set, 2, 16, 0).map_err(|e| e.to_string())?;
        std::fs::write(out.path().join("metrics.csv"), report.csv_row("test")).unwrap();
        let mut files = dir_bytes(out.path());
        files.extend(dir_bytes(&out.path().join("checkpoint")));
        runs.push(files);
    }
    let names: Vec<_> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    for want in ["train_log.csv", "eval_log.csv", "metrics.csv", "tensors.bin", "index.csv", "meta.txt"] {
        if !names.contains(&want) {
            return Err(format!("missing {want}"));
        }
    }
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(runs[0].len())
}

/// Literal evaluation of the ranking objective with a sort-based extreme search.
pub fn ranking_oracle(q: &[f64], s: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let (hi, hi2) = (idx[0], idx[1]);
    idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap().then(a.cmp(&b)));
    let (lo, lo2) = (idx[0], idx[1]);
    let d = |a: f64, b: f64| (a - b).abs();
    let m1 = s[hi2] - s[lo];
    let m2 = s[hi] - s[lo2];
    (d(q[hi], q[hi2]) - d(q[hi], q[lo]) + m1).max(0.0) + (d(q[lo2], q[lo]) - d(q[hi], q[lo]) + m2).max(0.0)
}
