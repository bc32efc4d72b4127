mod common;

use std::fs;

use nriqa::data::patches::{augment_flags, gather_patches, hflip, rot90, translate, vflip};
use nriqa::data::{augment, equivariant_transform, load_manifest, split, synth_generate, AugmentPolicy, SyntheticSpec, TransformKind};
use nriqa::nn::Init;
use nriqa::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent reflect-101 index: fold into one period of `2(n-1)`.
fn mirror(i: isize, n: usize) -> usize {
    let p = 2 * (n as isize - 1);
    let m = i.rem_euclid(p);
    (if m >= n as isize { p - m } else { m }) as usize
}

fn patches(seed: u64, k: usize, side: usize) -> Tensor<f32> {
    Init::new(seed).normal(&[k, 3, side, side], 1.0)
}

#[test]
fn manifest_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    fs::write(&p, "path,score,ref_id,family\n a.ppm , 12.5 ,r1,blur\nb.ppm,40,r2,noise\n").unwrap();
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.records[0].path, "a.ppm");
    assert_eq!(m.records[0].score, 12.5);
    assert_eq!(m.records[1].tags["family"], "noise");
    assert_eq!(m.scores(), vec![12.5, 40.0]);
    assert_eq!(m.ref_ids(), vec!["r1", "r2"]);

    let out = dir.path().join("again.csv");
    m.write(&out).unwrap();
    assert_eq!(load_manifest(&out).unwrap().records, m.records);
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let err = load_manifest(write("a.csv", "path,ref_id\na,r\n")).unwrap_err();
    assert!(err.to_string().contains("score"), "{err}");
    let err = load_manifest(write("b.csv", "path,score\na,1\nb,nan\n")).unwrap_err();
    assert!(err.to_string().contains(":3"), "{err}");
    assert!(load_manifest(write("c.csv", "path,score\na,1\na,2\n")).is_err());
    assert!(load_manifest(write("d.csv", "path,score\n")).is_err());
    assert!(matches!(load_manifest(dir.path().join("missing.csv")), Err(Error::Io { .. })));
}

#[test]
fn split_examples() {
    let m = common::grouped_manifest(10, 3);
    let (train, test) = split(&m, 4, 0.8).unwrap();
    assert_eq!((train.ref_ids().len(), test.ref_ids().len()), (8, 2));
    assert_eq!((train.len(), test.len()), (24, 6));
    assert_eq!(split(&m, 4, 0.8).unwrap(), (train.clone(), test));
    assert_ne!(split(&m, 5, 0.8).unwrap().0.ref_ids(), train.ref_ids());
    assert!(split(&m, 0, 1.0).is_err());
    assert!(split(&common::grouped_manifest(1, 4), 0, 0.5).is_err());
}

#[test]
fn split_is_reference_disjoint_over_seeds() {
    common::split_is_disjoint(100).unwrap();
}

#[test]
fn synth_counts_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { n_refs: 5, height: 32, width: 32, families: vec![nriqa::data::Family::GaussianBlur, nriqa::data::Family::WhiteNoise], ..Default::default() };
    let m = synth_generate(&spec, dir.path(), 2).unwrap();
    assert_eq!(m.len(), 45);
    assert_eq!(m.ref_ids().len(), 5);
    let again = load_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(again.records, m.records);
    for r in &m.records {
        let level: usize = r.tags["level"].parse().unwrap();
        let want = if level == 0 { 100.0 } else { 100.0 - 30.0 * (level - 1) as f64 };
        assert_eq!(r.score, want, "{}", r.path);
        assert!(dir.path().join(&r.path).exists());
    }
    let lv: Vec<f64> = (1..=4).map(|l| spec.score(l)).collect();
    assert!(lv.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn synth_is_byte_deterministic() {
    common::synth_is_deterministic().unwrap();
}

#[test]
fn patches_inherit_scores_exactly() {
    for seed in 0..5 {
        common::patches_inherit_scores(seed).unwrap();
    }
}

#[test]
fn exact_size_image_yields_itself() {
    let img: Tensor<f32> = Init::new(1).normal(&[3, 32, 32], 1.0);
    let b = nriqa::data::sample_patches(&img, 7.0, 3, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.corners, vec![(0, 0); 3]);
    for k in 0..3 {
        assert_eq!(&b.patches.data()[k * 3072..(k + 1) * 3072], img.data());
    }
    assert!(nriqa::data::sample_patches(&img, 7.0, 1, 48, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(gather_patches(&[img], &[1.0], &[(1, 0, 0)], 16).is_err());
}

#[test]
fn augment_flip_fraction() {
    let flags = augment_flags(20_000, AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let h = flags.iter().filter(|f| f[0]).count() as f64 / 20_000.0;
    let v = flags.iter().filter(|f| f[1]).count() as f64 / 20_000.0;
    assert!((h - 0.5).abs() <= 0.02 && (v - 0.5).abs() <= 0.02, "{h} {v}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(augment_flags(50, AugmentPolicy::none(), &mut rng).iter().all(|f| f == &[false, false]));
    assert_eq!(rng.get_word_pos(), 0);
}

#[test]
fn augment_keeps_scores_and_flips_pixels() {
    let img: Tensor<f32> = Init::new(2).normal(&[3, 16, 16], 1.0);
    let batch = gather_patches(std::slice::from_ref(&img), &[3.5], &[(0, 0, 0); 8], 16).unwrap();
    let out = augment(&batch, &mut ChaCha8Rng::seed_from_u64(4), AugmentPolicy { hflip: 1.0, vflip: 0.0 }).unwrap();
    assert_eq!(out.scores, batch.scores);
    assert_eq!(out.patches, hflip(&batch.patches).unwrap());
}

#[test]
fn translate_matches_reflect_oracle() {
    let t = patches(5, 2, 24);
    for (dy, dx) in [(16, -16), (-20, 17), (0, 3)] {
        let got = translate(&t, dy, dx).unwrap();
        for i in 0..t.len() {
            let (s, y, x) = (i / 576, (i / 24) % 24, i % 24);
            let sy = mirror(y as isize - dy, 24);
            let sx = mirror(x as isize - dx, 24);
            assert_eq!(got.data()[i], t.data()[s * 576 + sy * 24 + sx]);
        }
    }
}

#[test]
fn transform_kinds_parse_and_apply() {
    let t = patches(6, 3, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in TransformKind::ALL {
        assert_eq!(kind.name().parse::<TransformKind>().unwrap(), kind);
        let y = equivariant_transform(&t, kind, &mut rng).unwrap();
        assert_eq!(y.shape(), t.shape());
        assert_ne!(y, t, "{kind}");
    }
    assert!("shear".parse::<TransformKind>().is_err());
    assert!(rot90(&Tensor::<f32>::zeros(&[1, 3, 16, 32])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flips_and_rotation_compose_to_identity(seed in 0u64..1000, side in 1usize..12) {
        let t = patches(seed, 2, side);
        prop_assert_eq!(&hflip(&hflip(&t).unwrap()).unwrap(), &t);
        prop_assert_eq!(&vflip(&vflip(&t).unwrap()).unwrap(), &t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = rot90(&r).unwrap();
        }
        prop_assert_eq!(&r, &t);
        let r2 = rot90(&rot90(&t).unwrap()).unwrap();
        prop_assert_eq!(r2, hflip(&vflip(&t).unwrap()).unwrap());
    }

    #[test]
    fn hflip_is_the_tensor_mirror(seed in 0u64..1000) {
        let t = patches(seed, 2, 8);
        prop_assert_eq!(hflip(&t).unwrap(), t.flip_last());
    }

    #[test]
    fn random_translation_shifts_by_sixteen_to_twenty(seed in 0u64..1000) {
        let t = patches(seed, 1, 64);
        let y = equivariant_transform(&t, TransformKind::Translate, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let found = (16..=20isize).flat_map(|a| [a, -a]).any(|dy| {
            (16..=20isize).flat_map(|a| [a, -a]).any(|dx| translate(&t, dy, dx).unwrap() == y)
        });
        prop_assert!(found);
    }
}
