mod common;

use common::ranking_oracle;
use nriqa::losses::{
    find_extremes, quality_loss, relative_ranking_loss, self_consistency_loss, total_loss, Extremes, LossReport,
    LossWeights,
};
use proptest::prelude::*;

fn distinct_targets() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i64..1000, 4..40).prop_flat_map(|set| {
        let v: Vec<f64> = set.into_iter().map(|x| x as f64 * 0.25).collect();
        Just(v).prop_shuffle()
    })
}

#[test]
fn quality_examples() {
    assert_eq!(quality_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(quality_loss(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(quality_loss(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 1.5);
    assert!(quality_loss(&[], &[]).is_err());
    assert!(quality_loss(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn extremes_examples() {
    let e = |s: &[f64]| find_extremes(s).map(|e| (e.max, e.max2, e.min, e.min2));
    assert_eq!(e(&[90.0, 70.0, 40.0, 10.0]), Some((0, 1, 3, 2)));
    assert_eq!(e(&[10.0, 90.0, 70.0, 40.0]), Some((1, 2, 0, 3)));
    assert_eq!(e(&[5.0, 5.0, 1.0, 1.0]), Some((0, 1, 2, 3)));
    assert_eq!(e(&[1.0, 2.0, 3.0]), None);
}

#[test]
fn ranking_examples() {
    let s = [90.0, 70.0, 40.0, 10.0];
    assert_eq!(relative_ranking_loss(&s, &s).unwrap(), 0.0);
    let q = [10.0, 20.0, 30.0, 40.0];
    assert_eq!(ranking_oracle(&q, &s), 70.0);
    assert_eq!(relative_ranking_loss(&q, &s).unwrap(), 70.0);
    assert_eq!(relative_ranking_loss(&[3.0; 4], &s).unwrap(), 110.0);
    // skipped batches
    assert_eq!(relative_ranking_loss(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
    assert_eq!(relative_ranking_loss(&[1.0, 2.0, 3.0, 4.0], &[5.0; 4]).unwrap(), 0.0);
}

#[test]
fn consistency_examples() {
    let same = self_consistency_loss((&[0.3, 0.7], &[0.3, 0.7]), (&[1.0, -1.0], &[1.0, -1.0]), (2.0, 2.0), 0.5).unwrap();
    assert_eq!(same, 0.0);
    let v = self_consistency_loss((&[0.5, 1.5], &[0.0, 0.0]), (&[4.0, 4.0], &[4.0, 4.0]), (2.0, 1.0), 0.5).unwrap();
    assert_eq!(v, 1.5);
    assert!(self_consistency_loss((&[1.0], &[1.0, 2.0]), (&[1.0], &[1.0]), (0.0, 0.0), 0.5).is_err());
}

#[test]
fn total_examples() {
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.lambda3), (0.5, 0.05, 1.0));
    assert!((total_loss(1.0, 2.0, 0.5, &w) - 1.6).abs() < 1e-12);
    let off = LossWeights { lambda2: 0.0, lambda3: 0.0, ..w };
    assert_eq!(total_loss(0.7, 9.0, 9.0, &off), 0.7);
    assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
}

#[test]
fn report_recomposes_total() {
    let w = LossWeights::default();
    let r = LossReport::new(0.25, 1.5, 0.125, &w, None);
    assert_eq!(r.total, 0.25 + 0.05 * 1.5 + 0.125);
    assert_eq!(r.csv_row(3), format!("3,0.25,1.5,0.125,{},0,0", r.total));
    assert_eq!(LossReport::CSV_HEADER, "step,quality,ranking,consistency,total,margin1,margin2");
}

#[test]
fn negative_weights_are_rejected() {
    assert!(LossWeights { lambda2: -0.1, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights::default().validate().is_ok());
}

proptest! {
    #[test]
    fn ranking_vanishes_on_perfect_predictions(s in distinct_targets()) {
        prop_assert_eq!(relative_ranking_loss(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn ranking_vanishes_exactly_on_real_targets(s in prop::collection::vec(0.0f64..100.0, 4..60)) {
        prop_assert_eq!(relative_ranking_loss(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn ranking_matches_oracle(s in distinct_targets(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = s.iter().map(|_| rng.gen_range(-300.0..300.0)).collect();
        let got = relative_ranking_loss(&q, &s).unwrap();
        prop_assert!((got - ranking_oracle(&q, &s)).abs() <= 1e-9 * (1.0 + got.abs()));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn ranking_is_shift_invariant(s in distinct_targets(), shift in -50i32..50, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = s.iter().map(|_| rng.gen_range(-300i32..300) as f64 * 0.5).collect();
        let c = shift as f64;
        let qs: Vec<f64> = q.iter().map(|v| v + c).collect();
        let ss: Vec<f64> = s.iter().map(|v| v + c).collect();
        prop_assert_eq!(relative_ranking_loss(&q, &s).unwrap(), relative_ranking_loss(&qs, &ss).unwrap());
    }

    #[test]
    fn losses_are_non_negative(q in prop::collection::vec(-10.0f64..10.0, 1..20), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = q.iter().map(|_| rng.gen_range(0.0..100.0)).collect();
        let t: Vec<f64> = q.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
        prop_assert!(quality_loss(&q, &s).unwrap() >= 0.0);
        prop_assert!(relative_ranking_loss(&q, &s).unwrap() >= 0.0);
        prop_assert!(self_consistency_loss((&q, &t), (&t, &q), (rng.gen(), rng.gen()), 0.5).unwrap() >= 0.0);
    }

    #[test]
    fn extremes_are_the_order_statistics(s in distinct_targets()) {
        let Extremes { max, max2, min, min2 } = find_extremes(&s).unwrap();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        prop_assert_eq!((s[max], s[max2], s[min], s[min2]), (sorted[n - 1], sorted[n - 2], sorted[0], sorted[1]));
    }
}
