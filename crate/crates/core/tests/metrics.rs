mod common;

use common::{dice_count_oracle, hausdorff_oracle, random_mask};
use proptest::prelude::*;
use vitbis::metrics::{dice_score, evaluate, hausdorff_percentile, hd95, LabelMask, MetricReport};
use vitbis::rng::Rng64;
use vitbis::Error;

fn mask(h: usize, w: usize, labels: &[u8]) -> LabelMask {
    LabelMask::new(h, w, labels.to_vec()).unwrap()
}

fn flip_rows(m: &LabelMask) -> LabelMask {
    let mut labels = Vec::with_capacity(m.labels.len());
    for r in (0..m.height).rev() {
        labels.extend_from_slice(&m.labels[r * m.width..(r + 1) * m.width]);
    }
    LabelMask { labels, ..m.clone() }
}

#[test]
fn dice_examples() {
    let a = mask(2, 3, &[1, 1, 0, 0, 1, 0]);
    assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
    let b = mask(2, 3, &[0, 0, 1, 1, 0, 1]);
    assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);

    // |P| = 6, |G| = 4, overlap 3.
    let p = mask(2, 5, &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
    let g = mask(2, 5, &[0, 0, 0, 1, 1, 1, 1, 0, 0, 0]);
    assert_eq!(dice_score(&p, &g, 1).unwrap(), 0.6);
    assert_eq!(dice_score(&p, &g, 2).unwrap(), 1.0);

    let small = mask(1, 2, &[0, 1]);
    assert!(matches!(dice_score(&p, &small, 1), Err(Error::ShapeMismatch(_))));
}

#[test]
fn hd95_examples() {
    let a = mask(3, 5, &[0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));
    let p = mask(1, 5, &[1, 0, 0, 0, 0]);
    let g = mask(1, 5, &[0, 0, 0, 1, 0]);
    assert_eq!(hd95(&p, &g, 1).unwrap(), Some(3.0));
    let p = p.with_spacing(2.0, 0.5);
    let g = g.with_spacing(2.0, 0.5);
    assert_eq!(hd95(&p, &g, 1).unwrap(), Some(1.5));
    let empty = mask(1, 5, &[0; 5]);
    assert_eq!(hd95(&empty, &mask(1, 5, &[0, 0, 0, 1, 0]), 1).unwrap(), None);
    assert_eq!(hd95(&empty, &empty, 1).unwrap(), Some(0.0));
}

#[test]
fn metrics_match_brute_force_oracles() {
    for seed in 0..50u64 {
        let mut rng = Rng64::new(seed);
        let h = 1 + rng.below(16) as usize;
        let w = 1 + rng.below(16) as usize;
        let density = rng.uniform_in(0.05, 0.6);
        let spacing = [(1.0, 1.0), (2.0, 0.5), (0.75, 1.25)][(seed % 3) as usize];
        let p = random_mask(&mut rng, h, w, 3, density).with_spacing(spacing.0, spacing.1);
        let g = random_mask(&mut rng, h, w, 3, density).with_spacing(spacing.0, spacing.1);
        for class in 0..3u8 {
            assert_eq!(dice_score(&p, &g, class).unwrap(), dice_count_oracle(&p, &g, class));
            assert_eq!(hd95(&p, &g, class).unwrap(), hausdorff_oracle(&p, &g, class, 95), "seed {seed}");
            assert_eq!(
                hausdorff_percentile(&p, &g, class, 100).unwrap(),
                hausdorff_oracle(&p, &g, class, 100)
            );
        }
    }
}

#[test]
fn hd95_on_12x12_masks() {
    for seed in 100..120u64 {
        let mut rng = Rng64::new(seed);
        let p = random_mask(&mut rng, 12, 12, 2, 0.3);
        let g = random_mask(&mut rng, 12, 12, 2, 0.3);
        assert_eq!(hd95(&p, &g, 1).unwrap(), hausdorff_oracle(&p, &g, 1, 95));
    }
}

#[test]
fn evaluate_perfect_prediction() {
    let mut rng = Rng64::new(1);
    let masks: Vec<LabelMask> = (0..3).map(|_| random_mask(&mut rng, 10, 10, 4, 0.5)).collect();
    let report = evaluate(&masks, &masks, 4).unwrap();
    assert_eq!(report.classes, vec![1, 2, 3]);
    assert!(report.per_class_dice.iter().all(|&d| d == 1.0));
    assert!(report.per_class_hd95.iter().all(|&d| d == Some(0.0)));
    assert_eq!(report.mean_dice, 1.0);
    assert_eq!(report.mean_hd95, Some(0.0));
}

#[test]
fn evaluate_hand_counted_three_classes() {
    #[rustfmt::skip]
    let gt = mask(8, 8, &[
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 1, 1, 1, 0, 0, 0, 0,
        0, 1, 1, 1, 0, 0, 0, 0,
        0, 1, 1, 1, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 2, 2, 0,
        0, 0, 0, 0, 0, 2, 2, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
    ]);
    #[rustfmt::skip]
    let pred = mask(8, 8, &[
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 1, 1, 0, 0, 0, 0, 0,
        0, 1, 1, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 2, 2, 2,
        0, 0, 0, 0, 0, 2, 2, 2,
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
    ]);
    let report = evaluate(&[pred], &[gt], 3).unwrap();
    // Class 1: |P| = 4, |G| = 9, overlap 4. Class 2: |P| = 6, |G| = 4, overlap 4.
    assert_eq!(report.per_class_dice, vec![8.0 / 13.0, 8.0 / 10.0]);
    assert_eq!(report.mean_dice, (8.0 / 13.0 + 0.8) / 2.0);
}

#[test]
fn evaluate_excludes_undefined_distances() {
    let gt = mask(2, 2, &[1, 0, 0, 2]);
    let pred = mask(2, 2, &[1, 0, 0, 0]);
    let report = evaluate(&[pred], &[gt], 3).unwrap();
    assert_eq!(report.per_class_hd95, vec![Some(0.0), None]);
    assert_eq!(report.mean_hd95, Some(0.0));
    assert_eq!(report.excluded, vec![(0, 2)]);
    let table = report.format_table("ours", None);
    assert!(table.contains("excluded for 1 image/class pair(s): image 0 class 2"));
    assert!(matches!(evaluate(&[mask(1, 1, &[3])], &[mask(1, 1, &[0])], 3), Err(Error::Domain(_))));
}

#[test]
fn csv_round_trip() {
    let mut rng = Rng64::new(5);
    let pred: Vec<LabelMask> = (0..4).map(|_| random_mask(&mut rng, 12, 12, 3, 0.3)).collect();
    let gt: Vec<LabelMask> = (0..4).map(|_| random_mask(&mut rng, 12, 12, 3, 0.3)).collect();
    let report = evaluate(&pred, &gt, 3).unwrap();
    let csv = report.to_csv();
    assert!(csv.starts_with("class,dice,hd95_mm\n"));
    assert!(!csv.contains('\r'));
    let parsed = MetricReport::from_csv(&csv).unwrap();
    assert_eq!(parsed.to_csv(), csv);
    for (a, b) in parsed.per_class_dice.iter().zip(&report.per_class_dice) {
        assert!((a - b).abs() <= 5e-7);
    }
    assert!(matches!(MetricReport::from_csv("dice\n"), Err(Error::CorruptFile(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_symmetries(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = Rng64::new(seed);
        let a = random_mask(&mut rng, h, w, 3, 0.4);
        let b = random_mask(&mut rng, h, w, 3, 0.4);
        for class in 1..3u8 {
            let d = dice_score(&a, &b, class).unwrap();
            prop_assert_eq!(d, dice_score(&b, &a, class).unwrap());
            prop_assert_eq!(d, dice_score(&flip_rows(&a), &flip_rows(&b), class).unwrap());
            let h_ab = hd95(&a, &b, class).unwrap();
            prop_assert_eq!(h_ab, hd95(&b, &a, class).unwrap());
            prop_assert_eq!(hd95(&a, &a, class).unwrap(), Some(0.0));
            if let (Some(q95), Some(q100)) = (h_ab, hausdorff_percentile(&a, &b, class, 100).unwrap()) {
                prop_assert!(q95 >= 0.0 && q95 <= q100);
            }
        }
    }
}
