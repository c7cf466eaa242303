//! Oracle equivalence for the evaluator: the production mAP must agree
//! with an independent brute-force PR-curve implementation over a large
//! randomized sweep of small instances, and must depend on scores only
//! through their ranking.

mod common;

use common::{det, oracle_map, split_from};
use detpo::eval::{coco_map, Detection};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Instance {
    split: detpo::dataset::DatasetSplit,
    detections: Vec<Detection>,
    classes: Vec<u32>,
}

/// Randomized small instance: up to 6 detections, 4 ground truths,
/// 2 classes, 2 images, with deliberately coarse coordinates and scores
/// so that overlaps and ties occur constantly.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let num_classes = rng.random_range(1..=2u32);
    let num_images = rng.random_range(1..=2u64);
    let num_gts = rng.random_range(0..=4usize);
    let num_dets = rng.random_range(0..=6usize);

    let coarse_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..8) as f64 * 10.0;
        let y = rng.random_range(0..8) as f64 * 10.0;
        let w = rng.random_range(1..5) as f64 * 10.0;
        let h = rng.random_range(1..5) as f64 * 10.0;
        [x, y, x + w, y + h]
    };

    let image_ids: Vec<u64> = (1..=num_images).collect();
    let mut gts = Vec::new();
    for _ in 0..num_gts {
        let image = image_ids[rng.random_range(0..image_ids.len())];
        let class = rng.random_range(0..num_classes);
        let mut b = coarse_box(rng);
        if rng.random_range(0..20) == 0 {
            // occasional degenerate ground truth
            b[2] = b[0];
        }
        gts.push((image, class, b));
    }
    let split = split_from(gts.clone(), &image_ids, (200, 200));

    let mut detections = Vec::new();
    for _ in 0..num_dets {
        // score from a tiny palette so ties are common
        let score = [0.2, 0.4, 0.4, 0.6, 0.8, 0.8, 1.0][rng.random_range(0..7)];
        // half the detections perturb a real ground truth so true and
        // near-miss matches occur constantly; the rest are random boxes
        if !gts.is_empty() && rng.random_range(0..2) == 0 {
            let (image, gt_class, b) = gts[rng.random_range(0..gts.len())];
            let shift = [0.0, 0.0, 5.0, 10.0][rng.random_range(0..4)];
            let class = if rng.random_range(0..4) == 0 {
                rng.random_range(0..num_classes)
            } else {
                gt_class
            };
            detections.push(det(
                image,
                class,
                [b[0] + shift, b[1], b[2] + shift, b[3]],
                score,
            ));
        } else {
            let image = image_ids[rng.random_range(0..image_ids.len())];
            let class = rng.random_range(0..num_classes);
            detections.push(det(image, class, coarse_box(rng), score));
        }
    }

    Instance {
        split,
        detections,
        classes: (0..num_classes).collect(),
    }
}

#[test]
fn map_matches_bruteforce_oracle_on_randomized_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let cases = 4000;
    let mut nontrivial = 0;
    for case in 0..cases {
        let instance = random_instance(&mut rng);
        let fast = coco_map(&instance.detections, &instance.split, &instance.classes);
        let slow = oracle_map(&instance.detections, &instance.split, &instance.classes);
        assert!(
            (fast.dataset_map - slow).abs() <= 1e-9,
            "case {case}: evaluator {} vs oracle {}",
            fast.dataset_map,
            slow
        );
        if slow > 0.0 {
            nontrivial += 1;
        }
    }
    // the sweep must actually exercise non-zero APs
    assert!(nontrivial > cases / 10, "only {nontrivial} non-trivial cases");
}

#[test]
fn map_is_invariant_under_monotone_score_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let transforms: [fn(f64) -> f64; 3] = [|s| s * 0.5, |s| s * s, |s| s.sqrt()];
    for _ in 0..300 {
        let instance = random_instance(&mut rng);
        let base = coco_map(&instance.detections, &instance.split, &instance.classes).dataset_map;
        for transform in transforms {
            let transformed: Vec<Detection> = instance
                .detections
                .iter()
                .map(|d| Detection {
                    score: transform(d.score),
                    ..d.clone()
                })
                .collect();
            let out = coco_map(&transformed, &instance.split, &instance.classes).dataset_map;
            assert!(
                (out - base).abs() <= 1e-12,
                "monotone transform changed mAP: {base} -> {out}"
            );
        }
    }
}

#[test]
fn ap_examples_match_oracle_exactly() {
    // the [TP, FP, TP] ranked instance from the operation contract
    let split = split_from(
        vec![(1, 0, [0.0, 0.0, 10.0, 10.0]), (1, 0, [100.0, 100.0, 120.0, 120.0])],
        &[1],
        (200, 200),
    );
    let dets = vec![
        det(1, 0, [0.0, 0.0, 10.0, 10.0], 0.9),
        det(1, 0, [300.0, 300.0, 310.0, 310.0], 0.8),
        det(1, 0, [100.0, 100.0, 120.0, 120.0], 0.7),
    ];
    let fast = detpo::eval::average_precision(&dets, &split, 0, 0.5);
    let slow = common::oracle_average_precision(&dets, &split, 0, 0.5);
    assert!((fast - slow).abs() <= 1e-12);
}
