use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ris_core::gradcheck;
use ris_core::matchloss::{
    self, InstanceLabelSet, LossConfig, Mask, PredictedSequence, ScoreMatrix,
};
use ris_core::metrics::{self, ApImage, DiscreteLabeling};
use ris_core::trainer;
use ris_core::Tensor;

fn matrix() -> impl Strategy<Value = ScoreMatrix> {
    (1usize..=7, 1usize..=7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-0.5f64..1.0, r * c)
            .prop_map(move |data| ScoreMatrix::new(r, c, data).unwrap())
    })
}

/// Random labeling of a `size x size` image into up to `max` instances.
fn labeling(seed: u64, size: usize, max: usize) -> DiscreteLabeling {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(0..=max);
    let masks = (0..k)
        .map(|_| {
            let (y0, x0) = (rng.random_range(0..size), rng.random_range(0..size));
            let (h, w) = (
                rng.random_range(1..=size - y0),
                rng.random_range(1..=size - x0),
            );
            let mut m = Mask::empty(size, size);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m.set(y, x, true);
                }
            }
            m
        })
        .collect();
    DiscreteLabeling::from_labels(&InstanceLabelSet::new(size, size, masks).unwrap())
}

fn random_feasible(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Option<usize>> {
    let mut cols_perm: Vec<usize> = (0..cols).collect();
    cols_perm.shuffle(rng);
    (0..rows)
        .map(|r| {
            if rng.random_bool(0.7) {
                Some(cols_perm[r])
            } else {
                None
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_equals_brute_force(m in matrix()) {
        let fast = matchloss::hungarian(&m);
        let slow = matchloss::brute_force_match(&m).unwrap();
        prop_assert!(fast.is_feasible());
        prop_assert!((fast.matched_sum - slow.matched_sum).abs() <= 1e-12);
        let direct: f64 = fast
            .assignment
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| m.get(r, c)))
            .sum();
        prop_assert!((direct - fast.matched_sum).abs() <= 1e-12);
        prop_assert!(fast.assignment.iter().enumerate().all(|(r, c)| c.is_none_or(|c| m.get(r, c) >= 0.0)));
    }

    #[test]
    fn loss_invariant_under_truth_permutation(seed in any::<u64>(), n in 1usize..=4, steps in 1usize..=6) {
        let (pred, gt) = gradcheck::random_loss_problem(seed, 6, n, steps).unwrap();
        let cfg = LossConfig::default();
        let (base, _) = matchloss::loss_forward(&pred, &gt, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut masks = gt.masks.clone();
        masks.shuffle(&mut rng);
        let shuffled = InstanceLabelSet::new(6, 6, masks).unwrap();
        let (cost, _) = matchloss::loss_forward(&pred, &shuffled, &cfg).unwrap();
        prop_assert_eq!(base.to_bits(), cost.to_bits());
    }

    #[test]
    fn loss_is_minimum_over_matchings(seed in any::<u64>(), n in 1usize..=4, steps in 1usize..=6) {
        let (pred, gt) = gradcheck::random_loss_problem(seed, 6, n, steps).unwrap();
        let cfg = LossConfig::default();
        let (best, _) = matchloss::loss_forward(&pred, &gt, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..20 {
            let a = random_feasible(&mut rng, steps.min(n), n);
            let cost = matchloss::loss_with_assignment(&pred, &gt, &a, &cfg).unwrap();
            prop_assert!(best <= cost + 1e-12, "{best} > {cost}");
        }
    }

    #[test]
    fn relaxed_iou_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::<f64>::uniform_with(&mut rng, 0.0, 1.0, &[1, 5, 5]);
        let on: Vec<u8> = (0..25).map(|_| rng.random_bool(0.4) as u8).collect();
        let y = Mask::new(5, 5, on).unwrap().to_tensor::<f64>();
        let v = matchloss::relaxed_iou(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if y.sum() > 0.0 {
            prop_assert_eq!(matchloss::relaxed_iou(&y, &y).unwrap(), 1.0);
        }
    }

    #[test]
    fn decode_is_idempotent(seed in any::<u64>()) {
        let l = labeling(seed, 8, 4);
        let seq = PredictedSequence::<f64> {
            masks: l.instances().iter().map(|m| m.to_tensor()).collect(),
            scores: l.scores.clone(),
        };
        let again = metrics::decode(&seq, 8, 8).unwrap();
        prop_assert_eq!(again, l);
    }

    #[test]
    fn sbd_symmetric_and_self_one(a in any::<u64>(), b in any::<u64>()) {
        let (la, lb) = (labeling(a, 8, 4), labeling(b, 8, 4));
        let ab = metrics::sbd(&la, &lb).unwrap();
        let ba = metrics::sbd(&lb, &la).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        if la.count > 0 {
            prop_assert_eq!(metrics::sbd(&la, &la).unwrap(), 1.0);
        }
    }

    #[test]
    fn ap_invariant_under_monotone_rescaling(seeds in prop::collection::vec(any::<u64>(), 1..5)) {
        let images: Vec<ApImage> = seeds
            .iter()
            .map(|&s| {
                let truth = labeling(s, 8, 3);
                let mut pred = labeling(s.wrapping_add(7), 8, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                for v in &mut pred.scores {
                    *v = rng.random_range(0.5..1.0);
                }
                let gt = InstanceLabelSet::new(8, 8, truth.instances()).unwrap();
                ApImage::new(&pred, &gt)
            })
            .collect();
        let squashed: Vec<ApImage> = images
            .iter()
            .map(|im| ApImage {
                predictions: im.predictions.iter().map(|(m, s)| (m.clone(), 0.2 * s.powi(3) + 0.01)).collect(),
                truth: im.truth.clone(),
            })
            .collect();
        for t in metrics::ap_thresholds() {
            let a = metrics::average_precision(&images, t);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, metrics::average_precision(&squashed, t));
        }
    }

    #[test]
    fn clip_is_bounded_and_idempotent(g in -100.0f64..100.0, c in 0.1f64..10.0) {
        let once = trainer::clip_value(g, c);
        prop_assert!(once.abs() <= c);
        prop_assert_eq!(trainer::clip_value(once, c), once);
        if g.abs() <= c {
            prop_assert_eq!(once, g);
        }
    }

    #[test]
    fn unroll_length_rule(n in 0usize..10, cap in 1usize..10) {
        let cfg = trainer::TrainConfig::default();
        let t = cfg.unroll_length(n, cap);
        prop_assert!(t >= 1 && t <= cap.max(1));
        prop_assert_eq!(t, (n + cfg.extra_steps).min(cap).max(1));
    }
}
