use std::collections::HashMap;

use proptest::prelude::*;

use cores::dataset::{build_timeline, gen_blobs, make_pairs_from_labels, GrowthMode, VerificationPairs};
use cores::gallery::FeatureGallery;
use cores::linalg::{norm, Matrix};
use cores::metrics::{
    average_precision, avg_multi_accuracy, avg_multi_compat, best_threshold_accuracy, ecc_check, model_selection,
    update_gain, verification_accuracy, CompatibilityMatrix, EpochScore, SelectionTracker,
};
use cores::netcore::cores_loss_and_grad;
use cores::polytope::{dsimplex_prototypes, polygon_prototypes};

fn lower_triangle(max_steps: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2..=max_steps).prop_flat_map(|t| (Just(t), prop::collection::vec(0.0f64..1.0, t * (t + 1) / 2)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_is_equidistant(k in 2usize..=256) {
        let fc = dsimplex_prototypes(k).unwrap();
        let g = fc.geometry_report();
        let s2 = 2f64.sqrt();
        prop_assert!((g.min_distance - s2).abs() < 1e-9 && (g.max_distance - s2).abs() < 1e-9);
        let c = -1.0 / (k as f64 - 1.0);
        prop_assert!((g.centered_min_cosine - c).abs() < 1e-8 && (g.centered_max_cosine - c).abs() < 1e-8);
    }

    #[test]
    fn polygon_columns_are_unit(k in 2usize..=64) {
        let fc = polygon_prototypes(k).unwrap();
        for j in 0..k {
            prop_assert!((norm(&fc.prototype(j)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_leaves_prototypes_untouched(k in 2usize..=40, a in 1usize..=40, b in 0usize..=40) {
        let a = a.min(k);
        let fc = dsimplex_prototypes(k).unwrap();
        let before: Vec<u64> = fc.prototypes().as_slice().iter().map(|v| v.to_bits()).collect();
        let mut grown = fc.allocate_classes(a).unwrap();
        if a + b <= k {
            grown = grown.allocate_classes(b).unwrap();
            prop_assert_eq!(grown.allocated(), a + b);
        }
        let after: Vec<u64> = grown.prototypes().as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn cores_loss_is_nonnegative(
        k in 2usize..=12,
        kt in 1usize..=12,
        feats in prop::collection::vec(-3.0f64..3.0, 4 * 11),
        labels in prop::collection::vec(0usize..12, 4),
    ) {
        let kt = kt.min(k);
        let fc = dsimplex_prototypes(k).unwrap().allocate_up_to(kt).unwrap();
        let d = k - 1;
        let x = Matrix::from_vec(4, d, feats[..4 * d].to_vec()).unwrap();
        let y: Vec<usize> = labels.iter().map(|&l| l % kt).collect();
        let (loss, _) = cores_loss_and_grad(&x, &y, &fc).unwrap();
        prop_assert!(loss >= 0.0);

        let (flat, _) = cores_loss_and_grad(&Matrix::zeros(4, d), &y, &fc).unwrap();
        prop_assert!((flat - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ac_and_am_stay_in_unit_interval((t, e) in lower_triangle(8)) {
        let c = CompatibilityMatrix::from_lower_triangle(t, e, "p").unwrap();
        let ac = avg_multi_compat(&c).unwrap();
        let am = avg_multi_accuracy(&c);
        prop_assert!((0.0..=1.0).contains(&ac));
        prop_assert!((0.0..=1.0).contains(&am));
    }

    #[test]
    fn ac_ignores_monotone_maps((t, e) in lower_triangle(8), power in 0.2f64..5.0) {
        let c = CompatibilityMatrix::from_lower_triangle(t, e, "p").unwrap();
        let mapped = c.map_entries(|v| v.powf(power)).unwrap();
        prop_assert_eq!(avg_multi_compat(&c).unwrap(), avg_multi_compat(&mapped).unwrap());
    }

    #[test]
    fn am_ignores_entry_order((t, e) in lower_triangle(8), seed in any::<u64>()) {
        let c = CompatibilityMatrix::from_lower_triangle(t, e.clone(), "p").unwrap();
        let mut shuffled = e;
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let p = CompatibilityMatrix::from_lower_triangle(t, shuffled, "p").unwrap();
        prop_assert!((avg_multi_accuracy(&c) - avg_multi_accuracy(&p)).abs() < 1e-12);
    }

    #[test]
    fn ecc_is_a_strict_order(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        prop_assume!(a != b);
        prop_assert!(ecc_check(a, b) != ecc_check(b, a));
        prop_assert!(!ecc_check(a, a));
    }

    #[test]
    fn gain_sign_follows_ecc(cross in 0.0f64..1.0, old in 0.0f64..1.0, lift in 0.001f64..0.5) {
        let g = update_gain(cross, old, old + lift).unwrap();
        prop_assert_eq!(g > 0.0, ecc_check(cross, old));
    }

    #[test]
    fn selection_matches_brute_force(
        scores in prop::collection::vec((0u8..10, 0u8..10), 1..30),
        prev in 0u8..10,
    ) {
        let trace: Vec<EpochScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| EpochScore { epoch: i + 1, self_test: s as f64 / 10.0, cross_test: c as f64 / 10.0 })
            .collect();
        let prev = prev as f64 / 10.0;

        let feasible: Vec<&EpochScore> = trace.iter().filter(|e| e.cross_test > prev).collect();
        let expected = match feasible.iter().map(|e| e.self_test).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))) {
            Some(best) => (feasible.iter().find(|e| e.self_test == best).unwrap().epoch, false),
            None => (trace.len(), true),
        };
        let sel = model_selection(&trace, prev).unwrap();
        prop_assert_eq!((sel.epoch, sel.constraint_unsatisfied), expected);

        let mut tracker = SelectionTracker::new(prev);
        for e in &trace {
            tracker.observe(e);
        }
        prop_assert_eq!(tracker.finish(), Some(sel));
    }

    #[test]
    fn gallery_bytes_roundtrip(
        dim in 1usize..8,
        rows in prop::collection::vec((any::<u32>(), prop::collection::vec(any::<f32>(), 8)), 0..20),
    ) {
        let labels: Vec<u32> = rows.iter().map(|r| r.0).collect();
        let features: Vec<f32> = rows.iter().flat_map(|r| r.1[..dim].to_vec()).collect();
        let g = FeatureGallery::new("m", dim, labels, features).unwrap();
        let back = FeatureGallery::from_bytes(&g.to_bytes(), "m", "prop").unwrap();
        prop_assert_eq!(back.to_bytes(), g.to_bytes());
        prop_assert_eq!(back.labels(), g.labels());
        prop_assert_eq!(back.dim(), dim);
    }

    #[test]
    fn timeline_steps_are_nested(
        classes in 2usize..8,
        per_class in 1usize..12,
        steps in 1usize..5,
        mode in prop_oneof![Just(GrowthMode::ByClass), Just(GrowthMode::BySample), Just(GrowthMode::Mixed)],
        seed in any::<u64>(),
    ) {
        let set = gen_blobs(classes, per_class, 3, 0.5, seed).unwrap();
        let fractions: Vec<f64> = (1..=steps).map(|s| s as f64 / steps as f64).collect();
        let Ok(tl) = build_timeline(&set, &fractions, mode, seed) else {
            // A step rounding down to zero classes is rejected.
            return Ok(());
        };
        let key = |s: &cores::dataset::LabeledSet, i: usize| {
            (s.labels()[i], s.samples().row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        for t in 1..tl.len() {
            let mut later: HashMap<_, usize> = HashMap::new();
            let cur = tl.step(t);
            for i in 0..cur.len() {
                *later.entry(key(cur, i)).or_default() += 1;
            }
            let prev = tl.step(t - 1);
            for i in 0..prev.len() {
                let slot = later.get_mut(&key(prev, i));
                prop_assert!(slot.as_ref().is_some_and(|c| **c > 0));
                *slot.unwrap() -= 1;
            }
        }
        prop_assert_eq!(tl.step(tl.len() - 1).len(), set.len());
    }

    #[test]
    fn average_precision_is_bounded(rel in prop::collection::vec(any::<bool>(), 0..50)) {
        let ap = average_precision(&rel);
        prop_assert!((0.0..=1.0).contains(&ap));
        if rel.iter().any(|&r| r) && rel.iter().take_while(|&&r| r).count() == rel.iter().filter(|&&r| r).count() {
            prop_assert_eq!(ap, 1.0);
        }
    }

    #[test]
    fn best_threshold_beats_the_constant_guess(
        pairs in prop::collection::vec((0.0f64..2.0, any::<bool>()), 1..60),
    ) {
        let d: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pos: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        let floor = n_pos.max(pos.len() - n_pos) as f64 / pos.len() as f64;
        let r = best_threshold_accuracy(&d, &pos).unwrap();
        prop_assert!(r.accuracy >= floor - 1e-12);
        prop_assert!(r.accuracy <= 1.0);
    }

    #[test]
    fn verification_ignores_feature_scale(
        seed in any::<u64>(),
        scale in prop_oneof![Just(0.125f32), Just(2.0f32), Just(64.0f32)],
    ) {
        let set = gen_blobs(4, 10, 5, 1.0, seed).unwrap();
        let g = FeatureGallery::from_labeled_set("m", &set).unwrap();
        let scaled = g.map_rows(|r| r.iter_mut().for_each(|v| *v *= scale));
        let pairs: VerificationPairs = make_pairs_from_labels(g.labels(), 30, 30, seed).unwrap();
        let a = verification_accuracy(&pairs, &g, &g).unwrap();
        let b = verification_accuracy(&pairs, &scaled, &scaled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pair_sampling_is_pure(seed in any::<u64>()) {
        let labels: Vec<u32> = (0..40).map(|i| i % 5).collect();
        let a = make_pairs_from_labels(&labels, 25, 25, seed).unwrap();
        let b = make_pairs_from_labels(&labels, 25, 25, seed).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }
}
