//! Library results checked against independent computations: brute force,
//! finite differences, hand-built fixtures and Monte Carlo expectations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use cores::dataset::{build_timeline, gen_blobs, make_pairs_from_labels, parse_idx, GrowthMode, LabeledSet};
use cores::gallery::FeatureGallery;
use cores::linalg::Matrix;
use cores::metrics::{pairwise_criterion_audit, retrieval_map, verification_accuracy};
use cores::netcore::{
    cores_loss_and_grad, init_model, InitMode, LinearHead, Objective, SoftmaxHead,
};
use cores::polytope::{dsimplex_prototypes, pairwise_geometry_report};
use cores::seed;
use cores::timeline::DriftPenalty;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn simplex_k100_all_pairs_at_sqrt2() {
    let fc = dsimplex_prototypes(100).unwrap();
    assert_eq!((fc.prototypes().rows(), fc.prototypes().cols()), (99, 100));
    let cols: Vec<Vec<f64>> = (0..100).map(|j| fc.prototype(j)).collect();
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        for j in i + 1..100 {
            worst = worst.max((dist(&cols[i], &cols[j]) - 2f64.sqrt()).abs());
            pairs += 1;
        }
    }
    assert_eq!(pairs, 4950);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn simplex_k5_report_and_k3_centered_cosines() {
    let r = pairwise_geometry_report(&dsimplex_prototypes(5).unwrap());
    assert!((r.min_distance - 2f64.sqrt()).abs() < 1e-9);
    assert!((r.max_distance - 2f64.sqrt()).abs() < 1e-9);

    // Centered and normalized by hand, independent of the report.
    let fc = dsimplex_prototypes(3).unwrap();
    let cols: Vec<Vec<f64>> = (0..3).map(|j| fc.prototype(j)).collect();
    let mean: Vec<f64> = (0..2).map(|r| cols.iter().map(|c| c[r]).sum::<f64>() / 3.0).collect();
    let unit: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let v: Vec<f64> = c.iter().zip(&mean).map(|(a, m)| a - m).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            assert!((cos + 0.5).abs() < 1e-9, "{cos}");
        }
    }
    let r = pairwise_geometry_report(&fc);
    assert!((r.centered_min_cosine + 0.5).abs() < 1e-9 && (r.centered_max_cosine + 0.5).abs() < 1e-9);
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.as_slice().len())
        .map(|i| {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn cores_loss_k10_matches_finite_differences() {
    let mut rng = seed::rng(10);
    for kt in [3, 7, 10] {
        let fc = dsimplex_prototypes(10).unwrap().allocate_up_to(kt).unwrap();
        let x = random_matrix(&mut rng, 5, 9);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..kt)).collect();
        let (_, g) = cores_loss_and_grad(&x, &labels, &fc).unwrap();
        let n = numeric_grad(&x, |m| cores_loss_and_grad(m, &labels, &fc).unwrap().0);
        assert!(rel_err(g.as_slice(), &n) < 1e-5);
    }
}

#[test]
fn softmax_head_feature_gradient_matches_finite_differences() {
    let mut rng = seed::rng(11);
    let head = SoftmaxHead::new(LinearHead::new(4, 6, 3).unwrap());
    let x = random_matrix(&mut rng, 7, 4);
    let rows: Vec<usize> = (0..7).collect();
    let targets: Vec<usize> = (0..7).map(|_| rng.random_range(0..6)).collect();
    let step = head.evaluate(&x, &rows, &targets).unwrap();
    let n = numeric_grad(&x, |m| head.evaluate(m, &rows, &targets).unwrap().loss);
    assert!(rel_err(step.d_features.as_slice(), &n) < 1e-5);
}

#[test]
fn drift_penalty_gradient_matches_finite_differences() {
    let mut rng = seed::rng(12);
    let old = random_matrix(&mut rng, 10, 3);
    let is_old: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
    let obj = DriftPenalty::new(LinearHead::new(3, 4, 5).unwrap(), old, is_old, 2.5).unwrap();
    let rows = vec![0, 2, 3, 5, 9, 4];
    let targets: Vec<usize> = rows.iter().map(|r| r % 4).collect();
    let x = random_matrix(&mut rng, rows.len(), 3);
    let step = obj.evaluate(&x, &rows, &targets).unwrap();
    let n = numeric_grad(&x, |m| obj.evaluate(m, &rows, &targets).unwrap().loss);
    assert!(rel_err(step.d_features.as_slice(), &n) < 1e-5);
}

#[test]
fn drift_penalty_loss_matches_hand_formula() {
    let old = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
    let head = LinearHead::new(2, 2, 1).unwrap();
    let lambda = 3.0;
    let obj = DriftPenalty::new(head.clone(), old, vec![true, true, false], lambda).unwrap();
    let x = Matrix::from_vec(3, 2, vec![3.0, 4.0, 1.0, 2.0, 0.0, 0.0]).unwrap();
    let rows = [0, 1, 2];
    let targets = [0, 1, 0];
    let ce = SoftmaxHead::new(head).evaluate(&x, &rows, &targets).unwrap().loss;
    // Distances 5 and 1 on the two old rows; row 2 is new.
    let expected = (ce + lambda * 3.0) / (1.0 + lambda);
    let got = obj.evaluate(&x, &rows, &targets).unwrap().loss;
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn weight_gradients_through_hidden_layer_match_finite_differences() {
    let mut rng = seed::rng(13);
    let model = init_model(&[4, 6, 3], 7, InitMode::SameSeed, None).unwrap();
    let fc = dsimplex_prototypes(4).unwrap().allocate_up_to(4).unwrap();
    let x = random_matrix(&mut rng, 5, 4);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let loss_of = |m: &cores::netcore::FeatureModel| {
        let f = m.features(&x).unwrap();
        cores_loss_and_grad(&f, &labels, &fc).unwrap().0
    };
    let (f, cache) = model.forward(&x).unwrap();
    let (_, d) = cores_loss_and_grad(&f, &labels, &fc).unwrap();
    let grads = model.backward(&x, &cache, &d).unwrap();
    let h = 1e-5;
    for layer in 0..2 {
        for idx in [0, 3, 7] {
            let mut p = model.clone();
            p.layers[layer].weights[idx] += h;
            let mut m = model.clone();
            m.layers[layer].weights[idx] -= h;
            let num = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
            let ana = grads.layers[layer].weights[idx];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "layer {layer} idx {idx}: {num} vs {ana}");
        }
    }
}

#[test]
fn idx_fixture_round_trip() {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28];
    for i in 0..4u8 {
        images.extend((0..784).map(|p| ((p as u32 * 7 + i as u32 * 31) % 256) as u8));
    }
    let labels = [0u8, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1];
    let set = parse_idx(&images, "i".as_ref(), &labels, "l".as_ref()).unwrap();
    assert_eq!((set.len(), set.input_dim()), (4, 784));
    assert_eq!(set.labels(), &[3, 1, 4, 1]);
    for i in 0..4 {
        for p in [0usize, 1, 100, 783] {
            let raw = ((p as u32 * 7 + i as u32 * 31) % 256) as f64;
            assert_eq!(set.samples().get(i, p), raw / 255.0);
        }
    }
}

#[test]
fn class_growth_33_66_100() {
    let set = gen_blobs(100, 3, 2, 0.1, 1).unwrap();
    let tl = build_timeline(&set, &[0.33, 0.66, 1.0], GrowthMode::ByClass, 1).unwrap();
    let counts: Vec<usize> = tl.steps().iter().map(|s| s.class_ids().len()).collect();
    assert_eq!(counts, vec![33, 66, 100]);
}

#[test]
fn sample_growth_50_100_per_class() {
    let set = gen_blobs(10, 100, 2, 0.1, 1).unwrap();
    let tl = build_timeline(&set, &[0.5, 1.0], GrowthMode::BySample, 1).unwrap();
    for (step, want) in tl.steps().iter().zip([50, 100]) {
        assert_eq!(step.class_ids().len(), 10);
        for (_, members) in step.indices_by_class() {
            assert_eq!(members.len(), want);
        }
    }
}

#[test]
fn three_thousand_pairs_each() {
    let set = gen_blobs(10, 100, 2, 0.1, 1).unwrap();
    let p = make_pairs_from_labels(set.labels(), 3000, 3000, 5).unwrap();
    assert_eq!(p.pairs.len(), 6000);
    let matching = p.pairs.iter().filter(|&&(u, v)| set.labels()[u] == set.labels()[v]).count();
    assert_eq!(matching, 3000);
    assert_eq!((p.num_positive, p.num_negative), (3000, 3000));
}

fn random_unit_gallery(rng: &mut impl Rng, n: usize, dim: usize, classes: u32) -> FeatureGallery {
    let mut features = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        features.extend(v.iter().map(|x| (x / norm) as f32));
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    FeatureGallery::new("random", dim, labels, features).unwrap()
}

#[test]
fn random_features_verify_at_chance() {
    for s in 0..10 {
        let mut rng = seed::rng(100 + s);
        let g = random_unit_gallery(&mut rng, 6000, 99, 10);
        let pairs = make_pairs_from_labels(g.labels(), 3000, 3000, s).unwrap();
        let acc = verification_accuracy(&pairs, &g, &g).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "seed {s}: {acc}");
    }
}

#[test]
fn random_features_map_near_class_prior() {
    for s in 0..10 {
        let mut rng = seed::rng(200 + s);
        let q = random_unit_gallery(&mut rng, 150, 8, 3);
        let g = random_unit_gallery(&mut rng, 300, 8, 3);
        let prior: f64 = (0..3u32)
            .map(|c| {
                let nq = q.labels().iter().filter(|&&l| l == c).count() as f64;
                let ng = g.labels().iter().filter(|&&l| l == c).count() as f64;
                nq / q.len() as f64 * ng / g.len() as f64
            })
            .sum();
        let m = retrieval_map(&q, &g).unwrap().map;
        assert!((m - prior).abs() <= 0.05, "seed {s}: mAP {m} vs prior {prior}");
    }
}

#[test]
fn independent_embeddings_satisfy_about_half_the_pairs() {
    let mut rng = seed::rng(300);
    let a = random_unit_gallery(&mut rng, 120, 16, 4);
    let b = random_unit_gallery(&mut rng, 120, 16, 4);
    let b = FeatureGallery::new("b", 16, a.labels().to_vec(), (0..120).flat_map(|i| b.row(i).to_vec()).collect()).unwrap();
    let audit = pairwise_criterion_audit(&b, &a, 5000).unwrap();
    let f = audit.fraction.unwrap();
    assert!((f - 0.5).abs() <= 0.05, "{f}");
}

#[test]
fn blob_noise_has_requested_spread() {
    let set: LabeledSet = gen_blobs(4, 2000, 3, 0.25, 9).unwrap();
    for (_, members) in set.indices_by_class() {
        let rows: Vec<&[f64]> = members.iter().map(|&i| set.samples().row(i)).collect();
        let n = rows.len() as f64;
        for c in 0..3 {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var.sqrt() - 0.25).abs() < 0.02, "{}", var.sqrt());
        }
    }
}
