use serde::Serialize;

use crate::dataset::VerificationPairs;
use crate::error::{Error, Result};
use crate::gallery::FeatureGallery;

/// `1 − cos(a, b)`, in `[0, 2]`. Zero vectors are an error, never NaN.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedDistance);
    }
    let cos = (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub(crate) fn cosine_distance_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedDistance);
    }
    let cos = (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdAccuracy {
    pub accuracy: f64,
    /// Pairs with distance strictly below this are declared "same class".
    pub threshold: f64,
}

/// Best accuracy over thresholds placed at midpoints between consecutive
/// distinct sorted distances, plus one sentinel below and one above all
/// distances. Ties go to the lowest threshold.
pub fn best_threshold_accuracy(distances: &[f64], is_positive: &[bool]) -> Result<ThresholdAccuracy> {
    let n = distances.len();
    if n == 0 {
        return Err(Error::InsufficientData("no pairs to threshold".into()));
    }
    if is_positive.len() != n {
        return Err(Error::invalid("distances and labels differ in length"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite distance"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let total_neg = is_positive.iter().filter(|&&p| !p).count();

    // Cut m: the first m sorted pairs are predicted positive.
    let mut best_correct = total_neg;
    let mut best_cut = 0;
    let mut pos_below = 0;
    let mut neg_below = 0;
    for m in 1..=n {
        if is_positive[order[m - 1]] {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        let at_boundary = m == n || distances[order[m]] > distances[order[m - 1]];
        if !at_boundary {
            continue;
        }
        let correct = pos_below + (total_neg - neg_below);
        if correct > best_correct {
            best_correct = correct;
            best_cut = m;
        }
    }
    let threshold = if best_cut == 0 {
        distances[order[0]] - 1.0
    } else if best_cut == n {
        distances[order[n - 1]] + 1.0
    } else {
        0.5 * (distances[order[best_cut - 1]] + distances[order[best_cut]])
    };
    Ok(ThresholdAccuracy {
        accuracy: best_correct as f64 / n as f64,
        threshold,
    })
}

/// Pair distances with `u` taken from `feats_query` and `v` from
/// `feats_gallery`.
pub fn pair_distances(
    pairs: &VerificationPairs,
    feats_query: &FeatureGallery,
    feats_gallery: &FeatureGallery,
) -> Result<Vec<f64>> {
    if feats_query.dim() != feats_gallery.dim() {
        return Err(Error::invalid(format!(
            "query features have dimension {}, gallery features {}",
            feats_query.dim(),
            feats_gallery.dim()
        )));
    }
    pairs
        .pairs
        .iter()
        .map(|&(u, v)| {
            if u >= feats_query.len() || v >= feats_gallery.len() {
                return Err(Error::invalid(format!(
                    "pair ({u}, {v}) out of range for {} query / {} gallery rows",
                    feats_query.len(),
                    feats_gallery.len()
                )));
            }
            cosine_distance_f32(feats_query.row(u), feats_gallery.row(v))
        })
        .collect()
}

/// Verification accuracy at the best threshold. For a self-test pass the
/// same model's features on both sides; for a cross-test the newer model's
/// features as `feats_query` and the older model's as `feats_gallery`.
pub fn verification_accuracy(
    pairs: &VerificationPairs,
    feats_query: &FeatureGallery,
    feats_gallery: &FeatureGallery,
) -> Result<f64> {
    let d = pair_distances(pairs, feats_query, feats_gallery)?;
    Ok(best_threshold_accuracy(&d, &pairs.is_positive)?.accuracy)
}
