//! Pairwise compatibility audit on individual sample pairs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gallery::FeatureGallery;

use super::verification::cosine_distance_f32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairwiseAudit {
    pub same_class_pairs: usize,
    pub diff_class_pairs: usize,
    pub satisfied: usize,
    /// `None` when no pair was audited.
    pub fraction: Option<f64>,
}

/// For ordered pairs `(u, v)`, `u ≠ v`, checks that the new-to-old distance is
/// no larger than the old-to-old distance for same-class pairs and no smaller
/// for different-class pairs. Equality counts as satisfied. At most
/// `sample_cap` pairs of each kind are audited, picked at an even stride.
pub fn pairwise_criterion_audit(
    feats_new: &FeatureGallery,
    feats_old: &FeatureGallery,
    sample_cap: usize,
) -> Result<PairwiseAudit> {
    if feats_new.labels() != feats_old.labels() {
        return Err(Error::invalid("audited galleries must index the same samples"));
    }
    let labels = feats_new.labels();
    let n = labels.len();
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    for u in 0..n {
        for v in 0..n {
            if u != v {
                if labels[u] == labels[v] {
                    n_same += 1;
                } else {
                    n_diff += 1;
                }
            }
        }
    }
    let stride = |total: usize| if sample_cap == 0 { 0 } else { total.div_ceil(sample_cap).max(1) };
    let (s_same, s_diff) = (stride(n_same), stride(n_diff));

    let mut out = PairwiseAudit {
        same_class_pairs: 0,
        diff_class_pairs: 0,
        satisfied: 0,
        fraction: None,
    };
    let (mut k_same, mut k_diff) = (0usize, 0usize);
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let same = labels[u] == labels[v];
            let (k, s, audited) = if same {
                (&mut k_same, s_same, &mut out.same_class_pairs)
            } else {
                (&mut k_diff, s_diff, &mut out.diff_class_pairs)
            };
            let take = s > 0 && *k % s == 0 && *audited < sample_cap;
            *k += 1;
            if !take {
                continue;
            }
            *audited += 1;
            let cross = cosine_distance_f32(feats_new.row(u), feats_old.row(v))?;
            let old = cosine_distance_f32(feats_old.row(u), feats_old.row(v))?;
            let ok = if same { cross <= old } else { cross >= old };
            if ok {
                out.satisfied += 1;
            }
        }
    }
    let total = out.same_class_pairs + out.diff_class_pairs;
    if total > 0 {
        out.fraction = Some(out.satisfied as f64 / total as f64);
    }
    Ok(out)
}
