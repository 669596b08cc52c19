use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gallery::FeatureGallery;

use super::verification::cosine_distance_f32;

/// Average precision of a full ranking: mean of precision@k over the ranks k
/// holding a relevant item. Zero when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    pub queries_evaluated: usize,
    /// Queries whose class never occurs in the searched gallery.
    pub queries_excluded: usize,
}

/// Mean average precision of `query_gallery` rows searched against
/// `search_gallery` by ascending cosine distance. Equal distances keep the
/// gallery's row order.
pub fn retrieval_map(query_gallery: &FeatureGallery, search_gallery: &FeatureGallery) -> Result<MapResult> {
    if query_gallery.dim() != search_gallery.dim() {
        return Err(Error::invalid(format!(
            "query dimension {} differs from gallery dimension {}",
            query_gallery.dim(),
            search_gallery.dim()
        )));
    }
    let present: HashSet<u32> = search_gallery.labels().iter().copied().collect();
    let n = search_gallery.len();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut dist = vec![0.0; n];
    let mut relevance = vec![false; n];
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for q in 0..query_gallery.len() {
        let label = query_gallery.labels()[q];
        if !present.contains(&label) {
            excluded += 1;
            continue;
        }
        let qrow = query_gallery.row(q);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = cosine_distance_f32(qrow, search_gallery.row(j))?;
        }
        order.clear();
        order.extend(0..n);
        // Stable: ties keep input order.
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        for (k, &j) in order.iter().enumerate() {
            relevance[k] = search_gallery.labels()[j] == label;
        }
        total += average_precision(&relevance);
        evaluated += 1;
    }
    if excluded > 0 {
        log::warn!("{excluded} queries excluded from mAP: class absent from the gallery");
    }
    if evaluated == 0 {
        return Err(Error::UndefinedMetric(
            "no query class occurs in the search gallery".into(),
        ));
    }
    Ok(MapResult {
        map: total / evaluated as f64,
        queries_evaluated: evaluated,
        queries_excluded: excluded,
    })
}
