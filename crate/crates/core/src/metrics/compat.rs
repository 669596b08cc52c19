//! Compatibility calculus over self- and cross-tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_pairs_from_labels, stratified_halves};
use crate::error::{Error, Result};
use crate::gallery::FeatureGallery;
use crate::timeline::ModelRegistry;

use super::retrieval::retrieval_map;
use super::verification::verification_accuracy;

/// Empirical compatibility: the cross-test strictly beats the old self-test.
pub fn ecc_check(cross: f64, self_old: f64) -> bool {
    cross > self_old
}

/// Fraction of the re-indexing improvement recovered without re-indexing.
pub fn update_gain(cross: f64, self_old: f64, self_new_reindexed: f64) -> Result<f64> {
    let denom = self_new_reindexed - self_old;
    if denom == 0.0 {
        return Err(Error::UndefinedGain);
    }
    Ok((cross - self_old) / denom)
}

/// `(cross − self_old)` in percentage points.
pub fn absolute_gain(cross: f64, self_old: f64) -> f64 {
    (cross - self_old) * 100.0
}

/// Lower-triangular `T × T` matrix; `C[i][j]` (i ≥ j) evaluates queries
/// embedded by model `i` against the gallery stored by model `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityMatrix {
    steps: usize,
    /// Row-major lower triangle: C11, C21, C22, C31, …
    entries: Vec<f64>,
    pub metric_name: String,
}

fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl CompatibilityMatrix {
    /// Builds from rows of increasing length (`rows[i]` has `i + 1` entries).
    pub fn from_rows(rows: &[Vec<f64>], metric_name: impl Into<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("a compatibility matrix needs at least one step"));
        }
        let mut entries = Vec::with_capacity(rows.len() * (rows.len() + 1) / 2);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::invalid(format!(
                    "row {} must have {} entries, found {}",
                    i + 1,
                    i + 1,
                    r.len()
                )));
            }
            entries.extend_from_slice(r);
        }
        CompatibilityMatrix::from_lower_triangle(rows.len(), entries, metric_name)
    }

    pub fn from_lower_triangle(steps: usize, entries: Vec<f64>, metric_name: impl Into<String>) -> Result<Self> {
        if steps == 0 || entries.len() != steps * (steps + 1) / 2 {
            return Err(Error::invalid(format!(
                "{} entries do not form a lower triangle of size {steps}",
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("entry {bad} outside [0, 1]")));
        }
        Ok(CompatibilityMatrix {
            steps,
            entries,
            metric_name: metric_name.into(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// 0-based `(query model, gallery model)`, `i ≥ j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(j <= i && i < self.steps, "({i}, {j}) is outside the lower triangle");
        self.entries[tri_index(i, j)]
    }

    pub fn lower_triangle(&self) -> &[f64] {
        &self.entries
    }

    /// Applies `f` to every entry (used to check order-only invariance).
    pub fn map_entries(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        CompatibilityMatrix::from_lower_triangle(
            self.steps,
            self.entries.iter().map(|&v| f(v)).collect(),
            self.metric_name.clone(),
        )
    }
}

/// AC: share of cross-tests `C[i][j]` (i > j) that beat the self-test `C[j][j]`.
pub fn avg_multi_compat(c: &CompatibilityMatrix) -> Result<f64> {
    let t = c.steps();
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "average multi-model compatibility needs at least two models".into(),
        ));
    }
    let mut hits = 0usize;
    for i in 1..t {
        for j in 0..i {
            if ecc_check(c.get(i, j), c.get(j, j)) {
                hits += 1;
            }
        }
    }
    Ok(2.0 * hits as f64 / (t * (t - 1)) as f64)
}

/// AM: mean of all lower-triangular entries.
pub fn avg_multi_accuracy(c: &CompatibilityMatrix) -> f64 {
    let t = c.steps();
    let sum: f64 = c.lower_triangle().iter().sum();
    2.0 * sum / (t * (t + 1)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Verification,
    Map,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Verification => "verification",
            MetricKind::Map => "map",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verification" => Ok(MetricKind::Verification),
            "map" | "mAP" => Ok(MetricKind::Map),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// How a metric `M` is evaluated on stored galleries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub pairs_pos: usize,
    pub pairs_neg: usize,
    pub seed: u64,
}

/// Evaluates every `(i, j)` with `i ≥ j` from per-step galleries of the same
/// evaluation images, query side from model `i`, gallery side from model `j`.
pub fn compatibility_from_galleries(galleries: &[FeatureGallery], spec: &MetricSpec) -> Result<CompatibilityMatrix> {
    let first = galleries
        .first()
        .ok_or_else(|| Error::invalid("no galleries to evaluate"))?;
    if galleries.iter().any(|g| g.labels() != first.labels()) {
        return Err(Error::invalid(
            "galleries of different steps do not cover the same evaluation images",
        ));
    }
    let t = galleries.len();
    let mut entries = Vec::with_capacity(t * (t + 1) / 2);
    match spec.kind {
        MetricKind::Verification => {
            let pairs = make_pairs_from_labels(first.labels(), spec.pairs_pos, spec.pairs_neg, spec.seed)?;
            for i in 0..t {
                for j in 0..=i {
                    entries.push(verification_accuracy(&pairs, &galleries[i], &galleries[j])?);
                }
            }
        }
        MetricKind::Map => {
            let (query_idx, search_idx) = stratified_halves(first.labels(), spec.seed);
            let queries: Vec<FeatureGallery> = galleries.iter().map(|g| g.select(&query_idx)).collect();
            let searches: Vec<FeatureGallery> = galleries.iter().map(|g| g.select(&search_idx)).collect();
            for i in 0..t {
                for j in 0..=i {
                    entries.push(retrieval_map(&queries[i], &searches[j])?.map);
                }
            }
        }
    }
    CompatibilityMatrix::from_lower_triangle(t, entries, spec.kind.name())
}

/// Reads every step's stored evaluation gallery (checking its digest) and
/// builds the compatibility matrix. Nothing is re-extracted.
pub fn build_compatibility_matrix(registry: &ModelRegistry, spec: &MetricSpec) -> Result<CompatibilityMatrix> {
    let galleries = (1..=registry.steps())
        .map(|step| registry.load_gallery(step, crate::timeline::EVAL_ROLE))
        .collect::<Result<Vec<_>>>()?;
    compatibility_from_galleries(&galleries, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EccFlag {
    /// 1-based step of the query model.
    pub query_step: usize,
    /// 1-based step of the gallery model.
    pub gallery_step: usize,
    pub compatible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub query_step: usize,
    pub gallery_step: usize,
    /// `None` when the upper bound equals the old self-test.
    pub update_gain: Option<f64>,
    /// Percentage points.
    pub absolute_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub metric: String,
    #[serde(rename = "T")]
    pub steps: usize,
    /// Row-major lower triangle.
    pub matrix: Vec<f64>,
    pub ecc_flags: Vec<EccFlag>,
    pub gains: Vec<GainEntry>,
    /// Undefined (null) for a single model.
    pub ac: Option<f64>,
    pub am: f64,
    pub run_manifest_digest: Option<String>,
}

impl CompatibilityReport {
    pub fn from_matrix(c: &CompatibilityMatrix, run_manifest_digest: Option<String>) -> Self {
        let t = c.steps();
        let mut ecc_flags = Vec::with_capacity(t * t.saturating_sub(1) / 2);
        let mut gains = Vec::with_capacity(ecc_flags.capacity());
        for i in 1..t {
            for j in 0..i {
                let (cross, old, new) = (c.get(i, j), c.get(j, j), c.get(i, i));
                ecc_flags.push(EccFlag {
                    query_step: i + 1,
                    gallery_step: j + 1,
                    compatible: ecc_check(cross, old),
                });
                gains.push(GainEntry {
                    query_step: i + 1,
                    gallery_step: j + 1,
                    update_gain: update_gain(cross, old, new).ok(),
                    absolute_gain: absolute_gain(cross, old),
                });
            }
        }
        CompatibilityReport {
            metric: c.metric_name.clone(),
            steps: t,
            matrix: c.lower_triangle().to_vec(),
            ecc_flags,
            gains,
            ac: avg_multi_compat(c).ok(),
            am: avg_multi_accuracy(c),
            run_manifest_digest,
        }
    }

    pub fn matrix(&self) -> Result<CompatibilityMatrix> {
        CompatibilityMatrix::from_lower_triangle(self.steps, self.matrix.clone(), self.metric.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned text rendering; cross-tests failing the criterion are starred.
    pub fn render_table(&self) -> String {
        let t = self.steps;
        let get = |i: usize, j: usize| self.matrix[tri_index(i, j)];
        let mut out = String::new();
        let _ = writeln!(out, "{} (rows: query model, columns: gallery model)", self.metric);
        let _ = write!(out, "{:<8}", "");
        for j in 0..t {
            let _ = write!(out, "{:>9}", format!("G{}", j + 1));
        }
        out.push('\n');
        for i in 0..t {
            let _ = write!(out, "{:<8}", format!("Q{}", i + 1));
            for j in 0..=i {
                let v = get(i, j);
                let mark = if i > j && !ecc_check(v, get(j, j)) { "*" } else { " " };
                let _ = write!(out, "{:>8.4}{mark}", v);
            }
            out.push('\n');
        }
        match self.ac {
            Some(ac) => {
                let _ = writeln!(out, "AC = {ac:.4}   AM = {:.4}   (* fails the compatibility criterion)", self.am);
            }
            None => {
                let _ = writeln!(out, "AC = n/a   AM = {:.4}", self.am);
            }
        }
        out
    }
}
