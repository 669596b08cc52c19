//! Regular-polytope fixed classifiers.
//!
//! The prototype matrix is `d × K`, one prototype per column. It is built once
//! and never touched by any optimizer; only the count of allocated outputs
//! grows as classes arrive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, euclidean, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolytopeKind {
    DSimplex,
    Polygon2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassifierRepr", into = "ClassifierRepr")]
pub struct FixedClassifier {
    prototypes: Matrix,
    num_outputs: usize,
    allocated: usize,
    kind: PolytopeKind,
}

/// d-Simplex prototypes: the standard basis `e_1..e_{K-1}` plus
/// `(1 - √K)/(K - 1) · Σ e_i`, giving `K` vertices in `K - 1` dimensions.
pub fn dsimplex_prototypes(num_outputs: usize) -> Result<FixedClassifier> {
    if num_outputs < 2 {
        return Err(Error::invalid(format!(
            "a d-simplex needs at least 2 vertices, got {num_outputs}"
        )));
    }
    let k = num_outputs;
    let d = k - 1;
    let last = (1.0 - (k as f64).sqrt()) / (k as f64 - 1.0);
    let mut w = Matrix::zeros(d, k);
    for i in 0..d {
        w.set(i, i, 1.0);
        w.set(i, k - 1, last);
    }
    Ok(FixedClassifier {
        prototypes: w,
        num_outputs: k,
        allocated: 0,
        kind: PolytopeKind::DSimplex,
    })
}

/// `K` unit vectors in the plane at angles `2πj/K`.
pub fn polygon_prototypes(num_outputs: usize) -> Result<FixedClassifier> {
    if num_outputs < 2 {
        return Err(Error::invalid(format!(
            "a polygon needs at least 2 vertices, got {num_outputs}"
        )));
    }
    let k = num_outputs;
    let mut w = Matrix::zeros(2, k);
    for j in 0..k {
        let angle = polygon_angle(j, k);
        w.set(0, j, angle.cos());
        w.set(1, j, angle.sin());
    }
    // Exact values on the axes, so quarter turns come out clean.
    for j in 0..k {
        for r in 0..2 {
            let v = w.get(r, j);
            if v.abs() < 1e-15 {
                w.set(r, j, 0.0);
            }
        }
    }
    Ok(FixedClassifier {
        prototypes: w,
        num_outputs: k,
        allocated: 0,
        kind: PolytopeKind::Polygon2D,
    })
}

pub(crate) fn polygon_angle(j: usize, k: usize) -> f64 {
    2.0 * std::f64::consts::PI * j as f64 / k as f64
}

impl FixedClassifier {
    pub fn build(kind: PolytopeKind, num_outputs: usize) -> Result<Self> {
        match kind {
            PolytopeKind::DSimplex => dsimplex_prototypes(num_outputs),
            PolytopeKind::Polygon2D => polygon_prototypes(num_outputs),
        }
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn prototype(&self, j: usize) -> Vec<f64> {
        self.prototypes.column(j)
    }

    pub fn dim(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn allocated(&self) -> usize {
        self.allocated
    }

    pub fn kind(&self) -> PolytopeKind {
        self.kind
    }

    /// Reserves the next `count` outputs, in output-index order.
    pub fn allocate_classes(&self, count: usize) -> Result<FixedClassifier> {
        let requested = self.allocated + count;
        if requested > self.num_outputs {
            return Err(Error::CapacityExceeded {
                requested,
                capacity: self.num_outputs,
            });
        }
        Ok(FixedClassifier {
            allocated: requested,
            ..self.clone()
        })
    }

    /// Grows the allocation to exactly `total` outputs (never shrinks).
    pub fn allocate_up_to(&self, total: usize) -> Result<FixedClassifier> {
        if total < self.allocated {
            return Err(Error::invalid(format!(
                "cannot shrink allocation from {} to {total}",
                self.allocated
            )));
        }
        self.allocate_classes(total - self.allocated)
    }

    pub fn geometry_report(&self) -> GeometryReport {
        pairwise_geometry_report(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometryReport {
    pub min_distance: f64,
    pub max_distance: f64,
    pub min_cosine: f64,
    pub max_cosine: f64,
    /// Cosines after subtracting the prototype centroid and unit-normalizing.
    /// Diagnostic only; logits always use the raw prototypes.
    pub centered_min_cosine: f64,
    pub centered_max_cosine: f64,
}

pub fn pairwise_geometry_report(fc: &FixedClassifier) -> GeometryReport {
    let k = fc.num_outputs;
    let cols: Vec<Vec<f64>> = (0..k).map(|j| fc.prototype(j)).collect();
    let d = fc.dim();
    let mut centroid = vec![0.0; d];
    for c in &cols {
        for (m, v) in centroid.iter_mut().zip(c) {
            *m += v / k as f64;
        }
    }
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| c.iter().zip(&centroid).map(|(v, m)| v - m).collect())
        .collect();

    let mut r = GeometryReport {
        min_distance: f64::INFINITY,
        max_distance: f64::NEG_INFINITY,
        min_cosine: f64::INFINITY,
        max_cosine: f64::NEG_INFINITY,
        centered_min_cosine: f64::INFINITY,
        centered_max_cosine: f64::NEG_INFINITY,
    };
    for a in 0..k {
        for b in (a + 1)..k {
            let dist = euclidean(&cols[a], &cols[b]);
            r.min_distance = r.min_distance.min(dist);
            r.max_distance = r.max_distance.max(dist);
            if let Some(cos) = cosine_similarity(&cols[a], &cols[b]) {
                r.min_cosine = r.min_cosine.min(cos);
                r.max_cosine = r.max_cosine.max(cos);
            }
            if let Some(cos) = cosine_similarity(&centered[a], &centered[b]) {
                r.centered_min_cosine = r.centered_min_cosine.min(cos);
                r.centered_max_cosine = r.centered_max_cosine.max(cos);
            }
        }
    }
    r
}

#[derive(Serialize, Deserialize)]
struct ClassifierRepr {
    kind: PolytopeKind,
    num_outputs: usize,
    allocated: usize,
    dim: usize,
    /// Row-major `dim × num_outputs`.
    prototypes: Vec<f64>,
}

impl From<FixedClassifier> for ClassifierRepr {
    fn from(fc: FixedClassifier) -> Self {
        ClassifierRepr {
            kind: fc.kind,
            num_outputs: fc.num_outputs,
            allocated: fc.allocated,
            dim: fc.prototypes.rows(),
            prototypes: fc.prototypes.into_vec(),
        }
    }
}

impl TryFrom<ClassifierRepr> for FixedClassifier {
    type Error = Error;

    fn try_from(r: ClassifierRepr) -> Result<Self> {
        let expected_dim = match r.kind {
            PolytopeKind::DSimplex => r.num_outputs.saturating_sub(1),
            PolytopeKind::Polygon2D => 2,
        };
        if r.dim != expected_dim || r.num_outputs < 2 {
            return Err(Error::invalid(format!(
                "{:?} with {} outputs cannot have dimension {}",
                r.kind, r.num_outputs, r.dim
            )));
        }
        if r.allocated > r.num_outputs {
            return Err(Error::CapacityExceeded {
                requested: r.allocated,
                capacity: r.num_outputs,
            });
        }
        Ok(FixedClassifier {
            prototypes: Matrix::from_vec(r.dim, r.num_outputs, r.prototypes)?,
            num_outputs: r.num_outputs,
            allocated: r.allocated,
            kind: r.kind,
        })
    }
}
