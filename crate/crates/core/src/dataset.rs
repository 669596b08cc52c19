//! Labeled sample sets: synthetic Gaussian blobs, IDX image files, nested
//! upgrade timelines, and the open-set evaluation protocol (class-disjoint
//! evaluation split and verification pairs).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::seed::{self, Stream};
use crate::timeline::UpgradeTimeline;

/// Rows of `samples` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    samples: Matrix,
    labels: Vec<u32>,
    class_ids: Vec<u32>,
}

impl LabeledSet {
    pub fn new(samples: Matrix, labels: Vec<u32>) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::InsufficientData("a labeled set needs at least one sample".into()));
        }
        if samples.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        let class_ids = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(LabeledSet {
            samples,
            labels,
            class_ids,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct labels, ascending.
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledSet> {
        LabeledSet::new(
            self.samples.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Indices of each class's samples, in sample order.
    pub fn indices_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by.entry(l).or_default().push(i);
        }
        by
    }

    /// Keeps only samples whose class is in `classes`.
    pub fn restrict_to_classes(&self, classes: &[u32]) -> Result<LabeledSet> {
        let keep: HashSet<u32> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }
}

/// Gaussian blobs: class means uniform on the unit sphere, isotropic noise
/// with standard deviation `spread`. Samples are grouped by class.
pub fn gen_blobs(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledSet> {
    if num_classes < 2 {
        return Err(Error::invalid("blobs need at least 2 classes"));
    }
    if samples_per_class == 0 || input_dim == 0 {
        return Err(Error::invalid("blobs need positive sample count and dimension"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be positive"));
    }
    let mut rng = seed::stream_rng(seed, Stream::Data, 0);
    let mut means = Vec::with_capacity(num_classes);
    while means.len() < num_classes {
        let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            means.push(v.into_iter().map(|x| x / n).collect::<Vec<f64>>());
        }
    }
    let total = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(total * input_dim);
    let mut labels = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(mean.iter().map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + spread * z
            }));
            labels.push(c as u32);
        }
    }
    LabeledSet::new(Matrix::from_vec(total, input_dim, data)?, labels)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// Reads an IDX image file (`0x00000803`) and its label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]` and each image flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, images_path, &labels, labels_path)
}

pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<LabeledSet> {
    let magic = be_u32(images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let pixels = rows * cols;
    let body = 16;
    let expected = body + count * pixels;
    if images.len() < expected {
        return Err(format_err(
            images_path,
            images.len() as u64,
            format!("truncated: {count} images of {rows}x{cols} need {expected} bytes"),
        ));
    }

    let lmagic = be_u32(labels, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            0,
            format!("bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let lcount = be_u32(labels, 4, labels_path)? as usize;
    if lcount != count {
        return Err(format_err(
            labels_path,
            4,
            format!("label count {lcount} does not match image count {count}"),
        ));
    }
    if labels.len() < 8 + lcount {
        return Err(format_err(
            labels_path,
            labels.len() as u64,
            format!("truncated: {lcount} labels need {} bytes", 8 + lcount),
        ));
    }
    if count == 0 {
        return Err(Error::InsufficientData("IDX file holds no images".into()));
    }
    let data = images[body..expected]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let label_vec = labels[8..8 + lcount].iter().map(|&l| l as u32).collect();
    LabeledSet::new(Matrix::from_vec(count, pixels, data)?, label_vec)
}

/// How the training set grows along a timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthMode {
    /// New classes arrive; each step holds all samples of its classes.
    ByClass,
    /// All classes from the start; more samples per class each step.
    BySample,
    /// Both the class set and the per-class samples grow.
    Mixed,
}

// Guards against values like 0.29 * 100 = 28.999999999999996.
const FRACTION_EPS: f64 = 1e-9;

fn fraction_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64) + FRACTION_EPS).floor() as usize
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::invalid("at least one fraction is required"));
    }
    for w in fractions.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "fractions must be strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::invalid("fractions must lie in (0, 1]"));
    }
    if *fractions.last().expect("non-empty") != 1.0 {
        return Err(Error::invalid("the last fraction must be 1.0"));
    }
    Ok(())
}

/// Splits `set` into cumulative steps `T_1 ⊆ T_2 ⊆ … ⊆ T_T`.
///
/// Classes enter in a seeded random order, which also fixes the classifier
/// output each class is assigned to. Class and sample counts are the
/// fraction of the total rounded down, so the last step always holds
/// everything.
pub fn build_timeline(
    set: &LabeledSet,
    fractions: &[f64],
    mode: GrowthMode,
    seed: u64,
) -> Result<UpgradeTimeline> {
    validate_fractions(fractions)?;
    let mut class_order = set.class_ids().to_vec();
    class_order.shuffle(&mut seed::stream_rng(seed, Stream::ClassOrder, 0));

    let by_class = set.indices_by_class();
    // Rank of each sample inside its class, under a seeded permutation.
    let mut rank = vec![0usize; set.len()];
    let mut class_sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for (&c, members) in &by_class {
        let mut perm = members.clone();
        perm.shuffle(&mut seed::stream_rng(seed, Stream::Split, c as u64));
        for (r, &i) in perm.iter().enumerate() {
            rank[i] = r;
        }
        class_sizes.insert(c, members.len());
    }

    let num_classes = class_order.len();
    let mut steps = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let class_count = match mode {
            GrowthMode::ByClass | GrowthMode::Mixed => fraction_count(f, num_classes),
            GrowthMode::BySample => num_classes,
        };
        if class_count == 0 {
            return Err(Error::invalid(format!(
                "fraction {f} of {num_classes} classes leaves a step with no classes"
            )));
        }
        let active: HashSet<u32> = class_order[..class_count].iter().copied().collect();
        let idx: Vec<usize> = (0..set.len())
            .filter(|&i| {
                let c = set.labels()[i];
                if !active.contains(&c) {
                    return false;
                }
                match mode {
                    GrowthMode::ByClass => true,
                    GrowthMode::BySample | GrowthMode::Mixed => {
                        let keep = fraction_count(f, class_sizes[&c]).max(1);
                        rank[i] < keep
                    }
                }
            })
            .collect();
        steps.push(set.subset(&idx)?);
    }
    UpgradeTimeline::new(steps, class_order)
}

/// Class-disjoint split: `eval_classes` classes (chosen by seed) form the
/// evaluation set, the rest the training set.
pub fn split_open_set(set: &LabeledSet, eval_classes: usize, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let n = set.class_ids().len();
    if eval_classes < 2 || eval_classes >= n {
        return Err(Error::invalid(format!(
            "need at least 2 evaluation classes and 1 training class, got {eval_classes} of {n}"
        )));
    }
    let mut classes = set.class_ids().to_vec();
    classes.shuffle(&mut seed::stream_rng(seed, Stream::Split, u64::MAX));
    let mut eval: Vec<u32> = classes[..eval_classes].to_vec();
    let mut train: Vec<u32> = classes[eval_classes..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok((set.restrict_to_classes(&train)?, set.restrict_to_classes(&eval)?))
}

/// Closed-set split for debugging: every class contributes
/// `holdout_fraction` of its samples to the evaluation set.
pub fn split_closed_set(set: &LabeledSet, holdout_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (c, members) in set.indices_by_class() {
        if members.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "class {c} has fewer than 2 samples"
            )));
        }
        let mut perm = members;
        perm.shuffle(&mut seed::stream_rng(seed, Stream::Split, c as u64 ^ 0x5eed));
        let held = fraction_count(holdout_fraction, perm.len()).clamp(1, perm.len() - 1);
        eval.extend_from_slice(&perm[..held]);
        train.extend_from_slice(&perm[held..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((set.subset(&train)?, set.subset(&eval)?))
}

/// Per-class 50/50 split of `labels` into two index lists (both ascending).
/// Each class with at least two samples lands on both sides.
pub fn stratified_halves(labels: &[u32], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (c, mut members) in by {
        members.shuffle(&mut seed::stream_rng(seed, Stream::Split, c as u64));
        let half = members.len().div_ceil(2);
        a.extend_from_slice(&members[..half]);
        b.extend_from_slice(&members[half..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Index pairs `(u, v)` for verification. `u` is embedded by the query model
/// and `v` by the gallery model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPairs {
    pub pairs: Vec<(usize, usize)>,
    pub is_positive: Vec<bool>,
    pub num_positive: usize,
    pub num_negative: usize,
}

impl VerificationPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn from_parts(pos: Vec<(usize, usize)>, neg: Vec<(usize, usize)>) -> Self {
        let num_positive = pos.len();
        let num_negative = neg.len();
        let mut is_positive = vec![true; num_positive];
        is_positive.resize(num_positive + num_negative, false);
        let mut pairs = pos;
        pairs.extend(neg);
        VerificationPairs {
            pairs,
            is_positive,
            num_positive,
            num_negative,
        }
    }
}

/// Unordered pair `k` of `0..n` in row order `(0,1), (0,2), …, (1,2), …`.
fn decode_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut a = 0;
    while k >= n - 1 - a {
        k -= n - 1 - a;
        a += 1;
    }
    (a, a + 1 + k)
}

fn sample_negatives<R: rand::Rng>(
    rng: &mut R,
    n_neg: usize,
    available: usize,
    n_u: usize,
    n_v: usize,
    accept: impl Fn(usize, usize) -> Option<(usize, usize)>,
    enumerate_all: impl Fn() -> Vec<(usize, usize)>,
) -> Vec<(usize, usize)> {
    if n_neg.saturating_mul(2) > available {
        let all = enumerate_all();
        return index::sample(rng, all.len(), n_neg)
            .into_iter()
            .map(|i| all[i])
            .collect();
    }
    let mut seen = HashSet::with_capacity(n_neg);
    let mut out = Vec::with_capacity(n_neg);
    while out.len() < n_neg {
        let u = rng.random_range(0..n_u);
        let v = rng.random_range(0..n_v);
        if let Some(p) = accept(u, v) {
            if seen.insert(p) {
                out.push(p);
            }
        }
    }
    out
}

/// Samples `n_pos` same-class and `n_neg` different-class pairs of distinct
/// samples from one evaluation set, without replacement.
pub fn make_verification_pairs(
    eval_set: &LabeledSet,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<VerificationPairs> {
    make_pairs_from_labels(eval_set.labels(), n_pos, n_neg, seed)
}

pub fn make_pairs_from_labels(
    labels: &[u32],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<VerificationPairs> {
    let n = labels.len();
    let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    if by.len() < 2 {
        return Err(Error::InsufficientData(
            "verification pairs need at least 2 classes".into(),
        ));
    }
    let groups: Vec<&Vec<usize>> = by.values().collect();
    let counts: Vec<usize> = groups.iter().map(|g| g.len() * (g.len() - 1) / 2).collect();
    let total_pos: usize = counts.iter().sum();
    let total_neg = n * (n - 1) / 2 - total_pos;
    if n_pos > total_pos {
        return Err(Error::InsufficientData(format!(
            "{n_pos} positive pairs requested, only {total_pos} exist"
        )));
    }
    if n_neg > total_neg {
        return Err(Error::InsufficientData(format!(
            "{n_neg} negative pairs requested, only {total_neg} exist"
        )));
    }
    let mut rng = seed::stream_rng(seed, Stream::Pairs, 0);
    let pos = index::sample(&mut rng, total_pos, n_pos)
        .into_iter()
        .map(|mut k| {
            let mut g = 0;
            while k >= counts[g] {
                k -= counts[g];
                g += 1;
            }
            let (a, b) = decode_pair(k, groups[g].len());
            (groups[g][a], groups[g][b])
        })
        .collect();
    let neg = sample_negatives(
        &mut rng,
        n_neg,
        total_neg,
        n,
        n,
        |u, v| (u != v && labels[u] != labels[v]).then(|| (u.min(v), u.max(v))),
        || {
            let mut all = Vec::with_capacity(total_neg);
            for u in 0..n {
                for v in (u + 1)..n {
                    if labels[u] != labels[v] {
                        all.push((u, v));
                    }
                }
            }
            all
        },
    );
    Ok(VerificationPairs::from_parts(pos, neg))
}

/// Pairs across two sets: `u` indexes `query_labels`, `v` indexes
/// `gallery_labels`. Counts are capped at what exists.
pub fn make_cross_pairs(
    query_labels: &[u32],
    gallery_labels: &[u32],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<VerificationPairs> {
    let mut gal_by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in gallery_labels.iter().enumerate() {
        gal_by.entry(l).or_default().push(i);
    }
    // Positive pair k enumerates (query u, gallery member) in query order.
    let per_query: Vec<usize> = query_labels
        .iter()
        .map(|l| gal_by.get(l).map_or(0, Vec::len))
        .collect();
    let total_pos: usize = per_query.iter().sum();
    let total_neg = query_labels.len() * gallery_labels.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(Error::InsufficientData(
            "query and gallery sets admit no positive or no negative pairs".into(),
        ));
    }
    let n_pos = n_pos.min(total_pos);
    let n_neg = n_neg.min(total_neg);
    let mut rng = seed::stream_rng(seed, Stream::Pairs, 1);
    let pos = index::sample(&mut rng, total_pos, n_pos)
        .into_iter()
        .map(|mut k| {
            let mut u = 0;
            while k >= per_query[u] {
                k -= per_query[u];
                u += 1;
            }
            (u, gal_by[&query_labels[u]][k])
        })
        .collect();
    let neg = sample_negatives(
        &mut rng,
        n_neg,
        total_neg,
        query_labels.len(),
        gallery_labels.len(),
        |u, v| (query_labels[u] != gallery_labels[v]).then_some((u, v)),
        || {
            let mut all = Vec::with_capacity(total_neg);
            for (u, lu) in query_labels.iter().enumerate() {
                for (v, lv) in gallery_labels.iter().enumerate() {
                    if lu != lv {
                        all.push((u, v));
                    }
                }
            }
            all
        },
    );
    Ok(VerificationPairs::from_parts(pos, neg))
}
