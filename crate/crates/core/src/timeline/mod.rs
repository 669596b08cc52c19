//! Sequential upgrades: trains one model per step, checkpoints it, and
//! stores its evaluation gallery once. Later steps and evaluations only read
//! those files back.

mod baselines;
pub(crate) mod registry;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_cross_pairs, stratified_halves, LabeledSet, VerificationPairs};
use crate::error::{Error, Result};
use crate::gallery::FeatureGallery;
use crate::linalg::{cosine_similarity, Matrix};
use crate::metrics::{verification_accuracy, EpochScore, SelectionTracker};
use crate::netcore::{
    init_model, train_with, EpochEnd, FeatureModel, FixedPrototypes, InitMode, LinearHead, SoftmaxHead,
    TrainConfig, TrainData, TrainOutcome,
};
use crate::polytope::FixedClassifier;
use crate::seed::{self, Stream};

pub use baselines::{mean_feature_drift, train_ift, train_itm, train_l2_baseline, DriftPenalty};
pub use registry::{
    step_dir_name, Checkpoint, FileRecord, ModelRegistry, RunManifest, StepRecord, StepTraining,
    CHECKPOINT_FILE, EVAL_ROLE, MANIFEST_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Fixed d-Simplex (or polygon) classifier with future-class outputs.
    Cores,
    /// Independently trained models with a fresh learned head each step.
    Itm,
    /// Fine-tuning of the previous model with a grown learned head.
    Ift,
    /// Learned head plus a Euclidean drift penalty toward the previous model.
    L2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cores, Method::Itm, Method::Ift, Method::L2];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cores => "cores",
            Method::Itm => "itm",
            Method::Ift => "ift",
            Method::L2 => "l2",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cores" => Ok(Method::Cores),
            "itm" => Ok(Method::Itm),
            "ift" => Ok(Method::Ift),
            "l2" | "l2reg" => Ok(Method::L2),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Cumulative training sets `T_1 ⊆ … ⊆ T_T` with per-step configuration.
#[derive(Debug, Clone)]
pub struct UpgradeTimeline {
    steps: Vec<LabeledSet>,
    class_order: Vec<u32>,
    configs: Vec<TrainConfig>,
    method: Method,
}

fn row_key(set: &LabeledSet, i: usize) -> (u32, Vec<u64>) {
    (
        set.labels()[i],
        set.samples().row(i).iter().map(|v| v.to_bits()).collect(),
    )
}

impl UpgradeTimeline {
    /// `class_order[k]` is the class assigned to classifier output `k`; it
    /// must list every class of the final step exactly once.
    pub fn new(steps: Vec<LabeledSet>, class_order: Vec<u32>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("a timeline needs at least one step"));
        }
        let unique: HashSet<u32> = class_order.iter().copied().collect();
        if unique.len() != class_order.len() {
            return Err(Error::invalid("class order lists a class twice"));
        }
        for (t, s) in steps.iter().enumerate() {
            if let Some(c) = s.class_ids().iter().find(|c| !unique.contains(c)) {
                return Err(Error::invalid(format!("class {c} of step {} has no output", t + 1)));
            }
        }
        for t in 1..steps.len() {
            let (prev, next) = (&steps[t - 1], &steps[t]);
            if prev.input_dim() != next.input_dim() {
                return Err(Error::invalid("steps differ in input dimension"));
            }
            let mut later: HashMap<(u32, Vec<u64>), usize> = HashMap::new();
            for i in 0..next.len() {
                *later.entry(row_key(next, i)).or_default() += 1;
            }
            for i in 0..prev.len() {
                match later.get_mut(&row_key(prev, i)) {
                    Some(n) if *n > 0 => *n -= 1,
                    _ => {
                        return Err(Error::invalid(format!(
                            "step {} is not contained in step {}",
                            t,
                            t + 1
                        )))
                    }
                }
            }
        }
        let configs = vec![TrainConfig::default(); steps.len()];
        Ok(UpgradeTimeline {
            steps,
            class_order,
            configs,
            method: Method::Cores,
        })
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    /// Uses `config` at every step.
    pub fn with_config(mut self, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        self.configs = vec![config; self.steps.len()];
        Ok(self)
    }

    pub fn with_step_configs(mut self, configs: Vec<TrainConfig>) -> Result<Self> {
        if configs.len() != self.steps.len() {
            return Err(Error::invalid(format!(
                "{} configs for {} steps",
                configs.len(),
                self.steps.len()
            )));
        }
        for c in &configs {
            c.validate()?;
        }
        self.configs = configs;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[LabeledSet] {
        &self.steps
    }

    pub fn step(&self, t: usize) -> &LabeledSet {
        &self.steps[t]
    }

    pub fn class_order(&self) -> &[u32] {
        &self.class_order
    }

    pub fn configs(&self) -> &[TrainConfig] {
        &self.configs
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Number of classifier outputs used by step `t` (0-based).
    pub fn outputs_at(&self, t: usize) -> usize {
        let classes: HashSet<u32> = self.steps[t].class_ids().iter().copied().collect();
        self.class_order
            .iter()
            .rposition(|c| classes.contains(c))
            .map_or(0, |p| p + 1)
    }

    /// Output index of every sample of step `t`.
    pub fn targets(&self, t: usize) -> Vec<usize> {
        let pos: HashMap<u32, usize> = self.class_order.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        self.steps[t].labels().iter().map(|l| pos[l]).collect()
    }

    /// Flags the rows of step `t` that already belong to step `t − 1`.
    pub fn old_rows(&self, t: usize) -> Vec<bool> {
        if t == 0 {
            return vec![false; self.steps[0].len()];
        }
        let prev = &self.steps[t - 1];
        let mut counts: HashMap<(u32, Vec<u64>), usize> = HashMap::new();
        for i in 0..prev.len() {
            *counts.entry(row_key(prev, i)).or_default() += 1;
        }
        let next = &self.steps[t];
        (0..next.len())
            .map(|i| match counts.get_mut(&row_key(next, i)) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    true
                }
                _ => false,
            })
            .collect()
    }
}

/// Model selection settings. The evaluation set is split per class in half;
/// one half serves as query images, the other as the held-out gallery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionProtocol {
    pub pairs_pos: usize,
    pub pairs_neg: usize,
}

impl Default for SelectionProtocol {
    fn default() -> Self {
        SelectionProtocol {
            pairs_pos: 1000,
            pairs_neg: 1000,
        }
    }
}

/// The images every step's gallery is extracted from.
#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub eval_set: LabeledSet,
    /// Evaluation classes also occur in training (debugging only).
    pub closed_set: bool,
    pub selection: Option<SelectionProtocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    /// Hidden layer widths between the input and the feature layer.
    pub hidden: Vec<usize>,
    /// Weight of the drift penalty for [`Method::L2`].
    pub lambda: f64,
    /// Initialization for step 1 when the configured mode is fine-tuning.
    pub init_first: Option<InitMode>,
    pub force: bool,
    pub command_line: Vec<String>,
    pub settings: BTreeMap<String, serde_json::Value>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            hidden: vec![256, 128],
            lambda: 1.0,
            init_first: None,
            force: false,
            command_line: Vec::new(),
            settings: BTreeMap::new(),
        }
    }
}

/// Features of every row of `set`, in input order.
pub fn extract_gallery(
    model: &FeatureModel,
    fc: &FixedClassifier,
    set: &LabeledSet,
    model_id: impl Into<String>,
) -> Result<FeatureGallery> {
    if model.output_dim() != fc.dim() {
        return Err(Error::invalid(format!(
            "model outputs {} dimensions, classifier has {}",
            model.output_dim(),
            fc.dim()
        )));
    }
    extract_features(model, set, model_id)
}

fn extract_features(model: &FeatureModel, set: &LabeledSet, model_id: impl Into<String>) -> Result<FeatureGallery> {
    let features = model.features(set.samples())?;
    FeatureGallery::from_matrix(model_id, &features, set.labels())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidDrift {
    /// `(class, cosine between the two models' class centroids)`.
    pub per_class: Vec<(u32, f64)>,
    pub mean: f64,
    /// Classes skipped because a centroid was the zero vector.
    pub excluded: usize,
}

/// Cosine between each class's feature centroid under `model_a` and under
/// `model_b`.
pub fn centroid_drift(model_a: &FeatureModel, model_b: &FeatureModel, probe_set: &LabeledSet) -> Result<CentroidDrift> {
    if model_a.output_dim() != model_b.output_dim() {
        return Err(Error::invalid("models differ in feature dimension"));
    }
    let fa = model_a.features(probe_set.samples())?;
    let fb = model_b.features(probe_set.samples())?;
    let mut per_class = Vec::new();
    let mut excluded = 0;
    for (c, members) in probe_set.indices_by_class() {
        let ca = centroid(&fa, &members);
        let cb = centroid(&fb, &members);
        match cosine_similarity(&ca, &cb) {
            Some(cos) => per_class.push((c, cos)),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} classes excluded from centroid drift: zero centroid");
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric("every class centroid is zero".into()));
    }
    let mean = per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64;
    Ok(CentroidDrift {
        per_class,
        mean,
        excluded,
    })
}

pub(crate) fn centroid(features: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; features.cols()];
    for &i in rows {
        for (a, b) in c.iter_mut().zip(features.row(i)) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Previous step's artifacts that the next step may build on.
struct PreviousStep {
    model: FeatureModel,
    head: Option<LinearHead>,
    gallery: FeatureGallery,
}

/// Held-out split of the evaluation set used to pick an epoch.
struct SelectionContext {
    query_idx: Vec<usize>,
    query_inputs: Matrix,
    gallery_inputs: Matrix,
    gallery_idx: Vec<usize>,
    pairs: VerificationPairs,
}

impl SelectionContext {
    fn new(eval: &LabeledSet, proto: &SelectionProtocol, seed: u64) -> Result<Self> {
        let (query_idx, gallery_idx) = stratified_halves(eval.labels(), seed::derive(seed, Stream::Split, 1));
        let ql: Vec<u32> = query_idx.iter().map(|&i| eval.labels()[i]).collect();
        let gl: Vec<u32> = gallery_idx.iter().map(|&i| eval.labels()[i]).collect();
        let pairs = make_cross_pairs(&ql, &gl, proto.pairs_pos, proto.pairs_neg, seed::derive(seed, Stream::Pairs, 2))?;
        Ok(SelectionContext {
            query_inputs: eval.samples().select_rows(&query_idx),
            gallery_inputs: eval.samples().select_rows(&gallery_idx),
            query_idx,
            gallery_idx,
            pairs,
        })
    }

    fn labels(&self, eval: &LabeledSet, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| eval.labels()[i]).collect()
    }

    /// Self-test of the previous model on the split, read from its stored gallery.
    fn previous_self(&self, prev: &FeatureGallery) -> Result<f64> {
        verification_accuracy(&self.pairs, &prev.select(&self.query_idx), &prev.select(&self.gallery_idx))
    }

    fn score(&self, eval: &LabeledSet, model: &FeatureModel, prev: &FeatureGallery, epoch: usize) -> Result<EpochScore> {
        let q = FeatureGallery::from_matrix(
            "candidate",
            &model.features(&self.query_inputs)?,
            &self.labels(eval, &self.query_idx),
        )?;
        let g = FeatureGallery::from_matrix(
            "candidate",
            &model.features(&self.gallery_inputs)?,
            &self.labels(eval, &self.gallery_idx),
        )?;
        Ok(EpochScore {
            epoch,
            self_test: verification_accuracy(&self.pairs, &q, &g)?,
            cross_test: verification_accuracy(&self.pairs, &q, &prev.select(&self.gallery_idx))?,
        })
    }
}

/// Seed of the parameters a step starts from.
fn model_seed(run_seed: u64, mode: InitMode, step: usize) -> u64 {
    match mode {
        InitMode::FreshRandom => seed::derive(run_seed, Stream::Init, step as u64),
        InitMode::SameSeed | InitMode::FineTune => seed::derive(run_seed, Stream::Init, 0),
    }
}

fn effective_init(method: Method, config: &TrainConfig, step: usize, init_first: Option<InitMode>) -> Result<InitMode> {
    let mode = match method {
        Method::Itm => InitMode::FreshRandom,
        Method::Ift if step > 1 => InitMode::FineTune,
        Method::Ift => InitMode::SameSeed,
        Method::Cores | Method::L2 => config.init_mode,
    };
    if mode == InitMode::FineTune && step == 1 {
        return init_first.ok_or_else(|| {
            Error::MissingArgument("step 1 cannot fine-tune: there is no previous model".into())
        });
    }
    Ok(mode)
}

/// Trains every step of `timeline` and writes, under `out_dir`,
/// `step-NN/model.json`, `step-NN/eval.gallery` and finally `manifest.json`.
///
/// Each gallery is written once, right after its step, and never touched
/// again. A directory that already holds a manifest is refused unless
/// `options.force` is set.
pub fn run_timeline(
    timeline: &UpgradeTimeline,
    fc_template: &FixedClassifier,
    protocol: &EvalProtocol,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<ModelRegistry> {
    let total_outputs = timeline.outputs_at(timeline.len() - 1);
    if total_outputs > fc_template.num_outputs() {
        return Err(Error::CapacityExceeded {
            requested: total_outputs,
            capacity: fc_template.num_outputs(),
        });
    }
    if protocol.eval_set.input_dim() != timeline.step(0).input_dim() {
        return Err(Error::invalid("evaluation and training inputs differ in dimension"));
    }
    if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and ≥ 0, got {}", options.lambda)));
    }
    // Validate every step's initialization before any file is written.
    for (t, cfg) in timeline.configs().iter().enumerate() {
        cfg.validate()?;
        effective_init(timeline.method(), cfg, t + 1, options.init_first)?;
    }
    let mut layer_dims = vec![timeline.step(0).input_dim()];
    layer_dims.extend_from_slice(&options.hidden);
    layer_dims.push(fc_template.dim());

    let selection = match protocol.selection {
        Some(p) if timeline.len() > 1 => Some(SelectionContext::new(&protocol.eval_set, &p, options.seed)?),
        _ => None,
    };

    registry::prepare_run_dir(out_dir, options.force)?;
    let fc_base = fc_template.clone();
    let mut previous: Option<PreviousStep> = None;
    let mut records = Vec::with_capacity(timeline.len());

    for t in 0..timeline.len() {
        let step = t + 1;
        let set = timeline.step(t);
        let cfg = &timeline.configs()[t];
        let outputs = timeline.outputs_at(t);
        let targets = timeline.targets(t);
        let data = TrainData {
            inputs: set.samples(),
            targets: &targets,
        };
        let mode = effective_init(timeline.method(), cfg, step, options.init_first)?;
        let mseed = model_seed(options.seed, mode, step);
        let prev_model = previous.as_ref().map(|p| &p.model);
        let mut model = init_model(&layer_dims, mseed, mode, prev_model)?;
        let shuffle_seed = seed::derive(options.seed, Stream::Shuffle, step as u64);
        let head_seed = seed::derive(options.seed, Stream::Head, step as u64);

        // Best-only retention of per-epoch snapshots.
        let mut tracker = None;
        let mut best: Option<FeatureModel> = None;
        if let (Some(ctx), Some(prev)) = (&selection, &previous) {
            tracker = Some(SelectionTracker::new(ctx.previous_self(&prev.gallery)?));
        }

        let fc = fc_base.allocate_up_to(outputs)?;
        let mut classifier = None;
        let outcome: TrainOutcome;
        let mut head: Option<LinearHead> = None;
        {
            let eval = &protocol.eval_set;
            let prev_gallery = previous.as_ref().map(|p| &p.gallery);
            // Selection only concerns the feature extractor; a learned head
            // is kept from the final epoch.
            let mut snapshot = |e: &EpochEnd<'_>| -> Result<()> {
                if let (Some(tr), Some(ctx), Some(pg)) = (tracker.as_mut(), &selection, prev_gallery) {
                    let score = ctx.score(eval, e.model, pg, e.epoch + 1)?;
                    if tr.observe(&score) {
                        best = Some(e.model.clone());
                    }
                }
                Ok(())
            };
            match timeline.method() {
                Method::Cores => {
                    outcome = train_with(&mut model, &mut FixedPrototypes(&fc), data, cfg, shuffle_seed, &mut snapshot)?;
                    classifier = Some(fc.clone());
                }
                Method::Itm | Method::Ift | Method::L2 => {
                    let start_head = match (timeline.method(), previous.as_ref().and_then(|p| p.head.as_ref())) {
                        (Method::Ift, Some(h)) => h.expanded(outputs, head_seed)?,
                        _ => LinearHead::new(fc.dim(), outputs, head_seed)?,
                    };
                    match (timeline.method(), &previous) {
                        (Method::L2, Some(p)) => {
                            let mask = timeline.old_rows(t);
                            let old_features = p.model.features(set.samples())?;
                            let mut obj = DriftPenalty::new(start_head, old_features, mask, options.lambda)?;
                            outcome = train_with(&mut model, &mut obj, data, cfg, shuffle_seed, &mut snapshot)?;
                            head = Some(obj.head.head);
                        }
                        _ => {
                            let mut obj = SoftmaxHead::new(start_head);
                            outcome = train_with(&mut model, &mut obj, data, cfg, shuffle_seed, &mut snapshot)?;
                            head = Some(obj.head);
                        }
                    }
                }
            }
        }

        let mut training = StepTraining {
            samples: set.len(),
            classes: set.class_ids().len(),
            epochs: cfg.epochs,
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss(),
            selected_epoch: None,
            constraint_unsatisfied: false,
        };
        if let Some(sel) = tracker.as_ref().and_then(|tr| tr.finish()) {
            training.selected_epoch = Some(sel.epoch);
            training.constraint_unsatisfied = sel.constraint_unsatisfied;
            if sel.constraint_unsatisfied {
                log::warn!("step {step}: no epoch satisfied the compatibility constraint; keeping the final epoch");
            } else if let Some(b) = best.take() {
                model = b;
            }
        }

        let dir_name = step_dir_name(step);
        let dir = out_dir.join(&dir_name);
        std::fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;

        let checkpoint = Checkpoint {
            step,
            method: timeline.method(),
            model: model.clone(),
            classifier,
            head: head.clone(),
            output_classes: timeline.class_order()[..outputs].to_vec(),
            training,
        };
        let ck_rel = format!("{dir_name}/{CHECKPOINT_FILE}");
        let ck_digest = registry::write_new_file(&out_dir.join(&ck_rel), checkpoint.to_json()?.as_bytes())?;

        let gallery = extract_gallery(&model, &fc, &protocol.eval_set, &dir_name)?;
        let gal_rel = format!("{dir_name}/{EVAL_ROLE}.gallery");
        let gal_digest = gallery.write_new(&out_dir.join(&gal_rel))?;

        log::info!(
            "step {step}/{}: {} samples, {} classes, loss {:.4} -> {:.4}",
            timeline.len(),
            set.len(),
            set.class_ids().len(),
            outcome.initial_loss,
            outcome.final_loss()
        );
        records.push(StepRecord {
            step,
            classes: set.class_ids().len(),
            samples: set.len(),
            model_seed: mseed,
            checkpoint: FileRecord {
                path: ck_rel,
                sha256: ck_digest,
            },
            galleries: BTreeMap::from([(
                EVAL_ROLE.to_string(),
                FileRecord {
                    path: gal_rel,
                    sha256: gal_digest,
                },
            )]),
        });
        previous = Some(PreviousStep { model, head, gallery });
    }

    let mut settings = options.settings.clone();
    settings.insert("hidden".into(), serde_json::json!(options.hidden));
    settings.insert("closed_set".into(), serde_json::json!(protocol.closed_set));
    settings.insert("model_selection".into(), serde_json::json!(protocol.selection));
    settings.insert("configs".into(), serde_json::to_value(timeline.configs())?);
    settings.insert("polytope".into(), serde_json::to_value(fc_template.kind())?);
    settings.insert("num_outputs".into(), serde_json::json!(fc_template.num_outputs()));
    if timeline.method() == Method::L2 {
        settings.insert("lambda".into(), serde_json::json!(options.lambda));
    }
    let manifest = RunManifest {
        tool: "cores".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command_line: options.command_line.clone(),
        method: timeline.method(),
        seed: options.seed,
        settings,
        eval_classes: protocol.eval_set.class_ids().to_vec(),
        eval_samples: protocol.eval_set.len(),
        steps: records,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    registry::write_new_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    ModelRegistry::open(out_dir)
}
