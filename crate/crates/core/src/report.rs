//! Canned experiments: presets that run every (method, seed) pair through a
//! timeline, per-run compatibility reports, and the aggregate table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_timeline, gen_blobs, split_open_set, GrowthMode, LabeledSet};
use crate::error::{Error, Result};
use crate::gallery::sha256_hex;
use crate::metrics::{build_compatibility_matrix, CompatibilityReport, MetricKind, MetricSpec};
use crate::netcore::{FeatureModel, TrainConfig};
use crate::polytope::{FixedClassifier, PolytopeKind};
use crate::seed::{self, Stream};
use crate::timeline::registry::write_new_file;
use crate::timeline::{run_timeline, EvalProtocol, Method, RunOptions, SelectionProtocol};

pub const REPORT_FILE: &str = "report.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const PRESET_FILE: &str = "preset.json";
pub const PRESET_MANIFEST_FILE: &str = "manifest.json";

/// Synthetic data for a preset; evaluation classes are drawn from the same
/// blob population and kept out of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobData {
    pub train_classes: usize,
    pub eval_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub data: BlobData,
    pub fractions: Vec<f64>,
    pub growth: GrowthMode,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub metric: MetricKind,
    pub pairs_pos: usize,
    pub pairs_neg: usize,
    /// Classifier outputs `K`; the feature dimension follows from the polytope.
    pub num_outputs: usize,
    pub polytope: PolytopeKind,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub lambda: f64,
    pub model_selection: bool,
}

impl ExperimentPreset {
    pub fn validate(&self) -> Result<()> {
        crate::dataset::validate_fractions(&self.fractions)?;
        self.train.validate()?;
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("a preset needs at least one method and one seed"));
        }
        if self.num_outputs < self.data.train_classes {
            return Err(Error::CapacityExceeded {
                requested: self.data.train_classes,
                capacity: self.num_outputs,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: ExperimentPreset = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn steps(&self) -> usize {
        self.fractions.len()
    }
}

fn blob_preset(name: &str, fractions: Vec<f64>, train_classes: usize) -> ExperimentPreset {
    ExperimentPreset {
        name: name.to_string(),
        data: BlobData {
            train_classes,
            eval_classes: 10,
            per_class: 100,
            input_dim: 16,
            spread: 0.2,
        },
        fractions,
        growth: GrowthMode::ByClass,
        methods: vec![Method::Cores, Method::Itm, Method::Ift, Method::L2],
        seeds: vec![1, 2, 3, 4, 5],
        metric: MetricKind::Verification,
        pairs_pos: 3000,
        pairs_neg: 3000,
        num_outputs: train_classes,
        polytope: PolytopeKind::DSimplex,
        hidden: vec![32],
        train: TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr_schedule: vec![(42, 0.01)],
            ..TrainConfig::default()
        },
        lambda: 1.0,
        model_selection: false,
    }
}

pub const BUNDLED_PRESETS: [&str; 4] = ["blobs-1step", "blobs-2step", "blobs-4step", "blobs-9step"];

/// Presets with one, two, four and nine upgrades on Gaussian blobs.
pub fn bundled_preset(name: &str) -> Option<ExperimentPreset> {
    let tenths = |n: usize| (1..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>();
    match name {
        "blobs-1step" => Some(blob_preset(name, vec![0.5, 1.0], 10)),
        "blobs-2step" => Some(blob_preset(name, vec![1.0 / 3.0, 2.0 / 3.0, 1.0], 12)),
        "blobs-4step" => Some(blob_preset(name, tenths(5), 10)),
        "blobs-9step" => Some(blob_preset(name, tenths(10), 20)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub dir: String,
    pub report: CompatibilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub runs: usize,
    /// `None` for single-model timelines.
    pub ac_mean: Option<f64>,
    pub ac_std: Option<f64>,
    pub am_mean: f64,
    pub am_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOutcome {
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<AggregateRow>,
}

impl PresetOutcome {
    pub fn row(&self, method: Method) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.method == method)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(runs: &[RunSummary], methods: &[Method]) -> Vec<AggregateRow> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.method == method).collect();
            let am: Vec<f64> = mine.iter().map(|r| r.report.am).collect();
            let ac: Option<Vec<f64>> = mine.iter().map(|r| r.report.ac).collect();
            let (am_mean, am_std) = mean_std(&am);
            let (ac_mean, ac_std) = match ac {
                Some(v) if !v.is_empty() => {
                    let (m, s) = mean_std(&v);
                    (Some(m), Some(s))
                }
                _ => (None, None),
            };
            AggregateRow {
                method,
                runs: mine.len(),
                ac_mean,
                ac_std,
                am_mean,
                am_std,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["method", "runs", "ac_mean", "ac_std", "am_mean", "am_std"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.runs.to_string(),
            opt(r.ac_mean),
            opt(r.ac_std),
            format!("{:.6}", r.am_mean),
            format!("{:.6}", r.am_std),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

/// Worker count: `CORES_THREADS` when set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CORES_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Default)]
pub struct PresetOptions {
    pub force: bool,
    pub threads: Option<usize>,
    pub command_line: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PresetManifest {
    tool: String,
    tool_version: String,
    command_line: Vec<String>,
    preset: String,
    preset_sha256: String,
    seeds: Vec<u64>,
    files: BTreeMap<String, String>,
}

fn prepare_preset_dir(out_dir: &Path, preset: &ExperimentPreset, force: bool) -> Result<()> {
    if out_dir.join(PRESET_MANIFEST_FILE).exists() && !force {
        return Err(Error::AlreadyComplete(out_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for name in [PRESET_MANIFEST_FILE, AGGREGATE_FILE, PRESET_FILE] {
        let p = out_dir.join(name);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for &m in &preset.methods {
        for &s in &preset.seeds {
            let p = out_dir.join(run_dir_name(m, s));
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// Data, timeline and evaluation set of one seed; shared by every method.
pub struct SeedData {
    pub train: LabeledSet,
    pub eval: LabeledSet,
}

pub fn preset_data(preset: &ExperimentPreset, seed_value: u64) -> Result<SeedData> {
    let d = &preset.data;
    let all = gen_blobs(
        d.train_classes + d.eval_classes,
        d.per_class,
        d.input_dim,
        d.spread,
        seed::derive(seed_value, Stream::Data, 0),
    )?;
    let (train, eval) = split_open_set(&all, d.eval_classes, seed_value)?;
    Ok(SeedData { train, eval })
}

fn run_one(preset: &ExperimentPreset, digest: &str, method: Method, seed_value: u64, out_dir: &Path) -> Result<RunSummary> {
    let data = preset_data(preset, seed_value)?;
    let timeline = build_timeline(&data.train, &preset.fractions, preset.growth, seed_value)?
        .with_method(method)
        .with_config(preset.train.clone())?;
    let fc = FixedClassifier::build(preset.polytope, preset.num_outputs)?;
    let protocol = EvalProtocol {
        eval_set: data.eval,
        closed_set: false,
        selection: preset.model_selection.then(SelectionProtocol::default),
    };
    let dir_name = run_dir_name(method, seed_value);
    let dir = out_dir.join(&dir_name);
    let mut settings = BTreeMap::new();
    settings.insert("preset".into(), serde_json::json!(preset.name));
    settings.insert("preset_sha256".into(), serde_json::json!(digest));
    settings.insert("fractions".into(), serde_json::json!(preset.fractions));
    let options = RunOptions {
        seed: seed_value,
        hidden: preset.hidden.clone(),
        lambda: preset.lambda,
        init_first: None,
        force: false,
        command_line: Vec::new(),
        settings,
    };
    let registry = run_timeline(&timeline, &fc, &protocol, &dir, &options)?;
    let spec = MetricSpec {
        kind: preset.metric,
        pairs_pos: preset.pairs_pos,
        pairs_neg: preset.pairs_neg,
        seed: seed_value,
    };
    let matrix = build_compatibility_matrix(&registry, &spec)?;
    let report = CompatibilityReport::from_matrix(&matrix, Some(registry.manifest_digest().to_string()));
    write_new_file(&dir.join(REPORT_FILE), report.to_json()?.as_bytes())?;
    log::info!("{dir_name}: AM {:.4} AC {:?}", report.am, report.ac);
    Ok(RunSummary {
        method,
        seed: seed_value,
        dir: dir_name,
        report,
    })
}

/// Runs every (method, seed) pair of `preset` into `out_dir`, in parallel,
/// then writes `aggregate.csv` and the preset manifest.
pub fn run_preset(preset: &ExperimentPreset, out_dir: &Path, options: &PresetOptions) -> Result<PresetOutcome> {
    preset.validate()?;
    prepare_preset_dir(out_dir, preset, options.force)?;
    let digest = preset.digest()?;
    write_new_file(&out_dir.join(PRESET_FILE), preset.to_json()?.as_bytes())?;

    let jobs: Vec<(Method, u64)> = preset
        .methods
        .iter()
        .flat_map(|&m| preset.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let threads = options.threads.unwrap_or_else(worker_threads).clamp(1, jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (m, s) = jobs[i];
                let r = run_one(preset, &digest, m, s, out_dir);
                results.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;

    let rows = aggregate(&runs, &preset.methods);
    let csv_text = aggregate_csv(&rows)?;
    let mut files = BTreeMap::new();
    files.insert(PRESET_FILE.to_string(), sha256_hex(preset.to_json()?.as_bytes()));
    files.insert(
        AGGREGATE_FILE.to_string(),
        write_new_file(&out_dir.join(AGGREGATE_FILE), csv_text.as_bytes())?,
    );
    for r in &runs {
        files.insert(format!("{}/{REPORT_FILE}", r.dir), sha256_hex(r.report.to_json()?.as_bytes()));
    }
    let manifest = PresetManifest {
        tool: "cores".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command_line: options.command_line.clone(),
        preset: preset.name.clone(),
        preset_sha256: digest,
        seeds: preset.seeds.clone(),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_new_file(&out_dir.join(PRESET_MANIFEST_FILE), text.as_bytes())?;
    Ok(PresetOutcome { runs, aggregate: rows })
}

/// CSV of 2D features: a `#` header block listing every prototype (index,
/// angle in degrees, x, y), then `x,y,label` rows in input order.
pub fn emit_feature_dump_2d(model: &FeatureModel, fc: &FixedClassifier, eval_set: &LabeledSet) -> Result<String> {
    if fc.kind() != PolytopeKind::Polygon2D {
        return Err(Error::invalid("2D dumps need a polygon classifier"));
    }
    if model.output_dim() != 2 {
        return Err(Error::invalid(format!(
            "2D dumps need 2-dimensional features, model outputs {}",
            model.output_dim()
        )));
    }
    let features = model.features(eval_set.samples())?;
    let mut out = String::new();
    out.push_str("# prototype,index,angle_deg,x,y\n");
    for j in 0..fc.num_outputs() {
        let p = fc.prototype(j);
        let _ = writeln!(
            out,
            "# prototype,{j},{},{},{}",
            p[1].atan2(p[0]).to_degrees().rem_euclid(360.0),
            p[0],
            p[1]
        );
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["x", "y", "label"]).map_err(csv_err)?;
    for (i, &label) in eval_set.labels().iter().enumerate() {
        w.write_record([features.get(i, 0).to_string(), features.get(i, 1).to_string(), label.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is UTF-8"));
    Ok(out)
}
