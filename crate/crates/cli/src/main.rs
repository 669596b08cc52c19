use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cores::dataset::{build_timeline, gen_blobs, load_idx, split_closed_set, split_open_set, GrowthMode, LabeledSet};
use cores::gallery::{file_sha256, FeatureGallery};
use cores::metrics::{build_compatibility_matrix, CompatibilityReport, MetricKind, MetricSpec};
use cores::netcore::{InitMode, TrainConfig};
use cores::polytope::{FixedClassifier, PolytopeKind};
use cores::report::{bundled_preset, emit_feature_dump_2d, run_preset, ExperimentPreset, PresetOptions, BUNDLED_PRESETS};
use cores::timeline::{run_timeline, EvalProtocol, Method, ModelRegistry, RunOptions, SelectionProtocol};
use cores::Error;

#[derive(Parser)]
#[command(name = "cores", version, about = "Compatible representation learning with fixed polytope classifiers")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Gaussian blobs or convert IDX files into a dataset file.
    GenData(GenDataArgs),
    /// Train an upgrade timeline and store checkpoints and galleries.
    Train(TrainArgs),
    /// Compute the compatibility matrix of a completed run.
    Eval(EvalArgs),
    /// Run a preset over all its methods and seeds.
    Report(ReportArgs),
    /// Dump 2D features of a polygon-classifier run as CSV.
    #[command(name = "dump-2d")]
    Dump2d(Dump2dArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    spread: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Same,
    Random,
    Finetune,
}

impl From<InitArg> for InitMode {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Same => InitMode::SameSeed,
            InitArg::Random => InitMode::FreshRandom,
            InitArg::Finetune => InitMode::FineTune,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GrowthArg {
    Class,
    Sample,
    Mixed,
}

impl From<GrowthArg> for GrowthMode {
    fn from(v: GrowthArg) -> Self {
        match v {
            GrowthArg::Class => GrowthMode::ByClass,
            GrowthArg::Sample => GrowthMode::BySample,
            GrowthArg::Mixed => GrowthMode::Mixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolytopeArg {
    Simplex,
    Polygon,
}

impl From<PolytopeArg> for PolytopeKind {
    fn from(v: PolytopeArg) -> Self {
        match v {
            PolytopeArg::Simplex => PolytopeKind::DSimplex,
            PolytopeArg::Polygon => PolytopeKind::Polygon2D,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Separate evaluation dataset; by default classes are held out of `--data`.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Classes held out of `--data` for open-set evaluation (default: a fifth, at least 2).
    #[arg(long)]
    eval_classes: Option<usize>,
    /// Evaluate on held-out samples of the training classes instead.
    #[arg(long, conflicts_with_all = ["eval_data", "eval_classes"])]
    closed_set: bool,
    #[arg(long, default_value = "cores")]
    method: Method,
    /// Cumulative training fractions, e.g. `0.5,1.0`.
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    #[arg(long, value_enum, default_value = "class")]
    growth: GrowthArg,
    /// Classifier outputs, including those reserved for future classes.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, value_enum, default_value = "simplex")]
    polytope: PolytopeArg,
    /// Hidden layer widths; `none` for a linear feature map.
    #[arg(long, default_value = "256,128")]
    hidden: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning-rate drops as `epoch:rate` pairs; default drops to lr/10 at 70% of the epochs.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    wd: f64,
    #[arg(long, value_enum, default_value = "same")]
    init: InitArg,
    /// Initialization of step 1 when `--init finetune` is used.
    #[arg(long, value_enum)]
    init_first: Option<InitArg>,
    /// Weight of the feature-drift penalty for `--method l2`.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    model_selection: bool,
    #[arg(long, default_value_t = 1000)]
    selection_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "verification")]
    metric: MetricKind,
    #[arg(long, default_value_t = 3000)]
    pairs_pos: usize,
    #[arg(long, default_value_t = 3000)]
    pairs_neg: usize,
    /// Defaults to the run's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the JSON report (the default when `--table` is absent).
    #[arg(long)]
    json: bool,
    /// Print the matrix as an aligned table.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Bundled preset name or path to a preset JSON file.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Dump2dArgs {
    #[arg(long)]
    run: PathBuf,
    /// Step to dump (default: the last one).
    #[arg(long)]
    step: Option<usize>,
    /// Dataset whose features are dumped.
    #[arg(long)]
    data: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

type CmdResult = Result<(), Error>;

fn read_dataset(path: &Path) -> Result<LabeledSet, Error> {
    FeatureGallery::read(path, "data")?.to_labeled_set()
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, Error> {
    if s.eq_ignore_ascii_case("none") || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::InvalidParameter(format!("bad hidden width {w:?}")))
        })
        .collect()
}

fn parse_schedule(s: Option<&str>, epochs: usize, lr: f64) -> Result<Vec<(usize, f64)>, Error> {
    let Some(s) = s else {
        return Ok(vec![(epochs * 7 / 10, lr / 10.0)]);
    };
    if s.eq_ignore_ascii_case("none") || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let bad = || Error::InvalidParameter(format!("bad schedule entry {item:?}, expected epoch:rate"));
            let (e, r) = item.split_once(':').ok_or_else(bad)?;
            Ok((e.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain JSON value"));
}

fn cmd_gen_data(a: GenDataArgs) -> CmdResult {
    let set = match (&a.idx_images, &a.idx_labels) {
        (Some(img), Some(lbl)) => load_idx(img, lbl)?,
        _ => gen_blobs(a.classes, a.per_class, a.dim, a.spread, a.seed)?,
    };
    if a.force && a.out.exists() {
        std::fs::remove_file(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    }
    let digest = FeatureGallery::from_labeled_set("data", &set)?.write_new(&a.out)?;
    print_json(&json!({
        "path": a.out,
        "rows": set.len(),
        "dim": set.input_dim(),
        "classes": set.class_ids().len(),
        "sha256": digest,
    }));
    Ok(())
}

fn cmd_train(a: TrainArgs, command_line: Vec<String>) -> CmdResult {
    let data = read_dataset(&a.data)?;
    let (train, eval) = if a.closed_set {
        split_closed_set(&data, 0.2, a.seed)?
    } else if let Some(p) = &a.eval_data {
        (data, read_dataset(p)?)
    } else {
        let n = data.class_ids().len();
        let held = a.eval_classes.unwrap_or((n / 5).max(2));
        split_open_set(&data, held, a.seed)?
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.wd,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_schedule: parse_schedule(a.lr_schedule.as_deref(), a.epochs, a.lr)?,
        init_mode: a.init.into(),
    };
    let timeline = build_timeline(&train, &a.fractions, a.growth.into(), a.seed)?
        .with_method(a.method)
        .with_config(config)?;
    let fc = FixedClassifier::build(a.polytope.into(), a.k)?;
    let protocol = EvalProtocol {
        eval_set: eval,
        closed_set: a.closed_set,
        selection: a.model_selection.then_some(SelectionProtocol {
            pairs_pos: a.selection_pairs,
            pairs_neg: a.selection_pairs,
        }),
    };
    let mut settings = BTreeMap::new();
    settings.insert("data_sha256".into(), json!(file_sha256(&a.data)?));
    if let Some(p) = &a.eval_data {
        settings.insert("eval_data_sha256".into(), json!(file_sha256(p)?));
    }
    settings.insert("fractions".into(), json!(a.fractions));
    settings.insert("growth".into(), json!(GrowthMode::from(a.growth)));
    let options = RunOptions {
        seed: a.seed,
        hidden: parse_hidden(&a.hidden)?,
        lambda: a.lambda,
        init_first: a.init_first.map(Into::into),
        force: a.force,
        command_line,
        settings,
    };
    let registry = run_timeline(&timeline, &fc, &protocol, &a.out, &options)?;
    print_json(&json!({
        "run": a.out,
        "steps": registry.steps(),
        "manifest_sha256": registry.manifest_digest(),
    }));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let registry = ModelRegistry::open(&a.run)?;
    let spec = MetricSpec {
        kind: a.metric,
        pairs_pos: a.pairs_pos,
        pairs_neg: a.pairs_neg,
        seed: a.seed.unwrap_or(registry.manifest().seed),
    };
    let matrix = build_compatibility_matrix(&registry, &spec)?;
    let report = CompatibilityReport::from_matrix(&matrix, Some(registry.manifest_digest().to_string()));
    if a.table {
        print!("{}", report.render_table());
    }
    if a.json || !a.table {
        print!("{}", report.to_json()?);
    }
    Ok(())
}

fn load_preset(name: &str) -> Result<ExperimentPreset, Error> {
    if let Some(p) = bundled_preset(name) {
        return Ok(p);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Error::InvalidParameter(format!(
            "unknown preset {name:?}; bundled presets are {}",
            BUNDLED_PRESETS.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    ExperimentPreset::from_json(&text)
}

fn cmd_report(a: ReportArgs, command_line: Vec<String>) -> CmdResult {
    let preset = load_preset(&a.preset)?;
    let options = PresetOptions {
        force: a.force,
        threads: None,
        command_line,
    };
    let outcome = run_preset(&preset, &a.out, &options)?;
    print!("{}", cores::report::aggregate_csv(&outcome.aggregate)?);
    Ok(())
}

fn cmd_dump_2d(a: Dump2dArgs) -> CmdResult {
    let registry = ModelRegistry::open(&a.run)?;
    let step = a.step.unwrap_or(registry.steps());
    let checkpoint = registry.load_checkpoint(step)?;
    let fc = checkpoint
        .classifier
        .ok_or_else(|| Error::InvalidParameter(format!("step {step} has no fixed classifier to dump against")))?;
    let set = read_dataset(&a.data)?;
    let csv = emit_feature_dump_2d(&checkpoint.model, &fc, &set)?;
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let command_line: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            return fail("usage", message.trim_end(), 2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("CORES_LOG")
        .init();

    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a, command_line),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a, command_line),
        Command::Dump2d(a) => cmd_dump_2d(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            fail(e.kind(), &e.to_string(), if e.is_usage() { 2 } else { 1 })
        }
    }
}
