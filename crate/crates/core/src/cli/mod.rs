//! Command-line experiment runner. Every command resolves one
//! [`ExperimentConfig`], does its work, and writes a [`Manifest`] next to
//! its primary output.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::advtrain::{adversarial_train, balanced_subset, evaluate_robustness, Dataset, RobustnessTable};
use crate::error::{Error, Result};
use crate::evalmetrics::{coco_summary, human_consistency, ApSummary, ConsistencyReport, DecisionRecord, Detection, GroundTruth};
use crate::fewshot::{extract_features, run_episodes, train_fusion, CropSpec, EpisodeSpec, FusionConfig, FusionInputs, FusionModel};
use crate::image::RgbImage;
use crate::mpm::checkpoint::{load_model, save_model};
use crate::mpm::{build_mpm, strip_auxiliary, MpmConfig, MpmModel};
use crate::part_data::store::{read_json, write_json};
use crate::part_data::{
    compose_mask, density_histogram, validate_annotation, AnnotationRecord, AnnotationStore, DensityHistogram, PartVocabulary,
    Splits,
};
use crate::pseudolabel::label_with_model;
use crate::synthgen::{generate_dataset, split_dataset};

pub use config::{ExperimentConfig, Manifest, MANIFEST_SCHEMA_VERSION};
pub use plot::{PlotKind, PlotSummary, SweepPoint, SweepReport, SWEEP_SCHEMA_VERSION};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "partkit", version, about = "Part-supervised robust recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the command's main random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted overrides applied last, e.g. `train.epochs=5`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FewshotMode {
    /// Fusion weights frozen at zero: the whole-image encoder alone.
    Baseline,
    Fusion,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic part-annotated dataset into a store.
    Synth {
        /// TOML file holding the `synth` section's keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check every record of a store against the annotation rules.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Instance-density and class statistics of a store.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Adversarially train a classifier on the store's train split.
    Train {
        /// TOML file holding the `train` section's keys.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Drop the segmentation heads from a checkpoint.
    Strip {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clean and attacked accuracy on the store's test split.
    AttackEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated threat names; defaults to `eval.threats`.
        #[arg(long)]
        threats: Option<String>,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo part labels for unannotated images from a model's seg heads.
    PseudoLabel {
        #[arg(long)]
        model: PathBuf,
        /// Directory of `<image_id>.png` files.
        #[arg(long)]
        images: PathBuf,
        /// JSON object mapping image id to object id.
        #[arg(long)]
        labels: PathBuf,
        /// Vocabulary JSON; the model must predict its parts.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on base classes, then run episodes on the novel ones.
    Fewshot {
        #[arg(long, value_enum)]
        mode: FewshotMode,
        /// Episode shape such as `5w1s`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy gap and error consistency between model and human decisions.
    HumanConsistency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mask or box average precision.
    ApEval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a sweep or robustness report to PNG.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<PlotKindArg>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one model per `sweep` lambda.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// synth, train, strip, attack-eval and plot into one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-execute a manifest's command with its recorded configuration.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// New location for the primary output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKindArg {
    Lambda,
    Robustness,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Validate { .. } => "validate",
            Command::Stats { .. } => "stats",
            Command::Train { .. } => "train",
            Command::Strip { .. } => "strip",
            Command::AttackEval { .. } => "attack-eval",
            Command::PseudoLabel { .. } => "pseudo-label",
            Command::Fewshot { .. } => "fewshot",
            Command::HumanConsistency { .. } => "human-consistency",
            Command::ApEval { .. } => "ap-eval",
            Command::Plot { .. } => "plot",
            Command::Sweep { .. } => "sweep",
            Command::Pipeline { .. } => "pipeline",
            Command::Rerun { .. } => "rerun",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Synth { common, .. }
            | Command::Validate { common, .. }
            | Command::Stats { common, .. }
            | Command::Train { common, .. }
            | Command::Strip { common, .. }
            | Command::AttackEval { common, .. }
            | Command::PseudoLabel { common, .. }
            | Command::Fewshot { common, .. }
            | Command::HumanConsistency { common, .. }
            | Command::ApEval { common, .. }
            | Command::Plot { common, .. }
            | Command::Sweep { common, .. }
            | Command::Pipeline { common, .. } => Some(common),
            Command::Rerun { .. } => None,
        }
    }

    /// The flag naming the primary output and its value.
    fn primary_output(&self) -> Option<(&'static str, &Path)> {
        match self {
            Command::Synth { out, .. }
            | Command::Train { out, .. }
            | Command::Strip { out, .. }
            | Command::PseudoLabel { out, .. }
            | Command::Plot { out, .. }
            | Command::Pipeline { out, .. } => Some(("--out", out)),
            Command::Validate { report, .. } | Command::Stats { report, .. } => report.as_deref().map(|r| ("--report", r)),
            Command::AttackEval { report, .. }
            | Command::Fewshot { report, .. }
            | Command::HumanConsistency { report, .. }
            | Command::ApEval { report, .. }
            | Command::Sweep { report, .. } => Some(("--report", report)),
            Command::Rerun { .. } => None,
        }
    }

    /// Config key that `--seed` sets.
    fn seed_key(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth.seed",
            Command::AttackEval { .. } => "eval.seed",
            Command::Fewshot { .. } => "fewshot.recipe.seed",
            _ => "train.seed",
        }
    }

    fn directory_output(&self) -> bool {
        matches!(self, Command::Synth { .. } | Command::PseudoLabel { .. } | Command::Pipeline { .. })
    }
}

fn seed_of(cfg: &ExperimentConfig, key: &str) -> u64 {
    match key {
        "synth.seed" => cfg.synth.seed,
        "eval.seed" => cfg.eval.seed,
        "fewshot.recipe.seed" => cfg.fewshot.recipe.seed,
        _ => cfg.train.seed,
    }
}

/// Exit status for an error: configuration problems 2, everything else 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Spec(_) | Error::Ratio(_) => 2,
        _ => 3,
    }
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

/// `<dir>/manifest.json` for directory outputs, else `<file name>.manifest.json`.
/// The full name is kept so `r.json` and `r.png` get separate manifests.
pub fn manifest_path(output: &Path, directory: bool) -> PathBuf {
    if directory {
        return output.join("manifest.json");
    }
    let name = output.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    output.with_file_name(format!("{name}.manifest.json"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    write_json(path, value)
}

/// Resolves the config for `cmd`: file, section file, `--seed`, overrides.
pub fn resolve_config(cmd: &Command) -> Result<ExperimentConfig> {
    let common = cmd.common().ok_or_else(|| Error::Config("rerun has no config of its own".into()))?;
    let mut text = match &common.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let section = match cmd {
        Command::Synth { spec: Some(p), .. } => Some(("synth", p)),
        Command::Train { recipe: Some(p), .. } => Some(("train", p)),
        _ => None,
    };
    let mut overrides = Vec::new();
    if let Some((name, p)) = section {
        let table: toml::Table = toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let mut wrapped = toml::Table::new();
        wrapped.insert(name.to_string(), toml::Value::Table(table));
        let mut base: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, wrapped);
        text = toml::to_string(&base).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(s) = common.seed {
        overrides.push(format!("{}={s}", cmd.seed_key()));
    }
    overrides.extend(common.overrides.iter().cloned());
    ExperimentConfig::from_toml(Some(&text), &overrides)
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `argv` (without the program name) and runs it.
pub fn run_args(argv: &[String]) -> Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("partkit".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Config(e.to_string()))?;
    run(cli.command, argv)
}

/// Runs a parsed command; `argv` is recorded in the manifest.
pub fn run(cmd: Command, argv: &[String]) -> Result<()> {
    if let Command::Rerun { manifest, out } = &cmd {
        return rerun(manifest, out.as_deref());
    }
    let cfg = resolve_config(&cmd)?;
    execute(&cmd, argv, &cfg)
}

fn execute(cmd: &Command, argv: &[String], cfg: &ExperimentConfig) -> Result<()> {
    let outputs = dispatch(cmd, cfg)?;
    if let Some((_, primary)) = cmd.primary_output() {
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: cmd.name().into(),
            args: argv.to_vec(),
            config: cfg.clone(),
            config_hash: cfg.hash()?,
            seed: seed_of(cfg, cmd.seed_key()),
            code_version: env!("CARGO_PKG_VERSION").into(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let mp = manifest_path(primary, cmd.directory_output());
        ensure_parent(&mp)?;
        write_json(&mp, &manifest)?;
    }
    Ok(())
}

/// Runs the manifest's command again with its stored config, optionally
/// moving the primary output.
pub fn rerun(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let m: Manifest = read_json(manifest)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Schema(format!("manifest schema_version {}", m.schema_version)));
    }
    let mut args = m.args.clone();
    let cli = Cli::try_parse_from(std::iter::once("partkit".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Error::Config(format!("manifest args: {e}")))?;
    if let Some(new) = out {
        let (flag, old) = cli.command.primary_output().ok_or_else(|| Error::Config("command has no primary output".into()))?;
        let old = old.display().to_string();
        let pos = args.iter().position(|a| a == flag).filter(|i| args.get(i + 1) == Some(&old));
        match pos {
            Some(i) => args[i + 1] = new.display().to_string(),
            None => {
                let inline = format!("{flag}={old}");
                let i = args.iter().position(|a| *a == inline).ok_or_else(|| Error::Config(format!("{flag} not found in args")))?;
                args[i] = format!("{flag}={}", new.display());
            }
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("partkit".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Error::Config(format!("manifest args: {e}")))?;
    if m.config.hash()? != m.config_hash {
        return Err(Error::Data("manifest config does not match its hash".into()));
    }
    execute(&cli.command, &args, &m.config)
}

struct StoreData {
    vocab: PartVocabulary,
    records: Vec<AnnotationRecord>,
    images: Vec<RgbImage>,
    splits: Option<Splits>,
}

fn load_store(root: &Path, with_images: bool) -> Result<StoreData> {
    let store = AnnotationStore::open(root);
    let vocab = store.read_vocab()?;
    let records = store.read_records()?;
    let images = if with_images { store.read_images(&records)? } else { Vec::new() };
    let splits = if root.join(crate::part_data::store::SPLITS_FILE).exists() { Some(store.read_splits()?) } else { None };
    Ok(StoreData { vocab, records, images, splits })
}

impl StoreData {
    fn split_indices(&self, ids: Option<&[String]>) -> Result<Vec<usize>> {
        let Some(ids) = ids else { return Ok((0..self.records.len()).collect()) };
        let index = AnnotationStore::index(&self.records);
        ids.iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("split id {id} has no record"))))
            .collect()
    }

    fn train_indices(&self) -> Result<Vec<usize>> {
        self.split_indices(self.splits.as_ref().map(|s| s.train.as_slice()))
    }

    fn test_indices(&self) -> Result<Vec<usize>> {
        self.split_indices(self.splits.as_ref().map(|s| s.test.as_slice()))
    }

    fn dataset(&self, idx: &[usize], with_masks: bool) -> Result<Dataset> {
        let images: Vec<RgbImage> = idx.iter().map(|&i| self.images[i].clone()).collect();
        let labels = idx.iter().map(|&i| self.records[i].object_id).collect();
        let masks = if with_masks {
            Some(idx.iter().map(|&i| compose_mask(&self.records[i], &self.vocab)).collect::<Result<_>>()?)
        } else {
            None
        };
        Dataset::from_images(&images, labels, masks)
    }
}

/// Untrained model for `cfg` sized to the vocabulary.
pub fn initial_model(cfg: &ExperimentConfig, vocab: &PartVocabulary, lambda: f64) -> Result<MpmModel> {
    let mut spec = cfg.model.backbone.clone();
    spec.num_classes = vocab.num_objects();
    if cfg.model.vanilla {
        return MpmModel::vanilla(&spec, cfg.train.seed);
    }
    let mpm = MpmConfig { seg_classes: vocab.num_parts() + 1, lambda, ..cfg.model.mpm.clone() };
    build_mpm(&spec, &mpm, cfg.train.seed)
}

fn train_model(cfg: &ExperimentConfig, data: &StoreData, lambda: f64, log: Option<&mut dyn std::io::Write>) -> Result<MpmModel> {
    let model = initial_model(cfg, &data.vocab, lambda)?;
    let needs_masks = model.mpm.as_ref().is_some_and(|m| m.lambda > 0.0);
    let train = data.dataset(&data.train_indices()?, needs_masks)?;
    adversarial_train(model, &train, &cfg.train, log).map(|(m, _)| m)
}

fn robustness(cfg: &ExperimentConfig, model: &MpmModel, data: &StoreData, threats: &[String]) -> Result<RobustnessTable> {
    let mut idx = data.test_indices()?;
    if cfg.eval.per_class > 0 {
        let labels: Vec<usize> = idx.iter().map(|&i| data.records[i].object_id).collect();
        idx = balanced_subset(&labels, cfg.eval.per_class, cfg.eval.seed).into_iter().map(|j| idx[j]).collect();
    }
    let test = data.dataset(&idx, false)?;
    let threats = config::EvalSection::resolve_threats(threats, model.spec.image_size)?;
    evaluate_robustness(model, &test, &threats, &cfg.eval.eval_config())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordViolation {
    pub image_id: String,
    pub rule: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub schema_version: u32,
    pub records: usize,
    pub passed: bool,
    pub violations: Vec<RecordViolation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub records: usize,
    pub instances: usize,
    pub records_per_object: BTreeMap<usize, usize>,
    pub records_per_source: BTreeMap<String, usize>,
    pub density: DensityHistogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    pub schema_version: u32,
    pub mode: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub alphas: Vec<f64>,
    pub base_classes: usize,
    pub novel_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub schema_version: u32,
    #[serde(flatten)]
    pub summary: ApSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: ConsistencyReport,
}

/// Reads a JSON array or JSON lines.
fn read_list<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<Vec<T>> {
    let text = read_text(p)?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", p.display(), n + 1))))
        .collect()
}

fn synth_into(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let d = generate_dataset(&cfg.synth)?;
    let store = AnnotationStore::open(out);
    store.write_vocab(&d.vocab)?;
    store.write_records(&d.records)?;
    for (r, im) in d.records.iter().zip(&d.images) {
        store.write_image(&r.image_id, im)?;
    }
    let s = split_dataset(&d.records, cfg.split.ratios, cfg.split.seed)?;
    let ids = |v: &[usize]| v.iter().map(|&i| d.records[i].image_id.clone()).collect();
    store.write_splits(&Splits { train: ids(&s.train), val: ids(&s.val), test: ids(&s.test) })?;
    Ok(vec![out.to_path_buf()])
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Synth { out, .. } => synth_into(cfg, out),
        Command::Validate { data, report, .. } => {
            let d = load_store(data, false)?;
            let mut violations = Vec::new();
            for r in &d.records {
                for v in validate_annotation(r, &d.vocab).violations {
                    violations.push(RecordViolation { image_id: r.image_id.clone(), rule: v.rule, detail: v.detail });
                }
            }
            let rep = ValidateReport { schema_version: REPORT_SCHEMA_VERSION, records: d.records.len(), passed: violations.is_empty(), violations };
            emit(report.as_deref(), &rep)?;
            if !rep.passed {
                return Err(Error::Data(format!("{} annotation rule violations", rep.violations.len())));
            }
            Ok(report.iter().cloned().collect())
        }
        Command::Stats { data, report, .. } => {
            let d = load_store(data, false)?;
            let mut per_object = BTreeMap::new();
            let mut per_source = BTreeMap::new();
            for r in &d.records {
                *per_object.entry(r.object_id).or_insert(0) += 1;
                let src = serde_json::to_value(r.source)?.as_str().unwrap_or("unknown").to_string();
                *per_source.entry(src).or_insert(0) += 1;
            }
            let rep = StatsReport {
                schema_version: REPORT_SCHEMA_VERSION,
                records: d.records.len(),
                instances: d.records.iter().map(|r| r.instances.len()).sum(),
                records_per_object: per_object,
                records_per_source: per_source,
                density: density_histogram(&d.records)?,
            };
            emit(report.as_deref(), &rep)?;
            Ok(report.iter().cloned().collect())
        }
        Command::Train { data, out, .. } => {
            let d = load_store(data, true)?;
            let metrics = sibling(out, "metrics.jsonl");
            ensure_parent(out)?;
            let mut log = Vec::new();
            let model = train_model(cfg, &d, cfg.model.mpm.lambda, Some(&mut log))?;
            fs::write(&metrics, log).map_err(|e| Error::io(&metrics, e))?;
            save_model(&model, out)?;
            Ok(vec![out.clone(), metrics])
        }
        Command::Strip { ckpt, out, .. } => {
            let m = load_model(ckpt)?;
            ensure_parent(out)?;
            save_model(&strip_auxiliary(&m), out)?;
            Ok(vec![out.clone()])
        }
        Command::AttackEval { ckpt, data, threats, report, .. } => {
            let model = load_model(ckpt)?;
            let d = load_store(data, true)?;
            let names: Vec<String> = match threats {
                Some(t) => t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                None => cfg.eval.threats.clone(),
            };
            let table = robustness(cfg, &model, &d, &names)?;
            write_report(report, &table)?;
            Ok(vec![report.clone()])
        }
        Command::PseudoLabel { model, images, labels, vocab, out, .. } => {
            let model = load_model(model)?;
            let vocab: PartVocabulary = read_json(vocab)?;
            let classes: BTreeMap<String, usize> = read_json(labels)?;
            let mut files: Vec<PathBuf> = fs::read_dir(images)
                .map_err(|e| Error::io(images, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            let mut batch = Vec::with_capacity(files.len());
            for f in &files {
                let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let c = *classes.get(&id).ok_or_else(|| Error::Data(format!("no object id for image {id}")))?;
                batch.push((id, RgbImage::load_png(f)?, c));
            }
            if batch.is_empty() {
                return Err(Error::EmptyInput(format!("no png images in {}", images.display())));
            }
            let records = label_with_model(&model, &batch, &vocab, &cfg.pseudo.labeling, cfg.pseudo.min_area, cfg.pseudo.batch_size)?;
            let store = AnnotationStore::open(out);
            store.write_vocab(&vocab)?;
            store.write_records(&records)?;
            for (id, im, _) in &batch {
                store.write_image(id, im)?;
            }
            Ok(vec![out.clone()])
        }
        Command::Fewshot { mode, spec, data, report, .. } => {
            let rep = fewshot(cfg, *mode, spec, data)?;
            write_report(report, &rep)?;
            Ok(vec![report.clone()])
        }
        Command::HumanConsistency { model, human, report, .. } => {
            let m: Vec<DecisionRecord> = read_list(model)?;
            let h: Vec<DecisionRecord> = read_list(human)?;
            let r = human_consistency(&m, &h, cfg.consistency)?;
            write_report(report, &ConsistencyFile { schema_version: REPORT_SCHEMA_VERSION, report: r })?;
            Ok(vec![report.clone()])
        }
        Command::ApEval { detections, ground_truth, report, .. } => {
            let dets: Vec<Detection> = read_list(detections)?;
            let gts: Vec<GroundTruth> = read_list(ground_truth)?;
            let s = coco_summary(&dets, &gts)?;
            write_report(report, &ApReport { schema_version: REPORT_SCHEMA_VERSION, summary: s })?;
            Ok(vec![report.clone()])
        }
        Command::Plot { report, kind, out, .. } => {
            let kind = kind.map(|k| match k {
                PlotKindArg::Lambda => PlotKind::Lambda,
                PlotKindArg::Robustness => PlotKind::Robustness,
            });
            ensure_parent(out)?;
            plot::render_report(&read_text(report)?, kind, out)?;
            Ok(vec![out.clone()])
        }
        Command::Sweep { data, report, .. } => {
            let rep = sweep(cfg, data)?;
            write_report(report, &rep)?;
            Ok(vec![report.clone()])
        }
        Command::Pipeline { out, .. } => pipeline(cfg, out),
        Command::Rerun { .. } => unreachable!("handled by run"),
    }
}

/// Pretty JSON to `path`, or to stdout without one.
fn emit<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_report(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Clean and robust accuracy for each lambda in `cfg.sweep`; robust
/// accuracy is measured under the first configured threat.
pub fn sweep(cfg: &ExperimentConfig, data: &Path) -> Result<SweepReport> {
    let d = load_store(data, true)?;
    let threat = cfg.eval.threats.first().cloned().ok_or_else(|| Error::Config("eval.threats is empty".into()))?;
    let mut points = Vec::new();
    for &lambda in &cfg.sweep {
        let model = train_model(cfg, &d, lambda, None)?;
        let t = robustness(cfg, &model, &d, std::slice::from_ref(&threat))?;
        points.push(SweepPoint { lambda, clean: t.clean, robust: t.attacks[&threat] });
    }
    Ok(SweepReport { schema_version: SWEEP_SCHEMA_VERSION, threat, points })
}

pub fn fewshot(cfg: &ExperimentConfig, mode: FewshotMode, spec: &str, data: &Path) -> Result<FewshotReport> {
    let f = &cfg.fewshot;
    let episode = EpisodeSpec { query_per_class: f.query_per_class, episodes: f.episodes, seed: f.episode_seed, ..EpisodeSpec::parse_short(spec)? };
    let d = load_store(data, true)?;
    let (base, novel): (Vec<usize>, Vec<usize>) = (0..d.records.len()).partition(|&i| d.records[i].object_id < f.base_classes);
    if base.is_empty() || novel.is_empty() {
        return Err(Error::Data(format!("base_classes {} leaves an empty base or novel set", f.base_classes)));
    }
    let crops = CropSpec { parts: f.model.parts, ..f.crops.clone() };
    let inputs = |idx: &[usize]| {
        let ims: Vec<RgbImage> = idx.iter().map(|&i| d.images[i].clone()).collect();
        let recs: Vec<AnnotationRecord> = idx.iter().map(|&i| d.records[i].clone()).collect();
        let labels = idx.iter().map(|&i| d.records[i].object_id).collect();
        let built = FusionInputs::build(&ims, &recs, labels, f.model.input_size, &crops)?;
        Ok::<_, Error>(if f.model.parts == 0 { built.without_crops() } else { built })
    };
    let model_cfg = FusionConfig { num_classes: f.base_classes, ..f.model.clone() };
    let model = FusionModel::new(model_cfg, f.recipe.seed)?;
    let recipe = crate::fewshot::FewshotRecipe { freeze_alpha: mode == FewshotMode::Baseline, ..f.recipe.clone() };
    let (model, _) = train_fusion(model, &inputs(&base)?, &recipe, None)?;
    let test = inputs(&novel)?;
    let feats = extract_features(&model, &test, 64)?;
    let r = run_episodes(&feats, &test.labels, &episode)?;
    let novel_classes = novel.iter().map(|&i| d.records[i].object_id).collect::<std::collections::BTreeSet<_>>().len();
    Ok(FewshotReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: format!("{mode:?}").to_lowercase(),
        n_way: episode.n_way,
        k_shot: episode.k_shot,
        episodes: episode.episodes,
        mean_accuracy: r.mean_accuracy,
        ci95: r.ci95,
        alphas: model.alphas(),
        base_classes: f.base_classes,
        novel_classes,
    })
}

/// `data/`, `model.json`, `model.stripped.json`, `robustness.json` and
/// `robustness.png` under `out`.
pub fn pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = out.join("data");
    synth_into(cfg, &data)?;
    let d = load_store(&data, true)?;
    let mut log = Vec::new();
    let model = train_model(cfg, &d, cfg.model.mpm.lambda, Some(&mut log))?;
    let (ckpt, stripped, metrics) = (out.join("model.json"), out.join("model.stripped.json"), out.join("model.metrics.jsonl"));
    fs::write(&metrics, log).map_err(|e| Error::io(&metrics, e))?;
    save_model(&model, &ckpt)?;
    save_model(&strip_auxiliary(&load_model(&ckpt)?), &stripped)?;
    let table = robustness(cfg, &load_model(&stripped)?, &d, &cfg.eval.threats)?;
    let report = out.join("robustness.json");
    write_json(&report, &table)?;
    let png = out.join("robustness.png");
    plot::render_report(&read_text(&report)?, Some(PlotKind::Robustness), &png)?;
    Ok(vec![data, ckpt, metrics, stripped, report, png])
}
