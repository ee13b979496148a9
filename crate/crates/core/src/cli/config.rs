//! Experiment configuration: one TOML document with a section per stage.
//!
//! Loading starts from the serialized defaults, deep-merges the file on top
//! and then applies dotted `key=value` overrides, so every key is always
//! present and unknown keys fail deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advtrain::{standard_threats, EvalConfig, Threat, TrainRecipe};
use crate::error::{Error, Result};
use crate::evalmetrics::AccuracyAveraging;
use crate::fewshot::{CropSpec, FewshotRecipe, FusionConfig};
use crate::mpm::{BackboneSpec, MpmConfig};
use crate::pseudolabel::PseudoLabelConfig;
use crate::synthgen::SynthSpec;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train, val and test shares per class.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: [0.5, 0.0, 0.5], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `num_classes` is replaced by the vocabulary's object count.
    pub backbone: BackboneSpec,
    /// `seg_classes` is replaced by the vocabulary's part count plus one.
    pub mpm: MpmConfig,
    /// Build without bypass heads.
    pub vanilla: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneSpec::conv(10, [8, 16, 32, 64]), mpm: MpmConfig::default(), vanilla: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Names from the standard threat list: linf, linf2, l1, l2.
    pub threats: Vec<String>,
    pub steps: usize,
    pub random_start: bool,
    pub batch_size: usize,
    pub seed: u64,
    /// Class-balanced cap on evaluated test samples per class; 0 keeps all.
    pub per_class: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            threats: vec!["linf".into(), "linf2".into(), "l1".into(), "l2".into()],
            steps: e.steps,
            random_start: e.random_start,
            batch_size: e.batch_size,
            seed: e.seed,
            per_class: 0,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { steps: self.steps, random_start: self.random_start, batch_size: self.batch_size, seed: self.seed }
    }

    /// Resolves threat names against the standard list for `image_size`.
    pub fn resolve_threats(names: &[String], image_size: usize) -> Result<Vec<Threat>> {
        let all = standard_threats(image_size);
        names
            .iter()
            .map(|n| {
                all.iter().find(|t| &t.name == n).cloned().ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|t| t.name.as_str()).collect();
                    Error::Config(format!("unknown threat `{n}`, expected one of {known:?}"))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    #[serde(flatten)]
    pub labeling: PseudoLabelConfig,
    /// Connected regions smaller than this many pixels are dropped.
    pub min_area: usize,
    pub batch_size: usize,
}

impl Default for PseudoSection {
    fn default() -> Self {
        Self { labeling: PseudoLabelConfig::default(), min_area: 4, batch_size: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotSection {
    /// Objects with id below this train the encoder; the rest form episodes.
    pub base_classes: usize,
    pub model: FusionConfig,
    pub recipe: FewshotRecipe,
    pub crops: CropSpec,
    pub query_per_class: usize,
    pub episodes: usize,
    pub episode_seed: u64,
}

impl Default for FewshotSection {
    fn default() -> Self {
        Self {
            base_classes: 12,
            model: FusionConfig::default(),
            recipe: FewshotRecipe::default(),
            crops: CropSpec::default(),
            query_per_class: 15,
            episodes: 600,
            episode_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainRecipe,
    pub eval: EvalSection,
    pub pseudo: PseudoSection,
    pub fewshot: FewshotSection,
    pub consistency: AccuracyAveraging,
    /// Lambda values of the `sweep` command.
    pub sweep: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainRecipe::default(),
            eval: EvalSection::default(),
            pseudo: PseudoSection::default(),
            fewshot: FewshotSection::default(),
            consistency: AccuracyAveraging::default(),
            sweep: vec![0.0, 0.5, 1.0, 2.0],
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a table")))?;
        node = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then `text` (TOML), then `overrides` in order.
    pub fn from_toml(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = text {
            let file: toml::Value = toml::from_str(t).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut root, file);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e))).transpose()?;
        Self::from_toml(text.as_deref(), overrides)
    }

    /// Every section is checked up front, whichever command runs.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) | Error::Spec(m) => Error::Config(m),
            other => other,
        };
        self.synth.validate().map_err(cfg)?;
        self.model.backbone.validate().map_err(cfg)?;
        self.model.mpm.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.pseudo.labeling.validate().map_err(cfg)?;
        self.fewshot.model.validate().map_err(cfg)?;
        EvalSection::resolve_threats(&self.eval.threats, self.model.backbone.image_size)?;
        if self.eval.steps == 0 || self.eval.batch_size == 0 || self.pseudo.batch_size == 0 {
            return Err(Error::Config("eval steps and batch sizes must be positive".into()));
        }
        if self.model.backbone.image_size != self.synth.image_size {
            return Err(Error::Config(format!(
                "model image_size {} differs from synth image_size {}",
                self.model.backbone.image_size, self.synth.image_size
            )));
        }
        if self.sweep.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("sweep lambdas must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Written beside every command's outputs. Holds enough to rerun the
/// command: its arguments and the fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub outputs: Vec<String>,
}
