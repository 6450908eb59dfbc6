//! Pipeline configuration.
//!
//! One TOML file drives every command. Values are resolved in this order,
//! later wins:
//!
//! 1. built-in defaults,
//! 2. the file given with `--config`,
//! 3. `--set section.key=value` overrides, applied in command-line order,
//! 4. dedicated command flags such as `--seed`.
//!
//! Override values are parsed as TOML (`--set model.train.epochs=20`,
//! `--set imaging.metric="euclidean"`); anything that does not parse is taken
//! as a bare string. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use magloc_core::alignment::{DeepFitConfig, DEFAULT_ALIGNMENT_FRACTION, DEFAULT_EPS, DEFAULT_K};
use magloc_core::imaging::{ChannelLayout, ImagingConfig, Metric, WindowConfig, DEFAULT_BINS, DEFAULT_SIDE};
use magloc_core::ingest::{Projection, Source, DEFAULT_RATE_HZ};
use magloc_core::landmarks::{LandmarkConfig, DEFAULT_LINK_DISTANCE, DEFAULT_RESOLUTION};
use magloc_core::models::{ArchConfig, ModelKind, TrainConfig};
use magloc_core::synth::{CorridorScenario, LandmarkScenario, TwoRobotScenario};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::trials::Format;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ingest: IngestSection,
    pub window: WindowConfig,
    pub imaging: ImagingSection,
    pub model: ModelSection,
    pub landmarks: LandmarkSection,
    pub alignment: AlignmentSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub format: Format,
    pub rate: f64,
    /// `human`, or a robot name recorded in trial metadata.
    pub source: String,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self { format: Format::Canonical, rate: DEFAULT_RATE_HZ, source: "human".into() }
    }
}

impl IngestSection {
    pub fn source(&self) -> Source {
        if self.source == "human" {
            Source::Human
        } else {
            Source::Robot(self.source.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingSection {
    /// Channel count N: 1, 3, 9 or 12.
    pub layout: usize,
    pub side: usize,
    pub metric: Metric,
    /// MTF quantile bins Q.
    pub bins: usize,
    pub axes: [Projection; 3],
}

impl Default for ImagingSection {
    fn default() -> Self {
        Self {
            layout: ChannelLayout::Twelve.count(),
            side: DEFAULT_SIDE,
            metric: Metric::Canberra,
            bins: DEFAULT_BINS,
            axes: [Projection::X, Projection::Y, Projection::Z],
        }
    }
}

impl ImagingSection {
    pub fn to_core(&self) -> Result<ImagingConfig> {
        let layout = ChannelLayout::from_count(self.layout).map_err(|e| CliError::Config(e.to_string()))?;
        if self.side < 2 {
            return Err(CliError::Config(format!("imaging.side must be at least 2, got {}", self.side)));
        }
        if self.bins < 2 {
            return Err(CliError::Config(format!("imaging.bins must be at least 2, got {}", self.bins)));
        }
        Ok(ImagingConfig { side: self.side, metric: self.metric, bins: self.bins, layout, axes: self.axes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `classifier`, `fn_regressor` or `rnn_regressor`.
    pub kind: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Seed of the start-point noise at prediction time.
    pub eval_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: "rnn_regressor".into(), arch: ArchConfig::default(), train: TrainConfig::default(), eval_seed: 0 }
    }
}

impl ModelSection {
    pub fn kind(&self) -> Result<ModelKind> {
        ModelKind::parse(&self.kind).ok_or_else(|| {
            CliError::Config(format!("model.kind `{}` is not classifier, fn_regressor or rnn_regressor", self.kind))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkSection {
    pub resolution: f64,
    pub link_distance: f64,
    /// Selection threshold in µT; one standard deviation of the map when absent.
    pub threshold: Option<f64>,
}

impl Default for LandmarkSection {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, link_distance: DEFAULT_LINK_DISTANCE, threshold: None }
    }
}

impl LandmarkSection {
    pub fn to_core(&self) -> LandmarkConfig {
        LandmarkConfig { resolution: self.resolution, link_distance: self.link_distance, threshold: self.threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSection {
    pub k: usize,
    pub eps: f64,
    /// `none`, `linear`, `affine` or `deep`.
    pub kind: String,
    /// Share of the test robot's trials used for fitting when no common
    /// segment is given.
    pub fraction: f64,
    pub deep: DeepSection,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self { k: DEFAULT_K, eps: DEFAULT_EPS, kind: "linear".into(), fraction: DEFAULT_ALIGNMENT_FRACTION, deep: DeepSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for DeepSection {
    fn default() -> Self {
        let d = DeepFitConfig::default();
        Self {
            hidden: d.hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            max_lr: d.max_lr,
            step_size: d.step_size,
            momentum: d.momentum,
            seed: d.seed,
        }
    }
}

impl DeepSection {
    pub fn to_core(&self) -> DeepFitConfig {
        DeepFitConfig {
            hidden: self.hidden,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            max_lr: self.max_lr,
            step_size: self.step_size,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// `corridor`, `two_robot` or `landmark`.
    pub scenario: String,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Also write every corridor training trial driven backwards.
    pub reverse: bool,
    /// Replace the corridor markers with the channel-ablation set.
    pub ablation_markers: bool,
    pub corridor: CorridorScenario,
    pub two_robot: TwoRobotScenario,
    pub landmark: LandmarkScenario,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            scenario: "corridor".into(),
            seed: 1,
            train: 24,
            val: 4,
            test: 8,
            reverse: false,
            ablation_markers: false,
            corridor: CorridorScenario::default(),
            two_robot: TwoRobotScenario::default(),
            landmark: LandmarkScenario::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ingest.rate > 0.0) {
            return Err(CliError::Config(format!("ingest.rate must be positive, got {}", self.ingest.rate)));
        }
        if !(self.window.size > 0.0 && self.window.step > 0.0) {
            return Err(CliError::Config("window.size and window.step must be positive".into()));
        }
        self.imaging.to_core()?;
        self.model.kind()?;
        self.model.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.alignment.eps > 0.0) || self.alignment.k == 0 {
            return Err(CliError::Config("alignment.k and alignment.eps must be positive".into()));
        }
        if !(self.alignment.fraction > 0.0 && self.alignment.fraction < 1.0) {
            return Err(CliError::Config(format!("alignment.fraction must be in (0, 1), got {}", self.alignment.fraction)));
        }
        if !["none", "linear", "affine", "deep"].contains(&self.alignment.kind.as_str()) {
            return Err(CliError::Config(format!("alignment.kind `{}` is not none, linear, affine or deep", self.alignment.kind)));
        }
        if !["corridor", "two_robot", "landmark"].contains(&self.synth.scenario.as_str()) {
            return Err(CliError::Config(format!("synth.scenario `{}` is not corridor, two_robot or landmark", self.synth.scenario)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
