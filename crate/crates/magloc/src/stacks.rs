//! On-disk image stacks.
//!
//! A stack directory holds
//!
//! * `stacks.json`: the imaging settings the stacks were produced with,
//! * `manifest.csv`: one row per window
//!   (`trial_id, window, t_start, t_end, anchor_x, anchor_y, channels, side, file`),
//!   anchors empty for trials without ground truth,
//! * `<trial_id>.f64`: the trial's windows back to back, each
//!   `channels x side x side` little-endian `f64` in channel-major order.

use std::fs;
use std::path::{Path, PathBuf};

use magloc_core::imaging::{ImagingConfig, Metric, TrialStacks, WindowConfig, WindowInfo};
use magloc_core::ingest::Projection;
use magloc_core::models::{stack_tensor, SequenceData};
use magloc_core::neuralnet::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const META_FILE: &str = "stacks.json";
pub const MANIFEST_FILE: &str = "manifest.csv";
const FORMAT: &str = "magloc-stacks";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub format: String,
    pub version: u32,
    pub layout: usize,
    pub side: usize,
    pub metric: Metric,
    pub bins: usize,
    pub axes: [Projection; 3],
    pub window: WindowConfig,
    pub rate: f64,
    /// Channel tags in stacking order, e.g. `rp_x`.
    pub channels: Vec<String>,
}

impl StackMeta {
    pub fn new(cfg: &ImagingConfig, window: WindowConfig, rate: f64) -> Self {
        let channels = cfg
            .layout
            .channels()
            .iter()
            .map(|&(kind, axis)| format!("{}_{}", kind.name(), cfg.axes[axis].name()))
            .collect();
        Self {
            format: FORMAT.into(),
            version: 1,
            layout: cfg.layout.count(),
            side: cfg.side,
            metric: cfg.metric,
            bins: cfg.bins,
            axes: cfg.axes,
            window,
            rate,
            channels,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    trial_id: String,
    window: usize,
    t_start: f64,
    t_end: f64,
    anchor_x: Option<f64>,
    anchor_y: Option<f64>,
    channels: usize,
    side: usize,
    file: String,
}

/// Windows of one trial read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTrial {
    pub id: String,
    pub windows: Vec<WindowInfo>,
    pub inputs: Vec<Tensor>,
}

impl StackedTrial {
    pub fn anchors(&self) -> Option<Vec<[f64; 2]>> {
        self.windows.iter().map(|w| w.anchor).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.t_end).collect()
    }

    /// Training view; fails when any window lacks ground truth.
    pub fn sequence(&self) -> Result<SequenceData> {
        let positions = self
            .anchors()
            .ok_or_else(|| CliError::Data(format!("trial `{}` has windows without ground truth", self.id)))?;
        Ok(SequenceData { id: self.id.clone(), inputs: self.inputs.clone(), positions, times: self.times() })
    }
}

fn data_file(id: &str) -> String {
    format!("{id}.f64")
}

pub fn write_stacks(dir: &Path, meta: &StackMeta, trials: &[TrialStacks]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(meta).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(|e| CliError::io(&meta_path, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::io(&manifest, e.into()))?;
    for trial in trials {
        let file = data_file(&trial.trial_id);
        let mut bytes = Vec::new();
        for (k, (info, stack)) in trial.windows.iter().zip(&trial.stacks).enumerate() {
            for v in stack.to_flat() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.serialize(ManifestRow {
                trial_id: trial.trial_id.clone(),
                window: k,
                t_start: info.t_start,
                t_end: info.t_end,
                anchor_x: info.anchor.map(|a| a[0]),
                anchor_y: info.anchor.map(|a| a[1]),
                channels: stack.channels.len(),
                side: stack.side,
                file: file.clone(),
            })
            .map_err(|e| CliError::io(&manifest, e.into()))?;
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))
}

pub fn read_meta(dir: &Path) -> Result<StackMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let meta: StackMeta =
        serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.clone(), line: e.line() as u64, message: e.to_string() })?;
    if meta.format != FORMAT || meta.version != 1 {
        return Err(CliError::Compatibility(format!("{} is not a version 1 stack directory", dir.display())));
    }
    Ok(meta)
}

/// Reads every trial of a stack directory, in manifest order.
pub fn read_stacks(dir: &Path) -> Result<(StackMeta, Vec<StackedTrial>)> {
    let meta = read_meta(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| CliError::io(&manifest, e.into()))?;
    let mut trials: Vec<(StackedTrial, PathBuf)> = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| CliError::Parse { path: manifest.clone(), line: i as u64 + 2, message: e.to_string() })?;
        if row.channels != meta.layout || row.side != meta.side {
            return Err(CliError::Compatibility(format!(
                "manifest row {} has {}x{}px stacks, {} declares {}x{}px",
                i + 2,
                row.channels,
                row.side,
                META_FILE,
                meta.layout,
                meta.side
            )));
        }
        if trials.last().is_none_or(|(t, _)| t.id != row.trial_id) {
            trials.push((StackedTrial { id: row.trial_id.clone(), windows: vec![], inputs: vec![] }, dir.join(&row.file)));
        }
        let anchor = match (row.anchor_x, row.anchor_y) {
            (Some(x), Some(y)) => Some([x, y]),
            _ => None,
        };
        if let Some((t, _)) = trials.last_mut() {
            t.windows.push(WindowInfo { t_start: row.t_start, t_end: row.t_end, anchor });
        }
    }
    let per_window = meta.layout * meta.side * meta.side;
    let mut out = Vec::with_capacity(trials.len());
    for (mut trial, path) in trials {
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if bytes.len() != trial.windows.len() * per_window * 8 {
            return Err(CliError::Data(format!(
                "{} holds {} bytes, expected {} windows of {} values",
                path.display(),
                bytes.len(),
                trial.windows.len(),
                per_window
            )));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        trial.inputs = values
            .chunks_exact(per_window)
            .map(|c| Tensor { shape: vec![meta.layout, meta.side, meta.side], data: c.to_vec() })
            .collect();
        out.push(trial);
    }
    Ok((meta, out))
}

/// In-memory conversion used when stacks never touch the disk.
pub fn stacked(trial: &TrialStacks) -> StackedTrial {
    StackedTrial {
        id: trial.trial_id.clone(),
        windows: trial.windows.clone(),
        inputs: trial.stacks.iter().map(stack_tensor).collect(),
    }
}
