//! Model and transform containers, prediction and metric files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use magloc_core::alignment::AlignmentTransform;
use magloc_core::landmarks::{Landmark, MagneticMap, Polarity};
use magloc_core::models::{evaluate, Model, TrainReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const MODEL_FORMAT: &str = "magloc-model";
const TRANSFORM_FORMAT: &str = "magloc-alignment";

#[derive(Serialize, Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    /// Imaging settings the model was trained on (stack metadata).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stacks: Option<serde_json::Value>,
    payload: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line() as u64, message: e.to_string() })
}

fn read_container<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Container<T>> {
    let head: Container<serde_json::Value> = read_json(path)?;
    if head.format != format || head.version != 1 {
        return Err(CliError::Compatibility(format!(
            "{} is `{}` version {}, expected `{format}` version 1",
            path.display(),
            head.format,
            head.version
        )));
    }
    let payload = serde_json::from_value(head.payload)
        .map_err(|e| CliError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })?;
    Ok(Container { format: head.format, version: head.version, stacks: head.stacks, payload })
}

pub fn write_model(path: &Path, model: &Model, stacks: &crate::stacks::StackMeta) -> Result<()> {
    let stacks = serde_json::to_value(stacks).map_err(|e| CliError::Data(e.to_string()))?;
    write_json(path, &Container { format: MODEL_FORMAT.into(), version: 1, stacks: Some(stacks), payload: model })
}

/// The model and the stack metadata it was trained on.
pub fn read_model(path: &Path) -> Result<(Model, Option<crate::stacks::StackMeta>)> {
    let c: Container<Model> = read_container(path, MODEL_FORMAT)?;
    let meta = match c.stacks {
        Some(v) => Some(
            serde_json::from_value(v)
                .map_err(|e| CliError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })?,
        ),
        None => None,
    };
    Ok((c.payload, meta))
}

pub fn write_transform(path: &Path, g: &AlignmentTransform) -> Result<()> {
    write_json(path, &Container { format: TRANSFORM_FORMAT.into(), version: 1, stacks: None, payload: g })
}

pub fn read_transform(path: &Path) -> Result<AlignmentTransform> {
    Ok(read_container(path, TRANSFORM_FORMAT)?.payload)
}

pub fn write_training_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let io = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(["epoch", "loss"]).map_err(io)?;
    for (i, l) in report.epoch_loss.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub trial_id: String,
    pub window: usize,
    pub t: f64,
    pub x_pred: f64,
    pub y_pred: f64,
    pub x_gt: Option<f64>,
    pub y_gt: Option<f64>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| CliError::Parse { path: path.to_path_buf(), line: i as u64 + 2, message: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetric {
    pub trial_id: String,
    pub mean_error_m: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_error_m: f64,
    pub windows: usize,
    pub per_trial: Vec<TrialMetric>,
}

/// Mean localization error over all windows, and per trial in id order.
pub fn metrics(rows: &[PredictionRow]) -> Result<Metrics> {
    let mut est = Vec::with_capacity(rows.len());
    let mut gt = Vec::with_capacity(rows.len());
    let mut groups: BTreeMap<&str, (Vec<[f64; 2]>, Vec<[f64; 2]>)> = BTreeMap::new();
    for r in rows {
        let (Some(x), Some(y)) = (r.x_gt, r.y_gt) else {
            return Err(CliError::Data(format!("prediction for `{}` window {} has no ground truth", r.trial_id, r.window)));
        };
        est.push([r.x_pred, r.y_pred]);
        gt.push([x, y]);
        let g = groups.entry(&r.trial_id).or_default();
        g.0.push([r.x_pred, r.y_pred]);
        g.1.push([x, y]);
    }
    let numerical = |e: magloc_core::Error| CliError::Data(e.to_string());
    let mean = evaluate(&est, &gt).map_err(numerical)?;
    let per_trial = groups
        .into_iter()
        .map(|(id, (e, g))| {
            Ok(TrialMetric { trial_id: id.to_string(), mean_error_m: evaluate(&e, &g).map_err(numerical)?, windows: e.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics { mean_error_m: mean, windows: est.len(), per_trial })
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    write_json(path, m)
}

pub fn write_map(path: &Path, map: &MagneticMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let io = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(["cell_x", "cell_y", "x", "y", "mean", "count"]).map_err(io)?;
    for c in map.cells() {
        w.write_record([
            c.ix.to_string(),
            c.iy.to_string(),
            c.center[0].to_string(),
            c.center[1].to_string(),
            c.mean.to_string(),
            c.count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct LandmarkRow {
    id: usize,
    x: f64,
    y: f64,
    intensity: f64,
    polarity: Polarity,
}

pub fn write_landmarks(path: &Path, landmarks: &[Landmark]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    for l in landmarks {
        w.serialize(LandmarkRow { id: l.id, x: l.pos[0], y: l.pos[1], intensity: l.intensity, polarity: l.polarity })
            .map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads landmarks; ids must run 0, 1, 2, ... in order.
pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LandmarkRow>().enumerate() {
        let line = i as u64 + 2;
        let r = row.map_err(|e| CliError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        if r.id != i {
            return Err(CliError::Parse { path: path.to_path_buf(), line, message: format!("field `id` is {}, expected {i}", r.id) });
        }
        out.push(Landmark { id: r.id, pos: [r.x, r.y], intensity: r.intensity, polarity: r.polarity });
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{} lists no landmarks", path.display())));
    }
    Ok(out)
}

/// One row per transform kind: no alignment, then the fitted ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub kind: String,
    pub rms_fit: f64,
    pub rms_holdout: Option<f64>,
    pub matrix: Option<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub chosen: String,
    pub fit_pairs: usize,
    pub holdout_pairs: usize,
    pub rms_before: f64,
    pub rms_after: f64,
    pub rows: Vec<AlignmentRow>,
}

pub fn write_alignment_report(path: &Path, r: &AlignmentSummary) -> Result<()> {
    write_json(path, r)
}
