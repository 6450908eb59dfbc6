//! Trial file formats.
//!
//! Canonical CSV, one trial per file, header row required:
//!
//! ```text
//! t,mx,my,mz,yaw,pitch,roll[,px,py]
//! ```
//!
//! Times in seconds, field in µT in the phone frame, angles in radians, and
//! optional ground truth in meters. The orientation columns rotate the
//! reading into the global frame; trials that are already global carry zeros.
//!
//! MagPIE and IPIN GetSensorData logs are read through column mappings, see
//! [`Format`].

use std::fs;
use std::path::{Path, PathBuf};

use magloc_core::ingest::{
    synchronize, Frame, MagSample, Orientation, OrientationSample, OrientationSource, PositionSample, RawStreams,
    Source, Trial,
};
use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};

/// Input log layout.
///
/// * `canonical`: the schema above.
/// * `magpie`: comma-separated with a header; column names are matched
///   case-insensitively against these aliases, other columns are ignored:
///   time `timestamp | time | t`; field `mag_x | magx | magn_x | mx` (same
///   for y, z); orientation either `yaw, pitch, roll` in radians (recorded as
///   device angles) or `quat_w, quat_x, quat_y, quat_z` (recorded as
///   reconstructed); ground truth `pos_x | posx | gt_x | x` (same for y).
/// * `ipin`: GetSensorData text logs, `;`-separated, `%` comments. `MAGN`
///   lines give `AppTimestamp;SensorTimestamp;Mag_X;Mag_Y;Mag_Z;Accuracy`,
///   `AHRS` lines `AppTimestamp;SensorTimestamp;PitchX;RollY;YawZ;...` in
///   degrees, `POSI` lines `Timestamp;Counter;Latitude;Longitude;Floor;Building`.
///   Latitude and longitude are projected to meters east and north of the
///   first `POSI` fix. Other line tags are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Canonical,
    Magpie,
    Ipin,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Canonical | Format::Magpie => "csv",
            Format::Ipin => "txt",
        }
    }
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn empty(path: &Path) -> CliError {
    CliError::Core {
        context: path.display().to_string(),
        source: magloc_core::Error::EmptyTrial(trial_id(path)),
    }
}

pub fn trial_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Column lookup over a CSV header.
struct Columns {
    names: Vec<String>,
}

impl Columns {
    fn find(&self, aliases: &[&str]) -> Option<usize> {
        aliases.iter().find_map(|a| self.names.iter().position(|n| n == a))
    }
}

fn field(record: &csv::StringRecord, idx: usize, name: &str, path: &Path, line: u64) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_error(path, line, format!("field `{name}` is not a number: `{raw}`")))
}

fn csv_reader(path: &Path) -> Result<(csv::Reader<fs::File>, Columns)> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let names = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    Ok((rdr, Columns { names }))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn read_canonical(path: &Path) -> Result<RawStreams> {
    let (mut rdr, cols) = csv_reader(path)?;
    let required = ["t", "mx", "my", "mz", "yaw", "pitch", "roll"];
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = cols.find(&[name]).ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))?;
    }
    let pos = match (cols.find(&["px"]), cols.find(&["py"])) {
        (Some(x), Some(y)) => Some((x, y)),
        (None, None) => None,
        _ => return Err(parse_error(path, 1, "columns `px` and `py` must appear together")),
    };
    let mut mag = Vec::new();
    let mut orient = Vec::new();
    let mut positions = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_error(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = line_of(&record);
        let mut v = [0.0; 7];
        for (k, name) in required.iter().enumerate() {
            v[k] = field(&record, idx[k], name, path, line)?;
        }
        mag.push(MagSample { t: v[0], m: [v[1], v[2], v[3]] });
        orient.push(OrientationSample { t: v[0], angles: Orientation::new(v[4], v[5], v[6]) });
        if let Some((x, y)) = pos {
            positions.push(PositionSample { t: v[0], pos: [field(&record, x, "px", path, line)?, field(&record, y, "py", path, line)?] });
        }
    }
    if mag.is_empty() {
        return Err(empty(path));
    }
    Ok(RawStreams {
        magnetometer: mag,
        frame: Frame::Local,
        orientation: Some(orient),
        orientation_source: Some(OrientationSource::Device),
        positions: pos.map(|_| positions),
    })
}

/// Yaw, pitch, roll of a unit quaternion in the `Rz(yaw) Rx(pitch) Ry(roll)` convention.
pub fn quaternion_angles(q: [f64; 4]) -> Orientation {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    let r = uq.to_rotation_matrix();
    let m = r.matrix();
    let pitch = m[(2, 1)].clamp(-1.0, 1.0).asin();
    let roll = (-m[(2, 0)]).atan2(m[(2, 2)]);
    let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
    Orientation::new(yaw, pitch, roll)
}

fn read_magpie(path: &Path) -> Result<RawStreams> {
    let (mut rdr, cols) = csv_reader(path)?;
    let need = |aliases: &[&str], what: &str| {
        cols.find(aliases).ok_or_else(|| parse_error(path, 1, format!("no column for {what} (tried {aliases:?})")))
    };
    let t = need(&["timestamp", "time", "t"], "time")?;
    let mx = need(&["mag_x", "magx", "magn_x", "mx"], "mag x")?;
    let my = need(&["mag_y", "magy", "magn_y", "my"], "mag y")?;
    let mz = need(&["mag_z", "magz", "magn_z", "mz"], "mag z")?;
    let device = match (cols.find(&["yaw"]), cols.find(&["pitch"]), cols.find(&["roll"])) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let quat = match (cols.find(&["quat_w", "qw"]), cols.find(&["quat_x", "qx"]), cols.find(&["quat_y", "qy"]), cols.find(&["quat_z", "qz"])) {
        (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
        _ => None,
    };
    let source = match (device, quat) {
        (Some(_), _) => OrientationSource::Device,
        (None, Some(_)) => OrientationSource::Reconstructed,
        (None, None) => return Err(parse_error(path, 1, "no orientation columns (yaw/pitch/roll or quat_w..quat_z)")),
    };
    let gt = match (cols.find(&["pos_x", "posx", "gt_x", "x"]), cols.find(&["pos_y", "posy", "gt_y", "y"])) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => None,
    };
    let mut mag = Vec::new();
    let mut orient = Vec::new();
    let mut positions = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_error(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = line_of(&record);
        let f = |i: usize, name: &str| field(&record, i, name, path, line);
        let time = f(t, "time")?;
        mag.push(MagSample { t: time, m: [f(mx, "mag_x")?, f(my, "mag_y")?, f(mz, "mag_z")?] });
        let angles = match (device, quat) {
            (Some([a, b, c]), _) => Orientation::new(f(a, "yaw")?, f(b, "pitch")?, f(c, "roll")?),
            (None, Some([w, x, y, z])) => quaternion_angles([f(w, "quat_w")?, f(x, "quat_x")?, f(y, "quat_y")?, f(z, "quat_z")?]),
            (None, None) => unreachable!(),
        };
        orient.push(OrientationSample { t: time, angles });
        if let Some([x, y]) = gt {
            positions.push(PositionSample { t: time, pos: [f(x, "pos_x")?, f(y, "pos_y")?] });
        }
    }
    if mag.is_empty() {
        return Err(empty(path));
    }
    Ok(RawStreams {
        magnetometer: mag,
        frame: Frame::Local,
        orientation: Some(orient),
        orientation_source: Some(source),
        positions: gt.map(|_| positions),
    })
}

fn read_ipin(path: &Path) -> Result<RawStreams> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut mag = Vec::new();
    let mut orient = Vec::new();
    let mut fixes: Vec<(f64, f64, f64)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = l.split(';').map(str::trim).collect();
        let num = |k: usize, name: &str| -> Result<f64> {
            let s = parts.get(k).copied().unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, line, format!("{} field `{name}` is not a number: `{s}`", parts[0])))
        };
        match parts[0] {
            "MAGN" => mag.push(MagSample { t: num(1, "AppTimestamp")?, m: [num(3, "Mag_X")?, num(4, "Mag_Y")?, num(5, "Mag_Z")?] }),
            "AHRS" => {
                let (pitch, roll, yaw) = (num(3, "PitchX")?, num(4, "RollY")?, num(5, "YawZ")?);
                orient.push(OrientationSample {
                    t: num(1, "AppTimestamp")?,
                    angles: Orientation::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians()),
                });
            }
            "POSI" => fixes.push((num(1, "Timestamp")?, num(3, "Latitude")?, num(4, "Longitude")?)),
            _ => {}
        }
    }
    if mag.is_empty() {
        return Err(empty(path));
    }
    let positions = fixes.first().copied().map(|(_, lat0, lon0)| {
        let k = lat0.to_radians().cos();
        fixes
            .iter()
            .map(|&(t, lat, lon)| PositionSample {
                t,
                pos: [EARTH_RADIUS_M * (lon - lon0).to_radians() * k, EARTH_RADIUS_M * (lat - lat0).to_radians()],
            })
            .collect()
    });
    Ok(RawStreams {
        magnetometer: mag,
        frame: Frame::Local,
        orientation_source: (!orient.is_empty()).then_some(OrientationSource::Device),
        orientation: (!orient.is_empty()).then_some(orient),
        positions,
    })
}

/// Reads one log into unsynchronized streams with the original timestamps.
pub fn load_trial(path: &Path, format: Format) -> Result<RawStreams> {
    match format {
        Format::Canonical => read_canonical(path),
        Format::Magpie => read_magpie(path),
        Format::Ipin => read_ipin(path),
    }
}

/// Trial files of a directory in name order.
pub fn trial_files(dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == format.extension()))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no .{} trial files in {}", format.extension(), dir.display())));
    }
    Ok(files)
}

/// Loads, synchronizes and rotates every trial of a directory into the global frame.
pub fn load_dir(dir: &Path, format: Format, rate: f64, source: &Source) -> Result<Vec<Trial>> {
    trial_files(dir, format)?
        .iter()
        .map(|p| {
            let streams = load_trial(p, format)?;
            let id = trial_id(p);
            synchronize(&streams, &id, rate, source.clone())
                .and_then(Trial::into_global)
                .context(|| p.display().to_string())
        })
        .collect()
}

/// Writes a trial as canonical CSV. Global-frame trials get zero angles.
pub fn write_canonical(trial: &Trial, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let mut header = vec!["t", "mx", "my", "mz", "yaw", "pitch", "roll"];
    if trial.positions.is_some() {
        header.extend(["px", "py"]);
    }
    let io = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for (k, s) in trial.samples.iter().enumerate() {
        let a = match (&trial.orientation, trial.frame) {
            (Some(o), Frame::Local) => o[k],
            _ => Orientation::default(),
        };
        let mut row = vec![s.t, s.m[0], s.m[1], s.m[2], a.yaw, a.pitch, a.roll];
        if let Some(p) = &trial.positions {
            row.extend(p[k]);
        }
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
