//! Sensor ingestion: synchronization onto a common clock, local-to-global
//! frame conversion, channel projections and direction-reversal augmentation.
//!
//! Orientation angles follow an intrinsic Z(yaw) - X(pitch) - Y(roll)
//! convention, matching Android's axes after remapping:
//!
//! ```text
//!            | cos y  -sin y  0 |           | 1    0       0    |           |  cos r  0  sin r |
//! Rz(yaw) =  | sin y   cos y  0 |  Rx(p) =  | 0  cos p  -sin p  |  Ry(r) =  |    0    1    0   |
//!            |   0       0    1 |           | 0  sin p   cos p  |           | -sin r  0  cos r |
//!
//! m_global = Rz(yaw) * Rx(pitch) * Ry(roll) * m_local
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI, TAU};

use libm::{cos, sin, sqrt};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Default synchronization rate in Hz.
pub const DEFAULT_RATE_HZ: f64 = 50.0;

/// Suffix appended to the id of a direction-reversed trial.
pub const REVERSED_SUFFIX: &str = "_rev";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Frame {
    Local,
    Global,
}

/// One magnetometer reading in microtesla.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MagSample {
    pub t: f64,
    pub m: [f64; 3],
}

/// Phone orientation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Orientation {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrientationSample {
    pub t: f64,
    pub angles: Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionSample {
    pub t: f64,
    pub pos: [f64; 2],
}

/// Where the orientation stream came from, when a source format offers both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OrientationSource {
    /// Angles reported by the phone.
    Device,
    /// Angles reconstructed from the IMU (rotation vector or quaternion).
    Reconstructed,
}

/// Unsynchronized streams as read from a log file, original timestamps kept.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStreams {
    pub magnetometer: Vec<MagSample>,
    pub frame: Frame,
    pub orientation: Option<Vec<OrientationSample>>,
    pub orientation_source: Option<OrientationSource>,
    pub positions: Option<Vec<PositionSample>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Source {
    Human,
    Robot(String),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialMeta {
    pub source: Source,
    pub rate: f64,
}

/// A synchronized recording on a uniform clock.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trial {
    pub id: String,
    pub frame: Frame,
    pub samples: Vec<MagSample>,
    /// Per-sample orientation, kept until the trial is rotated to the global frame.
    pub orientation: Option<Vec<Orientation>>,
    /// Ground-truth positions in meters, aligned with `samples` (train trials only).
    pub positions: Option<Vec<[f64; 2]>>,
    pub meta: TrialMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    pub split: Split,
}

impl Dataset {
    pub fn new(trials: Vec<Trial>, split: Split) -> Result<Self> {
        for (i, a) in trials.iter().enumerate() {
            if trials[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::InvalidInput(format!("duplicate trial id `{}`", a.id)));
            }
        }
        Ok(Self { trials, split })
    }
}

/// Scalar projection of a field vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Projection {
    X,
    Y,
    Z,
    Xy,
    Xyz,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::X => "x",
            Projection::Y => "y",
            Projection::Z => "z",
            Projection::Xy => "xy",
            Projection::Xyz => "xyz",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "x" => Projection::X,
            "y" => Projection::Y,
            "z" => Projection::Z,
            "xy" => Projection::Xy,
            "xyz" => Projection::Xyz,
            _ => return None,
        })
    }
}

pub fn project(m: [f64; 3], mode: Projection) -> f64 {
    match mode {
        Projection::X => m[0],
        Projection::Y => m[1],
        Projection::Z => m[2],
        Projection::Xy => sqrt(m[0] * m[0] + m[1] * m[1]),
        Projection::Xyz => sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2]),
    }
}

/// Rotation matrix taking local-frame vectors to the global frame.
pub fn rotation_matrix(angles: Orientation) -> Matrix3<f64> {
    let (sy, cy) = (sin(angles.yaw), cos(angles.yaw));
    let (sp, cp) = (sin(angles.pitch), cos(angles.pitch));
    let (sr, cr) = (sin(angles.roll), cos(angles.roll));
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cr, 0.0, sr, 0.0, 1.0, 0.0, -sr, 0.0, cr);
    rz * rx * ry
}

pub fn rotate_to_global(m_local: [f64; 3], angles: Orientation) -> [f64; 3] {
    let g = rotation_matrix(angles) * Vector3::from(m_local);
    [g[0], g[1], g[2]]
}

/// Inverse of [`rotate_to_global`].
pub fn rotate_to_local(m_global: [f64; 3], angles: Orientation) -> [f64; 3] {
    let l = rotation_matrix(angles).transpose() * Vector3::from(m_global);
    [l[0], l[1], l[2]]
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = libm::fmod(a + PI, TAU);
    if w < 0.0 {
        w += TAU;
    }
    let w = w - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl Orientation {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    /// Equivalent angle triple with pitch in [-pi/2, pi/2] and yaw, roll in (-pi, pi].
    pub fn normalized(self) -> Self {
        let mut pitch = wrap_angle(self.pitch);
        let mut yaw = self.yaw;
        let mut roll = self.roll;
        if pitch > FRAC_PI_2 {
            pitch = PI - pitch;
            yaw += PI;
            roll += PI;
        } else if pitch < -FRAC_PI_2 {
            pitch = -PI - pitch;
            yaw += PI;
            roll += PI;
        }
        Self {
            yaw: wrap_angle(yaw),
            pitch,
            roll: wrap_angle(roll),
        }
    }

    fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite() && self.roll.is_finite()
    }
}

fn check_stream<T>(name: &str, items: &[T], time: impl Fn(&T) -> f64) -> Result<()> {
    if items.len() < 2 {
        return Err(Error::Sync(format!("{name} stream needs at least 2 samples, got {}", items.len())));
    }
    let mut prev = f64::NEG_INFINITY;
    for (i, item) in items.iter().enumerate() {
        let t = time(item);
        if !t.is_finite() {
            return Err(Error::Sync(format!("{name} sample {i} has a non-finite timestamp")));
        }
        if t < prev {
            return Err(Error::Sync(format!("{name} timestamps decrease at sample {i}")));
        }
        prev = t;
    }
    Ok(())
}

/// Linear interpolation of a time-sorted stream onto sorted query times.
fn resample<const N: usize>(times: &[f64], values: &[[f64; N]], clock: &[f64]) -> Vec<[f64; N]> {
    let mut out = Vec::with_capacity(clock.len());
    let mut seg = 0;
    for &t in clock {
        while seg + 2 < times.len() && times[seg + 1] <= t {
            seg += 1;
        }
        let (t0, t1) = (times[seg], times[seg + 1]);
        let (a, b) = (&values[seg], &values[seg + 1]);
        let mut v = [0.0; N];
        if t1 > t0 {
            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            for k in 0..N {
                v[k] = a[k] + (b[k] - a[k]) * w;
            }
        } else {
            v = if t >= t1 { *b } else { *a };
        }
        out.push(v);
    }
    out
}

/// Removes 2*pi jumps so that linear interpolation between neighbours is meaningful.
fn unwrap(values: &mut [f64]) {
    for i in 1..values.len() {
        let d = wrap_angle(values[i] - values[i - 1]);
        values[i] = values[i - 1] + d;
    }
}

/// Resamples every stream onto a common uniform clock at `rate` Hz spanning
/// the overlap of all stream time ranges.
pub fn synchronize(streams: &RawStreams, id: &str, rate: f64, source: Source) -> Result<Trial> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Sync(format!("rate must be positive, got {rate}")));
    }
    if streams.magnetometer.is_empty() {
        return Err(Error::EmptyTrial(id.to_string()));
    }
    check_stream("magnetometer", &streams.magnetometer, |s| s.t)?;
    let mut start = streams.magnetometer[0].t;
    let mut end = streams.magnetometer[streams.magnetometer.len() - 1].t;
    if let Some(o) = &streams.orientation {
        check_stream("orientation", o, |s| s.t)?;
        start = start.max(o[0].t);
        end = end.min(o[o.len() - 1].t);
    }
    if let Some(p) = &streams.positions {
        check_stream("position", p, |s| s.t)?;
        start = start.max(p[0].t);
        end = end.min(p[p.len() - 1].t);
    }
    if end < start {
        return Err(Error::Sync(format!(
            "stream time ranges do not overlap (latest start {start}, earliest end {end})"
        )));
    }

    // Tolerance keeps the last tick when (end - start) * rate is integral up to rounding.
    let ticks = libm::floor((end - start) * rate + 1e-9) as usize + 1;
    let clock: Vec<f64> = (0..ticks).map(|k| start + k as f64 / rate).collect();

    let mag_t: Vec<f64> = streams.magnetometer.iter().map(|s| s.t).collect();
    let mag_v: Vec<[f64; 3]> = streams.magnetometer.iter().map(|s| s.m).collect();
    let m = resample(&mag_t, &mag_v, &clock);
    let samples = clock
        .iter()
        .zip(m)
        .map(|(&t, m)| MagSample { t, m })
        .collect();

    let orientation = streams.orientation.as_ref().map(|o| {
        let t: Vec<f64> = o.iter().map(|s| s.t).collect();
        let mut yaw: Vec<f64> = o.iter().map(|s| s.angles.yaw).collect();
        let mut pitch: Vec<f64> = o.iter().map(|s| s.angles.pitch).collect();
        let mut roll: Vec<f64> = o.iter().map(|s| s.angles.roll).collect();
        unwrap(&mut yaw);
        unwrap(&mut pitch);
        unwrap(&mut roll);
        let v: Vec<[f64; 3]> = (0..t.len()).map(|i| [yaw[i], pitch[i], roll[i]]).collect();
        resample(&t, &v, &clock)
            .into_iter()
            .map(|a| Orientation::new(a[0], a[1], a[2]).normalized())
            .collect()
    });

    let positions = streams.positions.as_ref().map(|p| {
        let t: Vec<f64> = p.iter().map(|s| s.t).collect();
        let v: Vec<[f64; 2]> = p.iter().map(|s| s.pos).collect();
        resample(&t, &v, &clock)
    });

    Ok(Trial {
        id: id.to_string(),
        frame: streams.frame,
        samples,
        orientation,
        positions,
        meta: TrialMeta { source, rate },
    })
}

impl Trial {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Converts local-frame readings using the stored orientation; global trials are returned as-is.
    pub fn into_global(mut self) -> Result<Self> {
        if self.frame == Frame::Global {
            return Ok(self);
        }
        let orientation = self.orientation.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("local-frame trial `{}` has no orientation stream", self.id))
        })?;
        for (s, a) in self.samples.iter_mut().zip(orientation) {
            if !a.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite orientation at t={}", s.t)));
            }
            s.m = rotate_to_global(s.m, *a);
        }
        self.frame = Frame::Global;
        Ok(self)
    }

    pub fn series(&self, mode: Projection) -> Vec<f64> {
        self.samples.iter().map(|s| project(s.m, mode)).collect()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Time-reversed copy of a synchronized trial: values and positions run
/// backwards on the original clock. Applying it twice restores the input.
pub fn reverse_augment(trial: &Trial) -> Trial {
    let n = trial.samples.len();
    let samples = (0..n)
        .map(|k| MagSample {
            t: trial.samples[k].t,
            m: trial.samples[n - 1 - k].m,
        })
        .collect();
    let orientation = trial.orientation.as_ref().map(|o| o.iter().rev().copied().collect());
    let positions = trial.positions.as_ref().map(|p| p.iter().rev().copied().collect());
    let id = match trial.id.strip_suffix(REVERSED_SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{}{}", trial.id, REVERSED_SUFFIX),
    };
    Trial {
        id,
        frame: trial.frame,
        samples,
        orientation,
        positions,
        meta: trial.meta.clone(),
    }
}
