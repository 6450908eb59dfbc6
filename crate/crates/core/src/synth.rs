//! Synthetic magnetic maps, trajectories and robot footprints.
//!
//! Anomalies are point dipoles buried `height` meters below the sensor plane.
//! Moments are in µT·m³ so that the field comes out directly in µT.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, floor, sin, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{Frame, MagSample, Source, Trial, TrialMeta};

/// Plausible mid-latitude geomagnetic vector in µT. Any fixed vector would do.
pub const DEFAULT_BACKGROUND: [f64; 3] = [22.0, 5.0, -42.0];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnomalySpec {
    pub center: [f64; 2],
    pub moment: [f64; 3],
    /// Depth of the dipole below the sensor plane.
    pub height: f64,
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        let norm = norm3(self.moment);
        if !(norm > 0.0 && norm.is_finite()) || !(self.height > 0.0) || !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "anomaly at {:?} needs a non-zero moment and positive height",
                self.center
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MapSpec {
    pub background: [f64; 3],
    pub anomalies: Vec<AnomalySpec>,
}

impl MapSpec {
    pub fn new(anomalies: Vec<AnomalySpec>) -> Self {
        Self { background: DEFAULT_BACKGROUND, anomalies }
    }

    pub fn field_at(&self, pos: [f64; 2]) -> Result<[f64; 3]> {
        field_at(&self.anomalies, self.background, pos)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

/// Field of a point dipole with moment `moment` at offset `r` from it:
/// `(3 (m . r^) r^ - m) / |r|^3`.
pub fn dipole_field(moment: [f64; 3], r: [f64; 3]) -> Result<[f64; 3]> {
    let d = norm3(r);
    if d < 1e-12 {
        return Err(Error::Singularity);
    }
    let u = [r[0] / d, r[1] / d, r[2] / d];
    let mu = moment[0] * u[0] + moment[1] * u[1] + moment[2] * u[2];
    let k = 1.0 / (d * d * d);
    Ok(core::array::from_fn(|a| k * (3.0 * mu * u[a] - moment[a])))
}

/// Background plus the sum of all anomaly fields at a sensor-plane position.
pub fn field_at(anomalies: &[AnomalySpec], background: [f64; 3], pos: [f64; 2]) -> Result<[f64; 3]> {
    if !pos.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("position {pos:?} is not finite")));
    }
    let mut b = background;
    for a in anomalies {
        let f = dipole_field(a.moment, [pos[0] - a.center[0], pos[1] - a.center[1], a.height])?;
        for k in 0..3 {
            b[k] += f[k];
        }
    }
    Ok(b)
}

/// Timestamped positions sampled along a polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub t: Vec<f64>,
    pub pos: Vec<[f64; 2]>,
    pub rate: f64,
    /// Polyline length of the waypoints.
    pub length: f64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Constant-speed piecewise-linear walk through `waypoints`, sampled at `rate`.
pub fn gen_trajectory(waypoints: &[[f64; 2]], speed: f64, rate: f64) -> Result<Path> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidInput("a trajectory needs at least two waypoints".into()));
    }
    if !(speed > 0.0 && rate > 0.0 && speed.is_finite() && rate.is_finite()) {
        return Err(Error::InvalidInput(format!("speed {speed} and rate {rate} must be positive")));
    }
    let mut cumulative = vec![0.0];
    for (i, w) in waypoints.windows(2).enumerate() {
        let seg = sqrt((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2));
        if seg < 1e-12 {
            return Err(Error::DegenerateSegment(i, i + 1));
        }
        cumulative.push(cumulative[i] + seg);
    }
    let length = *cumulative.last().unwrap_or(&0.0);
    let n = floor(length / speed * rate + 1e-9) as usize + 1;
    let mut t = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let tk = k as f64 / rate;
        let s = (tk * speed).min(length);
        while seg + 2 < cumulative.len() && s > cumulative[seg + 1] {
            seg += 1;
        }
        let (a, b) = (waypoints[seg], waypoints[seg + 1]);
        let frac = (s - cumulative[seg]) / (cumulative[seg + 1] - cumulative[seg]);
        t.push(tk);
        pos.push([a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]);
    }
    Ok(Path { t, pos, rate, length })
}

/// Boustrophedon lanes along x covering `[x0, x1] x [y0, y1]`.
pub fn lawnmower(x0: f64, x1: f64, y0: f64, y1: f64, spacing: f64) -> Vec<[f64; 2]> {
    let lanes = floor((y1 - y0) / spacing + 1e-9) as usize + 1;
    let mut w = Vec::with_capacity(2 * lanes);
    for i in 0..lanes {
        let y = y0 + i as f64 * spacing;
        if i % 2 == 0 {
            w.push([x0, y]);
            w.push([x1, y]);
        } else {
            w.push([x1, y]);
            w.push([x0, y]);
        }
    }
    w
}

/// Field-strength dependent gain `1 + alpha (|m| - reference) / reference`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GainSpec {
    pub alpha: f64,
    pub reference: f64,
}

/// Additive offset `amplitude * sin(2 pi x / wavelength) * cos(2 pi y / wavelength)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpatialOffset {
    pub amplitude: [f64; 3],
    pub wavelength: f64,
}

/// A robot's magnetic footprint: `f(m, pos) = R (g(|m|) m) + bias + offset(pos)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FootprintSpec {
    /// Unit rotation axis.
    pub axis: [f64; 3],
    /// Rotation angle in radians.
    pub angle: f64,
    pub bias: [f64; 3],
    pub gain: Option<GainSpec>,
    pub offset: Option<SpatialOffset>,
}

impl FootprintSpec {
    pub fn identity() -> Self {
        Self { axis: [0.0, 0.0, 1.0], angle: 0.0, bias: [0.0; 3], gain: None, offset: None }
    }

    pub fn rotation(axis: [f64; 3], angle: f64) -> Self {
        Self { axis, angle, ..Self::identity() }
    }

    pub fn validate(&self) -> Result<()> {
        if (norm3(self.axis) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("footprint axis {:?} is not unit-norm", self.axis)));
        }
        if let Some(g) = self.gain {
            if !(g.reference > 0.0) {
                return Err(Error::Config("gain reference must be positive".into()));
            }
        }
        if let Some(o) = self.offset {
            if !(o.wavelength > 0.0) {
                return Err(Error::Config("offset wavelength must be positive".into()));
            }
        }
        Ok(())
    }

    /// Rodrigues rotation matrix, row-major.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [x, y, z] = self.axis;
        let (s, c) = (sin(self.angle), cos(self.angle));
        let t = 1.0 - c;
        [
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ]
    }

    pub fn apply(&self, m: [f64; 3], pos: [f64; 2]) -> [f64; 3] {
        let g = match self.gain {
            Some(GainSpec { alpha, reference }) => 1.0 + alpha * (norm3(m) - reference) / reference,
            None => 1.0,
        };
        let r = self.rotation_matrix();
        let scaled = [g * m[0], g * m[1], g * m[2]];
        let mut out: [f64; 3] = core::array::from_fn(|i| {
            r[i][0] * scaled[0] + r[i][1] * scaled[1] + r[i][2] * scaled[2] + self.bias[i]
        });
        if let Some(o) = self.offset {
            let w = sin(2.0 * PI * pos[0] / o.wavelength) * cos(2.0 * PI * pos[1] / o.wavelength);
            for i in 0..3 {
                out[i] += o.amplitude[i] * w;
            }
        }
        out
    }
}

/// Readings along `path`: footprint applied to the analytic field, plus
/// isotropic gaussian noise of `noise` µT. The trial is in the global frame
/// and carries ground-truth positions.
pub fn sample_trial(
    map: &MapSpec,
    path: &Path,
    footprint: Option<&FootprintSpec>,
    noise: f64,
    seed: u64,
) -> Result<Trial> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sigma {noise} must be non-negative")));
    }
    for a in &map.anomalies {
        a.validate()?;
    }
    if let Some(f) = footprint {
        f.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidInput(format!("{e}")))?;
    let mut samples = Vec::with_capacity(path.len());
    for (&t, &p) in path.t.iter().zip(&path.pos) {
        let mut m = map.field_at(p)?;
        if let Some(f) = footprint {
            m = f.apply(m, p);
        }
        if noise > 0.0 {
            for v in &mut m {
                *v += normal.sample(&mut rng);
            }
        }
        samples.push(MagSample { t, m });
    }
    Ok(Trial {
        id: String::from("synthetic"),
        frame: Frame::Global,
        samples,
        orientation: None,
        positions: Some(path.pos.clone()),
        meta: TrialMeta { source: Source::Human, rate: path.rate },
    })
}

fn named(mut trial: Trial, id: String, source: Source) -> Trial {
    trial.id = id;
    trial.meta.source = source;
    trial
}

// ---------------------------------------------------------------------------
// Scenarios

/// Straight corridor along x with two identical anomaly clusters. Away from
/// the clusters only `markers` (possibly none) disturb the field.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CorridorScenario {
    pub length: f64,
    /// x coordinates of the two cluster copies.
    pub cluster_x: [f64; 2],
    /// Cluster anomalies with centers relative to the cluster origin.
    pub cluster: Vec<AnomalySpec>,
    /// Extra anomalies with absolute centers.
    pub markers: Vec<AnomalySpec>,
    pub speed: f64,
    pub rate: f64,
    /// Trials start within `[0, jitter]` and stop within `[length - jitter, length]`.
    pub start_jitter: f64,
    pub lateral_jitter: f64,
    pub noise: f64,
}

impl Default for CorridorScenario {
    fn default() -> Self {
        let cluster = vec![
            AnomalySpec { center: [-0.6, 0.0], moment: [3.0, 1.5, -6.0], height: 0.8 },
            AnomalySpec { center: [0.7, 0.0], moment: [-2.0, -1.0, 5.0], height: 0.9 },
        ];
        Self {
            length: 60.0,
            cluster_x: [15.0, 45.0],
            cluster,
            markers: Vec::new(),
            speed: 1.0,
            rate: 10.0,
            start_jitter: 4.0,
            lateral_jitter: 0.1,
            noise: 0.2,
        }
    }
}

impl CorridorScenario {
    pub fn map(&self) -> MapSpec {
        let mut anomalies = Vec::new();
        for &cx in &self.cluster_x {
            anomalies.extend(self.cluster.iter().map(|a| AnomalySpec { center: [a.center[0] + cx, a.center[1]], ..*a }));
        }
        anomalies.extend(self.markers.iter().copied());
        MapSpec::new(anomalies)
    }

    /// Marker sequence whose pairs are indistinguishable by some channels:
    /// the first pair differs only in the y component along the corridor,
    /// the second pair only in sign.
    pub fn with_ablation_markers(mut self) -> Self {
        let mid = self.cluster_x[0] + 0.5 * (self.cluster_x[1] - self.cluster_x[0]);
        let a = AnomalySpec { center: [0.0, 0.0], moment: [1.2, 2.0, -2.5], height: 0.7 };
        let b = AnomalySpec { center: [0.0, 0.0], moment: [-1.0, 0.8, 2.2], height: 0.7 };
        let at = |x: f64, s: AnomalySpec| AnomalySpec { center: [x, 0.0], ..s };
        let flip_y = |s: AnomalySpec| AnomalySpec { moment: [s.moment[0], -s.moment[1], s.moment[2]], ..s };
        let flip = |s: AnomalySpec| AnomalySpec { moment: s.moment.map(|v| -v), ..s };
        self.markers = vec![
            at(mid - 9.0, a),
            at(mid - 3.0, flip_y(a)),
            at(mid + 3.0, b),
            at(mid + 9.0, flip(b)),
        ];
        self
    }

    pub fn trial(&self, index: usize, seed: u64) -> Result<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x0 = rng.random::<f64>() * self.start_jitter;
        let x1 = self.length - rng.random::<f64>() * self.start_jitter;
        let y = (rng.random::<f64>() * 2.0 - 1.0) * self.lateral_jitter;
        let path = gen_trajectory(&[[x0, y], [x1, y]], self.speed, self.rate)?;
        let trial = sample_trial(&self.map(), &path, None, self.noise, rng.random())?;
        Ok(named(trial, format!("corridor_{seed}_{index:03}"), Source::Human))
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<Trial>> {
        (0..count).map(|i| self.trial(i, seed)).collect()
    }
}

/// Two robots driving lanes over a shared area; the test robot R2 carries a
/// nonlinear footprint, R1 measures the field as is.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TwoRobotScenario {
    pub anomalies: Vec<AnomalySpec>,
    /// Lanes run along x over `[0, width]` at `y = lane_y[i]`.
    pub width: f64,
    pub lane_y: Vec<f64>,
    /// Route both robots drive for alignment, `common_passes` times each.
    pub common_route: Vec<[f64; 2]>,
    pub common_passes: usize,
    pub footprint_r1: FootprintSpec,
    pub footprint_r2: FootprintSpec,
    /// Passes over each lane and direction.
    pub r1_passes: usize,
    pub r2_passes: usize,
    /// Uniform lateral deviation of every pass from its lane.
    pub lateral_jitter: f64,
    pub speed: f64,
    pub rate: f64,
    pub noise: f64,
}

impl Default for TwoRobotScenario {
    fn default() -> Self {
        let anomalies = Self::corridor_anomalies(40.0, 0);
        let axis = {
            let a = [0.3, -0.5, 0.81];
            let n = norm3(a);
            [a[0] / n, a[1] / n, a[2] / n]
        };
        Self {
            anomalies,
            width: 40.0,
            lane_y: vec![0.0],
            common_route: vec![[0.0, 0.0], [40.0, 0.0]],
            common_passes: 3,
            footprint_r1: FootprintSpec::identity(),
            footprint_r2: FootprintSpec {
                axis,
                angle: 1.2,
                bias: [2.0, -1.5, 2.5],
                gain: Some(GainSpec { alpha: 0.4, reference: 48.0 }),
                offset: None,
            },
            r1_passes: 8,
            r2_passes: 2,
            lateral_jitter: 0.15,
            speed: 1.0,
            rate: 10.0,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoRobotData {
    pub map: MapSpec,
    pub r1: Vec<Trial>,
    pub r2: Vec<Trial>,
    pub r1_common: Vec<Trial>,
    pub r2_common: Vec<Trial>,
}

impl TwoRobotScenario {
    pub fn map(&self) -> MapSpec {
        MapSpec::new(self.anomalies.clone())
    }

    /// Distinct dipoles every 3.6 m along a corridor at `y = 0`, alternating sides.
    pub fn corridor_anomalies(length: f64, seed: u64) -> Vec<AnomalySpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = floor((length - 2.0) / 3.6) as usize + 1;
        (0..count)
            .map(|i| {
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                let vertical = (3.5 + 2.5 * rng.random::<f64>()) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                AnomalySpec {
                    center: [2.0 + 3.6 * i as f64, side * (0.4 + 0.4 * rng.random::<f64>())],
                    moment: [6.0 * rng.random::<f64>() - 3.0, 6.0 * rng.random::<f64>() - 3.0, vertical],
                    height: 0.8 + 0.15 * rng.random::<f64>(),
                }
            })
            .collect()
    }

    /// Each robot drives every lane its number of passes in each direction.
    pub fn generate(&self, seed: u64) -> Result<TwoRobotData> {
        let map = self.map();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        let r1_name = Source::Robot(String::from("r1"));
        let r2_name = Source::Robot(String::from("r2"));
        let drive = |rng: &mut ChaCha8Rng, route: &[[f64; 2]], footprint: &FootprintSpec| -> Result<Trial> {
            let dy = (rng.random::<f64>() * 2.0 - 1.0) * self.lateral_jitter;
            let shifted: Vec<[f64; 2]> = route.iter().map(|p| [p[0], p[1] + dy]).collect();
            let path = gen_trajectory(&shifted, self.speed, self.rate)?;
            sample_trial(&map, &path, Some(footprint), self.noise, rng.random())
        };
        for (i, &y) in self.lane_y.iter().enumerate() {
            for (d, (a, b)) in [(0.0, self.width), (self.width, 0.0)].into_iter().enumerate() {
                let lane = [[a, y], [b, y]];
                for pass in 0..self.r1_passes {
                    let t = drive(&mut rng, &lane, &self.footprint_r1)?;
                    r1.push(named(t, format!("r1_lane{i:02}_{d}_{pass}"), r1_name.clone()));
                }
                for pass in 0..self.r2_passes {
                    let t = drive(&mut rng, &lane, &self.footprint_r2)?;
                    r2.push(named(t, format!("r2_lane{i:02}_{d}_{pass}"), r2_name.clone()));
                }
            }
        }
        let mut r1_common = Vec::new();
        let mut r2_common = Vec::new();
        for pass in 0..self.common_passes {
            let t = drive(&mut rng, &self.common_route, &self.footprint_r1)?;
            r1_common.push(named(t, format!("r1_common_{pass}"), r1_name.clone()));
            let t = drive(&mut rng, &self.common_route, &self.footprint_r2)?;
            r2_common.push(named(t, format!("r2_common_{pass}"), r2_name.clone()));
        }
        Ok(TwoRobotData { map, r1, r2, r1_common, r2_common })
    }
}

/// Planted anomalies over a rectangle covered by a lawnmower sweep.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LandmarkScenario {
    pub anomalies: Vec<AnomalySpec>,
    pub area: [f64; 4],
    pub lane_spacing: f64,
    pub speed: f64,
    pub rate: f64,
    pub noise: f64,
}

impl Default for LandmarkScenario {
    fn default() -> Self {
        Self {
            anomalies: vec![
                AnomalySpec { center: [5.5, 5.5], moment: [0.0, 0.0, -8.0], height: 1.0 },
                AnomalySpec { center: [18.5, 6.5], moment: [0.0, 0.0, 8.0], height: 1.0 },
                AnomalySpec { center: [6.5, 17.5], moment: [0.0, 0.0, 8.0], height: 1.0 },
                AnomalySpec { center: [17.5, 18.5], moment: [0.0, 0.0, -8.0], height: 1.0 },
            ],
            area: [0.0, 24.0, 0.0, 24.0],
            lane_spacing: 0.5,
            speed: 1.0,
            rate: 4.0,
            noise: 0.1,
        }
    }
}

impl LandmarkScenario {
    pub fn map(&self) -> MapSpec {
        MapSpec::new(self.anomalies.clone())
    }

    pub fn generate(&self, seed: u64) -> Result<Trial> {
        let [x0, x1, y0, y1] = self.area;
        let path = gen_trajectory(&lawnmower(x0, x1, y0, y1, self.lane_spacing), self.speed, self.rate)?;
        let trial = sample_trial(&self.map(), &path, None, self.noise, seed)?;
        Ok(named(trial, format!("sweep_{seed}"), Source::Human))
    }
}
