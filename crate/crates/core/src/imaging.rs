//! Time-series to image encodings.
//!
//! A projected field series is cut into overlapping windows; each window is
//! encoded as recurrence plots (RP), Gramian angular summation/difference
//! fields (GASF/GADF) and Markov transition fields (MTF), resized to a common
//! side and stacked as channels.
//!
//! Degenerate windows (all values equal) map to an all-ones RP, a zero
//! rescaled series for GASF/GADF (so every angle is pi/2) and a single-bin
//! Markov chain for MTF.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{acos, fabs, floor, sqrt};

use crate::error::{Error, Result};
use crate::ingest::{Projection, Trial};

pub const DEFAULT_WINDOW_SECONDS: f64 = 7.0;
pub const DEFAULT_STEP_SECONDS: f64 = 1.0;
pub const DEFAULT_SIDE: usize = 32;
pub const DEFAULT_BINS: usize = 8;

/// A square single-channel image stored row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Image {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, data: vec![value; side * side] }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                data.push(f(i, j));
            }
        }
        Self { side, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.side + j]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// A window of a scalar series with its time span and end-of-window position.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSegment {
    pub values: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub anchor_pos: Option<[f64; 2]>,
}

impl WindowSegment {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { values, t_start: 0.0, t_end: n.saturating_sub(1) as f64, anchor_pos: None }
    }
}

/// Samples per window and per step for the given durations.
pub fn window_geometry(size: f64, step: f64, rate: f64) -> Result<(usize, usize)> {
    if !(size > 0.0 && step > 0.0 && rate > 0.0) {
        return Err(Error::InvalidInput(format!(
            "window size {size}, step {step} and rate {rate} must be positive"
        )));
    }
    let len = floor(size * rate + 1e-9) as usize;
    let stride = floor(step * rate + 1e-9) as usize;
    if len < 2 || stride < 1 {
        return Err(Error::InvalidInput(format!(
            "window of {size} s every {step} s at {rate} Hz is shorter than two samples or one step"
        )));
    }
    Ok((len, stride))
}

/// Cuts a uniform-rate series into fixed-length windows; a trailing partial window is dropped.
pub fn sliding_windows(
    series: &[f64],
    times: &[f64],
    positions: Option<&[[f64; 2]]>,
    rate: f64,
    size: f64,
    step: f64,
) -> Result<Vec<WindowSegment>> {
    if times.len() != series.len() || positions.is_some_and(|p| p.len() != series.len()) {
        return Err(Error::InvalidInput("series, times and positions differ in length".into()));
    }
    let (len, stride) = window_geometry(size, step, rate)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= series.len() {
        let end = start + len - 1;
        out.push(WindowSegment {
            values: series[start..=end].to_vec(),
            t_start: times[start],
            t_end: times[end],
            anchor_pos: positions.map(|p| p[end]),
        });
        start += stride;
    }
    Ok(out)
}

/// Pairwise distance between two scalar readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    Euclidean,
    SqEuclidean,
    Cityblock,
    Chebyshev,
    Canberra,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Euclidean,
        Metric::SqEuclidean,
        Metric::Cityblock,
        Metric::Chebyshev,
        Metric::Canberra,
    ];

    #[inline]
    pub fn distance(self, a: f64, b: f64) -> f64 {
        match self {
            Metric::Euclidean | Metric::Cityblock | Metric::Chebyshev => fabs(a - b),
            Metric::SqEuclidean => (a - b) * (a - b),
            Metric::Canberra => {
                let den = fabs(a) + fabs(b);
                if den == 0.0 {
                    0.0
                } else {
                    fabs(a - b) / den
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::SqEuclidean => "sqeuclidean",
            Metric::Cityblock => "cityblock",
            Metric::Chebyshev => "chebyshev",
            Metric::Canberra => "canberra",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

fn check_len(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!("segment needs at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("segment contains non-finite values".into()));
    }
    Ok(())
}

/// Full m x m recurrence matrix, `1 - d_ij / max(d)`.
pub fn recurrence_matrix(values: &[f64], metric: Metric) -> Result<Image> {
    check_len(values)?;
    let m = values.len();
    let mut d = vec![0.0; m * m];
    let mut max = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let v = metric.distance(values[i], values[j]);
            d[i * m + j] = v;
            d[j * m + i] = v;
            max = max.max(v);
        }
    }
    if max == 0.0 {
        return Ok(Image::filled(m, 1.0));
    }
    for v in d.iter_mut() {
        *v = 1.0 - *v / max;
    }
    Ok(Image { side: m, data: d })
}

/// Min-max rescaling to [-1, 1] and the polar angles `arccos(v)`.
pub fn gaf_rescale(values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(values)?;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let scaled: Vec<f64> = if range == 0.0 {
        vec![0.0; values.len()]
    } else {
        values
            .iter()
            .map(|&v| (((v - hi) + (v - lo)) / range).clamp(-1.0, 1.0))
            .collect()
    };
    let angles = scaled.iter().map(|&v| acos(v)).collect();
    Ok((scaled, angles))
}

/// `sin(arccos(v))`, evaluated as sqrt((1-v)(1+v)) for accuracy near +-1.
#[inline]
fn polar_sine(v: f64) -> f64 {
    sqrt(((1.0 - v) * (1.0 + v)).max(0.0))
}

/// Gramian angular summation field, `cos(theta_i + theta_j)`.
pub fn gasf_matrix(values: &[f64]) -> Result<Image> {
    let (scaled, _) = gaf_rescale(values)?;
    let sines: Vec<f64> = scaled.iter().map(|&v| polar_sine(v)).collect();
    let m = scaled.len();
    Ok(Image::from_fn(m, |i, j| scaled[i] * scaled[j] - sines[i] * sines[j]))
}

/// Gramian angular difference field, `sin(theta_i - theta_j)`.
pub fn gadf_matrix(values: &[f64]) -> Result<Image> {
    let (scaled, _) = gaf_rescale(values)?;
    let sines: Vec<f64> = scaled.iter().map(|&v| polar_sine(v)).collect();
    let m = scaled.len();
    Ok(Image::from_fn(m, |i, j| sines[i] * scaled[j] - scaled[i] * sines[j]))
}

/// Quantile bin of every value, `0..bins`.
///
/// Bin edges are the empirical `k/bins` quantiles (linear interpolation
/// between order statistics); a value equal to an edge goes to the lower bin.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins)
        .map(|k| {
            let pos = (k as f64 / bins as f64) * (n - 1) as f64;
            let lo = floor(pos) as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        })
        .collect();
    values
        .iter()
        .map(|&v| edges.partition_point(|&e| e < v))
        .collect()
}

/// Row-stochastic `bins x bins` transition matrix of consecutive bin pairs.
/// Rows without outgoing transitions are uniform.
pub fn transition_matrix(assign: &[usize], bins: usize) -> Vec<f64> {
    let mut w = vec![0.0; bins * bins];
    for pair in assign.windows(2) {
        w[pair[0] * bins + pair[1]] += 1.0;
    }
    for row in w.chunks_mut(bins) {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row.iter_mut().for_each(|v| *v = 1.0 / bins as f64);
        } else {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    w
}

/// Markov transition field, `W[q(v_i), q(v_j)]`.
pub fn mtf_matrix(values: &[f64], bins: usize) -> Result<Image> {
    check_len(values)?;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("MTF needs at least 2 bins, got {bins}")));
    }
    let assign = quantile_bins(values, bins);
    let w = transition_matrix(&assign, bins);
    Ok(Image::from_fn(values.len(), |i, j| w[assign[i] * bins + assign[j]]))
}

/// Bilinear resize with corner-aligned sampling grids.
pub fn resize(image: &Image, side: usize) -> Result<Image> {
    let m = image.side;
    if m < 2 || side < 2 {
        return Err(Error::InvalidInput(format!("cannot resize {m}x{m} image to side {side}")));
    }
    if m == side {
        return Ok(image.clone());
    }
    let scale = (m - 1) as f64 / (side - 1) as f64;
    let coords: Vec<(usize, usize, f64)> = (0..side)
        .map(|i| {
            let x = i as f64 * scale;
            let lo = (floor(x) as usize).min(m - 1);
            let hi = (lo + 1).min(m - 1);
            (lo, hi, x - lo as f64)
        })
        .collect();
    Ok(Image::from_fn(side, |i, j| {
        let (r0, r1, fr) = coords[i];
        let (c0, c1, fc) = coords[j];
        let top = image.get(r0, c0) * (1.0 - fc) + image.get(r0, c1) * fc;
        let bottom = image.get(r1, c0) * (1.0 - fc) + image.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    }))
}

pub fn recurrence_plot(seg: &WindowSegment, metric: Metric, side: usize) -> Result<Image> {
    resize(&recurrence_matrix(&seg.values, metric)?, side)
}

pub fn gasf(seg: &WindowSegment, side: usize) -> Result<Image> {
    resize(&gasf_matrix(&seg.values)?, side)
}

pub fn gadf(seg: &WindowSegment, side: usize) -> Result<Image> {
    resize(&gadf_matrix(&seg.values)?, side)
}

pub fn mtf(seg: &WindowSegment, bins: usize, side: usize) -> Result<Image> {
    resize(&mtf_matrix(&seg.values, bins)?, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TransformKind {
    Rp,
    Gasf,
    Gadf,
    Mtf,
}

impl TransformKind {
    /// Value range of the encoding, used for 8-bit dumps.
    pub fn range(self) -> (f64, f64) {
        match self {
            TransformKind::Rp | TransformKind::Mtf => (0.0, 1.0),
            TransformKind::Gasf | TransformKind::Gadf => (-1.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Rp => "rp",
            TransformKind::Gasf => "gasf",
            TransformKind::Gadf => "gadf",
            TransformKind::Mtf => "mtf",
        }
    }
}

/// Number of stacked transform x axis channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelLayout {
    One,
    Three,
    Nine,
    Twelve,
}

impl ChannelLayout {
    pub const ALL: [ChannelLayout; 4] =
        [ChannelLayout::One, ChannelLayout::Three, ChannelLayout::Nine, ChannelLayout::Twelve];

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            1 => Ok(ChannelLayout::One),
            3 => Ok(ChannelLayout::Three),
            9 => Ok(ChannelLayout::Nine),
            12 => Ok(ChannelLayout::Twelve),
            _ => Err(Error::Config(format!("channel layout must be 1, 3, 9 or 12, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            ChannelLayout::One => 1,
            ChannelLayout::Three => 3,
            ChannelLayout::Nine => 9,
            ChannelLayout::Twelve => 12,
        }
    }

    /// Channel tags in stacking order: RP(x,y,z), GASF(x,y,z), GADF(x,y,z), MTF(x,y,z), truncated.
    /// Axis indices refer to the caller's three projected series.
    pub fn channels(self) -> Vec<(TransformKind, usize)> {
        let kinds = [TransformKind::Rp, TransformKind::Gasf, TransformKind::Gadf, TransformKind::Mtf];
        let all: Vec<(TransformKind, usize)> =
            kinds.iter().flat_map(|&k| (0..3).map(move |a| (k, a))).collect();
        match self {
            ChannelLayout::One => vec![all[0]],
            _ => all[..self.count()].to_vec(),
        }
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for ChannelLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.count() as u64)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for ChannelLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let n = <u64 as serde::Deserialize>::deserialize(d)?;
        ChannelLayout::from_count(n as usize).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImagingConfig {
    pub side: usize,
    pub metric: Metric,
    pub bins: usize,
    pub layout: ChannelLayout,
    /// Projections feeding the three axis slots.
    pub axes: [Projection; 3],
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            side: DEFAULT_SIDE,
            metric: Metric::Canberra,
            bins: DEFAULT_BINS,
            layout: ChannelLayout::Twelve,
            axes: [Projection::X, Projection::Y, Projection::Z],
        }
    }
}

/// One encoded window: `channels.len()` images of equal side.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowImageStack {
    pub side: usize,
    pub channels: Vec<Image>,
    pub layout: Vec<(TransformKind, usize)>,
}

impl WindowImageStack {
    /// Channel-major flattened pixels, `[channel][row][col]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.data.iter().copied()).collect()
    }
}

fn encode(kind: TransformKind, seg: &WindowSegment, cfg: &ImagingConfig) -> Result<Image> {
    match kind {
        TransformKind::Rp => recurrence_plot(seg, cfg.metric, cfg.side),
        TransformKind::Gasf => gasf(seg, cfg.side),
        TransformKind::Gadf => gadf(seg, cfg.side),
        TransformKind::Mtf => mtf(seg, cfg.bins, cfg.side),
    }
}

/// Encodes time-aligned per-axis windows into channel stacks.
pub fn stack_channels(per_axis: [&[WindowSegment]; 3], cfg: &ImagingConfig) -> Result<Vec<WindowImageStack>> {
    let n = per_axis[0].len();
    for (a, w) in per_axis.iter().enumerate() {
        if w.len() != n {
            return Err(Error::Misaligned(format!("axis {a} has {} windows, axis 0 has {n}", w.len())));
        }
    }
    for i in 0..n {
        let (s, e) = (per_axis[0][i].t_start, per_axis[0][i].t_end);
        for (a, w) in per_axis.iter().enumerate().skip(1) {
            if w[i].t_start != s || w[i].t_end != e {
                return Err(Error::Misaligned(format!("window {i} of axis {a} spans a different interval")));
            }
        }
    }
    let layout = cfg.layout.channels();
    (0..n)
        .map(|i| {
            let channels = layout
                .iter()
                .map(|&(kind, axis)| encode(kind, &per_axis[axis][i], cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(WindowImageStack { side: cfg.side, channels, layout: layout.clone() })
        })
        .collect()
}

/// Window timing and ground truth accompanying the stacks of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInfo {
    pub t_start: f64,
    pub t_end: f64,
    pub anchor: Option<[f64; 2]>,
}

/// Encoded windows of one trial, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStacks {
    pub trial_id: alloc::string::String,
    pub windows: Vec<WindowInfo>,
    pub stacks: Vec<WindowImageStack>,
}

impl TrialStacks {
    pub fn anchors(&self) -> Option<Vec<[f64; 2]>> {
        self.windows.iter().map(|w| w.anchor).collect()
    }
}

/// Window sizing in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WindowConfig {
    pub size: f64,
    pub step: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { size: DEFAULT_WINDOW_SECONDS, step: DEFAULT_STEP_SECONDS }
    }
}

/// Windows and encodes a synchronized, global-frame trial.
pub fn encode_trial(trial: &Trial, window: &WindowConfig, cfg: &ImagingConfig) -> Result<TrialStacks> {
    let times: Vec<f64> = trial.samples.iter().map(|s| s.t).collect();
    let positions = trial.positions.as_deref();
    let mut per_axis: Vec<Vec<WindowSegment>> = Vec::with_capacity(3);
    for &p in &cfg.axes {
        per_axis.push(sliding_windows(&trial.series(p), &times, positions, trial.meta.rate, window.size, window.step)?);
    }
    let stacks = stack_channels([&per_axis[0], &per_axis[1], &per_axis[2]], cfg)?;
    let windows = per_axis[0]
        .iter()
        .map(|w| WindowInfo { t_start: w.t_start, t_end: w.t_end, anchor: w.anchor_pos })
        .collect();
    Ok(TrialStacks { trial_id: trial.id.clone(), windows, stacks })
}
