//! Gridded magnetic maps and landmark extraction.
//!
//! Landmarks are found in three passes: strict local extrema of the cell
//! mean magnitude over occupied 8-neighbours, single-linkage clustering of
//! same-polarity candidates, and selection by deviation from the map mean.

use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, floor, sqrt};

use crate::error::{Error, Result};
use crate::ingest::{project, Projection, Trial};

pub const DEFAULT_RESOLUTION: f64 = 1.0;
pub const DEFAULT_LINK_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MagneticMap {
    pub resolution: f64,
    /// Lower-left corner of cell (0, 0).
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Polarity {
    Min,
    Max,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Min => "min",
            Polarity::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pos: [f64; 2],
    pub intensity: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Landmark {
    pub id: usize,
    pub pos: [f64; 2],
    pub intensity: f64,
    pub polarity: Polarity,
}

/// An occupied cell, for export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat {
    pub ix: usize,
    pub iy: usize,
    pub center: [f64; 2],
    pub mean: f64,
    pub count: usize,
}

impl MagneticMap {
    /// Folds positioned samples into cells holding the mean total-field magnitude.
    pub fn from_samples(samples: impl IntoIterator<Item = ([f64; 2], f64)> + Clone, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidInput("map resolution must be positive".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        let mut any = false;
        for (p, _) in samples.clone() {
            any = true;
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !any {
            return Err(Error::EmptyMap);
        }
        let origin = [floor(lo[0] / resolution) * resolution, floor(lo[1] / resolution) * resolution];
        let nx = floor((hi[0] - origin[0]) / resolution) as usize + 1;
        let ny = floor((hi[1] - origin[1]) / resolution) as usize + 1;
        let mut map = Self { resolution, origin, nx, ny, sums: vec![0.0; nx * ny], counts: vec![0; nx * ny] };
        for (p, v) in samples {
            let (ix, iy) = map.cell_of(p);
            map.sums[iy * nx + ix] += v;
            map.counts[iy * nx + ix] += 1;
        }
        Ok(map)
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let ix = (floor((p[0] - self.origin[0]) / self.resolution).max(0.0) as usize).min(self.nx - 1);
        let iy = (floor((p[1] - self.origin[1]) / self.resolution).max(0.0) as usize).min(self.ny - 1);
        (ix, iy)
    }

    pub fn bounds(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.nx as f64 * self.resolution,
            self.origin[1] + self.ny as f64 * self.resolution,
        ]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (iy as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn mean_at(&self, ix: usize, iy: usize) -> Option<f64> {
        let i = iy * self.nx + ix;
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    pub fn count_at(&self, ix: usize, iy: usize) -> usize {
        self.counts[iy * self.nx + ix]
    }

    pub fn cells(&self) -> Vec<CellStat> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if let Some(mean) = self.mean_at(ix, iy) {
                    out.push(CellStat { ix, iy, center: self.cell_center(ix, iy), mean, count: self.count_at(ix, iy) });
                }
            }
        }
        out
    }

    /// Mean and population standard deviation of occupied-cell intensities.
    pub fn intensity_stats(&self) -> (f64, f64) {
        let cells = self.cells();
        let n = cells.len() as f64;
        let mean = cells.iter().map(|c| c.mean).sum::<f64>() / n;
        let var = cells.iter().map(|c| (c.mean - mean) * (c.mean - mean)).sum::<f64>() / n;
        (mean, sqrt(var))
    }

    /// Rescales every cell intensity by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.sums.iter_mut().for_each(|s| *s *= factor);
        out
    }
}

/// Map of total-field magnitude from positioned, global-frame trials.
pub fn build_map(trials: &[Trial], resolution: f64) -> Result<MagneticMap> {
    for t in trials {
        if t.positions.is_none() {
            return Err(Error::InvalidInput(alloc::format!("trial `{}` has no ground truth", t.id)));
        }
    }
    let samples = trials.iter().flat_map(|t| {
        let pos = t.positions.as_ref().expect("checked above");
        t.samples.iter().zip(pos).map(|(s, p)| (*p, project(s.m, Projection::Xyz)))
    });
    MagneticMap::from_samples(samples, resolution)
}

/// Cells strictly above (below) all occupied 8-neighbours. Cells without any
/// occupied neighbour are never candidates.
pub fn detect_extrema(map: &MagneticMap) -> Vec<Candidate> {
    let mut out = Vec::new();
    for iy in 0..map.ny {
        for ix in 0..map.nx {
            let Some(v) = map.mean_at(ix, iy) else { continue };
            let (mut neighbours, mut is_max, mut is_min) = (0, true, true);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                    if jx < 0 || jy < 0 || jx >= map.nx as i64 || jy >= map.ny as i64 {
                        continue;
                    }
                    if let Some(w) = map.mean_at(jx as usize, jy as usize) {
                        neighbours += 1;
                        is_max &= v > w;
                        is_min &= v < w;
                    }
                }
            }
            if neighbours == 0 {
                continue;
            }
            let pos = map.cell_center(ix, iy);
            if is_max {
                out.push(Candidate { pos, intensity: v, polarity: Polarity::Max });
            }
            if is_min {
                out.push(Candidate { pos, intensity: v, polarity: Polarity::Min });
            }
        }
    }
    out
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering of same-polarity candidates cut at `link_distance`.
/// Each cluster becomes its intensity-weighted centroid carrying the extreme intensity.
pub fn refine_candidates(candidates: &[Candidate], link_distance: f64) -> Result<Vec<Candidate>> {
    if !(link_distance > 0.0) {
        return Err(Error::InvalidInput("link distance must be positive".into()));
    }
    let n = candidates.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if candidates[i].polarity == candidates[j].polarity
                && dist(candidates[i].pos, candidates[j].pos) <= link_distance
            {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut out = Vec::new();
    for root in 0..n {
        if find(&mut parent, root) != root {
            continue;
        }
        let members: Vec<&Candidate> = (0..n)
            .filter(|&i| find(&mut parent, i) == root)
            .map(|i| &candidates[i])
            .collect();
        let polarity = members[0].polarity;
        let weight: f64 = members.iter().map(|c| fabs(c.intensity)).sum();
        let pos = if weight > 0.0 {
            let mut p = [0.0; 2];
            for c in &members {
                p[0] += c.pos[0] * fabs(c.intensity) / weight;
                p[1] += c.pos[1] * fabs(c.intensity) / weight;
            }
            p
        } else {
            let k = members.len() as f64;
            [members.iter().map(|c| c.pos[0]).sum::<f64>() / k, members.iter().map(|c| c.pos[1]).sum::<f64>() / k]
        };
        let intensity = match polarity {
            Polarity::Max => members.iter().map(|c| c.intensity).fold(f64::NEG_INFINITY, f64::max),
            Polarity::Min => members.iter().map(|c| c.intensity).fold(f64::INFINITY, f64::min),
        };
        out.push(Candidate { pos, intensity, polarity });
    }
    Ok(out)
}

/// Keeps clusters deviating from `map_mean` by at least `threshold` and numbers them from 0.
pub fn select_landmarks(clusters: &[Candidate], map_mean: f64, threshold: f64) -> Result<Vec<Landmark>> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidInput("selection threshold must be non-negative".into()));
    }
    let kept: Vec<Landmark> = clusters
        .iter()
        .filter(|c| fabs(c.intensity - map_mean) >= threshold)
        .enumerate()
        .map(|(id, c)| Landmark { id, pos: c.pos, intensity: c.intensity, polarity: c.polarity })
        .collect();
    if kept.is_empty() {
        return Err(Error::NoLandmarks { threshold });
    }
    Ok(kept)
}

/// Tunables of the landmark pipeline; `threshold = None` means one standard
/// deviation of the occupied-cell intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LandmarkConfig {
    pub resolution: f64,
    pub link_distance: f64,
    pub threshold: Option<f64>,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, link_distance: DEFAULT_LINK_DISTANCE, threshold: None }
    }
}

/// detect -> refine -> select on a built map.
pub fn extract_landmarks(map: &MagneticMap, cfg: &LandmarkConfig) -> Result<Vec<Landmark>> {
    let (mean, std) = map.intensity_stats();
    let clusters = refine_candidates(&detect_extrema(map), cfg.link_distance)?;
    select_landmarks(&clusters, mean, cfg.threshold.unwrap_or(std))
}

/// Id of the nearest landmark to every anchor; ties go to the lowest id.
pub fn label_windows(anchors: &[[f64; 2]], landmarks: &[Landmark]) -> Result<Vec<usize>> {
    if landmarks.is_empty() {
        return Err(Error::NoLandmarks { threshold: f64::NAN });
    }
    let mut order: Vec<&Landmark> = landmarks.iter().collect();
    order.sort_by_key(|l| l.id);
    Ok(anchors
        .iter()
        .map(|a| {
            let mut best = order[0];
            let mut best_d = dist(*a, best.pos);
            for l in &order[1..] {
                let d = dist(*a, l.pos);
                if d < best_d {
                    best = l;
                    best_d = d;
                }
            }
            best.id
        })
        .collect())
}
