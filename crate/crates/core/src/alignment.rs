//! Cross-robot magnetometer alignment.
//!
//! Pairs readings two robots took at nearly the same place, then fits a
//! transform `g` that maps the test robot's readings (source, R2) into the
//! train robot's measurement space (destination, R1).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{floor, sqrt};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::Trial;
use crate::neuralnet::{
    self, Activation, CyclicLr, LayerSpec, LossKind, NetworkSpec, OptimizerState, Params, Target, Tensor,
};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_EPS: f64 = 0.5;
/// Share of the test robot's data reserved for fitting.
pub const DEFAULT_ALIGNMENT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionedSample {
    pub pos: [f64; 2],
    pub m: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignmentPair {
    /// Test robot (R2) reading.
    pub m_src: [f64; 3],
    /// Train robot (R1) reading.
    pub m_dst: [f64; 3],
    pub pos_src: [f64; 2],
    pub pos_dst: [f64; 2],
}

/// Flattens a positioned trial into (position, reading) samples.
pub fn positioned_samples(trial: &Trial) -> Result<Vec<PositionedSample>> {
    let pos = trial
        .positions
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("trial `{}` has no positions", trial.id)))?;
    Ok(pos.iter().zip(&trial.samples).map(|(&pos, s)| PositionedSample { pos, m: s.m }).collect())
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Uniform grid over the train-robot samples with cell size `eps`.
struct Grid {
    cell: f64,
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn new(points: &[PositionedSample], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p.pos[a]);
                hi[a] = hi[a].max(p.pos[a]);
            }
        }
        let nx = floor((hi[0] - lo[0]) / cell) as usize + 1;
        let ny = floor((hi[1] - lo[1]) / cell) as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut grid = Self { cell, origin: lo, nx, ny, buckets: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = grid.cell_of(p.pos);
            buckets[cy as usize * nx + cx as usize].push(i);
        }
        grid.buckets = buckets;
        grid
    }

    fn cell_of(&self, pos: [f64; 2]) -> (i64, i64) {
        (floor((pos[0] - self.origin[0]) / self.cell) as i64, floor((pos[1] - self.origin[1]) / self.cell) as i64)
    }

    fn near(&self, pos: [f64; 2], mut f: impl FnMut(usize)) {
        let (cx, cy) = self.cell_of(pos);
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                if x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny {
                    self.buckets[y as usize * self.nx + x as usize].iter().for_each(|&i| f(i));
                }
            }
        }
    }
}

/// knnUnique pairing. A train sample qualifies for a test sample when it is
/// among the `k` nearest train samples and strictly closer than `eps`;
/// qualifying pairs are then matched greedily by ascending distance so that
/// every sample of either robot is used at most once.
pub fn build_alignment_set(
    train: &[PositionedSample],
    test: &[PositionedSample],
    k: usize,
    eps: f64,
) -> Result<Vec<AlignmentPair>> {
    if k == 0 || !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("alignment needs k >= 1 and eps > 0 (got k={k}, eps={eps})")));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyAlignmentSet { eps });
    }
    let grid = Grid::new(train, eps);
    let eps2 = eps * eps;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut near: Vec<(f64, usize)> = Vec::new();
    for (j, s) in test.iter().enumerate() {
        near.clear();
        grid.near(s.pos, |i| {
            let d = dist2(train[i].pos, s.pos);
            if d < eps2 {
                near.push((d, i));
            }
        });
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.extend(near.iter().take(k).map(|&(d, i)| (d, j, i)));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_train = vec![false; train.len()];
    let mut used_test = vec![false; test.len()];
    let mut pairs = Vec::new();
    for (_, j, i) in candidates {
        if used_train[i] || used_test[j] {
            continue;
        }
        used_train[i] = true;
        used_test[j] = true;
        pairs.push(AlignmentPair { m_src: test[j].m, m_dst: train[i].m, pos_src: test[j].pos, pos_dst: train[i].pos });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyAlignmentSet { eps });
    }
    Ok(pairs)
}

/// Standardization of a 3-vector: `(v - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl Standardizer {
    fn fit<'a>(vs: impl Iterator<Item = &'a [f64; 3]> + Clone) -> Self {
        let n = vs.clone().count() as f64;
        let mut mean = [0.0; 3];
        for v in vs.clone() {
            for a in 0..3 {
                mean[a] += v[a] / n;
            }
        }
        let mut var = [0.0; 3];
        for v in vs {
            for a in 0..3 {
                var[a] += (v[a] - mean[a]) * (v[a] - mean[a]) / n;
            }
        }
        let scale = var.map(|v| if v > 1e-24 { sqrt(v) } else { 1.0 });
        Self { mean, scale }
    }

    fn forward(&self, v: [f64; 3]) -> [f64; 3] {
        core::array::from_fn(|a| (v[a] - self.mean[a]) / self.scale[a])
    }

    fn inverse(&self, v: &[f64]) -> [f64; 3] {
        core::array::from_fn(|a| v[a] * self.scale[a] + self.mean[a])
    }
}

/// Fitted 3-layer perceptron with standardized inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeepTransform {
    pub spec: NetworkSpec,
    pub params: Params,
    pub input: Standardizer,
    pub output: Standardizer,
}

impl DeepTransform {
    pub fn apply(&self, m: [f64; 3]) -> [f64; 3] {
        let x = Tensor { shape: vec![3], data: self.input.forward(m).to_vec() };
        match neuralnet::forward(&self.spec, &self.params, &x) {
            Ok((y, _)) => self.output.inverse(&y.data),
            // spec and params are validated at fit/load time
            Err(_) => [f64::NAN; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum AlignmentTransform {
    Identity,
    /// Proper rotation, row-major.
    Linear { matrix: [[f64; 3]; 3] },
    /// Unconstrained `A m + c`.
    Affine { matrix: [[f64; 3]; 3], offset: [f64; 3] },
    Deep(DeepTransform),
}

fn mat_apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    core::array::from_fn(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    core::array::from_fn(|r| core::array::from_fn(|c| m[(r, c)]))
}

impl AlignmentTransform {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AlignmentTransform::Identity => "none",
            AlignmentTransform::Linear { .. } => "linear",
            AlignmentTransform::Affine { .. } => "affine",
            AlignmentTransform::Deep(_) => "deep",
        }
    }

    pub fn apply(&self, m: [f64; 3]) -> [f64; 3] {
        match self {
            AlignmentTransform::Identity => m,
            AlignmentTransform::Linear { matrix } => mat_apply(matrix, m),
            AlignmentTransform::Affine { matrix, offset } => {
                let v = mat_apply(matrix, m);
                [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]]
            }
            AlignmentTransform::Deep(d) => d.apply(m),
        }
    }

    pub fn matrix(&self) -> Option<[[f64; 3]; 3]> {
        match self {
            AlignmentTransform::Identity => Some([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            AlignmentTransform::Linear { matrix } | AlignmentTransform::Affine { matrix, .. } => Some(*matrix),
            AlignmentTransform::Deep(_) => None,
        }
    }
}

fn check_pairs(pairs: &[AlignmentPair], min: usize) -> Result<()> {
    if pairs.len() < min {
        return Err(Error::Rank(format!("{} pairs, at least {min} needed", pairs.len())));
    }
    if pairs.iter().any(|p| p.m_src.iter().chain(&p.m_dst).any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("non-finite reading in alignment pairs".into()));
    }
    Ok(())
}

/// Orthogonal Procrustes: the rotation `R` minimizing `sum |R m_src - m_dst|^2`.
pub fn fit_linear(pairs: &[AlignmentPair]) -> Result<AlignmentTransform> {
    check_pairs(pairs, 3)?;
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for p in pairs {
        let s = Vector3::from(p.m_src);
        let d = Vector3::from(p.m_dst);
        cross += d * s.transpose();
        scatter += s * s.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-10 * ev[0]) {
        return Err(Error::Rank("source readings are collinear".into()));
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Rank("SVD did not converge".into())),
    };
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * fix * v_t;
    Ok(AlignmentTransform::Linear { matrix: to_rows(&r) })
}

/// Unconstrained least-squares affine map, for ablation.
pub fn fit_affine(pairs: &[AlignmentPair]) -> Result<AlignmentTransform> {
    check_pairs(pairs, 4)?;
    let mut ata = Matrix4::zeros();
    let mut atb = [Vector4::zeros(); 3];
    for p in pairs {
        let a = Vector4::new(p.m_src[0], p.m_src[1], p.m_src[2], 1.0);
        ata += a * a.transpose();
        for (r, acc) in atb.iter_mut().enumerate() {
            *acc += a * p.m_dst[r];
        }
    }
    let chol = ata.cholesky().ok_or_else(|| Error::Rank("affine normal equations are singular".into()))?;
    let mut matrix = [[0.0; 3]; 3];
    let mut offset = [0.0; 3];
    for r in 0..3 {
        let x = chol.solve(&atb[r]);
        matrix[r] = [x[0], x[1], x[2]];
        offset[r] = x[3];
    }
    Ok(AlignmentTransform::Affine { matrix, offset })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeepFitConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for DeepFitConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 5000,
            batch_size: 32,
            base_lr: 1e-4,
            max_lr: 1e-3,
            step_size: 100,
            momentum: 0.0,
            seed: 0,
        }
    }
}

pub fn deep_spec(hidden: usize) -> NetworkSpec {
    NetworkSpec {
        input: vec![3],
        side_inputs: 0,
        layers: vec![
            LayerSpec::Dense { out_dim: hidden, activation: Activation::Relu },
            LayerSpec::Dense { out_dim: hidden, activation: Activation::Relu },
            LayerSpec::Output { dim: 3 },
        ],
    }
}

/// Trains a 3 -> h -> h -> 3 ReLU perceptron on the pairs with mini-batch SGD
/// and the cyclic schedule, minimizing the mean squared mismatch.
pub fn fit_deep(pairs: &[AlignmentPair], cfg: &DeepFitConfig) -> Result<AlignmentTransform> {
    check_pairs(pairs, 1)?;
    if cfg.batch_size == 0 || pairs.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "deep alignment needs at least one batch of {} pairs, got {}",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let spec = deep_spec(cfg.hidden);
    let mut params = Params::init(&spec, cfg.seed)?;
    let input = Standardizer::fit(pairs.iter().map(|p| &p.m_src));
    let output = Standardizer::fit(pairs.iter().map(|p| &p.m_dst));
    let xs: Vec<Tensor> =
        pairs.iter().map(|p| Tensor { shape: vec![3], data: input.forward(p.m_src).to_vec() }).collect();
    let ys: Vec<[f64; 3]> = pairs.iter().map(|p| output.forward(p.m_dst)).collect();
    let mut state = OptimizerState::new(CyclicLr::new(cfg.base_lr, cfg.max_lr, cfg.step_size)?, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grads = params.zeros_like();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            for &i in batch {
                let (y, cache) = neuralnet::forward(&spec, &params, &xs[i])?;
                let (l, g) = neuralnet::loss(LossKind::Mse, &y.data, Target::Values(&ys[i]))?;
                epoch_loss += l;
                neuralnet::backward_into(&spec, &params, &cache, &Tensor { shape: vec![3], data: g }, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            neuralnet::sgd_step(&mut params, &grads, &mut state);
        }
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::Training(format!("deep alignment diverged at epoch {epoch}")));
        }
    }
    Ok(AlignmentTransform::Deep(DeepTransform { spec, params, input, output }))
}

/// Replaces every reading by `g(m)`; timestamps and positions are untouched.
pub fn apply_alignment(g: &AlignmentTransform, trial: &Trial) -> Trial {
    let mut out = trial.clone();
    for s in &mut out.samples {
        s.m = g.apply(s.m);
    }
    out
}

/// Root-mean-square vector mismatch `sqrt(mean |g(m_src) - m_dst|^2)`.
pub fn residual_rms(g: &AlignmentTransform, pairs: &[AlignmentPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            let v = g.apply(p.m_src);
            (0..3).map(|a| (v[a] - p.m_dst[a]) * (v[a] - p.m_dst[a])).sum::<f64>()
        })
        .sum();
    sqrt(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignmentReport {
    pub pairs: usize,
    pub rms_before: f64,
    pub rms_after: f64,
}

pub fn report(g: &AlignmentTransform, pairs: &[AlignmentPair]) -> AlignmentReport {
    AlignmentReport {
        pairs: pairs.len(),
        rms_before: residual_rms(&AlignmentTransform::Identity, pairs),
        rms_after: residual_rms(g, pairs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use libm::{cos, sin};

    fn sample(x: f64, y: f64, m: [f64; 3]) -> PositionedSample {
        PositionedSample { pos: [x, y], m }
    }

    fn rot_z(a: f64) -> [[f64; 3]; 3] {
        [[cos(a), -sin(a), 0.0], [sin(a), cos(a), 0.0], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn identical_positions_pair_one_to_one() {
        let pts: Vec<_> = (0..20).map(|i| sample(i as f64 * 0.1, 0.0, [i as f64, 0.0, 0.0])).collect();
        let pairs = build_alignment_set(&pts, &pts, 1, 0.01).unwrap();
        assert_eq!(pairs.len(), 20);
        assert!(pairs.iter().all(|p| p.pos_src == p.pos_dst && p.m_src == p.m_dst));
    }

    #[test]
    fn far_sets_fail() {
        let a = [sample(0.0, 0.0, [1.0; 3])];
        let b = [sample(5.0, 0.0, [1.0; 3])];
        assert!(matches!(build_alignment_set(&a, &b, 3, 0.5), Err(Error::EmptyAlignmentSet { .. })));
    }

    #[test]
    fn pair_uniqueness_and_bound() {
        let train: Vec<_> = (0..30).map(|i| sample(i as f64 * 0.3, 0.0, [0.0; 3])).collect();
        let test: Vec<_> = (0..40).map(|i| sample(i as f64 * 0.2 + 0.05, 0.1, [0.0; 3])).collect();
        let pairs = build_alignment_set(&train, &test, 3, 0.5).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            assert!(dist2(p.pos_src, p.pos_dst) < 0.25);
            for q in &pairs[i + 1..] {
                assert!(p.pos_dst != q.pos_dst && p.pos_src != q.pos_src);
            }
        }
    }

    #[test]
    fn identity_pairs_give_identity() {
        let pairs: Vec<_> = [[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0], [0.3, -1.0, 7.0], [2.0, 2.0, -1.0]]
            .iter()
            .map(|&m| AlignmentPair { m_src: m, m_dst: m, pos_src: [0.0; 2], pos_dst: [0.0; 2] })
            .collect();
        let g = fit_linear(&pairs).unwrap();
        let m = g.matrix().unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((m[r][c] - if r == c { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_pairs_are_rank_deficient() {
        let pairs: Vec<_> = (1..10)
            .map(|i| {
                let m = [i as f64, 2.0 * i as f64, -(i as f64)];
                AlignmentPair { m_src: m, m_dst: m, pos_src: [0.0; 2], pos_dst: [0.0; 2] }
            })
            .collect();
        assert!(matches!(fit_linear(&pairs), Err(Error::Rank(_))));
        assert!(matches!(fit_linear(&pairs[..2]), Err(Error::Rank(_))));
    }

    #[test]
    fn affine_recovers_offset() {
        let r = rot_z(0.4);
        let pairs: Vec<_> = (0..12)
            .map(|i| {
                let s = [i as f64, (i * i % 7) as f64, (i % 3) as f64 - 1.0];
                let d = mat_apply(&r, s);
                AlignmentPair { m_src: s, m_dst: [d[0] + 1.0, d[1] - 2.0, d[2] + 0.5], pos_src: [0.0; 2], pos_dst: [0.0; 2] }
            })
            .collect();
        let g = fit_affine(&pairs).unwrap();
        assert!(residual_rms(&g, &pairs) < 1e-9);
    }

    #[test]
    fn linear_apply_preserves_norm() {
        let g = AlignmentTransform::Linear { matrix: rot_z(1.1) };
        let m = [3.0, -4.0, 12.0];
        let v = g.apply(m);
        let n = |v: [f64; 3]| sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        assert!((n(v) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn deep_needs_a_batch() {
        let pairs = vec![AlignmentPair { m_src: [1.0; 3], m_dst: [1.0; 3], pos_src: [0.0; 2], pos_dst: [0.0; 2] }; 5];
        assert!(matches!(fit_deep(&pairs, &DeepFitConfig::default()), Err(Error::Config(_))));
    }
}
