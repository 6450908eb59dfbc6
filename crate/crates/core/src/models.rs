//! Landmark classifier, CNN+FN position regressor and CNN+GRU sequence
//! regressor, with their training loops and inference.
//!
//! Regressors work in normalized coordinates `(p - mean) / scale` fitted on
//! the training targets; the recurrent model predicts a displacement that is
//! added to the previous position estimate it receives as a side input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::WindowImageStack;
use crate::neuralnet::{
    self, Activation, CyclicLr, LayerSpec, LossKind, NetworkSpec, OptimizerState, Params, Target, Tensor,
    TrunkCache,
};

/// Maximum recurrent context in windows.
pub const DEFAULT_CONTEXT: usize = 15;
/// Standard deviation of the start-position error in meters.
pub const DEFAULT_START_NOISE: f64 = 3.0;
pub const DEFAULT_P_TEACH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    Classifier,
    FnRegressor,
    RnnRegressor,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Classifier => "classifier",
            ModelKind::FnRegressor => "fn_regressor",
            ModelKind::RnnRegressor => "rnn_regressor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "classifier" => ModelKind::Classifier,
            "fn_regressor" | "fn" => ModelKind::FnRegressor,
            "rnn_regressor" | "rnn" => ModelKind::RnnRegressor,
            _ => return None,
        })
    }
}

/// Layer widths shared by the three architectures.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub fc: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { conv_channels: vec![32, 64], kernel: 3, pool: 2, fc: 256, gru_hidden: 128, gru_layers: 2 }
    }
}

fn conv_trunk(arch: &ArchConfig) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &c in &arch.conv_channels {
        layers.push(LayerSpec::Conv2d { out_channels: c, kernel: arch.kernel, stride: 1, activation: Activation::Relu });
        if arch.pool > 1 {
            layers.push(LayerSpec::MaxPool { size: arch.pool });
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { out_dim: arch.fc, activation: Activation::Relu });
    layers
}

/// Convolutional trunk, one hidden FC layer and a class-logit output.
pub fn classifier_spec(channels: usize, side: usize, arch: &ArchConfig, classes: usize) -> NetworkSpec {
    let mut layers = conv_trunk(arch);
    layers.push(LayerSpec::Output { dim: classes });
    NetworkSpec { input: vec![channels, side, side], side_inputs: 0, layers }
}

pub fn fn_regressor_spec(channels: usize, side: usize, arch: &ArchConfig) -> NetworkSpec {
    let mut layers = conv_trunk(arch);
    layers.push(LayerSpec::Output { dim: 2 });
    NetworkSpec { input: vec![channels, side, side], side_inputs: 0, layers }
}

/// Trunk embedding plus the previous position feed a stacked GRU.
pub fn rnn_regressor_spec(channels: usize, side: usize, arch: &ArchConfig) -> NetworkSpec {
    let mut layers = conv_trunk(arch);
    layers.push(LayerSpec::Gru { hidden_dim: arch.gru_hidden, layers: arch.gru_layers });
    layers.push(LayerSpec::Output { dim: 2 });
    NetworkSpec { input: vec![channels, side, side], side_inputs: 2, layers }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: usize,
    pub momentum: f64,
    /// Probability of feeding the true previous position during training.
    pub p_teach: f64,
    /// Decay `p_teach` linearly to zero over the epochs.
    pub teach_decay: bool,
    /// Per-coordinate standard deviation of the start estimate, meters.
    pub start_noise: f64,
    /// Maximum number of windows the recurrent model looks back.
    pub context: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mse,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            base_lr: 1e-4,
            max_lr: 1e-3,
            step_size: 100,
            momentum: 0.0,
            p_teach: DEFAULT_P_TEACH,
            teach_decay: true,
            start_noise: DEFAULT_START_NOISE,
            context: DEFAULT_CONTEXT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_teach) {
            return Err(Error::Config(format!("p_teach {} is outside [0, 1]", self.p_teach)));
        }
        if !(self.start_noise >= 0.0) {
            return Err(Error::Config(format!("start noise {} is negative", self.start_noise)));
        }
        if self.context == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("context, batch size and epochs must be at least 1".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if let LossKind::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return Err(Error::Config(format!("huber delta {delta} must be positive")));
            }
        }
        CyclicLr::new(self.base_lr, self.max_lr, self.step_size)?;
        Ok(())
    }

    fn optimizer(&self) -> Result<OptimizerState> {
        Ok(OptimizerState::new(CyclicLr::new(self.base_lr, self.max_lr, self.step_size)?, self.momentum))
    }

    fn p_teach_at(&self, epoch: usize) -> f64 {
        if self.teach_decay {
            self.p_teach * (1.0 - epoch as f64 / self.epochs as f64)
        } else {
            self.p_teach
        }
    }
}

/// Affine map between meters and the regressors' normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Normalizer {
    pub mean: [f64; 2],
    pub scale: f64,
}

impl Normalizer {
    pub fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len().max(1) as f64;
        let mean = [
            points.iter().map(|p| p[0]).sum::<f64>() / n,
            points.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let var = points
            .iter()
            .map(|p| ((p[0] - mean[0]) * (p[0] - mean[0]) + (p[1] - mean[1]) * (p[1] - mean[1])) / 2.0)
            .sum::<f64>()
            / n;
        let scale = if var > 1e-12 { sqrt(var) } else { 1.0 };
        Self { mean, scale }
    }

    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.mean[0]) / self.scale, (p[1] - self.mean[1]) / self.scale]
    }

    pub fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.mean[0], p[1] * self.scale + self.mean[1]]
    }

    /// Converts a loss defined in meters to normalized units.
    fn loss(&self, kind: LossKind) -> LossKind {
        match kind {
            LossKind::Huber { delta } => LossKind::Huber { delta: delta / self.scale },
            k => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model {
    pub kind: ModelKind,
    pub spec: NetworkSpec,
    pub params: Params,
    /// Regressors only.
    pub normalizer: Option<Normalizer>,
    /// Classifier only: position of each landmark class.
    pub class_positions: Vec<[f64; 2]>,
    /// Recurrent context used at training time.
    pub context: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Ids of trials skipped because they had no windows.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionEstimate {
    pub t: f64,
    pub pos: [f64; 2],
    pub source: ModelKind,
}

/// A window stack as a `[channels, side, side]` tensor.
pub fn stack_tensor(stack: &WindowImageStack) -> Tensor {
    Tensor { shape: vec![stack.channels.len(), stack.side, stack.side], data: stack.to_flat() }
}

fn check_inputs(spec: &NetworkSpec, inputs: &[Tensor]) -> Result<()> {
    spec.validate()?;
    if let Some(bad) = inputs.iter().position(|x| x.shape != spec.input) {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("sample {bad} has shape {:?}, network expects {:?}", inputs[bad].shape, spec.input),
        });
    }
    Ok(())
}

fn diverged(epoch: usize) -> Error {
    Error::Training(format!("loss became non-finite in epoch {epoch}"))
}

/// Mini-batch SGD over independent samples.
fn fit_samples(
    spec: &NetworkSpec,
    params: &mut Params,
    inputs: &[Tensor],
    cfg: &TrainConfig,
    mut loss_of: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<TrainReport> {
    let mut state = cfg.optimizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = params.zeros_like();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            for &i in batch {
                let (y, cache) = neuralnet::forward(spec, params, &inputs[i])?;
                let (l, g) = loss_of(i, &y.data)?;
                total += l;
                let g = Tensor { shape: vec![g.len()], data: g };
                neuralnet::backward_into(spec, params, &cache, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            neuralnet::sgd_step(params, &grads, &mut state);
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(diverged(epoch));
        }
        report.epoch_loss.push(mean);
    }
    Ok(report)
}

/// Trains the landmark classifier with cross entropy.
pub fn train_classifier(
    inputs: &[Tensor],
    labels: &[usize],
    class_positions: &[[f64; 2]],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    check_inputs(spec, inputs)?;
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::InvalidInput(format!("{} inputs but {} labels", inputs.len(), labels.len())));
    }
    let classes = spec.output_dim();
    if class_positions.len() != classes {
        return Err(Error::Config(format!(
            "network has {classes} outputs but {} landmark positions were given",
            class_positions.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ClassIndex { index: bad, classes });
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Training("classifier training needs at least two classes".into()));
    }
    let mut params = Params::init(spec, cfg.seed)?;
    let report = fit_samples(spec, &mut params, inputs, cfg, |i, y| {
        neuralnet::loss(LossKind::CrossEntropy, y, Target::Class(labels[i]))
    })?;
    let model = Model {
        kind: ModelKind::Classifier,
        spec: spec.clone(),
        params,
        normalizer: None,
        class_positions: class_positions.to_vec(),
        context: 1,
    };
    Ok((model, report))
}

fn regression_loss(cfg: &TrainConfig) -> Result<LossKind> {
    if cfg.loss == LossKind::CrossEntropy {
        return Err(Error::Config("regressors need mse, mae or huber loss".into()));
    }
    Ok(cfg.loss)
}

/// Trains the CNN+FN regressor to map one window to its anchor position.
pub fn train_regressor_fn(
    inputs: &[Tensor],
    targets: &[[f64; 2]],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let loss = regression_loss(cfg)?;
    check_inputs(spec, inputs)?;
    if spec.output_dim() != 2 || spec.is_recurrent() {
        return Err(Error::Config("the FN regressor needs a feed-forward network with 2 outputs".into()));
    }
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::InvalidInput(format!("{} inputs but {} anchors", inputs.len(), targets.len())));
    }
    let norm = Normalizer::fit(targets);
    let loss = norm.loss(loss);
    let normalized: Vec<[f64; 2]> = targets.iter().map(|&p| norm.forward(p)).collect();
    let mut params = Params::init(spec, cfg.seed)?;
    let report =
        fit_samples(spec, &mut params, inputs, cfg, |i, y| neuralnet::loss(loss, y, Target::Values(&normalized[i])))?;
    let model = Model {
        kind: ModelKind::FnRegressor,
        spec: spec.clone(),
        params,
        normalizer: Some(norm),
        class_positions: Vec::new(),
        context: 1,
    };
    Ok((model, report))
}

/// One trial's windows in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub id: String,
    pub inputs: Vec<Tensor>,
    /// Ground-truth anchor per window.
    pub positions: Vec<[f64; 2]>,
    /// Window end time per window.
    pub times: Vec<f64>,
}

/// Start estimate: the first anchor plus gaussian noise of `sigma` per coordinate.
pub fn noisy_start(first: [f64; 2], sigma: f64, rng: &mut impl Rng) -> [f64; 2] {
    if sigma <= 0.0 {
        return first;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    [first[0] + n.sample(rng), first[1] + n.sample(rng)]
}

fn step_input(embedding: &[f64], feed: [f64; 2]) -> Vec<f64> {
    let mut v = Vec::with_capacity(embedding.len() + 2);
    v.extend_from_slice(embedding);
    v.extend_from_slice(&feed);
    v
}

/// Trains the CNN+GRU regressor trial by trial. At window `t` the GRU reads
/// the last `context` windows, each paired with the position estimate that
/// preceded it, and predicts the displacement from the current estimate.
/// The estimate fed forward is the ground truth with probability `p_teach`
/// and the model's own (detached) prediction otherwise; the first estimate is
/// the first anchor plus start noise. One SGD step is taken per trial.
pub fn train_regressor_rnn(trials: &[SequenceData], spec: &NetworkSpec, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let loss = regression_loss(cfg)?;
    if !spec.is_recurrent() || spec.side_inputs != 2 || spec.output_dim() != 2 {
        return Err(Error::Config("the RNN regressor needs a GRU network with 2 side inputs and 2 outputs".into()));
    }
    let mut report = TrainReport::default();
    let mut usable = Vec::new();
    for t in trials {
        if t.inputs.len() != t.positions.len() || t.inputs.len() != t.times.len() {
            return Err(Error::InvalidInput(format!("trial `{}` has mismatched windows and anchors", t.id)));
        }
        if t.inputs.is_empty() {
            report.skipped.push(t.id.clone());
        } else {
            check_inputs(spec, &t.inputs)?;
            usable.push(t);
        }
    }
    if usable.is_empty() {
        return Err(Error::Training("no trial has any window".into()));
    }
    let all: Vec<[f64; 2]> = usable.iter().flat_map(|t| t.positions.iter().copied()).collect();
    let norm = Normalizer::fit(&all);
    let loss = norm.loss(loss);
    let mut params = Params::init(spec, cfg.seed)?;
    let mut state = cfg.optimizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut grads = params.zeros_like();
    let windows: usize = usable.iter().map(|t| t.inputs.len()).sum();
    for epoch in 0..cfg.epochs {
        let p_teach = cfg.p_teach_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &ti in &order {
            let trial = usable[ti];
            let n = trial.inputs.len();
            let targets: Vec<[f64; 2]> = trial.positions.iter().map(|&p| norm.forward(p)).collect();
            let mut embeddings = Vec::with_capacity(n);
            let mut caches: Vec<TrunkCache> = Vec::with_capacity(n);
            for x in &trial.inputs {
                let (e, c) = neuralnet::trunk_forward(spec, &params, x)?;
                embeddings.push(e);
                caches.push(c);
            }
            let emb_dim = embeddings[0].len();
            let mut grad_emb = vec![vec![0.0; emb_dim]; n];
            grads.scale(0.0);
            let mut feeds = Vec::with_capacity(n);
            feeds.push(norm.forward(noisy_start(trial.positions[0], cfg.start_noise, &mut rng)));
            for t in 0..n {
                let lo = (t + 1).saturating_sub(cfg.context);
                let steps: Vec<Vec<f64>> = (lo..=t).map(|j| step_input(&embeddings[j], feeds[j])).collect();
                let (outs, head) = neuralnet::head_forward(spec, &params, &steps)?;
                let out = outs.last().expect("non-empty context");
                let pred = [feeds[t][0] + out[0], feeds[t][1] + out[1]];
                let (l, g) = neuralnet::loss(loss, &pred, Target::Values(&targets[t]))?;
                total += l;
                let mut grad_out = vec![vec![0.0; 2]; steps.len()];
                grad_out[steps.len() - 1] = g;
                let grad_in = neuralnet::head_backward(spec, &params, &head, &grad_out, &mut grads)?;
                for (j, gi) in (lo..=t).zip(&grad_in) {
                    for (acc, v) in grad_emb[j].iter_mut().zip(&gi[..emb_dim]) {
                        *acc += v;
                    }
                }
                if t + 1 < n {
                    let teach = rng.random::<f64>() < p_teach;
                    feeds.push(if teach { targets[t] } else { pred });
                }
            }
            for (c, g) in caches.iter().zip(&grad_emb) {
                neuralnet::trunk_backward(spec, &params, c, g, &mut grads)?;
            }
            grads.scale(1.0 / n as f64);
            neuralnet::sgd_step(&mut params, &grads, &mut state);
        }
        let mean = total / windows as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(diverged(epoch));
        }
        report.epoch_loss.push(mean);
    }
    let model = Model {
        kind: ModelKind::RnnRegressor,
        spec: spec.clone(),
        params,
        normalizer: Some(norm),
        class_positions: Vec::new(),
        context: cfg.context,
    };
    Ok((model, report))
}

impl Model {
    /// Number of image channels the model expects.
    pub fn channels(&self) -> usize {
        self.spec.input.first().copied().unwrap_or(0)
    }

    pub fn side(&self) -> usize {
        self.spec.input.get(1).copied().unwrap_or(0)
    }

    /// Class probabilities of the landmark classifier.
    pub fn predict_proba(&self, input: &Tensor) -> Result<Vec<f64>> {
        if self.kind != ModelKind::Classifier {
            return Err(Error::Inference(format!("{} does not output class probabilities", self.kind.name())));
        }
        let (y, _) = neuralnet::forward(&self.spec, &self.params, input)?;
        Ok(neuralnet::softmax(&y.data))
    }

    pub fn predict_class(&self, input: &Tensor) -> Result<usize> {
        let p = self.predict_proba(input)?;
        Ok(argmax(&p))
    }

    /// Position of a single window. The classifier reports the position of
    /// the most probable landmark.
    pub fn predict(&self, input: &Tensor) -> Result<[f64; 2]> {
        match self.kind {
            ModelKind::Classifier => Ok(self.class_positions[self.predict_class(input)?]),
            ModelKind::FnRegressor => {
                let (y, _) = neuralnet::forward(&self.spec, &self.params, input)?;
                let norm = self.normalizer.ok_or_else(|| Error::Inference("regressor lacks a normalizer".into()))?;
                Ok(norm.inverse([y.data[0], y.data[1]]))
            }
            ModelKind::RnnRegressor => {
                Err(Error::Inference("the sequence regressor needs predict_sequence and a start estimate".into()))
            }
        }
    }

    /// Autoregressive rollout over one trial. The classifier and FN
    /// regressor ignore `start` and predict each window independently.
    pub fn predict_sequence(&self, inputs: &[Tensor], times: &[f64], start: Option<[f64; 2]>) -> Result<Vec<PositionEstimate>> {
        if inputs.len() != times.len() {
            return Err(Error::InvalidInput(format!("{} windows but {} timestamps", inputs.len(), times.len())));
        }
        if self.kind != ModelKind::RnnRegressor {
            return inputs
                .iter()
                .zip(times)
                .map(|(x, &t)| Ok(PositionEstimate { t, pos: self.predict(x)?, source: self.kind }))
                .collect();
        }
        let start = start.ok_or_else(|| Error::Inference("the sequence regressor needs a start estimate".into()))?;
        let norm = self.normalizer.ok_or_else(|| Error::Inference("regressor lacks a normalizer".into()))?;
        let context = self.context.max(1);
        let embeddings = inputs
            .iter()
            .map(|x| neuralnet::trunk_forward(&self.spec, &self.params, x).map(|(e, _)| e))
            .collect::<Result<Vec<_>>>()?;
        let mut feeds = vec![norm.forward(start)];
        let mut out = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let lo = (t + 1).saturating_sub(context);
            let steps: Vec<Vec<f64>> = (lo..=t).map(|j| step_input(&embeddings[j], feeds[j])).collect();
            let (outs, _) = neuralnet::head_forward(&self.spec, &self.params, &steps)?;
            let o = outs.last().expect("non-empty context");
            let pred = [feeds[t][0] + o[0], feeds[t][1] + o[1]];
            if !(pred[0].is_finite() && pred[1].is_finite()) {
                return Err(Error::Inference(format!("non-finite estimate at window {t}")));
            }
            feeds.push(pred);
            out.push(PositionEstimate { t: times[t], pos: norm.inverse(pred), source: self.kind });
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean euclidean distance between estimates and ground truth.
pub fn evaluate(estimates: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch { left: estimates.len(), right: truth.len() });
    }
    if estimates.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, g)| sqrt((e[0] - g[0]) * (e[0] - g[0]) + (e[1] - g[1]) * (e[1] - g[1])))
        .sum();
    Ok(sum / estimates.len() as f64)
}

/// Per-trial result of [`evaluate_trials`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialEvaluation {
    pub trial_id: String,
    pub mean_error_m: f64,
    pub windows: usize,
    pub estimates: Vec<PositionEstimate>,
}

/// Runs the model over every trial and scores it. Recurrent models start
/// from the first anchor plus seeded noise of `start_noise` per coordinate.
/// Returns the mean error over all windows and the per-trial breakdown.
pub fn evaluate_trials(
    model: &Model,
    trials: &[SequenceData],
    start_noise: f64,
    seed: u64,
) -> Result<(f64, Vec<TrialEvaluation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_trial = Vec::new();
    let mut all_est = Vec::new();
    let mut all_gt = Vec::new();
    for trial in trials {
        if trial.inputs.is_empty() {
            continue;
        }
        let start = noisy_start(trial.positions[0], start_noise, &mut rng);
        let estimates = model.predict_sequence(&trial.inputs, &trial.times, Some(start))?;
        let est: Vec<[f64; 2]> = estimates.iter().map(|e| e.pos).collect();
        let err = evaluate(&est, &trial.positions)?;
        all_est.extend_from_slice(&est);
        all_gt.extend_from_slice(&trial.positions);
        per_trial.push(TrialEvaluation { trial_id: trial.id.clone(), mean_error_m: err, windows: est.len(), estimates });
    }
    Ok((evaluate(&all_est, &all_gt)?, per_trial))
}
