//! Central finite-difference checks of the hand-written backward passes.

#![allow(dead_code)]

use magloc_core::neuralnet::{
    backward_into, backward_sequence, forward, forward_sequence, loss, Activation, LayerSpec, LossKind,
    NetworkSpec, Params, Target, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to rounding compare as equal.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub checked: usize,
    /// Coordinates skipped because a kink (ReLU, max-pool switch, |e| = 0) lies within one step.
    pub skipped: usize,
    pub worst: f64,
}

impl Stats {
    pub fn merge(&mut self, o: Stats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
    }

    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL && self.skipped * 20 <= self.checked
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(FLOOR)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Compares `analytic` against central differences of `f` at `x`. With
/// `kinks`, coordinates whose one-sided slopes disagree are skipped.
fn compare(x: &mut [f64], analytic: &[f64], kinks: bool, mut f: impl FnMut(&[f64]) -> f64) -> Stats {
    let mut s = Stats::default();
    let f0 = if kinks { f(x) } else { 0.0 };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x);
        x[i] = orig - STEP;
        let down = f(x);
        x[i] = orig;
        if kinks {
            let (r, l) = ((up - f0) / STEP, (f0 - down) / STEP);
            if (r - l).abs() > 1e-3 * (r.abs() + l.abs()).max(1e-2) {
                s.skipped += 1;
                continue;
            }
        }
        let numeric = (up - down) / (2.0 * STEP);
        s.checked += 1;
        s.worst = s.worst.max(rel(analytic[i], numeric));
    }
    s
}

fn flat(p: &Params) -> Vec<f64> {
    p.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn unflat(template: &Params, x: &[f64]) -> Params {
    let mut p = template.clone();
    let mut k = 0;
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v = x[k];
            k += 1;
        }
    }
    p
}

fn has_kinks(spec: &NetworkSpec) -> bool {
    spec.layers.iter().any(|l| {
        matches!(
            l,
            LayerSpec::MaxPool { .. }
                | LayerSpec::Conv2d { activation: Activation::Relu, .. }
                | LayerSpec::Dense { activation: Activation::Relu, .. }
        )
    })
}

/// Checks parameter and input gradients of a feed-forward network under the
/// linear probe `L = w . out`.
pub fn feedforward(spec: &NetworkSpec, seed: u64) -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Params::init(spec, seed).unwrap();
    let in_len: usize = spec.input.iter().product();
    let input = Tensor::new(spec.input.clone(), gaussian(&mut rng, in_len, 1.0)).unwrap();
    let w = gaussian(&mut rng, spec.output_dim(), 1.0);
    let probe = |p: &Params, x: &Tensor| -> f64 {
        let (out, _) = forward(spec, p, x).unwrap();
        out.data.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = forward(spec, &params, &input).unwrap();
    let mut grads = params.zeros_like();
    let grad_out = Tensor::new(vec![w.len()], w.clone()).unwrap();
    let grad_in = backward_into(spec, &params, &cache, &grad_out, &mut grads).unwrap();
    let kinks = has_kinks(spec);

    let mut stats = Stats::default();
    let mut theta = flat(&params);
    stats.merge(compare(&mut theta, &flat(&grads), kinks, |t| probe(&unflat(&params, t), &input)));
    let mut x = input.data.clone();
    stats.merge(compare(&mut x, &grad_in.data, kinks, |v| {
        probe(&params, &Tensor::new(spec.input.clone(), v.to_vec()).unwrap())
    }));
    stats
}

/// Checks parameter gradients of a recurrent network over a random sequence.
pub fn sequence(spec: &NetworkSpec, steps: usize, seed: u64) -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Params::init(spec, seed).unwrap();
    let in_len: usize = spec.input.iter().product();
    let frames: Vec<Tensor> =
        (0..steps).map(|_| Tensor::new(spec.input.clone(), gaussian(&mut rng, in_len, 1.0)).unwrap()).collect();
    let side: Vec<Vec<f64>> = (0..steps).map(|_| gaussian(&mut rng, spec.side_inputs, 1.0)).collect();
    let w = gaussian(&mut rng, steps * spec.output_dim(), 1.0);
    let probe = |p: &Params| -> f64 {
        let (out, _) = forward_sequence(spec, p, &frames, &side).unwrap();
        out.data.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let (out, cache) = forward_sequence(spec, &params, &frames, &side).unwrap();
    let grad_out = Tensor::new(out.shape.clone(), w.clone()).unwrap();
    let grads = backward_sequence(spec, &params, &cache, &grad_out).unwrap();
    let mut theta = flat(&params);
    compare(&mut theta, &flat(&grads), has_kinks(spec), |t| probe(&unflat(&params, t)))
}

/// Checks the gradient of a loss with respect to its prediction argument.
pub fn loss_gradient(kind: LossKind, seed: u64) -> Stats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..8);
    let mut pred = gaussian(&mut rng, dim, 2.0);
    match kind {
        LossKind::CrossEntropy => {
            let class = rng.random_range(0..dim);
            let (_, g) = loss(kind, &pred, Target::Class(class)).unwrap();
            compare(&mut pred, &g, false, |p| loss(kind, p, Target::Class(class)).unwrap().0)
        }
        _ => {
            let target = gaussian(&mut rng, dim, 2.0);
            let (_, g) = loss(kind, &pred, Target::Values(&target)).unwrap();
            let kinks = !matches!(kind, LossKind::Mse);
            compare(&mut pred, &g, kinks, |p| loss(kind, p, Target::Values(&target)).unwrap().0)
        }
    }
}

pub fn conv_spec(activation: Activation, stride: usize, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..4);
    let side = rng.random_range(4..8);
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    NetworkSpec {
        input: vec![c, side, side],
        side_inputs: 0,
        layers: vec![
            LayerSpec::Conv2d { out_channels: rng.random_range(1..4), kernel, stride, activation },
            LayerSpec::Flatten,
            LayerSpec::Output { dim: 2 },
        ],
    }
}

pub fn dense_spec(activation: Activation, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkSpec {
        input: vec![rng.random_range(2..10)],
        side_inputs: 0,
        layers: vec![
            LayerSpec::Dense { out_dim: rng.random_range(2..8), activation },
            LayerSpec::Output { dim: rng.random_range(1..4) },
        ],
    }
}

pub fn pool_spec(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkSpec {
        input: vec![2, 6, 6],
        side_inputs: 0,
        layers: vec![
            LayerSpec::Conv2d { out_channels: rng.random_range(1..3), kernel: 3, stride: 1, activation: Activation::Tanh },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Output { dim: 2 },
        ],
    }
}

pub fn gru_spec(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkSpec {
        input: vec![rng.random_range(2..5)],
        side_inputs: rng.random_range(0..3),
        layers: vec![
            LayerSpec::Dense { out_dim: 3, activation: Activation::Tanh },
            LayerSpec::Gru { hidden_dim: rng.random_range(2..5), layers: rng.random_range(1..3) },
            LayerSpec::Output { dim: 2 },
        ],
    }
}

pub fn cnn_gru_spec() -> NetworkSpec {
    NetworkSpec {
        input: vec![2, 4, 4],
        side_inputs: 2,
        layers: vec![
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, activation: Activation::Tanh },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 4, activation: Activation::Sigmoid },
            LayerSpec::Gru { hidden_dim: 3, layers: 2 },
            LayerSpec::Output { dim: 2 },
        ],
    }
}

pub const INSTANCES: u64 = 20;

pub type Family = (&'static str, Box<dyn Fn(u64) -> Stats>);

/// Named families run by the gradient suite; each runs [`INSTANCES`] seeds.
pub fn families() -> Vec<Family> {
    vec![
        ("conv2d tanh", Box::new(|s| feedforward(&conv_spec(Activation::Tanh, 1, s), s))),
        ("conv2d sigmoid stride 2", Box::new(|s| feedforward(&conv_spec(Activation::Sigmoid, 2, s), s))),
        ("conv2d relu", Box::new(|s| feedforward(&conv_spec(Activation::Relu, 1, s), s))),
        ("maxpool", Box::new(|s| feedforward(&pool_spec(s), s))),
        ("dense linear", Box::new(|s| feedforward(&dense_spec(Activation::Linear, s), s))),
        ("dense tanh", Box::new(|s| feedforward(&dense_spec(Activation::Tanh, s), s))),
        ("dense relu", Box::new(|s| feedforward(&dense_spec(Activation::Relu, s), s))),
        ("gru", Box::new(|s| sequence(&gru_spec(s), 4, s))),
        ("cnn+gru", Box::new(|s| sequence(&cnn_gru_spec(), 3, s))),
        ("cross entropy", Box::new(|s| loss_gradient(LossKind::CrossEntropy, s))),
        ("mse", Box::new(|s| loss_gradient(LossKind::Mse, s))),
        ("mae", Box::new(|s| loss_gradient(LossKind::Mae, s))),
        ("huber", Box::new(|s| loss_gradient(LossKind::Huber { delta: 1.0 }, s))),
    ]
}
