//! Small dense networks `3 -> h1 -> h2 -> 1` with tanh hidden layers, exact
//! reverse-mode gradients and Adagrad/Adam updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUTS: usize = 3;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidParam(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnnConfig {
    pub hidden_sizes: [usize; 2],
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Multiplier on the raw network output, in the unit of the corrected
    /// parameter.
    pub output_scale: f64,
}

impl FnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidParam("hidden layer sizes must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParam(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::InvalidParam(format!(
                "output scale must be positive, got {}",
                self.output_scale
            )));
        }
        Ok(())
    }

    /// R0 corrector: 128/4 hidden nodes, Adagrad at 1e-3.
    pub fn r0_default() -> Self {
        FnnConfig {
            hidden_sizes: [128, 4],
            activation: Activation::Tanh,
            epochs: 200,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adagrad,
            seed: 1,
            output_scale: 0.01,
        }
    }

    /// RD corrector: 256/4 hidden nodes, Adagrad at 1e-2.
    pub fn rd_default() -> Self {
        FnnConfig {
            hidden_sizes: [256, 4],
            activation: Activation::Tanh,
            epochs: 200,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adagrad,
            seed: 2,
            output_scale: 0.01,
        }
    }

    /// CD corrector: 8/4 hidden nodes, Adam at 1e-2.
    pub fn cd_default() -> Self {
        FnnConfig {
            hidden_sizes: [8, 4],
            activation: Activation::Tanh,
            epochs: 200,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 3,
            output_scale: 100.0,
        }
    }
}

/// Per-input z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; INPUTS],
    pub std: [f64; INPUTS],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; INPUTS],
            std: [1.0; INPUTS],
        }
    }
}

impl NormStats {
    /// Population statistics of the rows. A channel with (near) zero spread,
    /// such as temperature in a single-ambient run, gets unit std so it
    /// normalizes to zero.
    pub fn from_rows(rows: &[[f64; INPUTS]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; INPUTS];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; INPUTS];
        for r in rows {
            for j in 0..INPUTS {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if !(*s > 1e-9) {
                *s = 1.0;
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, x: &[f64; INPUTS]) -> [f64; INPUTS] {
        let mut out = [0.0; INPUTS];
        for j in 0..INPUTS {
            out[j] = (x[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// A dense network. Weights are stored row-major, one matrix per layer,
/// shaped `layer_sizes[l+1] x layer_sizes[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnModel {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_scale: f64,
    pub norm_stats: NormStats,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub optimizer: OptimizerKind,
}

/// Seeded initialization: uniform Glorot hidden weights, zero biases and a
/// zero output layer so a fresh network outputs exactly zero.
pub fn fnn_init(config: &FnnConfig) -> Result<FnnModel> {
    config.validate()?;
    let sizes = vec![INPUTS, config.hidden_sizes[0], config.hidden_sizes[1], 1];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_layers = sizes.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let w = if l + 1 == n_layers {
            vec![0.0; fan_in * fan_out]
        } else {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
        };
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(FnnModel {
        layer_sizes: sizes,
        activation: config.activation,
        output_scale: config.output_scale,
        norm_stats: NormStats::default(),
        weights,
        biases,
        optimizer: config.optimizer,
    })
}

/// Layer inputs recorded by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// `activations[l]` is the input to layer `l`; the last entry is the raw
    /// (unscaled) output.
    pub activations: Vec<Vec<f64>>,
}

/// Gradients with the same shapes as the model's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &FnnModel) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    /// Weights of every layer, then biases of every layer.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl FnnModel {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Same order as [`Gradients::iter`].
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|w| w.is_finite()) && self.output_scale.is_finite()
    }

    /// Checks shapes against `layer_sizes` and the normalization invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_sizes.len();
        if n < 2 || self.layer_sizes[0] != INPUTS || self.layer_sizes[n - 1] != 1 {
            return Err(Error::CorruptModel(format!(
                "layer sizes {:?} must start at {INPUTS} and end at 1",
                self.layer_sizes
            )));
        }
        if self.weights.len() != n - 1 || self.biases.len() != n - 1 {
            return Err(Error::CorruptModel("layer count mismatch".into()));
        }
        for l in 0..n - 1 {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if self.weights[l].len() != fan_in * fan_out || self.biases[l].len() != fan_out {
                return Err(Error::CorruptModel(format!("layer {l} has the wrong shape")));
            }
        }
        if !self.is_finite() {
            return Err(Error::CorruptModel("non-finite weights".into()));
        }
        if self.norm_stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::CorruptModel("normalization std must be positive".into()));
        }
        Ok(())
    }
}

fn dense(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let fan_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            let row = &weights[r * fan_in..(r + 1) * fan_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// Scaled scalar output and the cache for [`fnn_backward`].
pub fn fnn_forward(model: &FnnModel, input: &[f64; INPUTS]) -> (f64, ForwardCache) {
    let n_layers = model.num_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(model.norm_stats.normalize(input).to_vec());
    for l in 0..n_layers {
        let mut z = dense(&model.weights[l], &model.biases[l], &activations[l]);
        if l + 1 < n_layers {
            match model.activation {
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        activations.push(z);
    }
    let raw = activations[n_layers][0];
    (raw * model.output_scale, ForwardCache { activations })
}

/// Gradient of `upstream_grad * output` with respect to every weight.
pub fn fnn_backward(model: &FnnModel, cache: &ForwardCache, upstream_grad: f64) -> Gradients {
    let mut grads = Gradients::zeros_like(model);
    fnn_backward_into(model, cache, upstream_grad, &mut grads);
    grads
}

/// Accumulating variant of [`fnn_backward`].
pub fn fnn_backward_into(model: &FnnModel, cache: &ForwardCache, upstream_grad: f64, grads: &mut Gradients) {
    if upstream_grad == 0.0 {
        return;
    }
    let n_layers = model.num_layers();
    let mut delta = vec![upstream_grad * model.output_scale];
    for l in (0..n_layers).rev() {
        let input = &cache.activations[l];
        let fan_in = input.len();
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        for (r, d) in delta.iter().enumerate() {
            gb[r] += d;
            let row = &mut gw[r * fan_in..(r + 1) * fan_in];
            row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
        }
        if l == 0 {
            break;
        }
        let w = &model.weights[l];
        let mut prev = vec![0.0; fan_in];
        for (r, d) in delta.iter().enumerate() {
            let row = &w[r * fan_in..(r + 1) * fan_in];
            prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
        }
        // input to layer l is the tanh output of layer l-1
        match model.activation {
            Activation::Tanh => prev.iter_mut().zip(input).for_each(|(p, h)| *p *= 1.0 - h * h),
        }
        delta = prev;
    }
}

/// Per-weight optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Adagrad: squared-gradient sums. Adam: first moments.
    pub first: Vec<f64>,
    /// Adam second moments; empty for Adagrad.
    pub second: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &FnnModel) -> Self {
        let n = model.num_params();
        OptimizerState {
            kind,
            first: vec![0.0; n],
            second: match kind {
                OptimizerKind::Adagrad => Vec::new(),
                OptimizerKind::Adam => vec![0.0; n],
            },
            steps: 0,
        }
    }
}

pub fn optimizer_step(model: &mut FnnModel, grads: &Gradients, state: &mut OptimizerState, learning_rate: f64) {
    state.steps += 1;
    match state.kind {
        OptimizerKind::Adagrad => {
            for ((w, g), acc) in model.params_mut().zip(grads.iter()).zip(state.first.iter_mut()) {
                *acc += g * g;
                *w -= learning_rate * g / (acc.sqrt() + ADAGRAD_EPS);
            }
        }
        OptimizerKind::Adam => {
            let t = state.steps as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((w, g), m), v) in model
                .params_mut()
                .zip(grads.iter())
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> FnnConfig {
        FnnConfig {
            hidden_sizes: [4, 4],
            activation: Activation::Tanh,
            epochs: 1,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed,
            output_scale: 1.0,
        }
    }

    fn randomized(seed: u64) -> FnnModel {
        let mut m = fnn_init(&small_config(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.params_mut().for_each(|w| *w = rng.random_range(-0.8..0.8));
        m.norm_stats = NormStats {
            mean: [1.0, 3.7, 0.0],
            std: [0.5, 0.2, 10.0],
        };
        m
    }

    /// Straight-line reimplementation for a 3-h1-h2-1 network.
    fn reference_forward(m: &FnnModel, x: &[f64; 3]) -> f64 {
        let xn: Vec<f64> = (0..3)
            .map(|j| (x[j] - m.norm_stats.mean[j]) / m.norm_stats.std[j])
            .collect();
        let mut a = xn;
        for l in 0..m.num_layers() {
            let fan_in = m.layer_sizes[l];
            let fan_out = m.layer_sizes[l + 1];
            let mut z = vec![0.0; fan_out];
            for r in 0..fan_out {
                let mut acc = m.biases[l][r];
                for c in 0..fan_in {
                    acc += m.weights[l][r * fan_in + c] * a[c];
                }
                z[r] = if l + 1 < m.num_layers() { acc.tanh() } else { acc };
            }
            a = z;
        }
        a[0] * m.output_scale
    }

    #[test]
    fn init_is_deterministic_and_zero_output() {
        let a = fnn_init(&small_config(9)).unwrap();
        let b = fnn_init(&small_config(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, fnn_init(&small_config(10)).unwrap());
        for x in [[0.0, 3.6, 25.0], [5.0, 2.9, -20.0]] {
            assert_eq!(fnn_forward(&a, &x).0, 0.0);
        }
    }

    #[test]
    fn default_sizes() {
        let m = fnn_init(&FnnConfig::r0_default()).unwrap();
        assert_eq!(m.layer_sizes, vec![3, 128, 4, 1]);
        assert_eq!(
            fnn_init(&FnnConfig::rd_default()).unwrap().layer_sizes,
            vec![3, 256, 4, 1]
        );
        assert_eq!(
            fnn_init(&FnnConfig::cd_default()).unwrap().layer_sizes,
            vec![3, 8, 4, 1]
        );
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = small_config(1);
        c.hidden_sizes = [0, 4];
        assert!(fnn_init(&c).is_err());
        let mut c = small_config(1);
        c.learning_rate = 0.0;
        assert!(fnn_init(&c).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        for seed in 0..5 {
            let m = randomized(seed);
            let x = [1.3, 3.65, -5.0];
            let (y, _) = fnn_forward(&m, &x);
            assert!((y - reference_forward(&m, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn output_scale_is_linear() {
        let mut m = randomized(3);
        let x = [0.4, 3.9, 10.0];
        let y1 = fnn_forward(&m, &x).0;
        m.output_scale *= 2.0;
        assert_eq!(fnn_forward(&m, &x).0, 2.0 * y1);
    }

    #[test]
    fn backward_zero_and_linearity() {
        let m = randomized(4);
        let (_, cache) = fnn_forward(&m, &[1.0, 3.7, 5.0]);
        assert!(fnn_backward(&m, &cache, 0.0).iter().all(|g| *g == 0.0));
        let g1 = fnn_backward(&m, &cache, 1.5);
        let g2 = fnn_backward(&m, &cache, 3.0);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn norm_stats_guard_constant_channel() {
        let rows = [[1.0, 3.7, -20.0], [2.0, 3.6, -20.0], [3.0, 3.5, -20.0]];
        let s = NormStats::from_rows(&rows).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[2], 1.0);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step() {
        let mut m = fnn_init(&small_config(1)).unwrap();
        let before = m.clone();
        let mut grads = Gradients::zeros_like(&m);
        grads.iter_mut().for_each(|g| *g = 1.0);
        let mut st = OptimizerState::new(OptimizerKind::Adagrad, &m);
        optimizer_step(&mut m, &grads, &mut st, 0.01);
        let expected = -0.01 / (1.0 + ADAGRAD_EPS);
        for (a, b) in m.params().zip(before.params()) {
            assert!(((a - b) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut m = fnn_init(&small_config(1)).unwrap();
        let before = m.clone();
        let mut grads = Gradients::zeros_like(&m);
        for (k, g) in grads.iter_mut().enumerate() {
            *g = if k % 2 == 0 { 0.3 } else { -2.0 };
        }
        let mut st = OptimizerState::new(OptimizerKind::Adam, &m);
        optimizer_step(&mut m, &grads, &mut st, 0.01);
        for ((a, b), g) in m.params().zip(before.params()).zip(grads.iter()) {
            assert!(((a - b) + 0.01 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_model() {
        for kind in [OptimizerKind::Adagrad, OptimizerKind::Adam] {
            let mut m = randomized(2);
            let before = m.clone();
            let grads = Gradients::zeros_like(&m);
            let mut st = OptimizerState::new(kind, &m);
            optimizer_step(&mut m, &grads, &mut st, 0.1);
            assert_eq!(m, before);
        }
    }
}
