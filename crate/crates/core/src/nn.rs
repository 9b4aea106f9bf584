//! Fully connected feedforward classifiers: forward pass, backpropagation,
//! Levenberg-Marquardt and gradient training, incremental adaptation,
//! majority-vote ensembles and JSON persistence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tansig,
    Logsig,
    Relu,
    Softmax,
}

impl Activation {
    pub fn apply(self, z: &mut [f64]) {
        match self {
            Activation::Tansig => z.iter_mut().for_each(|v| *v = tansig(*v)),
            Activation::Logsig => z.iter_mut().for_each(|v| *v = logsig(*v)),
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                z.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }

    /// Elementwise derivative expressed through the activation value.
    /// Not defined for softmax, which is only used on the output layer.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tansig => 1.0 - a * a,
            Activation::Logsig => a * (1.0 - a),
            // subgradient 0 at the kink
            Activation::Relu => (a > 0.0) as u8 as f64,
            Activation::Softmax => unreachable!("softmax is an output-only activation"),
        }
    }
}

pub fn tansig(z: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * z).exp()) - 1.0
}

pub fn logsig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub activation: Activation,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Layer { activation, rows, cols, weights: vec![0.0; rows * cols], biases: vec![0.0; rows] }
    }

    fn param_count(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.biases).map(|(row, b)| {
            row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b
        }));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    /// Output logit: `z` for a logsig output, `z1 - z0` for softmax.
    logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub threshold: f64,
    /// Free-form provenance recorded at training time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<serde_json::Value>,
}

impl Network {
    /// Zero-initialized network. `sizes` lists `n0..nl`, `activations` one tag
    /// per non-input layer.
    pub fn new(sizes: &[usize], activations: &[Activation], x_min: Vec<f64>, x_max: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, a)| Layer::zeros(w[1], w[0], *a))
            .collect();
        let net = Network { layers, x_min, x_max, threshold: 0.5, trained_on: None };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let n0 = self.input_dim();
        if n0 == 0 || self.layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer and one input".into()));
        }
        if self.x_min.len() != n0 || self.x_max.len() != n0 {
            return Err(Error::InvalidArgument(format!(
                "normalization bounds must have length {n0}"
            )));
        }
        if let Some(i) = (0..n0).find(|&i| !(self.x_max[i] > self.x_min[i])) {
            return Err(Error::InvalidArgument(format!(
                "degenerate input axis {i}: x_min = {}, x_max = {}",
                self.x_min[i], self.x_max[i]
            )));
        }
        let mut width = n0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.cols != width || l.rows == 0 || l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                return Err(Error::InvalidArgument(format!("layer {i} has inconsistent dimensions")));
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(Error::InvalidArgument("softmax is only allowed on the output layer".into()));
            }
            width = l.rows;
        }
        let out = self.layers.last().expect("nonempty");
        match (out.activation, out.rows) {
            (Activation::Logsig, 1) | (Activation::Softmax, 2) => {}
            (a, n) => {
                return Err(Error::InvalidArgument(format!(
                    "output layer must be logsig with 1 neuron or softmax with 2, got {a:?} with {n}"
                )))
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.rows));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn set_threshold(&mut self, theta: f64) -> Result<()> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {theta}")));
        }
        self.threshold = theta;
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_min.iter().zip(&self.x_max))
            .map(|(v, (lo, hi))| -1.0 + 2.0 * (v - lo) / (hi - lo))
            .collect()
    }

    /// Runs the network and returns the positive-class score.
    pub fn forward_with(&self, x: &[f64], s: &mut Scratch) -> f64 {
        let depth = self.layers.len();
        s.acts.resize_with(depth + 1, Vec::new);
        let (input, rest) = s.acts.split_first_mut().expect("nonempty");
        input.clear();
        input.extend(
            x.iter()
                .zip(self.x_min.iter().zip(&self.x_max))
                .map(|(v, (lo, hi))| -1.0 + 2.0 * (v - lo) / (hi - lo)),
        );
        let mut prev: &Vec<f64> = input;
        for (i, (layer, out)) in self.layers.iter().zip(rest.iter_mut()).enumerate() {
            layer.affine(prev, out);
            if i + 1 == depth {
                s.logit = if out.len() == 2 { out[1] - out[0] } else { out[0] };
            }
            layer.activation.apply(out);
            prev = out;
        }
        score_of(prev)
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_with(x, &mut Scratch::default())
    }

    pub fn classify(&self, x: &[f64]) -> bool {
        self.forward(x) >= self.threshold
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            l.biases.copy_from_slice(&p[off..off + l.rows]);
            off += l.rows;
        }
    }

    /// Mask of parameters that are biases, in [`Network::params`] order.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            m.extend(std::iter::repeat(false).take(l.weights.len()));
            m.extend(std::iter::repeat(true).take(l.rows));
        }
        m
    }

    /// Gradient of the output logit with respect to all parameters for the
    /// input of the last [`Network::forward_with`] call.
    fn logit_gradient(&self, s: &mut Scratch, out: &mut [f64]) {
        let depth = self.layers.len();
        s.deltas.resize_with(depth, Vec::new);
        let last = &self.layers[depth - 1];
        s.deltas[depth - 1].clear();
        if last.activation == Activation::Softmax {
            s.deltas[depth - 1].extend_from_slice(&[-1.0, 1.0]);
        } else {
            s.deltas[depth - 1].push(1.0);
        }
        for i in (0..depth - 1).rev() {
            let (lower, upper) = s.deltas.split_at_mut(i + 1);
            let next = &self.layers[i + 1];
            let d = &mut lower[i];
            d.clear();
            let a = &s.acts[i + 1];
            let act = self.layers[i].activation;
            for j in 0..next.cols {
                let mut acc = 0.0;
                for (k, dk) in upper[0].iter().enumerate() {
                    acc += next.weights[k * next.cols + j] * dk;
                }
                d.push(acc * act.slope(a[j]));
            }
        }
        let mut off = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let input = &s.acts[i];
            let d = &s.deltas[i];
            for (r, dr) in d.iter().enumerate() {
                let row = &mut out[off + r * l.cols..off + (r + 1) * l.cols];
                for (o, x) in row.iter_mut().zip(input) {
                    *o = dr * x;
                }
            }
            off += l.weights.len();
            out[off..off + l.rows].copy_from_slice(d);
            off += l.rows;
        }
    }
}

fn score_of(out: &[f64]) -> f64 {
    if out.len() == 2 {
        out[1]
    } else {
        out[0]
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-sample loss from score `p` and logit `s`.
fn sample_loss(loss: Loss, p: f64, s: f64, y: f64) -> f64 {
    match loss {
        Loss::Mse => (p - y) * (p - y),
        Loss::CrossEntropy => softplus(s) - y * s,
    }
}

/// Derivative of the per-sample loss with respect to the output logit.
fn logit_coefficient(loss: Loss, p: f64, y: f64) -> f64 {
    match loss {
        Loss::Mse => 2.0 * (p - y) * p * (1.0 - p),
        Loss::CrossEntropy => p - y,
    }
}

/// Gauss-Newton curvature of the per-sample loss along the logit.
fn logit_curvature(loss: Loss, p: f64) -> f64 {
    match loss {
        Loss::Mse => 2.0 * (p * (1.0 - p)).powi(2),
        Loss::CrossEntropy => p * (1.0 - p),
    }
}

fn target(label: bool) -> f64 {
    if label {
        1.0
    } else {
        0.0
    }
}

/// Mean loss over a batch.
pub fn mean_loss(net: &Network, xs: &[Vec<f64>], ys: &[bool], loss: Loss) -> f64 {
    let mut s = Scratch::default();
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let p = net.forward_with(x, &mut s);
            sample_loss(loss, p, s.logit, target(*y))
        })
        .sum();
    total / xs.len().max(1) as f64
}

/// Exact gradient of the mean loss over the batch.
pub fn gradient(net: &Network, xs: &[Vec<f64>], ys: &[bool], loss: Loss) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument("gradient needs a nonempty batch with one label per input".into()));
    }
    let n = net.param_count();
    let mut g = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = Scratch::default();
    for (x, y) in xs.iter().zip(ys) {
        let p = net.forward_with(x, &mut s);
        net.logit_gradient(&mut s, &mut v);
        let r = logit_coefficient(loss, p, target(*y));
        g.iter_mut().zip(&v).for_each(|(gi, vi)| *gi += r * vi);
    }
    let scale = 1.0 / xs.len() as f64;
    g.iter_mut().for_each(|gi| *gi *= scale);
    Ok(g)
}

/// Nguyen-Widrow initialization. Hidden layers get row norms
/// `0.7 * n_i^(1/n_{i-1})` and biases spread across the active region; the
/// output layer is drawn uniformly from `[-0.5, 0.5]`.
pub fn init_nguyen_widrow(net: &Network, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    let depth = out.layers.len();
    for (i, l) in out.layers.iter_mut().enumerate() {
        if i + 1 == depth {
            l.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..=0.5));
            l.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..=0.5));
            continue;
        }
        let beta = 0.7 * (l.rows as f64).powf(1.0 / l.cols as f64);
        for r in 0..l.rows {
            let row = &mut l.weights[r * l.cols..(r + 1) * l.cols];
            loop {
                row.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..=1.0));
                let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    row.iter_mut().for_each(|w| *w *= beta / norm);
                    break;
                }
            }
            let spread = if l.rows > 1 { -1.0 + 2.0 * r as f64 / (l.rows - 1) as f64 } else { 0.0 };
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            l.biases[r] = beta * spread * sign;
        }
    }
    out
}

/// Standard architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Three tansig hidden layers of 10, logsig output.
    DnnS,
    /// Three relu hidden layers of 10, two-way softmax output.
    DnnR,
    /// One tansig hidden layer of 20, logsig output.
    Snn,
    /// Five DNN-S members.
    Ens1,
    /// Three DNN-S and two DNN-R members.
    Ens2,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::DnnS, Arch::DnnR, Arch::Snn, Arch::Ens1, Arch::Ens2];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::DnnS => "dnn-s",
            Arch::DnnR => "dnn-r",
            Arch::Snn => "snn",
            Arch::Ens1 => "ens1",
            Arch::Ens2 => "ens2",
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Arch::Ens1 | Arch::Ens2)
    }

    /// Single-network architectures making up this one.
    pub fn members(self) -> Vec<Arch> {
        match self {
            Arch::Ens1 => vec![Arch::DnnS; 5],
            Arch::Ens2 => vec![Arch::DnnS, Arch::DnnS, Arch::DnnS, Arch::DnnR, Arch::DnnR],
            single => vec![single],
        }
    }

    pub fn default_loss(self) -> Loss {
        match self {
            Arch::DnnR => Loss::CrossEntropy,
            _ => Loss::Mse,
        }
    }

    /// Zero-initialized single network with the given input bounds.
    pub fn build(self, x_min: Vec<f64>, x_max: Vec<f64>) -> Result<Network> {
        let n0 = x_min.len();
        let (sizes, acts): (Vec<usize>, Vec<Activation>) = match self {
            Arch::DnnS => (vec![n0, 10, 10, 10, 1], vec![Activation::Tansig, Activation::Tansig, Activation::Tansig, Activation::Logsig]),
            Arch::DnnR => (vec![n0, 10, 10, 10, 2], vec![Activation::Relu, Activation::Relu, Activation::Relu, Activation::Softmax]),
            Arch::Snn => (vec![n0, 20, 1], vec![Activation::Tansig, Activation::Logsig]),
            Arch::Ens1 | Arch::Ens2 => {
                return Err(Error::InvalidArgument(format!("{} is an ensemble, build its members", self.tag())))
            }
        };
        Network::new(&sizes, &acts, x_min, x_max)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}' (expected dnn-s, dnn-r, snn, ens1 or ens2)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    LevenbergMarquardt,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub max_epochs: usize,
    /// `None` picks the architecture's default.
    pub loss: Option<Loss>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lm_mu_init: f64,
    pub lm_mu_factor: f64,
    pub lm_mu_max: f64,
    pub min_grad: f64,
    /// Fraction of the training data held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::LevenbergMarquardt,
            max_epochs: 1000,
            loss: None,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            lm_mu_init: 1e-3,
            lm_mu_factor: 10.0,
            lm_mu_max: 1e10,
            min_grad: 1e-10,
            validation_fraction: 0.15,
            patience: 6,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_epochs > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.lm_mu_init > 0.0
            && self.lm_mu_factor > 1.0
            && self.lm_mu_max > self.lm_mu_init
            && self.min_grad >= 0.0
            && (0.0..1.0).contains(&self.validation_fraction)
            && self.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid training configuration".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    MuLimit,
    MinGradient,
    EarlyStop,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

struct Holdout<'a> {
    xs: Vec<&'a Vec<f64>>,
    ys: Vec<bool>,
    best: f64,
    best_params: Vec<f64>,
    fails: usize,
}

impl<'a> Holdout<'a> {
    fn loss(&self, net: &Network, loss: Loss) -> f64 {
        let mut s = Scratch::default();
        let total: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let p = net.forward_with(x, &mut s);
                sample_loss(loss, p, s.logit, target(*y))
            })
            .sum();
        total / self.xs.len() as f64
    }

    /// Records the epoch; returns true when patience is exhausted.
    fn update(&mut self, net: &Network, loss: Loss, patience: usize) -> (f64, bool) {
        let v = self.loss(net, loss);
        if v < self.best {
            self.best = v;
            self.best_params = net.params();
            self.fails = 0;
        } else {
            self.fails += 1;
        }
        (v, self.fails >= patience)
    }
}

fn split_holdout<'a>(
    xs: &'a [Vec<f64>],
    ys: &[bool],
    cfg: &TrainConfig,
) -> (Vec<Vec<f64>>, Vec<bool>, Option<Holdout<'a>>) {
    if cfg.validation_fraction <= 0.0 || xs.len() < 10 {
        return (xs.to_vec(), ys.to_vec(), None);
    }
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let nv = ((xs.len() as f64) * cfg.validation_fraction).round().max(1.0) as usize;
    let mut held = vec![false; xs.len()];
    idx[..nv].iter().for_each(|&i| held[i] = true);
    let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..xs.len() {
        if held[i] {
            vx.push(&xs[i]);
            vy.push(ys[i]);
        } else {
            tx.push(xs[i].clone());
            ty.push(ys[i]);
        }
    }
    let h = Holdout { xs: vx, ys: vy, best: f64::INFINITY, best_params: Vec::new(), fails: 0 };
    (tx, ty, Some(h))
}

/// Trains `net` on inputs `xs` with labels `ys`. The returned network never
/// has a higher training loss than the input network.
pub fn train(net: &Network, xs: &[Vec<f64>], ys: &[bool], loss: Loss, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    net.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument("training needs a nonempty dataset with one label per input".into()));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != net.input_dim()) {
        return Err(Error::InvalidArgument(format!(
            "network expects {} inputs, sample has {}",
            net.input_dim(),
            x.len()
        )));
    }
    let (tx, ty, holdout) = split_holdout(xs, ys, cfg);
    match cfg.algorithm {
        Algorithm::LevenbergMarquardt => train_lm(net, &tx, &ty, loss, cfg, holdout),
        Algorithm::Gradient => train_gd(net, &tx, &ty, loss, cfg, holdout),
    }
}

const LM_CHUNK: usize = 512;

fn train_lm(
    net: &Network,
    xs: &[Vec<f64>],
    ys: &[bool],
    loss: Loss,
    cfg: &TrainConfig,
    mut holdout: Option<Holdout<'_>>,
) -> Result<(Network, TrainLog)> {
    let np = net.param_count();
    let n = xs.len() as f64;
    let mut net = net.clone();
    let mut params = net.params();
    let mut current = mean_loss(&net, xs, ys, loss);
    if !current.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let initial = current;
    let mut mu = cfg.lm_mu_init;
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut s = Scratch::default();
    let mut v = vec![0.0; np];
    let mut jt = DMatrix::<f64>::zeros(np, LM_CHUNK);

    'epochs: for epoch in 1..=cfg.max_epochs {
        // Gauss-Newton system for the summed loss
        let mut hess = DMatrix::<f64>::zeros(np, np);
        let mut grad = DVector::<f64>::zeros(np);
        for (cx, cy) in xs.chunks(LM_CHUNK).zip(ys.chunks(LM_CHUNK)) {
            let m = cx.len();
            if m != jt.ncols() {
                jt = DMatrix::zeros(np, m);
            }
            for (k, (x, y)) in cx.iter().zip(cy).enumerate() {
                let p = net.forward_with(x, &mut s);
                net.logit_gradient(&mut s, &mut v);
                let y = target(*y);
                let r = 0.5 * logit_coefficient(loss, p, y);
                let c = (0.5 * logit_curvature(loss, p)).sqrt();
                let mut col = jt.column_mut(k);
                for (j, vj) in v.iter().enumerate() {
                    grad[j] += r * vj;
                    col[j] = c * vj;
                }
            }
            hess.gemm(1.0, &jt, &jt.transpose(), 1.0);
        }
        if grad.norm() / n < cfg.min_grad {
            stop = StopReason::MinGradient;
            break;
        }
        loop {
            let mut damped = hess.clone();
            for i in 0..np {
                damped[(i, i)] += mu;
            }
            let step = damped.cholesky().map(|ch| ch.solve(&(-&grad)));
            if let Some(step) = step {
                let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                net.set_params(&trial);
                let trial_loss = mean_loss(&net, xs, ys, loss);
                if trial_loss.is_finite() && trial_loss < current {
                    params = trial;
                    current = trial_loss;
                    mu = (mu / cfg.lm_mu_factor).max(1e-20);
                    break;
                }
                net.set_params(&params);
            }
            mu *= cfg.lm_mu_factor;
            if mu > cfg.lm_mu_max {
                stop = StopReason::MuLimit;
                log.push(EpochRecord { epoch, loss: current, val_loss: None, mu: Some(mu) });
                break 'epochs;
            }
        }
        let mut val_loss = None;
        if let Some(h) = holdout.as_mut() {
            let (vl, exhausted) = h.update(&net, loss, cfg.patience);
            val_loss = Some(vl);
            if exhausted {
                log.push(EpochRecord { epoch, loss: current, val_loss, mu: Some(mu) });
                stop = StopReason::EarlyStop;
                break;
            }
        }
        log.push(EpochRecord { epoch, loss: current, val_loss, mu: Some(mu) });
    }
    finish(net, params, xs, ys, loss, initial, log, stop, holdout)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mut net: Network,
    params: Vec<f64>,
    xs: &[Vec<f64>],
    ys: &[bool],
    loss: Loss,
    initial: f64,
    log: Vec<EpochRecord>,
    stop: StopReason,
    holdout: Option<Holdout<'_>>,
) -> Result<(Network, TrainLog)> {
    net.set_params(&params);
    if let Some(h) = holdout {
        if !h.best_params.is_empty() {
            net.set_params(&h.best_params);
        }
    }
    let mut final_loss = mean_loss(&net, xs, ys, loss);
    if !(final_loss <= initial) {
        // validation restore can only be accepted if it does not undo training
        net.set_params(&params);
        final_loss = mean_loss(&net, xs, ys, loss);
    }
    Ok((net, TrainLog { initial_loss: initial, final_loss, epochs: log, stop }))
}

fn train_gd(
    net: &Network,
    xs: &[Vec<f64>],
    ys: &[bool],
    loss: Loss,
    cfg: &TrainConfig,
    mut holdout: Option<Holdout<'_>>,
) -> Result<(Network, TrainLog)> {
    let np = net.param_count();
    let mut net = net.clone();
    let initial = mean_loss(&net, xs, ys, loss);
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut velocity = vec![0.0; np];
    let mut params = net.params();
    let mut best = (initial, params.clone());
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut s = Scratch::default();
    let mut v = vec![0.0; np];
    let mut g = vec![0.0; np];
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g.iter_mut().for_each(|x| *x = 0.0);
            for &i in batch {
                let p = net.forward_with(&xs[i], &mut s);
                net.logit_gradient(&mut s, &mut v);
                let r = logit_coefficient(loss, p, target(ys[i])) / batch.len() as f64;
                g.iter_mut().zip(&v).for_each(|(gi, vi)| *gi += r * vi);
            }
            for j in 0..np {
                velocity[j] = cfg.momentum * velocity[j] - cfg.learning_rate * g[j];
                params[j] += velocity[j];
            }
            net.set_params(&params);
        }
        let current = mean_loss(&net, xs, ys, loss);
        if !current.is_finite() {
            stop = StopReason::NonFinite;
            break;
        }
        if current < best.0 {
            best = (current, params.clone());
        }
        let mut val_loss = None;
        let mut exhausted = false;
        if let Some(h) = holdout.as_mut() {
            let (vl, ex) = h.update(&net, loss, cfg.patience);
            val_loss = Some(vl);
            exhausted = ex;
        }
        log.push(EpochRecord { epoch, loss: current, val_loss, mu: None });
        if exhausted {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    finish(net, best.1, xs, ys, loss, initial, log, stop, holdout)
}

/// Inputs and labels of a dataset in training layout.
pub fn training_arrays(data: &Dataset) -> (Vec<Vec<f64>>, Vec<bool>) {
    data.samples.iter().map(|s| (s.state.x.clone(), s.label)).unzip()
}

/// Builds, initializes and trains one network of a single-network
/// architecture on `data`.
pub fn fit(arch: Arch, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.model.clone()));
    }
    let (lo, hi) = data.bounds()?;
    let net = init_nguyen_widrow(&arch.build(lo, hi)?, cfg.seed);
    let (xs, ys) = training_arrays(data);
    train(&net, &xs, &ys, cfg.loss.unwrap_or(arch.default_loss()), cfg)
}

/// One incremental gradient pass per sample on the squared error towards
/// the positive class. With `freeze_biases` only weight matrices move.
pub fn adapt(net: &Network, positives: &[Vec<f64>], learning_rate: f64, freeze_biases: bool) -> Network {
    let mut out = net.clone();
    if positives.is_empty() {
        return out;
    }
    let mask = net.bias_mask();
    let mut params = out.params();
    let mut s = Scratch::default();
    let mut v = vec![0.0; params.len()];
    for x in positives {
        let p = out.forward_with(x, &mut s);
        out.logit_gradient(&mut s, &mut v);
        let r = logit_coefficient(Loss::Mse, p, 1.0);
        for (j, (w, vj)) in params.iter_mut().zip(&v).enumerate() {
            if !(freeze_biases && mask[j]) {
                *w -= learning_rate * r * vj;
            }
        }
        out.set_params(&params);
    }
    out
}

pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;
    /// Score in `[0, 1]`; larger means more likely reachable.
    fn score(&self, x: &[f64]) -> f64;
    fn classify(&self, x: &[f64]) -> bool;
}

impl Classifier for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }
    fn score(&self, x: &[f64]) -> f64 {
        self.forward(x)
    }
    fn classify(&self, x: &[f64]) -> bool {
        Network::classify(self, x)
    }
}

/// Majority vote over an odd number of networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<Network>,
}

impl Ensemble {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        if members.is_empty() || members.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "majority vote needs an odd number of members, got {}",
                members.len()
            )));
        }
        let dim = members[0].input_dim();
        if members.iter().any(|m| m.input_dim() != dim) {
            return Err(Error::InvalidArgument("ensemble members disagree on input dimension".into()));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn votes(&self, x: &[f64]) -> usize {
        self.members.iter().filter(|m| m.classify(x)).count()
    }
}

impl Classifier for Ensemble {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }
    /// Fraction of members voting positive.
    fn score(&self, x: &[f64]) -> f64 {
        self.votes(x) as f64 / self.members.len() as f64
    }
    fn classify(&self, x: &[f64]) -> bool {
        2 * self.votes(x) > self.members.len()
    }
}

/// A loaded classifier of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(Network),
    Ensemble(Ensemble),
}

impl Classifier for Model {
    fn input_dim(&self) -> usize {
        match self {
            Model::Network(n) => Classifier::input_dim(n),
            Model::Ensemble(e) => e.input_dim(),
        }
    }
    fn score(&self, x: &[f64]) -> f64 {
        match self {
            Model::Network(n) => n.score(x),
            Model::Ensemble(e) => e.score(x),
        }
    }
    fn classify(&self, x: &[f64]) -> bool {
        match self {
            Model::Network(n) => Classifier::classify(n, x),
            Model::Ensemble(e) => e.classify(x),
        }
    }
}

#[derive(Serialize)]
struct NetworkFileOut<'a> {
    schema: u64,
    kind: &'static str,
    layer_sizes: Vec<usize>,
    #[serde(flatten)]
    net: &'a Network,
}

#[derive(Deserialize)]
struct NetworkFileIn {
    #[serde(default)]
    layer_sizes: Option<Vec<usize>>,
    #[serde(flatten)]
    net: Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub schema: u64,
    pub kind: String,
    pub arch: Arch,
    /// Member files, relative to the manifest's directory.
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<serde_json::Value>,
}

pub fn network_to_json(net: &Network) -> String {
    let file = NetworkFileOut { schema: SCHEMA_VERSION, kind: "network", layer_sizes: net.layer_sizes(), net };
    serde_json::to_string_pretty(&file).expect("network serializes")
}

fn check_header(v: &serde_json::Value, kind: &str) -> Result<()> {
    let schema = v.get("schema").and_then(|s| s.as_u64());
    if schema != Some(SCHEMA_VERSION) {
        return Err(Error::Schema(format!(
            "unsupported model schema {:?} (expected {SCHEMA_VERSION})",
            v.get("schema")
        )));
    }
    let found = v.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Schema(format!("expected a {kind} file, found kind '{found}'")));
    }
    Ok(())
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    check_header(&value, "network")?;
    let file: NetworkFileIn = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    let net = file.net;
    net.validate().map_err(|e| Error::Schema(e.to_string()))?;
    if file.layer_sizes.is_some_and(|s| s != net.layer_sizes()) {
        return Err(Error::Schema("layer_sizes disagree with the stored layers".into()));
    }
    Ok(net)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, network_to_json(net) + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    network_from_json(&text)
}

/// Writes `<stem>.m<i>.json` per member next to the manifest `path`.
pub fn save_ensemble(ens: &Ensemble, arch: Arch, path: &Path, trained_on: Option<serde_json::Value>) -> Result<Vec<PathBuf>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ensemble");
    let mut names = Vec::new();
    let mut written = Vec::new();
    for (i, m) in ens.members().iter().enumerate() {
        let name = format!("{stem}.m{i}.json");
        let p = dir.join(&name);
        save_model(m, &p)?;
        names.push(name);
        written.push(p);
    }
    let manifest = EnsembleManifest { schema: SCHEMA_VERSION, kind: "ensemble".into(), arch, members: names, trained_on };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    written.push(path.to_path_buf());
    Ok(written)
}

/// Loads a network file or an ensemble manifest.
pub fn load_classifier(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some("ensemble") => {
            check_header(&value, "ensemble")?;
            let manifest: EnsembleManifest = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let members = manifest
                .members
                .iter()
                .map(|m| load_model(&dir.join(m)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Model::Ensemble(Ensemble::new(members)?))
        }
        _ => Ok(Model::Network(network_from_json(&text)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn unit_bounds(n: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; n], vec![1.0; n])
    }

    fn random_net(arch: Arch, n0: usize, seed: u64) -> Network {
        let (lo, hi) = unit_bounds(n0);
        let mut net = init_nguyen_widrow(&arch.build(lo, hi).unwrap(), seed);
        // perturb biases away from the symmetric initialization
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let p: Vec<f64> = net.params().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        net.set_params(&p);
        net
    }

    fn random_inputs(n0: usize, count: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| ((0..n0).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen::<bool>()))
            .unzip()
    }

    fn fd_check(net: &Network, xs: &[Vec<f64>], ys: &[bool], loss: Loss) -> f64 {
        let g = gradient(net, xs, ys, loss).unwrap();
        let p0 = net.params();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        for j in 0..p0.len() {
            let mut p = p0.clone();
            p[j] += eps;
            probe.set_params(&p);
            let up = mean_loss(&probe, xs, ys, loss);
            p[j] -= 2.0 * eps;
            probe.set_params(&p);
            let down = mean_loss(&probe, xs, ys, loss);
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn activations() {
        assert_eq!(tansig(0.0), 0.0);
        assert_eq!(logsig(0.0), 0.5);
        let mut r = [-3.0, 3.0];
        Activation::Relu.apply(&mut r);
        assert_eq!(r, [0.0, 3.0]);
        let mut s = [0.0, 0.0];
        Activation::Softmax.apply(&mut s);
        assert_eq!(s, [0.5, 0.5]);
        let mut big = [1000.0, -1000.0, 3.0];
        Activation::Softmax.apply(&mut big);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_endpoints() {
        let net = Arch::Snn.build(vec![0.0, -2.0], vec![4.0, 6.0]).unwrap();
        assert_eq!(net.normalize(&[0.0, -2.0]), vec![-1.0, -1.0]);
        assert_eq!(net.normalize(&[4.0, 6.0]), vec![1.0, 1.0]);
        assert_eq!(net.normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
        // extrapolates outside the bounds
        assert_eq!(net.normalize(&[8.0, 6.0]), vec![3.0, 1.0]);
        assert!(Arch::Snn.build(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn zero_logsig_scores_half() {
        let mut net = Network::new(&[3, 1], &[Activation::Logsig], vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(net.forward(&[0.3, 9.0, -4.0]), 0.5);
        assert!(net.classify(&[0.3, 9.0, -4.0]));
        net.set_threshold(0.51).unwrap();
        assert!(!net.classify(&[0.3, 9.0, -4.0]));
        assert!(net.set_threshold(1.0).is_err());
    }

    #[test]
    fn shape_constraints() {
        let (lo, hi) = unit_bounds(2);
        assert!(Network::new(&[2, 2, 1], &[Activation::Softmax, Activation::Logsig], lo.clone(), hi.clone()).is_err());
        assert!(Network::new(&[2, 3], &[Activation::Softmax], lo.clone(), hi.clone()).is_err());
        assert!(Network::new(&[2, 1], &[Activation::Softmax], lo.clone(), hi.clone()).is_err());
        assert!(Network::new(&[2, 2], &[Activation::Softmax], lo, hi).is_ok());
        let net = Arch::DnnS.build(vec![0.0; 7], vec![1.0; 7]).unwrap();
        assert_eq!(net.layer_sizes(), vec![7, 10, 10, 10, 1]);
        let score = init_nguyen_widrow(&net, 3).forward(&[0.5; 7]);
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn nguyen_widrow_row_norms() {
        let net = Arch::DnnS.build(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let a = init_nguyen_widrow(&net, 42);
        let expected = 0.7 * 10f64.sqrt();
        let l = &a.layers[0];
        for r in 0..l.rows {
            let norm = l.weights[r * 2..r * 2 + 2].iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!((norm - expected).abs() < 1e-12);
        }
        assert_eq!(a, init_nguyen_widrow(&net, 42));
        assert_ne!(a.params(), init_nguyen_widrow(&net, 43).params());
    }

    #[test]
    fn weight_perturbation_is_first_order() {
        let net = random_net(Arch::DnnS, 3, 5);
        let x = vec![0.2, -0.4, 0.9];
        let mut s = Scratch::default();
        let p = net.forward_with(&x, &mut s);
        let mut v = vec![0.0; net.param_count()];
        net.logit_gradient(&mut s, &mut v);
        let dp = p * (1.0 - p) * v[4];
        let eps = 1e-5;
        let mut q = net.params();
        q[4] += eps;
        let mut moved = net.clone();
        moved.set_params(&q);
        let actual = moved.forward(&x) - p;
        assert!((actual - eps * dp).abs() < 1e-8);
    }

    #[test]
    fn symmetric_point_bias_gradient() {
        let net = Network::new(&[2, 1], &[Activation::Logsig], vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let xs = vec![vec![0.5, 0.5], vec![-0.5, 0.1]];
        let ys = vec![true, false];
        let g = gradient(&net, &xs, &ys, Loss::Mse).unwrap();
        // mean of 2 (F - y) F'(0) with F = 0.5, F' = 0.25
        let expected = ((0.5 - 1.0) + (0.5 - 0.0)) * 2.0 * 0.25 / 2.0;
        assert!((g[2] - expected).abs() < 1e-15);
        let ys_one = vec![true, true];
        let g1 = gradient(&net, &xs, &ys_one, Loss::Mse).unwrap();
        assert!((g1[2] - 2.0 * (0.5 - 1.0) * 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_is_stationary() {
        let net = random_net(Arch::Snn, 2, 1);
        let (xs, _) = random_inputs(2, 20, 3);
        // labels equal to rounded predictions do not zero MSE; use a
        // saturated net instead
        let mut sat = net.clone();
        let last = sat.layers.last_mut().unwrap();
        last.biases[0] = 60.0;
        let ys = vec![true; xs.len()];
        let g = gradient(&sat, &xs, &ys, Loss::Mse).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let net = random_net(Arch::DnnS, 3, seed);
            let (xs, ys) = random_inputs(3, 8, seed + 100);
            assert!(fd_check(&net, &xs, &ys, Loss::Mse) < 1e-4, "seed {seed}");
            assert!(fd_check(&net, &xs, &ys, Loss::CrossEntropy) < 1e-4, "seed {seed}");
        }
        for seed in 0..5 {
            let net = random_net(Arch::DnnR, 2, seed);
            let (xs, ys) = random_inputs(2, 8, seed + 200);
            assert!(fd_check(&net, &xs, &ys, Loss::CrossEntropy) < 1e-3, "seed {seed}");
        }
    }

    fn xor() -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![false, true, true, false],
        )
    }

    #[test]
    fn lm_learns_xor() {
        let (xs, ys) = xor();
        let net = init_nguyen_widrow(&Arch::DnnS.build(vec![0.0; 2], vec![1.0; 2]).unwrap(), 1);
        let cfg = TrainConfig { max_epochs: 200, ..Default::default() };
        let (trained, log) = train(&net, &xs, &ys, Loss::Mse, &cfg).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(trained.classify(x), *y);
        }
        assert!(log.final_loss <= log.initial_loss);
        for w in log.epochs.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn lm_is_deterministic() {
        let (xs, ys) = random_inputs(2, 60, 9);
        let net = init_nguyen_widrow(&Arch::Snn.build(vec![-1.0; 2], vec![1.0; 2]).unwrap(), 4);
        let cfg = TrainConfig { max_epochs: 15, ..Default::default() };
        let a = train(&net, &xs, &ys, Loss::Mse, &cfg).unwrap();
        let b = train(&net, &xs, &ys, Loss::Mse, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dnn_r_learns_xor_with_cross_entropy() {
        let (xs, ys) = xor();
        let net = init_nguyen_widrow(&Arch::DnnR.build(vec![0.0; 2], vec![1.0; 2]).unwrap(), 2);
        let (trained, log) = train(&net, &xs, &ys, Loss::CrossEntropy, &TrainConfig::default()).unwrap();
        assert!(log.final_loss < log.initial_loss);
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(trained.classify(x), *y);
        }
    }

    #[test]
    fn gradient_descent_reduces_loss() {
        let (xs, _) = random_inputs(2, 100, 3);
        let ys: Vec<bool> = xs.iter().map(|x| x[0] + x[1] > 0.0).collect();
        let net = init_nguyen_widrow(&Arch::Snn.build(vec![-1.0; 2], vec![1.0; 2]).unwrap(), 4);
        let cfg = TrainConfig { algorithm: Algorithm::Gradient, max_epochs: 50, learning_rate: 0.1, ..Default::default() };
        let (trained, log) = train(&net, &xs, &ys, Loss::Mse, &cfg).unwrap();
        assert!(log.final_loss < log.initial_loss);
        let acc = xs.iter().zip(&ys).filter(|(x, y)| trained.classify(x) == **y).count();
        assert!(acc >= 90, "{acc}");
    }

    #[test]
    fn early_stopping_holds_out_data() {
        let (xs, ys) = random_inputs(2, 200, 5);
        let net = init_nguyen_widrow(&Arch::Snn.build(vec![-1.0; 2], vec![1.0; 2]).unwrap(), 4);
        let cfg = TrainConfig { validation_fraction: 0.2, max_epochs: 100, ..Default::default() };
        let (_, log) = train(&net, &xs, &ys, Loss::Mse, &cfg).unwrap();
        assert!(log.epochs.iter().all(|e| e.val_loss.is_some()));
        assert!(log.final_loss <= log.initial_loss);
    }

    #[test]
    fn adapt_identity_and_monotone() {
        let net = random_net(Arch::DnnS, 2, 8);
        assert_eq!(adapt(&net, &[], 0.1, true), net);
        let samples = vec![vec![0.1, 0.2], vec![-0.5, 0.7], vec![0.9, -0.9]];
        let adapted = adapt(&net, &samples, 0.001, true);
        for x in &samples {
            assert!(adapted.forward(x) >= net.forward(x));
        }
        let mask = net.bias_mask();
        for ((a, b), m) in adapted.params().iter().zip(net.params()).zip(mask) {
            if m {
                assert_eq!(*a, b);
            }
        }
    }

    #[test]
    fn ensemble_votes() {
        let (lo, hi) = unit_bounds(1);
        let constant = |bias: f64| {
            let mut n = Network::new(&[1, 1], &[Activation::Logsig], lo.clone(), hi.clone()).unwrap();
            n.layers[0].biases[0] = bias;
            n
        };
        let pos = constant(3.0);
        let neg = constant(-3.0);
        let e = Ensemble::new(vec![pos.clone(), pos.clone(), neg.clone(), neg.clone(), pos.clone()]).unwrap();
        assert!(e.classify(&[0.0]));
        assert_eq!(e.score(&[0.0]), 0.6);
        assert!(Ensemble::new(vec![pos.clone(), neg]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut net = random_net(Arch::DnnR, 3, 11);
        net.threshold = 0.37;
        let text = network_to_json(&net);
        assert!(text.contains("\"schema\": 1"));
        assert!(text.contains("\"relu\""));
        let back = network_from_json(&text).unwrap();
        assert_eq!(back, net);
        let (xs, _) = random_inputs(3, 100, 1);
        for x in &xs {
            assert_eq!(back.forward(x).to_bits(), net.forward(x).to_bits());
        }
        assert!(matches!(network_from_json(&text[..text.len() / 2]), Err(Error::Schema(_))));
        let v2 = text.replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(network_from_json(&v2), Err(Error::Schema(_))));
    }

    #[test]
    fn ensemble_files() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<Network> = (0..5).map(|i| random_net(Arch::DnnS, 2, i)).collect();
        let e = Ensemble::new(members).unwrap();
        let path = dir.path().join("ens.json");
        let written = save_ensemble(&e, Arch::Ens1, &path, None).unwrap();
        assert_eq!(written.len(), 6);
        match load_classifier(&path).unwrap() {
            Model::Ensemble(back) => assert_eq!(back, e),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(a in -700.0f64..700.0, b in -700.0f64..700.0) {
            let mut z = [a, b];
            Activation::Softmax.apply(&mut z);
            prop_assert!((z[0] + z[1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn identical_members_match_single(seed in 0u64..50, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let net = random_net(Arch::DnnS, 2, seed);
            let e = Ensemble::new(vec![net.clone(); 5]).unwrap();
            prop_assert_eq!(e.classify(&[x, y]), net.classify(&[x, y]));
        }

        #[test]
        fn decision_invariant_under_logit(seed in 0u64..50, x in -1.0f64..1.0, theta in 0.01f64..0.99) {
            let mut net = random_net(Arch::Snn, 1, seed);
            net.threshold = theta;
            let logit = |p: f64| (p / (1.0 - p)).ln();
            let score = net.forward(&[x]);
            prop_assert_eq!(net.classify(&[x]), logit(score) >= logit(theta));
        }

        #[test]
        fn lipschitz_bound(seed in 0u64..50, a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
            let net = random_net(Arch::DnnS, 2, seed);
            // product of spectral-norm upper bounds (Frobenius), times the
            // normalization scale and the activation slopes (1 and 1/4)
            let mut l = 1.0;
            for (i, layer) in net.layers.iter().enumerate() {
                let fro = layer.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
                l *= fro * if i + 1 == net.layers.len() { 0.25 } else { 1.0 };
            }
            let scale = net.x_min.iter().zip(&net.x_max).map(|(lo, hi)| 2.0 / (hi - lo)).fold(0.0, f64::max);
            l *= scale;
            let dist = ((a - c).powi(2) + (b - d).powi(2)).sqrt();
            prop_assert!((net.forward(&[a, b]) - net.forward(&[c, d])).abs() <= l * dist + 1e-12);
        }
    }
}
