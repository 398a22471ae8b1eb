//! Classifier heads on frozen features, trained with Adam on cross-entropy.
//!
//! Parameters and arithmetic are `f64`; the weight container stores `f32`.
//! Batch gradients are summed per fixed-size chunk and the chunk sums are added
//! in order, so parallel execution does not change results.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Tensor};
use crate::rng;

const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("invalid head config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    Train(String),
    #[error("feature {index} has dimension {found}, head expects {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error("{features} features but {labels} labels")]
    Length { features: usize, labels: usize },
    #[error("class {0} has no training samples")]
    EmptyClass(usize),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("head file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    #[serde(alias = "one")]
    OneLayer,
    #[serde(alias = "two")]
    TwoLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub in_dim: usize,
    /// Ignored by the one-layer head.
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// Ignored by the one-layer head.
    pub dropout_p: f64,
}

impl HeadConfig {
    pub fn one_layer(in_dim: usize, n_classes: usize) -> Self {
        Self {
            variant: HeadVariant::OneLayer,
            in_dim,
            hidden_dim: 0,
            n_classes,
            dropout_p: 0.0,
        }
    }

    pub fn two_layer(in_dim: usize, hidden_dim: usize, n_classes: usize, dropout_p: f64) -> Self {
        Self {
            variant: HeadVariant::TwoLayer,
            in_dim,
            hidden_dim,
            n_classes,
            dropout_p,
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.in_dim == 0 || self.n_classes == 0 {
            return Err(HeadError::Config("dimensions must be positive".into()));
        }
        if self.variant == HeadVariant::TwoLayer {
            if self.hidden_dim == 0 {
                return Err(HeadError::Config("hidden width must be positive".into()));
            }
            if !(0.0..1.0).contains(&self.dropout_p) {
                return Err(HeadError::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
            }
        }
        Ok(())
    }

    /// `(out, in)` of each linear layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.variant {
            HeadVariant::OneLayer => vec![(self.n_classes, self.in_dim)],
            HeadVariant::TwoLayer => vec![(self.hidden_dim, self.in_dim), (self.n_classes, self.hidden_dim)],
        }
    }
}

/// Number of trainable parameters.
pub fn count_params(config: &HeadConfig) -> usize {
    config.layer_dims().iter().map(|&(o, i)| o * i + o).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HeadError::Train("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(HeadError::Train(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(HeadError::Train(
                "Adam betas must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A dense layer `y = W x + b`, `W` row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            w: vec![0.0; out_dim * in_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.in_dim)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Head parameters; one layer for the one-layer head, two otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub layers: Vec<Linear>,
}

impl HeadParams {
    pub fn zeros(config: HeadConfig) -> Self {
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(o, i)| Linear::zeros(o, i))
            .collect();
        Self { config, layers }
    }

    /// Uniform in `+-1/sqrt(fan_in)` per layer.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self, HeadError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for (k, layer) in p.layers.iter_mut().enumerate() {
            let mut stream = rng::stream(seed, "head-init", &[k.into()]);
            let a = 1.0 / (layer.in_dim as f64).sqrt();
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = stream.gen_range(-a..=a);
            }
        }
        Ok(p)
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    fn add_assign(&mut self, other: &HeadParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    fn layer_names(&self) -> Vec<&'static str> {
        match self.config.variant {
            HeadVariant::OneLayer => vec!["fc"],
            HeadVariant::TwoLayer => vec!["fc1", "fc2"],
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (layer, name) in self.layers.iter().zip(self.layer_names()) {
            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            c.insert(
                format!("{name}.w"),
                Tensor::new(vec![layer.out_dim, layer.in_dim], f(&layer.w)),
            );
            c.insert(format!("{name}.b"), Tensor::new(vec![layer.out_dim], f(&layer.b)));
        }
        c.metadata.insert(
            "head_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, HeadError> {
        let raw = c
            .metadata
            .get("head_config")
            .ok_or_else(|| HeadError::Format("missing head_config metadata".into()))?;
        let config: HeadConfig = serde_json::from_str(raw).map_err(|e| HeadError::Format(e.to_string()))?;
        config.validate()?;
        let mut p = Self::zeros(config);
        let names = p.layer_names();
        for (layer, name) in p.layers.iter_mut().zip(names) {
            for (suffix, dst, shape) in [
                ("w", &mut layer.w, vec![layer.out_dim, layer.in_dim]),
                ("b", &mut layer.b, vec![layer.out_dim]),
            ] {
                let key = format!("{name}.{suffix}");
                let t = c
                    .get(&key)
                    .ok_or_else(|| HeadError::Format(format!("missing tensor {key}")))?;
                if t.shape != shape {
                    return Err(HeadError::Format(format!(
                        "tensor {key} has shape {:?}, expected {shape:?}",
                        t.shape
                    )));
                }
                *dst = t.data.iter().map(|&v| v as f64).collect();
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln p[label]`, with the probability floored at 1e-12.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(1e-12).ln()
}

/// Cross-entropy through a stable log-softmax.
pub fn cross_entropy_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Intermediate values of one forward pass.
struct Trace {
    hidden: Vec<f64>,
    mask: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_trace(x: &[f64], params: &HeadParams, dropout: Option<&mut ChaCha8Rng>) -> Trace {
    match params.config.variant {
        HeadVariant::OneLayer => Trace {
            hidden: Vec::new(),
            mask: Vec::new(),
            logits: params.layers[0].apply(x),
        },
        HeadVariant::TwoLayer => {
            let mut hidden: Vec<f64> = params.layers[0].apply(x).into_iter().map(|v| v.max(0.0)).collect();
            let p = params.config.dropout_p;
            let mask: Vec<f64> = match dropout {
                Some(rng) if p > 0.0 => (0..hidden.len())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect(),
                _ => vec![1.0; hidden.len()],
            };
            for (h, m) in hidden.iter_mut().zip(&mask) {
                *h *= m;
            }
            let logits = params.layers[1].apply(&hidden);
            Trace { hidden, mask, logits }
        }
    }
}

/// Logits for one feature vector, dropout off.
pub fn logits(x: &[f64], params: &HeadParams) -> Vec<f64> {
    forward_trace(x, params, None).logits
}

/// Class probabilities. With `training` and an rng, the two-layer head
/// applies inverted dropout to its hidden layer.
pub fn forward(x: &[f64], params: &HeadParams, training: bool, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let rng = if training { rng } else { None };
    softmax(&forward_trace(x, params, rng).logits)
}

/// Index of the most probable class (first on ties).
pub fn predict(x: &[f64], params: &HeadParams) -> usize {
    argmax(&logits(x, params))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradient of one sample, accumulated into `grad`.
fn accumulate(x: &[f64], label: usize, params: &HeadParams, trace: Trace, grad: &mut HeadParams) -> f64 {
    let loss = cross_entropy_logits(&trace.logits, label);
    let mut delta = softmax(&trace.logits);
    delta[label] -= 1.0;
    let out = params.layers.len() - 1;
    let input: &[f64] = if out == 0 { x } else { &trace.hidden };
    {
        let g = &mut grad.layers[out];
        for (k, d) in delta.iter().enumerate() {
            g.b[k] += d;
            for (gw, xi) in g.w[k * g.in_dim..(k + 1) * g.in_dim].iter_mut().zip(input) {
                *gw += d * xi;
            }
        }
    }
    if out == 1 {
        let w2 = &params.layers[1];
        let g = &mut grad.layers[0];
        for j in 0..g.out_dim {
            // Positive only where the ReLU was active and the unit was kept.
            if trace.hidden[j] <= 0.0 {
                continue;
            }
            let back: f64 = delta
                .iter()
                .enumerate()
                .map(|(k, d)| d * w2.w[k * w2.in_dim + j])
                .sum::<f64>()
                * trace.mask[j];
            g.b[j] += back;
            for (gw, xi) in g.w[j * g.in_dim..(j + 1) * g.in_dim].iter_mut().zip(x) {
                *gw += back * xi;
            }
        }
    }
    loss
}

/// Mean loss and mean gradient over a batch, optionally with dropout.
/// Each sample draws its dropout mask from its own stream.
fn batch_gradients(
    xs: &[&[f64]],
    labels: &[usize],
    params: &HeadParams,
    dropout: Option<(u64, u64)>,
) -> (f64, HeadParams) {
    let chunks: Vec<(f64, HeadParams)> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .enumerate()
        .map(|(c, (xc, yc))| {
            let mut g = HeadParams::zeros(params.config);
            let mut loss = 0.0;
            for (i, (x, &y)) in xc.iter().zip(yc).enumerate() {
                let mut stream = dropout
                    .map(|(seed, step)| rng::stream(seed, "head-dropout", &[step.into(), (c * GRAD_CHUNK + i).into()]));
                let trace = forward_trace(x, params, stream.as_mut());
                loss += accumulate(x, y, params, trace, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = HeadParams::zeros(params.config);
    let mut loss = 0.0;
    for (l, g) in &chunks {
        loss += l;
        total.add_assign(g);
    }
    let n = xs.len() as f64;
    total.scale(1.0 / n);
    (loss / n, total)
}

/// Mean cross-entropy gradient over a batch with dropout off.
pub fn gradients(xs: &[&[f64]], labels: &[usize], params: &HeadParams) -> (f64, HeadParams) {
    assert!(!xs.is_empty(), "gradient of an empty batch");
    batch_gradients(xs, labels, params, None)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(params: &mut HeadParams, grads: &HeadParams, state: &mut AdamState, t: u64, cfg: &TrainConfig) {
    assert!(t >= 1, "Adam steps are numbered from 1");
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_params: HeadParams,
    /// Highest validation accuracy, earliest epoch on ties.
    pub best_params: HeadParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn check_data(xs: &[Vec<f64>], ys: &[usize], cfg: &HeadConfig) -> Result<(), HeadError> {
    if xs.len() != ys.len() {
        return Err(HeadError::Length {
            features: xs.len(),
            labels: ys.len(),
        });
    }
    for (i, x) in xs.iter().enumerate() {
        if x.len() != cfg.in_dim {
            return Err(HeadError::Dimension {
                index: i,
                expected: cfg.in_dim,
                found: x.len(),
            });
        }
    }
    for (i, &y) in ys.iter().enumerate() {
        if y >= cfg.n_classes {
            return Err(HeadError::Label {
                index: i,
                label: y,
                classes: cfg.n_classes,
            });
        }
    }
    Ok(())
}

/// Mean loss and accuracy with dropout off.
pub fn evaluate(xs: &[Vec<f64>], ys: &[usize], params: &HeadParams) -> (f64, f64) {
    let per: Vec<(f64, bool)> = xs
        .par_iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = logits(x, params);
            (cross_entropy_logits(&z, y), argmax(&z) == y)
        })
        .collect();
    let n = per.len().max(1) as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    (loss, acc)
}

/// Mini-batch Adam training with a seeded shuffle per epoch.
pub fn train(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    head: &HeadConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HeadError> {
    head.validate()?;
    cfg.validate()?;
    check_data(train_x, train_y, head)?;
    check_data(val_x, val_y, head)?;
    for k in 0..head.n_classes {
        if !train_y.contains(&k) {
            return Err(HeadError::EmptyClass(k));
        }
    }
    if val_x.is_empty() {
        return Err(HeadError::EmptyValidation);
    }

    let mut params = HeadParams::init(*head, cfg.seed)?;
    let mut state = AdamState::new(params.count());
    let mut best: Option<(f64, usize, HeadParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut t = 0u64;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, "head-shuffle", &[epoch.into()]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            t += 1;
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_x[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = batch_gradients(&xs, &ys, &params, Some((cfg.seed, t)));
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, t, cfg);
        }
        let (val_loss, val_acc) = evaluate(val_x, val_y, &params);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            val_loss,
            val_acc,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.0) {
            best = Some((val_acc, epoch, params.clone()));
        }
        log::debug!(
            "epoch {epoch}: train loss {:.4}, val acc {val_acc:.4}",
            loss_sum / train_x.len() as f64
        );
    }
    let (_, best_epoch, best_params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history,
    })
}

pub fn write_history_csv<W: std::io::Write>(writer: W, history: &[EpochRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
