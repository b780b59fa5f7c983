//! Supervised baseline: a one-hidden-layer perceptron trained with full-batch
//! Adam on cross-entropy, plus individual and collective learning curves.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SupervisedError;
use crate::metrics::{balanced_accuracy, bootstrap_ci};

pub const MLP_SCHEMA: &str = "irda-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 32,
            output_dim: 2,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SupervisedError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim < 2 {
            return Err(SupervisedError::ConfigInvalid("dimensions must be positive with at least 2 outputs".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(SupervisedError::ConfigInvalid("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SupervisedError::ConfigInvalid("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + self.output_dim * self.hidden_dim + self.output_dim
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Participant tag per sample; may be empty.
    pub participants: Vec<String>,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<u8>) -> Self {
        Self { inputs, labels, participants: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        Self {
            inputs: self.inputs.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
            participants: self.participants.iter().take(n).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: &LabeledSet) {
        self.inputs.extend(other.inputs.iter().cloned());
        self.labels.extend(&other.labels);
        self.participants.extend(other.participants.iter().cloned());
    }

    fn check(&self, dim: usize) -> Result<(), SupervisedError> {
        if self.is_empty() {
            return Err(SupervisedError::EmptyData);
        }
        if self.inputs.len() != self.labels.len() {
            return Err(SupervisedError::DimensionMismatch { expected: self.labels.len(), got: self.inputs.len() });
        }
        for x in &self.inputs {
            if x.len() != dim {
                return Err(SupervisedError::DimensionMismatch { expected: dim, got: x.len() });
            }
        }
        Ok(())
    }
}

/// Parameters in one flat vector: `W1 (hidden × input)`, `b1`, `W2 (output × hidden)`, `b2`, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Mlp {
    /// He-initialised weights, zero biases.
    pub fn init(config: &MlpConfig) -> Result<Self, SupervisedError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (i, h, o) = (config.input_dim, config.hidden_dim, config.output_dim);
        let n1 = Normal::new(0.0, (2.0 / i as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (2.0 / h as f64).sqrt()).expect("finite std");
        let mut params = Vec::with_capacity(config.n_params());
        params.extend((0..h * i).map(|_| n1.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, h));
        params.extend((0..o * h).map(|_| n2.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, o));
        Ok(Self { config: config.clone(), params })
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.config.input_dim, self.config.hidden_dim, self.config.output_dim);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + o * h;
        Layout { w1, b1, w2, b2 }
    }

    /// Hidden activations and class probabilities.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (i, h, o) = (self.config.input_dim, self.config.hidden_dim, self.config.output_dim);
        let l = self.layout();
        let p = &self.params;
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &p[l.w1 + j * i..l.w1 + (j + 1) * i];
                (p[l.b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..o)
            .map(|c| {
                let row = &p[l.w2 + c * h..l.w2 + (c + 1) * h];
                p[l.b2 + c] + row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (hidden, softmax(&logits))
    }

    pub fn predict(&self, x: &[f64]) -> Result<(u8, Vec<f64>), SupervisedError> {
        if x.len() != self.config.input_dim {
            return Err(SupervisedError::DimensionMismatch { expected: self.config.input_dim, got: x.len() });
        }
        let (_, probs) = self.forward(x);
        let label = probs
            .iter()
            .enumerate()
            .fold(0, |best, (c, p)| if *p > probs[best] { c } else { best });
        Ok((label as u8, probs))
    }

    pub fn predict_all(&self, inputs: &[Vec<f64>]) -> Result<Vec<u8>, SupervisedError> {
        inputs.iter().map(|x| self.predict(x).map(|(l, _)| l)).collect()
    }

    /// Mean cross-entropy and its gradient with respect to [`Mlp::params`].
    pub fn loss_and_grad(&self, data: &LabeledSet) -> (f64, Vec<f64>) {
        let (i, h, o) = (self.config.input_dim, self.config.hidden_dim, self.config.output_dim);
        let l = self.layout();
        let n = data.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.labels) {
            let (hidden, probs) = self.forward(x);
            loss -= probs[*y as usize].max(f64::MIN_POSITIVE).ln();
            // dL/dlogit = p − onehot(y)
            let dlogit: Vec<f64> = (0..o).map(|c| probs[c] - f64::from(c == *y as usize)).collect();
            let mut dhidden = vec![0.0; h];
            for c in 0..o {
                grad[l.b2 + c] += dlogit[c];
                for j in 0..h {
                    grad[l.w2 + c * h + j] += dlogit[c] * hidden[j];
                    dhidden[j] += dlogit[c] * self.params[l.w2 + c * h + j];
                }
            }
            for j in 0..h {
                if hidden[j] <= 0.0 {
                    continue;
                }
                grad[l.b1 + j] += dhidden[j];
                for k in 0..i {
                    grad[l.w1 + j * i + k] += dhidden[j] * x[k];
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn loss(&self, data: &LabeledSet) -> f64 {
        data.inputs
            .iter()
            .zip(&data.labels)
            .map(|(x, y)| -self.forward(x).1[*y as usize].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / data.len() as f64
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u32,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Mlp,
    /// Loss before each update.
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn train_mlp(data: &LabeledSet, config: &MlpConfig) -> Result<TrainedModel, SupervisedError> {
    config.validate()?;
    data.check(config.input_dim)?;
    let mut warnings = Vec::new();
    if data.labels.iter().all(|l| *l == data.labels[0]) {
        let w = format!("training data holds only class {}; the model will predict a constant", data.labels[0]);
        tracing::warn!("{w}");
        warnings.push(w);
    }
    if let Some(bad) = data.labels.iter().find(|l| **l as usize >= config.output_dim) {
        return Err(SupervisedError::ConfigInvalid(format!("label {bad} exceeds output_dim")));
    }
    let mut model = Mlp::init(config)?;
    let mut adam = Adam::new(model.params.len(), config.learning_rate, config.beta1, config.beta2, config.eps);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (loss, grad) = model.loss_and_grad(data);
        loss_history.push(loss);
        adam.step(&mut model.params, &grad);
    }
    Ok(TrainedModel { model, loss_history, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MlpFile {
    schema: String,
    #[serde(flatten)]
    model: Mlp,
}

pub fn save_model<W: std::io::Write>(w: W, model: &Mlp) -> serde_json::Result<()> {
    serde_json::to_writer(w, &MlpFile { schema: MLP_SCHEMA.to_string(), model: model.clone() })
}

pub fn load_model<R: std::io::Read>(r: R) -> Result<Mlp, SupervisedError> {
    let file: MlpFile = serde_json::from_reader(r).map_err(|e| SupervisedError::ConfigInvalid(e.to_string()))?;
    if file.schema != MLP_SCHEMA {
        return Err(SupervisedError::ConfigInvalid(format!("unsupported schema `{}`", file.schema)));
    }
    if file.model.params.len() != file.model.config.n_params() {
        return Err(SupervisedError::ConfigInvalid("parameter count does not match the config".into()));
    }
    Ok(file.model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    Individual,
    Collective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mode: CurveMode,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Balanced accuracy on each participant's test set.
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSettings {
    pub mode: CurveMode,
    pub sample_grid: Vec<usize>,
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

/// Balanced accuracy per participant as training size grows.
///
/// Individual mode trains one model per participant on its first `n`
/// samples; collective mode trains one model on the union of every
/// participant's first `n` samples. Both are scored on each participant's
/// own test set.
pub fn learning_curve(
    train: &BTreeMap<String, LabeledSet>,
    test: &BTreeMap<String, LabeledSet>,
    config: &MlpConfig,
    settings: &CurveSettings,
) -> Result<Vec<CurvePoint>, SupervisedError> {
    if train.is_empty() {
        return Err(SupervisedError::EmptyData);
    }
    if settings.sample_grid.windows(2).any(|w| w[0] >= w[1]) || settings.sample_grid.first() == Some(&0) {
        return Err(SupervisedError::ConfigInvalid("sample grid must be strictly increasing and positive".into()));
    }
    let mut points = Vec::new();
    for &n in &settings.sample_grid {
        for (pid, set) in train {
            if set.len() < n {
                return Err(SupervisedError::InsufficientSamples { pid: pid.clone(), available: set.len(), needed: n });
            }
        }
        let mut scores = BTreeMap::new();
        match settings.mode {
            CurveMode::Individual => {
                for (pid, set) in train {
                    let model = train_mlp(&set.head(n), config)?.model;
                    scores.insert(pid.clone(), score(&model, test, pid)?);
                }
            }
            CurveMode::Collective => {
                let mut union = LabeledSet::default();
                for set in train.values() {
                    union.extend(&set.head(n));
                }
                let model = train_mlp(&union, config)?.model;
                for pid in train.keys() {
                    scores.insert(pid.clone(), score(&model, test, pid)?);
                }
            }
        }
        let values: Vec<f64> = scores.values().copied().collect();
        let ci = bootstrap_ci(&values, settings.n_resamples, settings.level, settings.seed)?;
        points.push(CurvePoint { n, mode: settings.mode, mean: ci.mean, ci_lo: ci.lo, ci_hi: ci.hi, scores });
    }
    Ok(points)
}

fn score(model: &Mlp, test: &BTreeMap<String, LabeledSet>, pid: &str) -> Result<f64, SupervisedError> {
    let set = test.get(pid).ok_or_else(|| SupervisedError::InsufficientSamples { pid: pid.to_string(), available: 0, needed: 1 })?;
    let pred = model.predict_all(&set.inputs)?;
    Ok(balanced_accuracy(&set.labels, &pred)?)
}

/// Comma-separated curve table with a header row.
pub fn write_curve<W: std::io::Write>(w: W, points: &[CurvePoint]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n", "mode", "mean", "ci_lo", "ci_hi"])?;
    for p in points {
        let mode = match p.mode {
            CurveMode::Individual => "individual",
            CurveMode::Collective => "collective",
        };
        out.write_record([p.n.to_string(), mode.to_string(), p.mean.to_string(), p.ci_lo.to_string(), p.ci_hi.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
