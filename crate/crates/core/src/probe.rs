//! Linear probes and the multi-run learning-rate-sweep training protocol.
//!
//! A probe is `z = W f + b` with one output for two-class tasks (logistic
//! loss) and one output per class otherwise (softmax cross-entropy). Training
//! is mini-batch AdamW from a zero initialisation; a run trains one probe per
//! learning rate, keeps the one with the best validation accuracy, and reports
//! its test accuracy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adamw::{AdamWConfig, AdamWState};
use crate::metrics::{chance_corrected, mean_std, uniform_chance};
use crate::{Error, Result};

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    /// Number of classes of the task, not just the ones present.
    pub classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize) -> Self {
        Dataset { dim, classes, features: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, row: &[f32], label: usize) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: row.len() });
        }
        if label >= self.classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} out of range for {} classes",
                self.classes
            )));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.classes];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.into_iter().filter(|&s| s).count()
    }
}

/// Trained linear classifier, weights row-major `outputs × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        let outputs = output_count(classes);
        LinearProbe { classes, dim, weights: vec![0.0; outputs * dim], bias: vec![0.0; outputs] }
    }

    /// 1 for two-class tasks, the class count otherwise.
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        (0..self.outputs())
            .map(|k| {
                let w = self.row(k);
                let dot: f64 = w.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum();
                dot + self.bias[k] as f64
            })
            .collect()
    }

    /// Binary: class 1 iff the score is positive. Otherwise the first argmax.
    pub fn predict(&self, x: &[f32]) -> usize {
        let s = self.scores(x);
        if self.outputs() == 1 {
            return usize::from(s[0] > 0.0);
        }
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.dim != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: data.dim });
        }
        if data.is_empty() {
            return Ok(0.0);
        }
        let hits = (0..data.len()).filter(|&i| self.predict(data.row(i)) == data.labels[i]).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn scaled(&self, s: f32) -> LinearProbe {
        LinearProbe {
            classes: self.classes,
            dim: self.dim,
            weights: self.weights.iter().map(|w| w * s).collect(),
            bias: self.bias.iter().map(|b| b * s).collect(),
        }
    }
}

fn output_count(classes: usize) -> usize {
    if classes == 2 { 1 } else { classes }
}

/// Hyperparameters of the probing protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub runs: usize,
    pub seed_root: u64,
    /// z-score features with training-split statistics (folded back into the
    /// returned probe so it applies to raw features).
    pub standardize: bool,
}

pub const DEFAULT_LR_GRID: [f64; 8] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1];

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            epochs: 20,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            runs: 10,
            seed_root: 0,
            standardize: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.lr_grid.is_empty() {
            return bad("lr_grid is empty".into());
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(1e-4..=5e-1).contains(*lr)) {
            return bad(format!("learning rate {lr} outside [1e-4, 5e-1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("epochs, batch_size and runs must be positive".into());
        }
        Ok(())
    }
}

/// Stable seed for run `run` of the task identified by `task_key`.
///
/// FNV-1a over `(seed_root, task_key, run)` followed by a SplitMix64
/// finaliser; identical on every platform and independent of scheduling.
pub fn derive_seed(seed_root: u64, task_key: &str, run: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&seed_root.to_le_bytes());
    eat(task_key.as_bytes());
    eat(&[0xff]);
    eat(&run.to_le_bytes());
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Probe parameters during training, `f64`, flat `[W | b]`.
struct Params<'a> {
    outputs: usize,
    dim: usize,
    flat: Vec<f64>,
    shift: &'a [f64],
    scale: &'a [f64],
}

impl Params<'_> {
    fn logits(&self, x: &[f32], out: &mut [f64]) {
        let d = self.dim;
        for k in 0..self.outputs {
            let w = &self.flat[k * d..(k + 1) * d];
            let mut z = self.flat[self.outputs * d + k];
            for j in 0..d {
                z += w[j] * ((x[j] as f64 - self.shift[j]) * self.scale[j]);
            }
            out[k] = z;
        }
    }

    /// Loss of one sample; writes dLoss/dz into `dz`.
    fn loss_grad(&self, x: &[f32], label: usize, z: &mut [f64], dz: &mut [f64]) -> f64 {
        self.logits(x, z);
        if self.outputs == 1 {
            let y = label as f64;
            dz[0] = sigmoid(z[0]) - y;
            if label == 1 { softplus(-z[0]) } else { softplus(z[0]) }
        } else {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..self.outputs {
                dz[k] = libm::exp(z[k] - max);
                sum += dz[k];
            }
            for k in 0..self.outputs {
                dz[k] /= sum;
            }
            let loss = -(libm::log(dz[label]).max(-745.0));
            dz[label] -= 1.0;
            loss
        }
    }

    fn mean_loss(&self, data: &Dataset) -> f64 {
        let mut z = vec![0.0; self.outputs];
        let mut dz = vec![0.0; self.outputs];
        let total: f64 =
            (0..data.len()).map(|i| self.loss_grad(data.row(i), data.labels[i], &mut z, &mut dz)).sum();
        total / data.len() as f64
    }

    fn into_probe(self, classes: usize) -> LinearProbe {
        let d = self.dim;
        let mut weights = Vec::with_capacity(self.outputs * d);
        let mut bias = Vec::with_capacity(self.outputs);
        for k in 0..self.outputs {
            let w = &self.flat[k * d..(k + 1) * d];
            let mut b = self.flat[self.outputs * d + k];
            for j in 0..d {
                let wj = w[j] * self.scale[j];
                b -= wj * self.shift[j];
                weights.push(wj as f32);
            }
            bias.push(b as f32);
        }
        LinearProbe { classes, dim: d, weights, bias }
    }
}

/// Result of training one probe at one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub probe: LinearProbe,
    pub val_accuracy: f64,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn standardisation(data: &Dataset, enabled: bool) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim;
    if !enabled {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..data.len() {
        for (m, &x) in mean.iter_mut().zip(data.row(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..data.len() {
        for j in 0..d {
            let c = data.row(i)[j] as f64 - mean[j];
            var[j] += c * c;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let s = libm::sqrt(v / n);
            if s > 0.0 { 1.0 / s } else { 1.0 }
        })
        .collect();
    (mean, scale)
}

/// Train one probe with AdamW over shuffled mini-batches.
///
/// Deterministic in `(train, val, lr, config, seed)`.
pub fn train_probe(
    train: &Dataset,
    val: &Dataset,
    lr: f64,
    config: &ProbeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if val.dim != train.dim {
        return Err(Error::DimMismatch { expected: train.dim, found: val.dim });
    }
    if train.classes < 2 || train.distinct_labels() < 2 {
        return Err(Error::DegenerateData("training data holds fewer than two classes".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
    }
    let d = train.dim;
    let outputs = output_count(train.classes);
    let (shift, scale) = standardisation(train, config.standardize);
    let mut params = Params { outputs, dim: d, flat: vec![0.0; outputs * (d + 1)], shift: &shift, scale: &scale };
    let mut state = AdamWState::<f64>::new(params.flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; params.flat.len()];
    let mut z = vec![0.0; outputs];
    let mut dz = vec![0.0; outputs];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = train.row(i);
                params.loss_grad(x, train.labels[i], &mut z, &mut dz);
                for k in 0..outputs {
                    let row = &mut grad[k * d..(k + 1) * d];
                    for j in 0..d {
                        row[j] += dz[k] * ((x[j] as f64 - shift[j]) * scale[j]);
                    }
                    grad[outputs * d + k] += dz[k];
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            state.step(&mut params.flat, &grad, lr, &config.optimizer);
        }
        epoch_losses.push(params.mean_loss(train));
    }

    let probe = params.into_probe(train.classes);
    let val_accuracy = if val.is_empty() { 0.0 } else { probe.accuracy(val)? };
    Ok(TrainOutcome { probe, val_accuracy, epoch_losses })
}

/// Best probe of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_lr: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub chance_corrected: f64,
    pub probe: LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub chance: f64,
    pub runs: Vec<RunResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_cc: f64,
    pub std_cc: f64,
}

impl TrainResult {
    pub fn best_probes(&self) -> impl Iterator<Item = &LinearProbe> {
        self.runs.iter().map(|r| &r.probe)
    }
}

/// `config.runs` runs, each sweeping `config.lr_grid` and keeping the probe
/// with the highest validation accuracy (ties go to the lower learning rate).
/// Chance correction is applied per run before averaging.
pub fn run_protocol(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
    task_key: &str,
) -> Result<TrainResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::DegenerateData("train, val and test splits must be nonempty".into()));
    }
    if test.dim != train.dim {
        return Err(Error::DimMismatch { expected: train.dim, found: test.dim });
    }
    let mut lrs = config.lr_grid.clone();
    lrs.sort_by(f64::total_cmp);
    let chance = uniform_chance(train.classes);

    let mut runs = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let seed = derive_seed(config.seed_root, task_key, run as u64);
        let mut best: Option<(f64, TrainOutcome)> = None;
        for &lr in &lrs {
            let outcome = train_probe(train, val, lr, config, seed)?;
            if best.as_ref().is_none_or(|(_, b)| outcome.val_accuracy > b.val_accuracy) {
                best = Some((lr, outcome));
            }
        }
        let (best_lr, outcome) = best.expect("lr grid is nonempty");
        let test_accuracy = outcome.probe.accuracy(test)?;
        runs.push(RunResult {
            seed,
            best_lr,
            val_accuracy: outcome.val_accuracy,
            test_accuracy,
            chance_corrected: chance_corrected(test_accuracy, chance)?,
            probe: outcome.probe,
        });
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let ccs: Vec<f64> = runs.iter().map(|r| r.chance_corrected).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    let (mean_cc, std_cc) = mean_std(&ccs);
    Ok(TrainResult { chance, runs, mean_acc, std_acc, mean_cc, std_cc })
}
