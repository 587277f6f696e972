//! Sparse L1-regularised logistic regression over logit vectors.
//!
//! Minimises `J(W, b) = ‖W‖₁ + C · Σᵢ ℓ(yᵢ, W xᵢ + b)` with proximal gradient
//! descent (ISTA) and a backtracking line search. `ℓ` is the logistic loss for
//! two classes and softmax cross-entropy otherwise; the bias is unpenalised.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::probe::{Dataset, LinearProbe};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseFitConfig {
    /// Weight of the data term (inverse regularisation strength).
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SparseFitConfig {
    fn default() -> Self {
        SparseFitConfig { c: 0.3, max_iter: 500, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `outputs × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub c: f64,
    /// Objective after every accepted iteration, starting at the initial point.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl SparseFit {
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// All weights zero: the fit found nothing worth the L1 cost.
    pub fn gives_up(&self) -> bool {
        self.nonzero() == 0
    }

    pub fn to_probe(&self) -> LinearProbe {
        LinearProbe {
            classes: self.classes,
            dim: self.dim,
            weights: self.weights.iter().map(|&w| w as f32).collect(),
            bias: self.bias.iter().map(|&b| b as f32).collect(),
        }
    }
}

/// `sign(x) · max(|x| - τ, 0)`.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

struct Problem<'a> {
    data: &'a Dataset,
    outputs: usize,
    c: f64,
}

impl Problem<'_> {
    /// Smooth part `C Σ ℓ` and, when `grad` is given, its gradient `[W | b]`.
    fn smooth(&self, w: &[f64], b: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.data.dim;
        let k = self.outputs;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut z = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..self.data.len() {
            let x = self.data.row(i);
            let y = self.data.labels[i];
            for o in 0..k {
                let row = &w[o * d..(o + 1) * d];
                z[o] = b[o] + row.iter().zip(x).map(|(&a, &v)| a * v as f64).sum::<f64>();
            }
            // z now holds logits; reuse it for dLoss/dz.
            if k == 1 {
                let (zz, yy) = (z[0], y as f64);
                total += if y == 1 { softplus(-zz) } else { softplus(zz) };
                z[0] = sigmoid(zz) - yy;
            } else {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = libm::exp(*v - max);
                    sum += *v;
                }
                z.iter_mut().for_each(|v| *v /= sum);
                total -= libm::log(z[y]).max(-745.0);
                z[y] -= 1.0;
            }
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..k {
                    let dz = self.c * z[o];
                    if dz != 0.0 {
                        let row = &mut g[o * d..(o + 1) * d];
                        for (gj, &v) in row.iter_mut().zip(x) {
                            *gj += dz * v as f64;
                        }
                    }
                    g[k * d + o] += dz;
                }
            }
        }
        self.c * total
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + libm::log1p(libm::exp(-x)) } else { libm::log1p(libm::exp(x)) }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// Fit the sparse logistic model.
pub fn fit_l1_logistic(data: &Dataset, config: &SparseFitConfig) -> Result<SparseFit> {
    if !(config.c > 0.0) {
        return Err(Error::InvalidConfig(format!("C must be positive, got {}", config.c)));
    }
    let mut counts = vec![0usize; data.classes];
    data.labels.iter().for_each(|&l| counts[l] += 1);
    if data.classes < 2 || counts.iter().any(|&n| n < 2) {
        return Err(Error::DegenerateData(format!(
            "need at least two samples of every class, got {counts:?}"
        )));
    }
    let d = data.dim;
    let k = if data.classes == 2 { 1 } else { data.classes };
    let problem = Problem { data, outputs: k, c: config.c };

    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut grad = vec![0.0; k * (d + 1)];
    let mut f = problem.smooth(&w, &b, Some(&mut grad));
    let mut objective = vec![f + l1(&w)];
    let mut step = 1.0;
    let mut converged = false;
    let mut w_new = vec![0.0; k * d];
    let mut b_new = vec![0.0; k];

    for _ in 0..config.max_iter {
        // Let the step grow again after earlier backtracking.
        step *= 2.0;
        let accepted = loop {
            for j in 0..k * d {
                w_new[j] = soft_threshold(w[j] - step * grad[j], step);
            }
            for o in 0..k {
                b_new[o] = b[o] - step * grad[k * d + o];
            }
            let f_new = problem.smooth(&w_new, &b_new, None);
            let mut lin = 0.0;
            let mut sq = 0.0;
            for j in 0..k * d {
                let delta = w_new[j] - w[j];
                lin += grad[j] * delta;
                sq += delta * delta;
            }
            for o in 0..k {
                let delta = b_new[o] - b[o];
                lin += grad[k * d + o] * delta;
                sq += delta * delta;
            }
            if f_new <= f + lin + sq / (2.0 * step) + 1e-12 * f.abs() {
                break Some(sq);
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some(moved) = accepted else {
            converged = true;
            break;
        };
        core::mem::swap(&mut w, &mut w_new);
        core::mem::swap(&mut b, &mut b_new);
        f = problem.smooth(&w, &b, Some(&mut grad));
        let j_new = f + l1(&w);
        let j_old = *objective.last().expect("initial objective recorded");
        objective.push(j_new);
        if (j_old - j_new).abs() < config.tol || moved == 0.0 {
            converged = true;
            break;
        }
    }

    Ok(SparseFit { classes: data.classes, dim: d, weights: w, bias: b, c: config.c, objective, converged })
}

/// Seeded draw of `per_class` training samples per class; returns
/// `(train indices, held-out indices)`, each sorted.
pub fn draw_per_class(labels: &[usize], classes: usize, per_class: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < per_class {
            return Err(Error::DegenerateData(format!(
                "class {c} has {} samples, {per_class} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..per_class]);
        held.extend_from_slice(&idx[per_class..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token_id: usize,
    pub token: String,
    /// Class the weight votes for: binary fits report 1 for positive weights
    /// and 0 for negative ones, multiclass fits report the weight's row.
    pub class_index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbeReport {
    pub c: f64,
    pub nonzero: usize,
    pub gives_up: bool,
    pub converged: bool,
    /// Sorted by |weight|, largest first.
    pub entries: Vec<TokenWeight>,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Listing of the nonzero weights, at most `top_k` of them.
pub fn token_report(
    fit: &SparseFit,
    vocab: &BTreeMap<usize, String>,
    top_k: usize,
    train: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<SparseProbeReport> {
    let k = fit.outputs();
    let mut entries: Vec<TokenWeight> = Vec::new();
    for o in 0..k {
        for t in 0..fit.dim {
            let weight = fit.weights[o * fit.dim + t];
            if weight == 0.0 {
                continue;
            }
            let class_index = if k == 1 { usize::from(weight > 0.0) } else { o };
            let token = vocab.get(&t).cloned().unwrap_or_else(|| format!("<{t}>"));
            entries.push(TokenWeight { token_id: t, token, class_index, weight });
        }
    }
    entries.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then(a.token_id.cmp(&b.token_id))
            .then(a.class_index.cmp(&b.class_index))
    });
    entries.truncate(top_k);
    let probe = fit.to_probe();
    Ok(SparseProbeReport {
        c: fit.c,
        nonzero: fit.nonzero(),
        gives_up: fit.gives_up(),
        converged: fit.converged,
        entries,
        train_accuracy: probe.accuracy(train)?,
        heldout_accuracy: heldout.map(|h| probe.accuracy(h)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.0, 1.0), 0.0);
    }

    fn tiny() -> Dataset {
        let mut d = Dataset::new(3, 2);
        for i in 0..10 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            d.push(&[3.0 * s, 0.1 * (i as f32 - 5.0), 0.0], usize::from(s > 0.0)).unwrap();
        }
        d
    }

    #[test]
    fn fits_the_informative_feature() {
        let fit = fit_l1_logistic(&tiny(), &SparseFitConfig::default()).unwrap();
        assert!(fit.weights[0] > 0.0);
        assert_eq!(fit.weights[2], 0.0);
        assert!(fit.objective.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tiny_c_gives_up() {
        let fit = fit_l1_logistic(&tiny(), &SparseFitConfig { c: 1e-8, ..Default::default() }).unwrap();
        assert!(fit.gives_up());
        let report = token_report(&fit, &BTreeMap::new(), 10, &tiny(), Some(&tiny())).unwrap();
        assert!(report.entries.is_empty());
        assert_eq!(report.heldout_accuracy, Some(0.5));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut d = Dataset::new(1, 2);
        d.push(&[1.0], 0).unwrap();
        d.push(&[1.0], 0).unwrap();
        d.push(&[1.0], 1).unwrap();
        assert!(matches!(fit_l1_logistic(&d, &SparseFitConfig::default()), Err(Error::DegenerateData(_))));
        assert!(fit_l1_logistic(&tiny(), &SparseFitConfig { c: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn report_lists_single_weight() {
        let fit = SparseFit {
            classes: 2,
            dim: 3,
            weights: vec![0.0, -0.7, 0.0],
            bias: vec![0.0],
            c: 0.3,
            objective: vec![],
            converged: true,
        };
        let mut vocab = BTreeMap::new();
        vocab.insert(1, String::from("none"));
        let report = token_report(&fit, &vocab, 5, &tiny(), None).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].token, "none");
        assert_eq!(report.entries[0].class_index, 0);
    }

    #[test]
    fn draw_is_balanced_and_disjoint() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let (train, held) = draw_per_class(&labels, 2, 24, 9).unwrap();
        assert_eq!(train.len(), 48);
        assert_eq!(held.len(), 52);
        assert!(train.iter().all(|i| !held.contains(i)));
        assert_eq!(train.iter().filter(|&&i| labels[i] == 1).count(), 24);
        assert_eq!(draw_per_class(&labels, 2, 24, 9).unwrap().0, train);
        assert!(draw_per_class(&labels, 2, 51, 9).is_err());
    }
}
