//! Independent reference computations checked against the library.

use probelab_core::adamw::{AdamWConfig, AdamWState};
use probelab_core::metrics::{chance_corrected, normal_cdf, uniform_chance};
use probelab_core::probe::Dataset;
use probelab_core::toy::{bruteforce_best_linear, PlantSpec, SplitCounts};
use probelab_core::types::Split;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cohen's kappa of a k-class confusion matrix whose row and column
/// marginals are uniform and whose diagonal mass is `observed`.
fn kappa_uniform(observed: f64, k: usize) -> f64 {
    let diag = observed / k as f64;
    let off = (1.0 - observed) / (k * (k - 1)) as f64;
    let m: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { diag } else { off }).collect()).collect();
    let po: f64 = (0..k).map(|i| m[i][i]).sum();
    let pe: f64 = (0..k)
        .map(|i| {
            let row: f64 = m[i].iter().sum();
            let col: f64 = m.iter().map(|r| r[i]).sum();
            row * col
        })
        .sum();
    let kappa = (po - pe) / (1.0 - pe);
    kappa.max(0.0)
}

#[test]
fn chance_correction_is_uniform_kappa() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10usize);
        let a_o: f64 = rng.random();
        let ours = chance_corrected(a_o, uniform_chance(k)).unwrap();
        worst = worst.max((ours - kappa_uniform(a_o, k)).abs());
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn chance_correction_examples() {
    assert_eq!(chance_corrected(0.75, 0.5).unwrap(), 0.5);
    assert_eq!(chance_corrected(0.2, 0.2).unwrap(), 0.0);
    for c in [0.0, 0.2, 0.5, 0.9] {
        assert_eq!(chance_corrected(1.0, c).unwrap(), 1.0);
    }
}

/// Textbook AdamW on one scalar: decay, moments, bias correction, update.
struct ScalarAdamW {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        self.t += 1;
        let decayed = p * (1.0 - lr * wd);
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        decayed - lr * mh / (vh.sqrt() + eps)
    }
}

fn scripted_grad(t: usize, i: usize, p: f64) -> f64 {
    (0.3 * t as f64 + i as f64).sin() + 0.1 * p
}

#[test]
fn adamw_single_step() {
    let mut state = AdamWState::<f64>::new(1);
    let mut p = [1.0];
    state.step(&mut p, &[1.0], 0.1, &AdamWConfig::default());
    assert!((p[0] - 0.899_000_001).abs() <= 1e-6, "{}", p[0]);
}

#[test]
fn adamw_matches_scripted_trajectory() {
    let n = 5;
    let lr = 0.05;
    let mut params: Vec<f64> = (0..n).map(|i| 1.0 - 0.4 * i as f64).collect();
    let mut reference = params.clone();
    let mut refs: Vec<ScalarAdamW> = (0..n).map(|_| ScalarAdamW { m: 0.0, v: 0.0, t: 0 }).collect();
    let mut state = AdamWState::<f64>::new(n);
    for t in 0..100 {
        let grads: Vec<f64> = (0..n).map(|i| scripted_grad(t, i, params[i])).collect();
        state.step(&mut params, &grads, lr, &AdamWConfig::default());
        for i in 0..n {
            let g = scripted_grad(t, i, reference[i]);
            reference[i] = refs[i].step(reference[i], g, lr);
        }
        for i in 0..n {
            assert!((params[i] - reference[i]).abs() <= 1e-6, "step {t} param {i}: {} vs {}", params[i], reference[i]);
        }
    }
}

#[test]
fn adamw_zero_grad_without_decay_is_identity() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut state = AdamWState::<f32>::new(3);
    let mut p = [0.5f32, -2.0, 7.0];
    state.step(&mut p, &[0.0; 3], 0.1, &cfg);
    assert_eq!(p, [0.5, -2.0, 7.0]);
}

#[test]
fn oracle_matches_closed_form_gaussian_threshold() {
    let spec = PlantSpec {
        feature_dim: 2,
        margin: 2.0,
        n_per_class: SplitCounts { train: 2000, val: 0, test: 0 },
        ..Default::default()
    };
    let data = spec.dataset(0, 5, Split::Train, 9).unwrap();
    let best = bruteforce_best_linear(&data).unwrap();
    let closed = normal_cdf(spec.margin / 2.0);
    assert!((best - closed).abs() <= 0.03, "oracle {best} vs closed form {closed}");
}

#[test]
fn oracle_three_dimensional_grid() {
    let mut data = Dataset::new(3, 2);
    for i in 0..60 {
        let c = i % 2;
        let s = if c == 1 { 1.0 } else { -1.0 };
        data.push(&[0.1 * (i % 7) as f32, (i % 3) as f32 * 0.2, s], c).unwrap();
    }
    assert_eq!(bruteforce_best_linear(&data).unwrap(), 1.0);
}
