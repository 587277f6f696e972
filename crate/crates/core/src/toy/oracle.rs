//! Reference best-linear-accuracy search, independent of the probe trainer.
//!
//! Low dimensions are searched exhaustively over directions (1° grid) and
//! thresholds. Up to 64 dimensions a full-batch Newton logistic fit supplies
//! the direction and the threshold is still searched exhaustively.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::probe::Dataset;
use crate::{Error, Result};

const MAX_NEWTON_DIM: usize = 64;
const MAX_EXHAUSTIVE_3D: usize = 400;

/// Best training accuracy reachable by thresholding `proj`, either
/// orientation.
fn best_threshold(proj: &mut [(f64, usize)]) -> f64 {
    proj.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = proj.len();
    let total_pos = proj.iter().filter(|p| p.1 == 1).count();
    // Everything above the cut is predicted 1; start with the cut below all.
    let mut correct = total_pos;
    let mut best = correct.max(n - correct);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && proj[j].0 == proj[i].0 {
            if proj[j].1 == 1 { correct -= 1 } else { correct += 1 }
            j += 1;
        }
        best = best.max(correct).max(n - correct);
        i = j;
    }
    best as f64 / n as f64
}

fn projected(data: &Dataset, w: &[f64]) -> Vec<(f64, usize)> {
    (0..data.len())
        .map(|i| {
            let p = data.row(i).iter().zip(w).map(|(&x, &wj)| x as f64 * wj).sum();
            (p, data.labels[i])
        })
        .collect()
}

fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Ridge-stabilised Newton logistic regression; returns the weight vector.
fn newton_direction(data: &Dataset) -> Vec<f64> {
    let d = data.dim;
    let p = d + 1;
    let ridge = 1e-4;
    let mut beta = vec![0.0; p];
    for _ in 0..50 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for i in 0..data.len() {
            let x = data.row(i);
            let xi = |k: usize| if k < d { x[k] as f64 } else { 1.0 };
            let z: f64 = (0..p).map(|k| beta[k] * xi(k)).sum();
            let mu = 1.0 / (1.0 + libm::exp(-z));
            let wgt = (mu * (1.0 - mu)).max(1e-12);
            let r = mu - data.labels[i] as f64;
            for a in 0..p {
                grad[a] += r * xi(a);
                for b in 0..p {
                    hess[a * p + b] += wgt * xi(a) * xi(b);
                }
            }
        }
        for a in 0..d {
            grad[a] += ridge * beta[a];
            hess[a * p + a] += ridge;
        }
        hess[p * p - 1] += 1e-9;
        let Some(step) = solve(hess, grad, p) else { break };
        let mut moved = 0.0f64;
        for k in 0..p {
            beta[k] -= step[k];
            moved = moved.max(step[k].abs());
        }
        if moved < 1e-10 {
            break;
        }
    }
    beta.truncate(d);
    beta
}

/// Best accuracy a linear threshold classifier achieves on `data` (binary).
pub fn bruteforce_best_linear(data: &Dataset) -> Result<f64> {
    if data.classes != 2 {
        return Err(Error::InvalidConfig("reference search handles two classes".into()));
    }
    if data.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    let deg = core::f64::consts::PI / 180.0;
    let directions: Vec<Vec<f64>> = match data.dim {
        1 => vec![vec![1.0]],
        2 => (0..180).map(|a| {
            let t = a as f64 * deg;
            vec![libm::cos(t), libm::sin(t)]
        }).collect(),
        3 if data.len() <= MAX_EXHAUSTIVE_3D => {
            let mut dirs = Vec::with_capacity(180 * 91);
            for polar in 0..=90 {
                let p = polar as f64 * deg;
                let steps = if polar == 0 { 1 } else { 360 };
                for az in 0..steps {
                    let a = az as f64 * deg;
                    dirs.push(vec![libm::sin(p) * libm::cos(a), libm::sin(p) * libm::sin(a), libm::cos(p)]);
                }
            }
            dirs
        }
        d if d <= MAX_NEWTON_DIM => vec![newton_direction(data)],
        d => return Err(Error::TooLarge(format!("{d} dimensions"))),
    };
    // Each direction also covers its opposite via both threshold orientations.
    Ok(directions
        .iter()
        .map(|w| best_threshold(&mut projected(data, w)))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_line() {
        let mut d = Dataset::new(1, 2);
        for i in 0..20 {
            d.push(&[i as f32], usize::from(i >= 10)).unwrap();
        }
        assert_eq!(bruteforce_best_linear(&d).unwrap(), 1.0);
    }

    #[test]
    fn xor_is_capped() {
        let mut d = Dataset::new(2, 2);
        for (x, y, c) in [(0.0, 0.0, 0), (1.0, 1.0, 0), (0.0, 1.0, 1), (1.0, 0.0, 1)] {
            for k in 0..5 {
                let e = k as f32 * 0.01;
                d.push(&[x + e, y - e], c).unwrap();
            }
        }
        assert!(bruteforce_best_linear(&d).unwrap() <= 0.75);
    }

    #[test]
    fn newton_path_separates() {
        let mut d = Dataset::new(5, 2);
        for i in 0..40 {
            let c = i % 2;
            let s = if c == 1 { 1.0 } else { -1.0 };
            d.push(&[s, 0.1 * (i % 3) as f32, 0.0, s * 0.5, (i % 5) as f32], c).unwrap();
        }
        assert_eq!(bruteforce_best_linear(&d).unwrap(), 1.0);
        let big = Dataset::new(65, 2);
        assert!(matches!(bruteforce_best_linear(&big), Err(Error::TooLarge(_)) | Err(Error::DegenerateData(_))));
    }
}
