//! Post-sweep analyses: probe-weight cosine similarity, the count direction,
//! probe-vs-model accuracy gap and the perceptual/cognitive failure verdict.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::probe::{Dataset, LinearProbe};
use crate::{Error, Result};

/// Which part of a weight vector enters a cosine comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSlice {
    Full,
    /// First half of a `[visual, last]` weight vector.
    VisualHalf,
    /// Second half of a `[visual, last]` weight vector.
    LastTokenHalf,
}

impl WeightSlice {
    pub fn apply<'a>(self, w: &'a [f32]) -> Result<&'a [f32]> {
        if self != WeightSlice::Full && w.len() % 2 != 0 {
            return Err(Error::BadShape(format!(
                "half slices need an even-length [visual, last] vector, got length {}",
                w.len()
            )));
        }
        let half = w.len() / 2;
        Ok(match self {
            WeightSlice::Full => w,
            WeightSlice::VisualHalf => &w[..half],
            WeightSlice::LastTokenHalf => &w[half..],
        })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

/// Symmetric cosine-similarity matrix with an exact unit diagonal.
pub fn cosine_matrix(vectors: &[Vec<f32>], slice: WeightSlice) -> Result<Vec<Vec<f64>>> {
    let sliced = vectors
        .iter()
        .map(|v| slice.apply(v))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = sliced.first() {
        if let Some(bad) = sliced.iter().find(|s| s.len() != first.len()) {
            return Err(Error::DimMismatch { expected: first.len(), found: bad.len() });
        }
    }
    if let Some(i) = sliced.iter().position(|s| s.iter().all(|&x| x == 0.0)) {
        return Err(Error::ZeroVector(i));
    }
    let n = sliced.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(sliced[i], sliced[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// `W[to] - W[from]` for a row-major `rows × dim` weight matrix.
pub fn row_difference(weights: &[f32], rows: usize, from: usize, to: usize) -> Result<Vec<f32>> {
    if rows == 0 || weights.len() % rows != 0 {
        return Err(Error::BadShape(format!("{} weights do not form {rows} rows", weights.len())));
    }
    if from >= rows || to >= rows {
        return Err(Error::BadShape(format!("rows {from}/{to} outside a {rows}-row matrix")));
    }
    let dim = weights.len() / rows;
    let a = &weights[from * dim..(from + 1) * dim];
    let b = &weights[to * dim..(to + 1) * dim];
    Ok(b.iter().zip(a).map(|(x, y)| x - y).collect())
}

/// Class index of "One" and "Two" for count probes with labels Zero..Four.
pub const COUNT_ONE: usize = 1;
pub const COUNT_TWO: usize = 2;

/// Direction from one object to two objects: `row(Two) - row(One)` of a count
/// probe's weight matrix (`rows × dim`, at least three rows).
pub fn count_direction(weights: &[f32], rows: usize) -> Result<Vec<f32>> {
    if rows < 3 {
        return Err(Error::BadShape(format!("count probes need >= 3 rows, got {rows}")));
    }
    row_difference(weights, rows, COUNT_ONE, COUNT_TWO)
}

/// `probe - model`, both chance-corrected.
pub fn accuracy_gap(probe_cc: f64, model_cc: f64) -> f64 {
    probe_cc - model_cc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureThresholds {
    pub high: f64,
    pub low: f64,
    pub gap: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        FailureThresholds { high: 0.5, low: 0.3, gap: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The concept is not linearly encoded where the answer is read out.
    Perceptual,
    /// The concept is encoded but the model answers wrongly.
    Cognitive,
    None,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureVerdict {
    pub verdict: Verdict,
    pub probe_cc: f64,
    pub model_cc: f64,
    pub gap: f64,
}

/// Classify a (last-layer probe a', model a') pair.
pub fn classify_failure(probe_cc: f64, model_cc: f64, t: &FailureThresholds) -> FailureVerdict {
    let gap = accuracy_gap(probe_cc, model_cc);
    let verdict = if probe_cc < t.low && model_cc < t.low {
        Verdict::Perceptual
    } else if probe_cc >= t.high && gap >= t.gap {
        Verdict::Cognitive
    } else if model_cc >= t.high && gap < t.gap {
        Verdict::None
    } else {
        Verdict::Indeterminate
    };
    FailureVerdict { verdict, probe_cc, model_cc, gap }
}

/// Plain accuracy of a frozen probe on data from another source.
pub fn ood_eval(probe: &LinearProbe, data: &Dataset) -> Result<f64> {
    probe.accuracy(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Constrained,
}

/// One row of a model-evaluation ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracyRow {
    pub model_id: String,
    pub category_id: String,
    pub distance_m: u32,
    pub decoding: Decoding,
    pub accuracy: f64,
    pub n_correct: u64,
    pub n_total: u64,
}

impl ModelAccuracyRow {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 || self.n_correct > self.n_total {
            return Err(Error::InvalidConfig(format!(
                "{}/{} is not a valid count",
                self.n_correct, self.n_total
            )));
        }
        let expected = self.n_correct as f64 / self.n_total as f64;
        if (self.accuracy - expected).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "accuracy {} disagrees with {}/{}",
                self.accuracy, self.n_correct, self.n_total
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let m = cosine_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], WeightSlice::Full)
            .unwrap();
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[0][2], 1.0);
        assert_eq!(m[1][1], 1.0);
    }

    #[test]
    fn cosine_errors_and_slices() {
        assert!(matches!(
            cosine_matrix(&[vec![1.0, 0.0], vec![1.0]], WeightSlice::Full),
            Err(Error::DimMismatch { .. })
        ));
        assert_eq!(
            cosine_matrix(&[vec![1.0], vec![0.0]], WeightSlice::Full),
            Err(Error::ZeroVector(1))
        );
        assert!(matches!(
            cosine_matrix(&[vec![1.0, 2.0, 3.0]], WeightSlice::LastTokenHalf),
            Err(Error::BadShape(_))
        ));
        // The visual halves disagree, the last-token halves agree.
        let v = [vec![1.0, 0.0, 2.0, 2.0], vec![0.0, 1.0, 1.0, 1.0]];
        assert_eq!(cosine_matrix(&v, WeightSlice::VisualHalf).unwrap()[0][1], 0.0);
        let last = cosine_matrix(&v, WeightSlice::LastTokenHalf).unwrap()[0][1];
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn count_direction_examples() {
        let mut eye = vec![0.0f32; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        assert_eq!(count_direction(&eye, 5).unwrap(), [0.0, -1.0, 1.0, 0.0, 0.0]);
        assert_eq!(count_direction(&[0.5; 10], 5).unwrap(), [0.0, 0.0]);
        let shifted: Vec<f32> = eye.iter().enumerate().map(|(i, v)| v + (i % 5) as f32).collect();
        assert_eq!(count_direction(&shifted, 5).unwrap(), count_direction(&eye, 5).unwrap());
        assert!(matches!(count_direction(&[0.0; 4], 2), Err(Error::BadShape(_))));
    }

    #[test]
    fn gap_examples() {
        assert_eq!(accuracy_gap(1.0, 0.0), 1.0);
        assert_eq!(accuracy_gap(1.0, 1.0), 0.0);
        assert_eq!(accuracy_gap(0.3, 0.3), 0.0);
        assert_eq!(accuracy_gap(0.2, 0.7), -accuracy_gap(0.7, 0.2));
    }

    #[test]
    fn failure_examples() {
        let t = FailureThresholds::default();
        assert_eq!(classify_failure(1.0, 0.0, &t).verdict, Verdict::Cognitive);
        assert_eq!(classify_failure(0.05, 0.0, &t).verdict, Verdict::Perceptual);
        assert_eq!(classify_failure(0.95, 0.9, &t).verdict, Verdict::None);
        assert_eq!(classify_failure(0.4, 0.1, &t).verdict, Verdict::Indeterminate);
        let v = classify_failure(0.8, 0.25, &t);
        assert_eq!(v.gap, 0.8 - 0.25);
    }

    #[test]
    fn model_accuracy_rows() {
        let mut row = ModelAccuracyRow {
            model_id: "m".into(),
            category_id: "Spatial-1".into(),
            distance_m: 5,
            decoding: Decoding::Greedy,
            accuracy: 0.5,
            n_correct: 50,
            n_total: 100,
        };
        assert!(row.validate().is_ok());
        row.accuracy = 0.6;
        assert!(row.validate().is_err());
    }
}
