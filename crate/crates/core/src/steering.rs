//! Steering vectors composed from probe weights, and the α-search plan.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{row_difference, COUNT_ONE, COUNT_TWO};
use crate::probe::LinearProbe;
use crate::{Error, Result};

/// Mean bias-free probe direction at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer_index: u32,
    pub direction: Vec<f32>,
    pub norm: f64,
    pub probes_used: usize,
    /// Set when the averaged direction is (numerically) zero, e.g. probes
    /// pointing in opposite directions.
    pub degenerate: bool,
}

/// Average the weight vectors of `probes` (bias excluded).
///
/// Binary probes contribute their single row. In `count_mode` each probe
/// contributes `row(Two) - row(One)` instead.
pub fn compose(probes: &[LinearProbe], count_mode: bool, layer_index: u32) -> Result<SteeringVector> {
    let first = probes
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no probes to compose".into()))?;
    let outputs = first.outputs();
    if let Some(p) = probes.iter().find(|p| p.dim != first.dim || p.outputs() != outputs) {
        return Err(Error::ShapeMismatch(format!(
            "probe shape {}x{} differs from {}x{}",
            p.outputs(),
            p.dim,
            outputs,
            first.dim
        )));
    }
    match (count_mode, outputs) {
        (true, 5) | (false, 1) => {}
        (true, n) => {
            return Err(Error::ShapeMismatch(format!("count mode needs 5-row probes, got {n}")))
        }
        (false, n) => {
            return Err(Error::ShapeMismatch(format!(
                "{n}-row probes need count mode to yield one direction"
            )))
        }
    }
    let mut sum = alloc::vec![0.0f64; first.dim];
    for p in probes {
        let row = if count_mode {
            row_difference(&p.weights, outputs, COUNT_ONE, COUNT_TWO)?
        } else {
            p.weights.clone()
        };
        for (s, w) in sum.iter_mut().zip(row) {
            *s += w as f64;
        }
    }
    let n = probes.len() as f64;
    let direction: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let norm = libm::sqrt(direction.iter().map(|&x| x as f64 * x as f64).sum());
    Ok(SteeringVector {
        layer_index,
        degenerate: norm <= f32::EPSILON as f64,
        direction,
        norm,
        probes_used: probes.len(),
    })
}

/// `(visual half, last-token half)` of a `[visual, last]` direction.
pub fn split_halves(direction: &[f32]) -> Result<(&[f32], &[f32])> {
    if direction.len() % 2 != 0 {
        return Err(Error::OddLength(direction.len()));
    }
    Ok(direction.split_at(direction.len() / 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub visual_tokens: bool,
    pub last_token: bool,
}

impl Targets {
    pub const VISUAL: Targets = Targets { visual_tokens: true, last_token: false };
    pub const LAST: Targets = Targets { visual_tokens: false, last_token: true };
    pub const BOTH: Targets = Targets { visual_tokens: true, last_token: true };

    pub fn is_empty(self) -> bool {
        !self.visual_tokens && !self.last_token
    }
}

/// Default targets: visual tokens only at the first language-model layer;
/// spatial categories steered at later layers also move the last token.
pub fn default_targets(layer_index: u32, first_layer: u32, spatial: bool) -> Targets {
    if layer_index > first_layer && spatial {
        Targets::BOTH
    } else {
        Targets::VISUAL
    }
}

/// One point of the α search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub spec_id: usize,
    pub layer_index: u32,
    pub targets: Targets,
    pub alpha: f64,
    pub w_first: Vec<f32>,
    pub w_second: Vec<f32>,
}

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

/// Interventions in increasing |α| with the requested sign. The caller runs
/// them in order and stops at the first one that changes the output.
pub fn alpha_search_plan(
    sv: &SteeringVector,
    grid: &[f64],
    sign: f64,
    targets: Targets,
) -> Result<Vec<InterventionSpec>> {
    if grid.is_empty() {
        return Err(Error::EmptyAlphaGrid);
    }
    if let Some(bad) = grid.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha grid values must be positive, got {bad}")));
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("intervention targets are empty".into()));
    }
    let sign = if sign < 0.0 { -1.0 } else { 1.0 };
    let (first, second) = split_halves(&sv.direction)?;
    let mut mags = grid.to_vec();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    Ok(mags
        .into_iter()
        .enumerate()
        .map(|(spec_id, a)| InterventionSpec {
            spec_id,
            layer_index: sv.layer_index,
            targets,
            alpha: sign * a,
            w_first: first.to_vec(),
            w_second: second.to_vec(),
        })
        .collect())
}

/// External judgement of one steered generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEntry {
    pub spec_id: usize,
    pub original_text: String,
    pub steered_text: String,
    pub judged_changed: bool,
}

/// First spec of the plan (smallest |α|) judged to change the output.
pub fn select_alpha<'a>(plan: &'a [InterventionSpec], log: &[ProtocolEntry]) -> Option<&'a InterventionSpec> {
    plan.iter()
        .find(|spec| log.iter().any(|e| e.spec_id == spec.spec_id && e.judged_changed))
}

/// Rows overwritten by [`InterventionSpec::apply`], for exact reversal.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedIntervention {
    saved: Vec<(usize, Vec<f32>)>,
}

impl InterventionSpec {
    /// Add `α·w_first` to every visual row and/or `α·w_second` to the last
    /// row of a `len × dim` activation buffer.
    pub fn apply(
        &self,
        values: &mut [f32],
        dim: usize,
        visual: &[usize],
        last_index: usize,
    ) -> Result<AppliedIntervention> {
        if self.w_first.len() != dim || self.w_second.len() != dim {
            return Err(Error::DimMismatch { expected: dim, found: self.w_first.len() });
        }
        if values.len() % dim.max(1) != 0 || (last_index + 1) * dim > values.len() {
            return Err(Error::ShapeMismatch("activation buffer too short".into()));
        }
        let mut rows: Vec<(usize, &[f32])> = Vec::new();
        if self.targets.visual_tokens {
            rows.extend(visual.iter().map(|&i| (i, self.w_first.as_slice())));
        }
        if self.targets.last_token {
            rows.push((last_index, self.w_second.as_slice()));
        }
        if let Some(&(bad, _)) = rows.iter().find(|(i, _)| (i + 1) * dim > values.len()) {
            return Err(Error::ShapeMismatch(format!("row {bad} outside activation buffer")));
        }
        let mut saved = Vec::with_capacity(rows.len());
        let alpha = self.alpha as f32;
        for (i, w) in rows {
            let row = &mut values[i * dim..(i + 1) * dim];
            saved.push((i, row.to_vec()));
            for (x, &wj) in row.iter_mut().zip(w) {
                *x += alpha * wj;
            }
        }
        Ok(AppliedIntervention { saved })
    }
}

impl AppliedIntervention {
    /// Restore the rows exactly as they were before `apply`.
    pub fn revert(self, values: &mut [f32], dim: usize) {
        for (i, row) in self.saved.into_iter().rev() {
            values[i * dim..(i + 1) * dim].copy_from_slice(&row);
        }
    }
}
