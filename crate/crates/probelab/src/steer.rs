//! Steering files: a composed direction stored as a two-record shard
//! (`w_first`, `w_second`) with stage `llm` and pooling `steering`, plus the
//! α-search plan in the header.

use std::path::Path;

use probelab_core::category::{CategoryId, Concept};
use probelab_core::steering::{alpha_search_plan, compose, default_targets, select_alpha, split_halves, InterventionSpec, ProtocolEntry, SteeringVector, Targets};
use probelab_core::types::{Pooling, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{read_jsonl, Error, Result};
use crate::manifest::CategoryBank;
use crate::store::{read_shard, write_shard, ActivationRecord, ShardHeader};
use crate::sweep::{artifact_path, LedgerRow, ProbeArtifact};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringMeta {
    pub targets: Targets,
    /// Signed α values in search order.
    pub alphas: Vec<f64>,
    pub norm: f64,
    pub probes_used: usize,
    pub degenerate: bool,
    pub count_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub model_id: String,
    pub category_id: CategoryId,
    pub distance_m: u32,
    /// Earliest llm layer with mean a' ≥ `min_cc` when absent.
    pub layer_index: Option<u32>,
    pub targets: Option<Targets>,
}

pub const DEFAULT_MIN_CC: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringFile {
    pub model_id: String,
    pub category_id: Option<CategoryId>,
    pub distance_m: Option<u32>,
    pub vector: SteeringVector,
    pub meta: SteeringMeta,
}

impl SteeringFile {
    /// Interventions in search order.
    pub fn plan(&self) -> Result<Vec<InterventionSpec>> {
        let sign = self.meta.alphas.first().copied().unwrap_or(1.0);
        let grid: Vec<f64> = self.meta.alphas.iter().map(|a| a.abs()).collect();
        Ok(alpha_search_plan(&self.vector, &grid, sign, self.meta.targets)?)
    }

    pub fn write(&self, path: &Path) -> Result<u64> {
        let (first, second) = split_halves(&self.vector.direction)?;
        let mut header = ShardHeader::flat(&self.model_id, Stage::Llm, self.vector.layer_index, Pooling::Steering, first.len());
        header.record_count = 2;
        header.category_id = self.category_id.clone();
        header.distance_m = self.distance_m;
        header.steering = Some(self.meta.clone());
        let records = [ActivationRecord::new("w_first", first.to_vec()), ActivationRecord::new("w_second", second.to_vec())];
        write_shard(path, &header, &records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let shard = read_shard(path)?;
        let h = shard.header;
        if h.pooling != Pooling::Steering {
            return Err(Error::format(path, format!("pooling is {}, not steering", h.pooling)));
        }
        let meta = h.steering.ok_or_else(|| Error::format(path, "steering metadata missing"))?;
        let half = |id: &str| {
            shard
                .records
                .iter()
                .find(|r| r.sample_id == id)
                .map(|r| r.values.clone())
                .ok_or_else(|| Error::format(path, format!("record {id} missing")))
        };
        let mut direction = half("w_first")?;
        direction.extend(half("w_second")?);
        Ok(SteeringFile {
            model_id: h.model_id,
            category_id: h.category_id,
            distance_m: h.distance_m,
            vector: SteeringVector {
                layer_index: h.layer_index,
                direction,
                norm: meta.norm,
                probes_used: meta.probes_used,
                degenerate: meta.degenerate,
            },
            meta,
        })
    }
}

/// Compose a steering file from the llm_concat probes of a sweep ledger.
pub fn compose_from_ledger(
    ledger: &Path,
    rows: &[LedgerRow],
    req: &ComposeRequest,
    bank: &CategoryBank,
    alpha_grid: &[f64],
    sign: f64,
) -> Result<SteeringFile> {
    let mut candidates: Vec<&LedgerRow> = rows
        .iter()
        .filter(|r| {
            r.is_done()
                && r.key.model_id == req.model_id
                && r.key.stage == Stage::Llm
                && r.key.pooling == Pooling::LlmConcat
                && r.key.category_id == req.category_id
                && r.key.distance_m == req.distance_m
        })
        .collect();
    candidates.sort_by_key(|r| r.key.layer_index);
    let first_layer = candidates
        .first()
        .ok_or_else(|| Error::Invalid(format!("no llm_concat rows for {} at {} m", req.category_id, req.distance_m)))?
        .key
        .layer_index;
    let row = match req.layer_index {
        Some(l) => candidates
            .iter()
            .find(|r| r.key.layer_index == l)
            .ok_or_else(|| Error::Invalid(format!("no llm_concat row at layer {l}")))?,
        None => candidates
            .iter()
            .find(|r| r.mean_cc.is_some_and(|a| a >= DEFAULT_MIN_CC))
            .ok_or_else(|| Error::Invalid(format!("no llm layer reaches mean a' {DEFAULT_MIN_CC}")))?,
    };
    let category = bank.get(&req.category_id);
    let count_mode = category.is_some_and(|c| c.concept == Concept::Count && c.num_classes() == 5);
    let spatial = req.category_id.concept() == Concept::Spatial;
    let path = artifact_path(ledger, row).ok_or_else(|| Error::Invalid("row has no probe artifact".into()))?;
    let artifact = ProbeArtifact::load(&path)?;
    let probes: Vec<_> = artifact.result.best_probes().cloned().collect();
    let vector = compose(&probes, count_mode, row.key.layer_index)?;
    let targets = req.targets.unwrap_or_else(|| default_targets(row.key.layer_index, first_layer, spatial));
    let plan = alpha_search_plan(&vector, alpha_grid, sign, targets)?;
    Ok(SteeringFile {
        model_id: req.model_id.clone(),
        category_id: Some(req.category_id.clone()),
        distance_m: Some(req.distance_m),
        meta: SteeringMeta {
            targets,
            alphas: plan.iter().map(|s| s.alpha).collect(),
            norm: vector.norm,
            probes_used: vector.probes_used,
            degenerate: vector.degenerate,
            count_mode,
        },
        vector,
    })
}

pub fn read_protocol_log(path: &Path) -> Result<Vec<ProtocolEntry>> {
    read_jsonl(path)
}

/// Smallest-|α| spec judged to change the output, if any.
pub fn select(file: &SteeringFile, log: &[ProtocolEntry]) -> Result<Option<InterventionSpec>> {
    let plan = file.plan()?;
    Ok(select_alpha(&plan, log).cloned())
}
