//! Ledger-level analyses: cosine similarity of representative probe
//! directions, probe-vs-model gaps, failure verdicts and out-of-distribution
//! evaluation of stored probes.

use std::path::Path;

use probelab_core::analysis::{accuracy_gap, classify_failure, cosine_matrix, ood_eval, Decoding, FailureThresholds, ModelAccuracyRow, Verdict, WeightSlice};
use probelab_core::category::{CategoryId, Concept};
use probelab_core::metrics::{chance_corrected, mean_std, uniform_chance};
use probelab_core::probe::Dataset;
use probelab_core::steering::compose;
use probelab_core::types::{Pooling, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{read_jsonl, Error, Result};
use crate::manifest::{CategoryBank, Manifest};
use crate::store::read_shard;
use crate::sweep::{artifact_path, LedgerRow, ProbeArtifact};

/// Selects one ledger row per category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineSelection {
    pub model_id: String,
    pub stage: Stage,
    pub layer_index: u32,
    pub pooling: Pooling,
    pub distance_m: u32,
    /// Restrict to these categories, in this order; otherwise every category
    /// with a matching row, in key order.
    pub categories: Option<Vec<CategoryId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTable {
    pub labels: Vec<CategoryId>,
    pub slice: WeightSlice,
    pub matrix: Vec<Vec<f64>>,
}

fn is_count(bank: &CategoryBank, id: &CategoryId) -> bool {
    bank.get(id).is_some_and(|c| c.concept == Concept::Count && c.num_classes() == 5)
}

/// Representative direction of a row: the mean of its runs' best probes,
/// `row(Two) - row(One)` for count categories.
pub fn representative(ledger: &Path, row: &LedgerRow, bank: &CategoryBank) -> Result<Vec<f32>> {
    let path = artifact_path(ledger, row)
        .ok_or_else(|| Error::Invalid(format!("row {} has no probe artifact", row.key.relative_path().display())))?;
    let artifact = ProbeArtifact::load(&path)?;
    let probes: Vec<_> = artifact.result.best_probes().cloned().collect();
    Ok(compose(&probes, is_count(bank, &row.key.category_id), row.key.layer_index)?.direction)
}

pub fn cosine(ledger: &Path, rows: &[LedgerRow], sel: &CosineSelection, slice: WeightSlice, bank: &CategoryBank) -> Result<CosineTable> {
    let matching = |r: &&LedgerRow| {
        r.is_done()
            && r.key.model_id == sel.model_id
            && r.key.stage == sel.stage
            && r.key.layer_index == sel.layer_index
            && r.key.pooling == sel.pooling
            && r.key.distance_m == sel.distance_m
    };
    let candidates: Vec<&LedgerRow> = rows.iter().filter(matching).collect();
    let picked: Vec<&LedgerRow> = match &sel.categories {
        Some(ids) => ids
            .iter()
            .map(|id| {
                candidates
                    .iter()
                    .copied()
                    .find(|r| &r.key.category_id == id)
                    .ok_or_else(|| Error::Invalid(format!("no done row for {id} at the selected coordinates")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut all = candidates;
            all.sort_by(|a, b| a.key.cmp(&b.key));
            all
        }
    };
    if picked.len() < 2 {
        return Err(Error::Invalid("cosine similarity needs at least two categories".into()));
    }
    let vectors = picked.iter().map(|r| representative(ledger, r, bank)).collect::<Result<Vec<_>>>()?;
    Ok(CosineTable {
        labels: picked.iter().map(|r| r.key.category_id.clone()).collect(),
        slice,
        matrix: cosine_matrix(&vectors, slice)?,
    })
}

pub fn read_model_accuracy(path: &Path) -> Result<Vec<ModelAccuracyRow>> {
    let rows: Vec<ModelAccuracyRow> = read_jsonl(path)?;
    for r in &rows {
        r.validate().map_err(|e| Error::format(path, e))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub model_id: String,
    pub category_id: CategoryId,
    pub distance_m: u32,
    pub decoding: Decoding,
    pub probe_layer: u32,
    pub probe_pooling: Pooling,
    pub model_accuracy: f64,
    pub probe_accuracy: f64,
    pub model_cc: f64,
    pub probe_cc: f64,
    pub gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

/// Last-layer probe row for a model evaluation: the post-layernorm row with
/// the highest layer index, llm_concat preferred.
fn last_layer_row<'a>(rows: &'a [LedgerRow], m: &ModelAccuracyRow) -> Option<&'a LedgerRow> {
    rows.iter()
        .filter(|r| {
            r.is_done()
                && r.key.stage == Stage::PostLayernorm
                && r.key.model_id == m.model_id
                && r.key.category_id.as_str() == m.category_id
                && r.key.distance_m == m.distance_m
        })
        .max_by_key(|r| (r.key.layer_index, r.key.pooling == Pooling::LlmConcat))
}

/// Join model evaluations with last-layer probe rows. Evaluations without a
/// probe row are skipped.
pub fn gaps(
    rows: &[LedgerRow],
    model: &[ModelAccuracyRow],
    decoding: Decoding,
    bank: &CategoryBank,
    thresholds: Option<&FailureThresholds>,
) -> Result<Vec<GapRow>> {
    let mut out = Vec::new();
    for m in model.iter().filter(|m| m.decoding == decoding) {
        let Some(row) = last_layer_row(rows, m) else { continue };
        let id = CategoryId::parse(&m.category_id);
        let category = bank.get(&id).ok_or_else(|| Error::Invalid(format!("category {id} is not in the bank")))?;
        let model_cc = chance_corrected(m.accuracy, uniform_chance(category.num_classes()))?;
        let probe_cc = row.mean_cc.expect("done rows carry mean_cc");
        out.push(GapRow {
            model_id: m.model_id.clone(),
            category_id: id,
            distance_m: m.distance_m,
            decoding,
            probe_layer: row.key.layer_index,
            probe_pooling: row.key.pooling,
            model_accuracy: m.accuracy,
            probe_accuracy: row.mean_acc.expect("done rows carry mean_acc"),
            model_cc,
            probe_cc,
            gap: accuracy_gap(probe_cc, model_cc),
            verdict: thresholds.map(|t| classify_failure(probe_cc, model_cc, t).verdict),
        });
    }
    out.sort_by(|a, b| (&a.model_id, &a.category_id, a.distance_m).cmp(&(&b.model_id, &b.category_id, b.distance_m)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub n: usize,
    pub run_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Labelled records of a shard; records missing from the manifest are
/// skipped.
pub fn shard_dataset(shard: &Path, manifest: &Manifest) -> Result<Dataset> {
    let shard = read_shard(shard)?;
    let mut data: Option<Dataset> = None;
    for r in &shard.records {
        let Some(entry) = manifest.get(&r.sample_id) else { continue };
        let category = manifest
            .bank
            .get(&entry.category_id)
            .ok_or_else(|| Error::Invalid(format!("category {} is not in the bank", entry.category_id)))?;
        let d = data.get_or_insert_with(|| Dataset::new(shard.header.record_len(), category.num_classes()));
        if category.num_classes() != d.classes {
            return Err(Error::Invalid("shard mixes categories with different class counts".into()));
        }
        d.push(&r.values, category.class_index(&entry.class_label).expect("validated label"))?;
    }
    data.ok_or_else(|| Error::Invalid("no shard record is listed in the manifest".into()))
}

/// Accuracy of every stored run's probe on `data`, without retraining.
pub fn ood(artifact: &ProbeArtifact, data: &Dataset) -> Result<OodReport> {
    let run_accuracies = artifact.result.best_probes().map(|p| ood_eval(p, data)).collect::<Result<Vec<_>, _>>()?;
    let (mean_accuracy, std_accuracy) = mean_std(&run_accuracies);
    Ok(OodReport { n: data.len(), run_accuracies, mean_accuracy, std_accuracy })
}
