//! Sparse probes over final-position logits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use probelab_core::category::CategoryId;
use probelab_core::probe::Dataset;
use probelab_core::sparse::{draw_per_class, fit_l1_logistic, token_report, SparseFitConfig, SparseProbeReport};
use probelab_core::types::Pooling;
use serde::{Deserialize, Serialize};

use crate::error::{read_string, Error, Result};
use crate::manifest::Manifest;
use crate::store::read_shard;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitReport {
    pub model_id: String,
    pub category_id: CategoryId,
    pub class_labels: Vec<String>,
    pub per_class: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    #[serde(flatten)]
    pub report: SparseProbeReport,
}

/// Token strings: a JSON object `{"id": "token"}` or plain text with one
/// token per line, line number = token id.
pub fn load_vocab(path: &Path) -> Result<BTreeMap<usize, String>> {
    let text = read_string(path)?;
    if text.trim_start().starts_with('{') {
        let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        raw.into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| Error::format(path, format!("token id {k:?} is not an integer"))))
            .collect()
    } else {
        Ok(text.lines().map(str::to_string).enumerate().collect())
    }
}

/// Pool the records of every logit shard (all distances) into one dataset,
/// labelled from the manifest.
pub fn logit_dataset(shards: &[PathBuf], manifest: &Manifest) -> Result<(Dataset, String, CategoryId)> {
    let mut data: Option<Dataset> = None;
    let mut ident: Option<(String, CategoryId)> = None;
    for path in shards {
        let shard = read_shard(path)?;
        if shard.header.pooling != Pooling::Logits {
            return Err(Error::format(path, format!("pooling is {}, not logits", shard.header.pooling)));
        }
        for r in &shard.records {
            let entry = manifest
                .get(&r.sample_id)
                .ok_or_else(|| Error::Invalid(format!("sample {:?} is not in the manifest", r.sample_id)))?;
            match &ident {
                None => ident = Some((shard.header.model_id.clone(), entry.category_id.clone())),
                Some((m, c)) if *m != shard.header.model_id || *c != entry.category_id => {
                    return Err(Error::Invalid("logit shards must share one model and one category".into()))
                }
                Some(_) => {}
            }
            let category = manifest
                .bank
                .get(&entry.category_id)
                .ok_or_else(|| Error::Invalid(format!("category {} is not in the bank", entry.category_id)))?;
            let d = data.get_or_insert_with(|| Dataset::new(r.values.len(), category.num_classes()));
            d.push(&r.values, category.class_index(&entry.class_label).expect("validated label"))?;
        }
    }
    let (model, category) = ident.ok_or_else(|| Error::Invalid("no logit records".into()))?;
    Ok((data.expect("set with ident"), model, category))
}

fn subset(data: &Dataset, idx: &[usize]) -> Result<Dataset> {
    let mut out = Dataset::new(data.dim, data.classes);
    for &i in idx {
        out.push(data.row(i), data.labels[i])?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn fit(
    shards: &[PathBuf],
    manifest: &Manifest,
    config: &SparseFitConfig,
    per_class: usize,
    seed: u64,
    top_k: usize,
    vocab: &BTreeMap<usize, String>,
) -> Result<LogitReport> {
    let (data, model_id, category_id) = logit_dataset(shards, manifest)?;
    let (train_idx, held_idx) = draw_per_class(&data.labels, data.classes, per_class, seed)?;
    let train = subset(&data, &train_idx)?;
    let held = subset(&data, &held_idx)?;
    let fit = fit_l1_logistic(&train, config)?;
    let report = token_report(&fit, vocab, top_k, &train, (!held.is_empty()).then_some(&held))?;
    let class_labels = manifest.bank.get(&category_id).map(|c| c.class_labels.clone()).unwrap_or_default();
    Ok(LogitReport {
        model_id,
        category_id,
        class_labels,
        per_class,
        seed,
        n_train: train.len(),
        n_heldout: held.len(),
        report,
    })
}
