//! Heatmaps of sweep ledgers: one matrix per (model, category, pooling) with
//! a column per (stage, layer) and a row per distance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use probelab_core::category::CategoryId;
use probelab_core::types::{Pooling, Stage};
use serde::{Deserialize, Serialize};

use crate::sweep::LedgerRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Column {
    pub stage: Stage,
    pub layer_index: u32,
}

impl Column {
    pub fn label(&self) -> String {
        format!("{}/L{}", self.stage, self.layer_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub model_id: String,
    pub category_id: CategoryId,
    pub pooling: Pooling,
    pub columns: Vec<Column>,
    pub distances_m: Vec<u32>,
    /// `cells[row][col]`: mean chance-corrected accuracy at
    /// `(distances_m[row], columns[col])`, null where no `done` row exists.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn cell(&self, distance_m: u32, stage: Stage, layer_index: u32) -> Option<f64> {
        let r = self.distances_m.iter().position(|&d| d == distance_m)?;
        let c = self.columns.iter().position(|c| *c == Column { stage, layer_index })?;
        self.cells[r][c]
    }
}

/// Axes take every coordinate seen in the ledger, failed rows included, so
/// a failed or missing task shows up as a null cell.
pub fn heatmaps(rows: &[LedgerRow]) -> Vec<Heatmap> {
    type Group = (String, CategoryId, Pooling);
    let mut groups: BTreeMap<Group, Vec<&LedgerRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.key.model_id.clone(), r.key.category_id.clone(), r.key.pooling))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((model_id, category_id, pooling), rows)| {
            let columns: Vec<Column> = rows
                .iter()
                .map(|r| Column { stage: r.key.stage, layer_index: r.key.layer_index })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let distances_m: Vec<u32> = rows.iter().map(|r| r.key.distance_m).collect::<BTreeSet<_>>().into_iter().collect();
            let mut cells = vec![vec![None; columns.len()]; distances_m.len()];
            for r in rows.iter().filter(|r| r.is_done()) {
                let i = distances_m.binary_search(&r.key.distance_m).unwrap();
                let j = columns.binary_search(&Column { stage: r.key.stage, layer_index: r.key.layer_index }).unwrap();
                cells[i][j] = r.mean_cc;
            }
            Heatmap { model_id, category_id, pooling, columns, distances_m, cells }
        })
        .collect()
}

/// One CSV table over all heatmaps: a line per (model, category, pooling,
/// distance) and a column per (stage, layer) seen anywhere; absent cells
/// are empty.
pub fn to_csv(maps: &[Heatmap]) -> String {
    let columns: Vec<Column> = maps.iter().flat_map(|m| m.columns.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut out = String::from("model_id,category_id,pooling,distance_m");
    for c in &columns {
        out.push(',');
        out.push_str(&c.label());
    }
    out.push('\n');
    for m in maps {
        for (i, d) in m.distances_m.iter().enumerate() {
            let _ = write!(out, "{},{},{},{d}", csv_field(&m.model_id), csv_field(m.category_id.as_str()), m.pooling);
            for c in &columns {
                out.push(',');
                if let Some(v) = m.columns.iter().position(|x| x == c).and_then(|j| m.cells[i][j]) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
