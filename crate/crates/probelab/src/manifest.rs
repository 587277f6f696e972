//! Counterfactual dataset manifests and the category bank.
//!
//! A manifest is a tab-separated file, one sample per line, with the fields
//! `sample_id image_uri category_id class_label distance_m scene_id group_id`.
//! Blank lines, `#` comments and a leading header line are skipped. The
//! category bank is a JSON document `{"categories": [...], "scene_splits":
//! {...}}`; when a `categories.json` sits next to the manifest it replaces the
//! built-in bank.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use probelab_core::category::{
    assign_split, builtin_bank, carved_validation, CategoryId, CounterfactualCategory, SceneMap,
};
use probelab_core::probe::derive_seed;
use probelab_core::types::Split;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, read_string, write_atomic, Error, Result};

pub const FIELDS: [&str; 7] =
    ["sample_id", "image_uri", "category_id", "class_label", "distance_m", "scene_id", "group_id"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_uri: String,
    pub category_id: CategoryId,
    pub class_label: String,
    pub distance_m: u32,
    pub scene_id: String,
    pub group_id: String,
    /// Split from the town rule, before any validation carving.
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBank {
    pub categories: Vec<CounterfactualCategory>,
    #[serde(default)]
    pub scene_splits: SceneMap,
}

impl Default for CategoryBank {
    fn default() -> Self {
        CategoryBank { categories: builtin_bank(), scene_splits: SceneMap::new() }
    }
}

impl CategoryBank {
    pub fn load(path: &Path) -> Result<Self> {
        let bank: CategoryBank = read_json(path)?;
        let mut seen = BTreeSet::new();
        for c in &bank.categories {
            c.validate().map_err(|e| Error::format(path, e))?;
            if !seen.insert(c.category_id.clone()) {
                return Err(Error::format(path, format!("category {} listed twice", c.category_id)));
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("bank serialises");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn get(&self, id: &CategoryId) -> Option<&CounterfactualCategory> {
        self.categories.iter().find(|c| &c.category_id == id)
    }

    /// Bank file next to a manifest, else the built-in bank.
    pub fn for_manifest(manifest: &Path) -> Result<Self> {
        let sibling = manifest.with_file_name("categories.json");
        if sibling.is_file() {
            CategoryBank::load(&sibling)
        } else {
            Ok(CategoryBank::default())
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub bank: CategoryBank,
    index: HashMap<String, usize>,
    carved: BTreeSet<CategoryId>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Manifest::load_with_bank(path, CategoryBank::for_manifest(path)?)
    }

    pub fn load_with_bank(path: &Path, bank: CategoryBank) -> Result<Self> {
        let text = read_string(path)?;
        let mut records = Vec::new();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() || raw.starts_with('#') || (records.is_empty() && raw.starts_with("sample_id\t")) {
                continue;
            }
            let record = parse_line(raw, &bank).map_err(|e| match e {
                LineError::Parse(message) => Error::Parse { path: path.to_path_buf(), line, message },
                LineError::Category(category) => Error::UnknownCategory { path: path.to_path_buf(), line, category },
            })?;
            if let Some(&first) = first_line.get(&record.sample_id) {
                return Err(Error::DuplicateId { path: path.to_path_buf(), line, first, id: record.sample_id });
            }
            first_line.insert(record.sample_id.clone(), line);
            records.push(record);
        }
        Ok(Manifest::from_records(records, bank))
    }

    pub fn from_records(records: Vec<SampleRecord>, bank: CategoryBank) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.sample_id.clone(), i)).collect();
        let with_val: BTreeSet<&CategoryId> =
            records.iter().filter(|r| r.split == Split::Val).map(|r| &r.category_id).collect();
        let carved = records
            .iter()
            .map(|r| &r.category_id)
            .filter(|c| carved_validation(c) && !with_val.contains(c))
            .cloned()
            .collect();
        Manifest { records, bank, index, carved }
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    /// Split used for probing. Categories without a validation town get
    /// every ninth training group (by group_id hash) moved to validation.
    pub fn effective_split(&self, record: &SampleRecord) -> Split {
        if record.split == Split::Train && self.carved.contains(&record.category_id) && carve_to_val(&record.group_id) {
            Split::Val
        } else {
            record.split
        }
    }

    pub fn to_tsv(records: &[SampleRecord]) -> String {
        let mut out = FIELDS.join("\t");
        out.push('\n');
        for r in records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.sample_id, r.image_uri, r.category_id, r.class_label, r.distance_m, r.scene_id, r.group_id
            );
        }
        out
    }

    pub fn write(path: &Path, records: &[SampleRecord]) -> Result<()> {
        write_atomic(path, Manifest::to_tsv(records).as_bytes())
    }
}

fn carve_to_val(group_id: &str) -> bool {
    derive_seed(0, group_id, 0) % 9 == 0
}

enum LineError {
    Parse(String),
    Category(String),
}

fn parse_line(line: &str, bank: &CategoryBank) -> std::result::Result<SampleRecord, LineError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != FIELDS.len() {
        return Err(LineError::Parse(format!("expected {} tab-separated fields, found {}", FIELDS.len(), fields.len())));
    }
    if let Some(i) = fields.iter().position(|f| f.is_empty()) {
        return Err(LineError::Parse(format!("field {} is empty", FIELDS[i])));
    }
    let category_id = CategoryId::parse(fields[2]);
    let category = bank.get(&category_id).ok_or_else(|| LineError::Category(fields[2].to_string()))?;
    let class_label = fields[3].to_string();
    if category.class_index(&class_label).is_none() {
        return Err(LineError::Parse(format!("class label {class_label:?} is not an answer of {category_id}")));
    }
    let distance_m: u32 = fields[4]
        .parse()
        .map_err(|_| LineError::Parse(format!("distance_m {:?} is not a whole number of meters", fields[4])))?;
    if !category.distances_m.contains(&distance_m) {
        return Err(LineError::Parse(format!("{category_id} has no {distance_m} m versions")));
    }
    let split = assign_split(&category_id, fields[5], &bank.scene_splits).map_err(|e| LineError::Parse(e.to_string()))?;
    Ok(SampleRecord {
        sample_id: fields[0].to_string(),
        image_uri: fields[1].to_string(),
        category_id,
        class_label,
        distance_m,
        scene_id: fields[5].to_string(),
        group_id: fields[6].to_string(),
        split,
    })
}

/// Expected samples per (category, class, distance, split) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountExpectation {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CountExpectation {
    fn default() -> Self {
        CountExpectation { train: 400, val: 50, test: 50 }
    }
}

impl CountExpectation {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Categories whose validation set is carved from training hold both in
    /// the training town.
    fn for_category(&self, id: &CategoryId) -> CountExpectation {
        if carved_validation(id) {
            CountExpectation { train: self.train + self.val, val: 0, test: self.test }
        } else {
            *self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountCell {
    pub category_id: CategoryId,
    pub class_label: String,
    pub distance_m: u32,
    pub split: Split,
    pub expected: usize,
    pub observed: usize,
    pub deviation: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupIssue {
    pub group_id: String,
    pub problem: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub ok: bool,
    pub cells: Vec<CountCell>,
    pub group_issues: Vec<GroupIssue>,
}

impl CountReport {
    pub fn deviations(&self) -> impl Iterator<Item = &CountCell> {
        self.cells.iter().filter(|c| c.deviation != 0)
    }
}

/// Compare per-cell counts with `expected` and check that every group is a
/// complete counterfactual tuple. Covers every category present in the
/// manifest over its declared distances.
pub fn validate_counts(manifest: &Manifest, expected: &CountExpectation) -> CountReport {
    let mut observed: BTreeMap<(CategoryId, String, u32, Split), usize> = BTreeMap::new();
    for r in &manifest.records {
        *observed.entry((r.category_id.clone(), r.class_label.clone(), r.distance_m, r.split)).or_default() += 1;
    }
    let present: BTreeSet<&CategoryId> = manifest.records.iter().map(|r| &r.category_id).collect();
    let mut cells = Vec::new();
    for id in present {
        let Some(cat) = manifest.bank.get(id) else { continue };
        let exp = expected.for_category(id);
        for label in &cat.class_labels {
            for &d in &cat.distances_m {
                for split in Split::ALL {
                    let n = observed.get(&(id.clone(), label.clone(), d, split)).copied().unwrap_or(0);
                    let want = exp.get(split);
                    cells.push(CountCell {
                        category_id: id.clone(),
                        class_label: label.clone(),
                        distance_m: d,
                        split,
                        expected: want,
                        observed: n,
                        deviation: n as i64 - want as i64,
                    });
                }
            }
        }
    }

    let mut groups: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &manifest.records {
        groups.entry(&r.group_id).or_default().push(r);
    }
    let mut group_issues = Vec::new();
    for (gid, members) in groups {
        let first = members[0];
        if members.iter().any(|m| {
            m.category_id != first.category_id || m.distance_m != first.distance_m || m.scene_id != first.scene_id
        }) {
            group_issues.push(GroupIssue {
                group_id: gid.to_string(),
                problem: "members differ in category, distance or scene".into(),
            });
            continue;
        }
        let Some(cat) = manifest.bank.get(&first.category_id) else { continue };
        let labels: BTreeSet<&str> = members.iter().map(|m| m.class_label.as_str()).collect();
        let missing: Vec<&str> =
            cat.class_labels.iter().map(String::as_str).filter(|l| !labels.contains(l)).collect();
        if !missing.is_empty() {
            group_issues.push(GroupIssue { group_id: gid.to_string(), problem: format!("missing classes {missing:?}") });
        } else if labels.len() != members.len() {
            group_issues.push(GroupIssue { group_id: gid.to_string(), problem: "repeated class label".into() });
        }
    }
    let ok = cells.iter().all(|c| c.deviation == 0) && group_issues.is_empty();
    CountReport { ok, cells, group_issues }
}
