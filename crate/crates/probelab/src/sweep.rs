//! Task enumeration and the resumable, parallel probing sweep.
//!
//! Rows are appended to a JSON-lines ledger by a single writer as workers
//! finish. A rerun skips keys already `done`. Once every task has a row the
//! ledger is compacted: one row per key (a `done` row wins, otherwise the
//! latest), sorted by key and rewritten atomically, so the final file does
//! not depend on worker count or on how often the sweep was interrupted.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use probelab_core::category::CategoryId;
use probelab_core::probe::{run_protocol, Dataset, ProbeConfig, TrainResult};
use probelab_core::types::{Pooling, Split, Stage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, read_jsonl, read_string, write_atomic, Error, Result};
use crate::manifest::Manifest;
use crate::store::{list_shards, pool_shard, read_shard, ShardKey};

/// Identity of one probing task. Same coordinates as a shard key; the
/// pooling may be derived from a raw-grid shard.
pub type TaskKey = ShardKey;

pub fn task_id(key: &TaskKey) -> String {
    format!(
        "{}|{}|L{}|{}|{}|{}m",
        key.model_id, key.stage, key.layer_index, key.pooling, key.category_id, key.distance_m
    )
}

/// Sweep file: optional filters over what the store holds, plus the probe
/// protocol.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub models: Option<Vec<String>>,
    pub categories: Option<Vec<CategoryId>>,
    pub distances: Option<Vec<u32>>,
    pub stages: Option<Vec<Stage>>,
    pub layers: Option<Vec<u32>>,
    pub poolings: Option<Vec<Pooling>>,
    /// Overrides the split column recorded in raw-grid shards.
    pub region_split_col: Option<usize>,
    pub probe: ProbeConfig,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(&read_string(path)?).map_err(|e| Error::format(path, e))?;
        cfg.probe.validate().map_err(|e| Error::format(path, e))?;
        Ok(cfg)
    }

    fn admits(&self, key: &TaskKey) -> bool {
        fn ok<T: PartialEq>(list: &Option<Vec<T>>, v: &T) -> bool {
            list.as_ref().is_none_or(|l| l.contains(v))
        }
        ok(&self.models, &key.model_id)
            && ok(&self.categories, &key.category_id)
            && ok(&self.distances, &key.distance_m)
            && ok(&self.stages, &key.stage)
            && ok(&self.layers, &key.layer_index)
            && ok(&self.poolings, &key.pooling)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub key: TaskKey,
    pub shard: PathBuf,
    /// The shard holds raw grids to pool into `key.pooling`.
    pub pool_from_grid: bool,
}

/// Every probeable task the store supports, filtered by `config` and sorted
/// by key. Raw-grid shards yield avg and region tasks unless a pre-pooled
/// shard for the same key exists.
pub fn enumerate_tasks(root: &Path, config: &SweepConfig) -> Result<Vec<Task>> {
    let shards = list_shards(root)?;
    if shards.is_empty() {
        return Err(Error::EmptyStore(root.to_path_buf()));
    }
    let mut tasks: BTreeMap<TaskKey, Task> = BTreeMap::new();
    for (path, key) in shards {
        if key.category_id == CategoryId::Spatial2 && key.distance_m == 5 {
            continue;
        }
        let (poolings, derived) = match key.pooling {
            Pooling::RawGrid => (vec![Pooling::Avg, Pooling::Region], true),
            p => (vec![p], false),
        };
        for p in poolings {
            let task_key = key.with_pooling(p);
            if !p.probeable_at(key.stage) || !config.admits(&task_key) {
                continue;
            }
            if derived && tasks.contains_key(&task_key) {
                continue;
            }
            tasks.insert(task_key.clone(), Task { key: task_key, shard: path.clone(), pool_from_grid: derived });
        }
    }
    Ok(tasks.into_values().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Load a task's shard and split it by the manifest.
pub fn load_task_data(task: &Task, manifest: &Manifest, region_split_col: Option<usize>) -> Result<TaskData> {
    let mut shard = read_shard(&task.shard)?;
    if task.pool_from_grid {
        if let Some(col) = region_split_col {
            shard.header.region_split_col = Some(col);
        }
        shard = pool_shard(&shard, task.key.pooling)?;
    }
    let category = manifest
        .bank
        .get(&task.key.category_id)
        .ok_or_else(|| Error::Invalid(format!("category {} is not in the bank", task.key.category_id)))?;
    let dim = shard.header.record_len();
    let classes = category.num_classes();
    let mut data = TaskData { train: Dataset::new(dim, classes), val: Dataset::new(dim, classes), test: Dataset::new(dim, classes) };
    for r in &shard.records {
        let entry = manifest
            .get(&r.sample_id)
            .ok_or_else(|| Error::Invalid(format!("sample {:?} of {} is not in the manifest", r.sample_id, task.shard.display())))?;
        if entry.category_id != task.key.category_id || entry.distance_m != task.key.distance_m {
            return Err(Error::Invalid(format!(
                "sample {:?} is listed under {} at {} m, shard is {} at {} m",
                r.sample_id, entry.category_id, entry.distance_m, task.key.category_id, task.key.distance_m
            )));
        }
        let label = category.class_index(&entry.class_label).expect("manifest labels are validated");
        let target = match manifest.effective_split(entry) {
            Split::Train => &mut data.train,
            Split::Val => &mut data.val,
            Split::Test => &mut data.test,
        };
        target.push(&r.values, label)?;
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    #[serde(flatten)]
    pub key: TaskKey,
    pub status: Status,
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_acc: Option<f64>,
    /// Mean of the per-run chance-corrected accuracies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_cc: Option<f64>,
    #[serde(default)]
    pub best_lr_per_run: Vec<f64>,
    /// Probe artifact path, relative to the ledger's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_artifact_uri: Option<String>,
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_val: usize,
    #[serde(default)]
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LedgerRow {
    fn failed(key: TaskKey, error: String) -> Self {
        LedgerRow {
            key,
            status: Status::Failed,
            runs: 0,
            mean_acc: None,
            std_acc: None,
            mean_cc: None,
            std_cc: None,
            best_lr_per_run: Vec::new(),
            probe_artifact_uri: None,
            n_train: 0,
            n_val: 0,
            n_test: 0,
            error: Some(error),
        }
    }

    pub fn is_done(&self) -> bool {
        self.status == Status::Done
    }
}

/// Everything needed to reuse a task's probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArtifact {
    pub key: TaskKey,
    pub config: ProbeConfig,
    pub result: TrainResult,
}

impl ProbeArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    read_jsonl(path)
}

/// Directory holding the probe artifacts of a ledger.
pub fn artifact_dir(ledger: &Path) -> PathBuf {
    let stem = ledger.file_stem().and_then(|s| s.to_str()).unwrap_or("ledger");
    ledger.with_file_name(format!("{stem}_probes"))
}

/// Resolve a row's artifact path against the ledger location.
pub fn artifact_path(ledger: &Path, row: &LedgerRow) -> Option<PathBuf> {
    let uri = row.probe_artifact_uri.as_ref()?;
    Some(ledger.parent().unwrap_or(Path::new("")).join(uri))
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub parallelism: usize,
    /// Stop after this many new rows without compacting, as if killed.
    pub stop_after: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { parallelism: 1, stop_after: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub tasks: usize,
    pub skipped: usize,
    pub ran: usize,
    pub failed: usize,
    pub complete: bool,
}

fn run_task(task: &Task, manifest: &Manifest, config: &SweepConfig, ledger: &Path) -> LedgerRow {
    let attempt = || -> Result<LedgerRow> {
        let data = load_task_data(task, manifest, config.region_split_col)?;
        let result = run_protocol(&data.train, &data.val, &data.test, &config.probe, &task_id(&task.key))?;
        let rel = PathBuf::from(artifact_dir(ledger).file_name().expect("artifact dir has a name"))
            .join(task.key.relative_path().with_extension("json"));
        let artifact = ProbeArtifact { key: task.key.clone(), config: config.probe.clone(), result };
        let mut text = serde_json::to_string(&artifact).expect("artifact serialises");
        text.push('\n');
        write_atomic(&ledger.parent().unwrap_or(Path::new("")).join(&rel), text.as_bytes())?;
        let r = &artifact.result;
        Ok(LedgerRow {
            key: task.key.clone(),
            status: Status::Done,
            runs: r.runs.len(),
            mean_acc: Some(r.mean_acc),
            std_acc: Some(r.std_acc),
            mean_cc: Some(r.mean_cc),
            std_cc: Some(r.std_cc),
            best_lr_per_run: r.runs.iter().map(|run| run.best_lr).collect(),
            probe_artifact_uri: Some(rel.to_string_lossy().replace('\\', "/")),
            n_train: data.train.len(),
            n_val: data.val.len(),
            n_test: data.test.len(),
            error: None,
        })
    };
    attempt().unwrap_or_else(|e| LedgerRow::failed(task.key.clone(), e.to_string()))
}

/// Drop a torn final line left by an interrupted append.
fn repair_tail(path: &Path) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = read_string(path)?;
    if text.is_empty() || text.ends_with('\n') {
        return Ok(());
    }
    let keep = text.rfind('\n').map_or(0, |i| i + 1);
    let f = std::fs::OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

/// Run every task of `tasks` without a `done` row in `ledger`.
pub fn run_sweep(
    tasks: &[Task],
    manifest: &Manifest,
    config: &SweepConfig,
    ledger: &Path,
    options: &SweepOptions,
) -> Result<SweepSummary> {
    config.probe.validate()?;
    if let Some(dir) = ledger.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    repair_tail(ledger)?;
    let done: BTreeSet<TaskKey> = if ledger.exists() {
        read_ledger(ledger)?.into_iter().filter(LedgerRow::is_done).map(|r| r.key).collect()
    } else {
        BTreeSet::new()
    };
    let pending: Vec<&Task> = tasks.iter().filter(|t| !done.contains(&t.key)).collect();
    let skipped = tasks.len() - pending.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    let cancel = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<LedgerRow>();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(ledger)
        .map_err(|e| Error::io(ledger, e))?;

    let (written, failed, write_error) = std::thread::scope(|scope| {
        let writer = scope.spawn(|| {
            let mut written = 0usize;
            let mut failed = 0usize;
            for row in rx {
                if options.stop_after.is_some_and(|n| written >= n) {
                    continue;
                }
                let mut line = serde_json::to_string(&row).expect("row serialises");
                line.push('\n');
                if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                    cancel.store(true, Ordering::SeqCst);
                    return (written, failed, Some(Error::io(ledger, e)));
                }
                written += 1;
                failed += usize::from(!row.is_done());
                if options.stop_after.is_some_and(|n| written >= n) {
                    cancel.store(true, Ordering::SeqCst);
                }
            }
            (written, failed, None)
        });
        pool.install(|| {
            pending.par_iter().for_each_with(tx, |tx, task| {
                if cancel.load(Ordering::SeqCst) {
                    return;
                }
                let _ = tx.send(run_task(task, manifest, config, ledger));
            });
        });
        writer.join().expect("ledger writer panicked")
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    let complete = written == pending.len();
    if complete {
        compact(ledger)?;
    }
    Ok(SweepSummary { tasks: tasks.len(), skipped, ran: written, failed, complete })
}

/// One row per key, `done` preferred over `failed`, later rows over earlier
/// ones; sorted by key and written atomically.
pub fn compact(ledger: &Path) -> Result<()> {
    let mut best: BTreeMap<TaskKey, LedgerRow> = BTreeMap::new();
    for row in read_ledger(ledger)? {
        match best.get(&row.key) {
            Some(old) if old.is_done() && !row.is_done() => {}
            _ => {
                best.insert(row.key.clone(), row);
            }
        }
    }
    let mut text = String::new();
    for row in best.values() {
        text.push_str(&serde_json::to_string(row).expect("row serialises"));
        text.push('\n');
    }
    write_atomic(ledger, text.as_bytes())
}
