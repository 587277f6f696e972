//! Activation shards.
//!
//! Layout: the 5-byte magic `APRB1`, a little-endian `u32` header length, the
//! JSON header, the packed little-endian `f32` payload, then a footer index
//! of `(u32 id length, id bytes, u64 absolute offset)` per record, a `u64`
//! footer length and the 4-byte tag `APRX`. Shards live at
//! `<model>/<stage>/L<layer>/<pooling>/<category>_<distance>m.aprb` below a
//! store root.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use probelab_core::category::CategoryId;
use probelab_core::pooling::{avg_pool, default_split_col, region_pool, PatchGrid};
use probelab_core::types::{Pooling, Split, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{read, write_atomic, Error, Result};
use crate::manifest::Manifest;

pub const MAGIC: &[u8; 5] = b"APRB1";
pub const FOOTER_TAG: &[u8; 4] = b"APRX";
pub const EXTENSION: &str = "aprb";
const DTYPE: &str = "float32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileInfo {
    pub tiles_used: usize,
    pub thumbnail_discarded: bool,
}

/// Where the visual tokens and the answer position sit in an LLM sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRoles {
    /// Half-open `[start, end)` range of visual token positions.
    pub visual_indices_span: [usize; 2],
    pub last_token_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub model_id: String,
    pub stage: Stage,
    pub layer_index: u32,
    pub pooling: Pooling,
    #[serde(default = "float32")]
    pub dtype: String,
    pub record_count: usize,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cols: Option<usize>,
    #[serde(default)]
    pub has_cls: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_layout: Option<TileInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_split_col: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_roles: Option<TokenRoles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<CategoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<u32>,
    /// Steering metadata, present on intervention files only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steering: Option<crate::steer::SteeringMeta>,
}

fn float32() -> String {
    DTYPE.to_string()
}

impl ShardHeader {
    /// Header for a flat `[width]` record shape.
    pub fn flat(model_id: &str, stage: Stage, layer_index: u32, pooling: Pooling, width: usize) -> Self {
        ShardHeader {
            model_id: model_id.to_string(),
            stage,
            layer_index,
            pooling,
            dtype: float32(),
            record_count: 0,
            shape: vec![width],
            grid_rows: None,
            grid_cols: None,
            has_cls: false,
            tile_layout: None,
            region_split_col: None,
            token_roles: None,
            category_id: None,
            distance_m: None,
            steering: None,
        }
    }

    pub fn record_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shape contract of the pooling mode and stage.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if self.dtype != DTYPE {
            return bad(format!("dtype {:?}, only float32 is supported", self.dtype));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return bad(format!("record shape {:?} is empty", self.shape));
        }
        let flat = self.shape.len() == 1;
        let w = self.shape[0];
        let sequence = self.stage.is_sequence();
        match self.pooling {
            Pooling::RawGrid => {
                if sequence || self.shape.len() != 3 {
                    return bad(format!("raw_grid needs a non-sequence stage and shape [rows, cols, d], got {:?}", self.shape));
                }
                if self.grid_rows != Some(self.shape[0]) || self.grid_cols != Some(self.shape[1]) {
                    return bad("raw_grid grid_rows/grid_cols must match the shape".into());
                }
            }
            Pooling::Avg if sequence || !flat => return bad(format!("avg needs a non-sequence stage and shape [d], got {:?}", self.shape)),
            Pooling::Region if sequence || !flat || w % 2 != 0 => {
                return bad(format!("region needs a non-sequence stage and shape [2d], got {:?}", self.shape))
            }
            Pooling::LlmConcat if !sequence || !flat || w % 2 != 0 => {
                return bad(format!("llm_concat needs a sequence stage and shape [2d], got {:?}", self.shape))
            }
            Pooling::LlmRegion if !sequence || !flat || w % 3 != 0 => {
                return bad(format!("llm_region needs a sequence stage and shape [3d], got {:?}", self.shape))
            }
            Pooling::Steering if self.stage != Stage::Llm || !flat => {
                return bad(format!("steering files use stage llm and shape [d], got {:?}", self.shape))
            }
            Pooling::Logits if self.stage != Stage::PostLayernorm || !flat => {
                return bad(format!("logit shards use stage post_layernorm and shape [V], got {:?}", self.shape))
            }
            _ => {}
        }
        if self.stage == Stage::Projector && self.layer_index != 0 {
            return bad("projector shards have layer_index 0".into());
        }
        if let (Some(split), Some(cols)) = (self.region_split_col, self.grid_cols) {
            if split == 0 || split >= cols {
                return bad(format!("region_split_col {split} outside 1..{cols}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: String,
    pub values: Vec<f32>,
}

impl ActivationRecord {
    pub fn new(sample_id: impl Into<String>, values: Vec<f32>) -> Self {
        ActivationRecord { sample_id: sample_id.into(), values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub header: ShardHeader,
    pub records: Vec<ActivationRecord>,
}

/// Serialise a shard. Identical inputs give identical bytes.
pub fn encode(header: &ShardHeader, records: &[ActivationRecord]) -> Result<Vec<u8>> {
    header.check()?;
    if header.record_count != records.len() {
        return Err(Error::ShapeMismatch(format!(
            "header declares {} records, {} supplied",
            header.record_count,
            records.len()
        )));
    }
    let width = header.record_len();
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.values.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "record {:?} holds {} values, shape {:?} needs {width}",
                r.sample_id,
                r.values.len(),
                header.shape
            )));
        }
        if let Some(index) = r.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { sample_id: r.sample_id.clone(), index });
        }
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::ShapeMismatch(format!("sample_id {:?} repeated within the shard", r.sample_id)));
        }
    }
    let json = serde_json::to_vec(header).expect("header serialises");
    let json_len = u32::try_from(json.len()).map_err(|_| Error::ShapeMismatch("header too large".into()))?;
    let payload_start = MAGIC.len() + 4 + json.len();
    let mut out = Vec::with_capacity(payload_start + records.len() * (width * 4 + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    for r in records {
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let footer_start = out.len();
    for (i, r) in records.iter().enumerate() {
        let id = r.sample_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&((payload_start + i * width * 4) as u64).to_le_bytes());
    }
    let footer_len = (out.len() - footer_start) as u64;
    out.extend_from_slice(&footer_len.to_le_bytes());
    out.extend_from_slice(FOOTER_TAG);
    Ok(out)
}

/// Write a shard atomically; returns the byte count.
pub fn write_shard(path: &Path, header: &ShardHeader, records: &[ActivationRecord]) -> Result<u64> {
    let bytes = encode(header, records)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::CorruptShard {
            path: self.path.to_path_buf(),
            reason: format!("file ends inside the {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptShard { path: path.to_path_buf(), reason: reason.into() }
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(ShardHeader, usize)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let len = c.u32("header length")? as usize;
    let json = c.take(len, "header")?;
    let header: ShardHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(path, format!("unreadable header: {e}")))?;
    header.check().map_err(|e| corrupt(path, e.to_string()))?;
    Ok((header, c.pos))
}

/// Parse and fully verify a shard held in memory.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Shard> {
    let (header, payload_start) = decode_header(bytes, path)?;
    let width = header.record_len();
    let payload_len = header
        .record_count
        .checked_mul(width * 4)
        .ok_or_else(|| corrupt(path, "record count overflows"))?;
    let trailer = FOOTER_TAG.len() + 8;
    if bytes.len() < trailer || &bytes[bytes.len() - FOOTER_TAG.len()..] != FOOTER_TAG {
        return Err(corrupt(path, "missing footer tag"));
    }
    let footer_len = u64::from_le_bytes(bytes[bytes.len() - trailer..bytes.len() - 4].try_into().unwrap()) as usize;
    let footer_start = payload_start + payload_len;
    if footer_start.checked_add(footer_len).and_then(|e| e.checked_add(trailer)) != Some(bytes.len()) {
        return Err(corrupt(
            path,
            format!(
                "payload of {} records × {width} floats does not fit the file ({} bytes)",
                header.record_count,
                bytes.len()
            ),
        ));
    }
    let mut footer = Cursor { bytes: &bytes[..footer_start + footer_len], pos: footer_start, path };
    let mut records = Vec::with_capacity(header.record_count);
    let mut seen = HashSet::with_capacity(header.record_count);
    for i in 0..header.record_count {
        let n = footer.u32("footer")? as usize;
        let id = std::str::from_utf8(footer.take(n, "footer")?).map_err(|_| corrupt(path, "sample_id is not UTF-8"))?;
        let offset = footer.u64("footer")? as usize;
        if offset != payload_start + i * width * 4 {
            return Err(corrupt(path, format!("footer offset of {id:?} points outside its slot")));
        }
        if !seen.insert(id.to_string()) {
            return Err(corrupt(path, format!("sample_id {id:?} repeated")));
        }
        let values: Vec<f32> = bytes[offset..offset + width * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { sample_id: id.to_string(), index });
        }
        records.push(ActivationRecord { sample_id: id.to_string(), values });
    }
    if footer.pos != footer_start + footer_len {
        return Err(corrupt(path, "footer holds trailing bytes"));
    }
    Ok(Shard { header, records })
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    decode(&read(path)?, path)
}

/// Header only; reads just the prefix of the file.
pub fn read_header(path: &Path) -> Result<ShardHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 9];
    f.read_exact(&mut prefix).map_err(|_| corrupt(path, "file ends inside the header length"))?;
    let len = u32::from_le_bytes(prefix[5..9].try_into().unwrap()) as usize;
    let mut bytes = prefix.to_vec();
    bytes.resize(9 + len, 0);
    f.read_exact(&mut bytes[9..]).map_err(|_| corrupt(path, "file ends inside the header"))?;
    decode_header(&bytes, path).map(|(h, _)| h)
}

/// Coordinates of a shard, as encoded in its path below the store root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardKey {
    pub model_id: String,
    pub stage: Stage,
    pub layer_index: u32,
    pub pooling: Pooling,
    pub category_id: CategoryId,
    pub distance_m: u32,
}

impl ShardKey {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(self.model_id.replace('/', "__"))
            .join(self.stage.as_str())
            .join(format!("L{}", self.layer_index))
            .join(self.pooling.as_str())
            .join(format!("{}_{}m.{EXTENSION}", self.category_id, self.distance_m))
    }

    pub fn parse(relative: &Path) -> Option<ShardKey> {
        let parts: Vec<&str> = relative.iter().map(|p| p.to_str()).collect::<Option<_>>()?;
        let [model, stage, layer, pooling, file] = parts.as_slice() else { return None };
        let stem = file.strip_suffix(&format!(".{EXTENSION}"))?;
        let (category, distance) = stem.rsplit_once('_')?;
        Some(ShardKey {
            model_id: model.replace("__", "/"),
            stage: stage.parse().ok()?,
            layer_index: layer.strip_prefix('L')?.parse().ok()?,
            pooling: pooling.parse().ok()?,
            category_id: CategoryId::parse(category),
            distance_m: distance.strip_suffix('m')?.parse().ok()?,
        })
    }

    pub fn from_header(header: &ShardHeader) -> Option<ShardKey> {
        Some(ShardKey {
            model_id: header.model_id.clone(),
            stage: header.stage,
            layer_index: header.layer_index,
            pooling: header.pooling,
            category_id: header.category_id.clone()?,
            distance_m: header.distance_m?,
        })
    }

    pub fn with_pooling(&self, pooling: Pooling) -> ShardKey {
        ShardKey { pooling, ..self.clone() }
    }
}

/// `.aprb` files below `root` whose paths follow the naming convention,
/// sorted by path. Other files are ignored.
pub fn list_shards(root: &Path) -> Result<Vec<(PathBuf, ShardKey)>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "store root is not a directory")));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walkdir yields children of root");
        if let Some(key) = ShardKey::parse(rel) {
            out.push((path.to_path_buf(), key));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardStatus {
    pub path: PathBuf,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreReport {
    pub ok: bool,
    pub shards: Vec<ShardStatus>,
}

/// Read every shard in full and check it against its path.
pub fn validate_store(root: &Path) -> Result<StoreReport> {
    let shards = list_shards(root)?;
    if shards.is_empty() {
        return Err(Error::EmptyStore(root.to_path_buf()));
    }
    let mut statuses = Vec::with_capacity(shards.len());
    for (path, key) in shards {
        let status = match read_shard(&path).and_then(|s| check_against_key(&s.header, &key).map(|_| s)) {
            Ok(s) => ShardStatus { path, records: s.records.len(), error: None },
            Err(e) => ShardStatus { path, records: 0, error: Some(e.to_string()) },
        };
        statuses.push(status);
    }
    Ok(StoreReport { ok: statuses.iter().all(|s| s.error.is_none()), shards: statuses })
}

fn check_against_key(h: &ShardHeader, key: &ShardKey) -> Result<()> {
    let same = h.model_id == key.model_id
        && h.stage == key.stage
        && h.layer_index == key.layer_index
        && h.pooling == key.pooling
        && h.category_id.as_ref().is_none_or(|c| *c == key.category_id)
        && h.distance_m.is_none_or(|d| d == key.distance_m);
    if same {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("header does not match the shard path ({})", key.relative_path().display())))
    }
}

/// Pool a raw-grid shard on the engine side.
pub fn pool_shard(shard: &Shard, target: Pooling) -> Result<Shard> {
    if shard.header.pooling != Pooling::RawGrid {
        return Err(Error::ShapeMismatch(format!("can only pool raw_grid shards, not {}", shard.header.pooling)));
    }
    let (rows, cols, dim) = (shard.header.shape[0], shard.header.shape[1], shard.header.shape[2]);
    let split = shard.header.region_split_col.unwrap_or_else(|| default_split_col(cols));
    let width = match target {
        Pooling::Avg => dim,
        Pooling::Region => 2 * dim,
        other => return Err(Error::ShapeMismatch(format!("raw_grid cannot be pooled to {other}"))),
    };
    let mut records = Vec::with_capacity(shard.records.len());
    for r in &shard.records {
        let grid = PatchGrid::new(rows, cols, dim, r.values.clone())?;
        let values = if target == Pooling::Avg { avg_pool(&grid)? } else { region_pool(&grid, split)? };
        records.push(ActivationRecord { sample_id: r.sample_id.clone(), values });
    }
    let mut header = shard.header.clone();
    header.pooling = target;
    header.shape = vec![width];
    header.grid_rows = None;
    header.grid_cols = None;
    if target == Pooling::Avg {
        header.region_split_col = None;
    } else {
        header.region_split_col = Some(split);
    }
    Ok(Shard { header, records })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub model_id: Option<String>,
    pub stage: Option<Stage>,
    pub layer_index: Option<u32>,
    pub pooling: Option<Pooling>,
    pub category: Option<CategoryId>,
    pub distance: Option<u32>,
    pub split: Option<Split>,
}

impl RecordFilter {
    pub fn admits(&self, key: &ShardKey) -> bool {
        self.model_id.as_ref().is_none_or(|m| *m == key.model_id)
            && self.stage.is_none_or(|s| s == key.stage)
            && self.layer_index.is_none_or(|l| l == key.layer_index)
            && self.pooling.is_none_or(|p| p == key.pooling)
            && self.category.as_ref().is_none_or(|c| *c == key.category_id)
            && self.distance.is_none_or(|d| d == key.distance_m)
    }
}

/// A record joined with its manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueriedRecord {
    #[serde(flatten)]
    pub key: ShardKey,
    pub sample_id: String,
    pub split: Option<Split>,
    pub class_label: Option<String>,
    pub group_id: Option<String>,
    pub values: Vec<f32>,
}

/// Matching records in shard-path order, then footer order. With a manifest
/// the split (validation carving applied), label and group are filled in and
/// a split filter applies; records unknown to the manifest are dropped.
pub fn query(root: &Path, filter: &RecordFilter, manifest: Option<&Manifest>) -> Result<Vec<QueriedRecord>> {
    let mut out = Vec::new();
    for (path, key) in list_shards(root)? {
        if !filter.admits(&key) {
            continue;
        }
        let shard = read_shard(&path)?;
        for r in shard.records {
            let entry = manifest.map(|m| m.get(&r.sample_id));
            if entry == Some(None) {
                continue;
            }
            let entry = entry.flatten();
            let split = entry.map(|e| manifest.unwrap().effective_split(e));
            if filter.split.is_some() && split != filter.split {
                continue;
            }
            out.push(QueriedRecord {
                key: key.clone(),
                sample_id: r.sample_id,
                split,
                class_label: entry.map(|e| e.class_label.clone()),
                group_id: entry.map(|e| e.group_id.clone()),
                values: r.values,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_path_round_trip() {
        let key = ShardKey {
            model_id: "org/model-7b".into(),
            stage: Stage::Llm,
            layer_index: 12,
            pooling: Pooling::LlmConcat,
            category_id: CategoryId::Spatial2,
            distance_m: 30,
        };
        let rel = key.relative_path();
        assert_eq!(rel, PathBuf::from("org__model-7b/llm/L12/llm_concat/Spatial-2_30m.aprb"));
        assert_eq!(ShardKey::parse(&rel), Some(key));
        assert_eq!(ShardKey::parse(Path::new("m/llm/L1/llm_concat/notes.txt")), None);
    }

    #[test]
    fn shape_contract() {
        let mut h = ShardHeader::flat("m", Stage::VisionEncoder, 0, Pooling::LlmConcat, 8);
        assert!(h.check().is_err());
        h.stage = Stage::Llm;
        h.check().unwrap();
        h.shape = vec![7];
        assert!(h.check().is_err());
        let mut g = ShardHeader::flat("m", Stage::VisionEncoder, 0, Pooling::RawGrid, 0);
        g.shape = vec![2, 3, 4];
        assert!(g.check().is_err());
        g.grid_rows = Some(2);
        g.grid_cols = Some(3);
        g.check().unwrap();
    }
}
