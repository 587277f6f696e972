use std::path::Path;

use probelab::manifest::{CategoryBank, Manifest, SampleRecord};
use probelab::store::{self, decode, encode, read_header, read_shard, write_shard, ActivationRecord, RecordFilter, ShardHeader, ShardKey};
use probelab::Error;
use probelab_core::category::CategoryId;
use probelab_core::pooling::{avg_pool, region_pool, PatchGrid};
use probelab_core::types::{Pooling, Split, Stage};
use proptest::prelude::*;

fn flat(width: usize, records: &[ActivationRecord]) -> ShardHeader {
    let mut h = ShardHeader::flat("m", Stage::VisionEncoder, 0, Pooling::Avg, width);
    h.record_count = records.len();
    h
}

#[test]
fn twelve_byte_little_endian_payload() {
    let recs = [ActivationRecord::new("s", vec![1.0, 2.0, 3.0])];
    let bytes = encode(&flat(3, &recs), &recs).unwrap();
    assert_eq!(&bytes[..5], b"APRB1");
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let payload = &bytes[9 + hlen..9 + hlen + 12];
    let mut expected = Vec::new();
    for v in [1.0f32, 2.0, 3.0] {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(payload, expected.as_slice());
    // Footer: id length, id, absolute offset, footer length, tag.
    let footer = &bytes[9 + hlen + 12..];
    assert_eq!(&footer[..4], &1u32.to_le_bytes());
    assert_eq!(&footer[4..5], b"s");
    assert_eq!(&footer[5..13], &((9 + hlen) as u64).to_le_bytes());
    assert_eq!(&footer[13..21], &13u64.to_le_bytes());
    assert_eq!(&footer[21..], b"APRX");
}

#[test]
fn non_finite_values_are_refused() {
    let recs = [ActivationRecord::new("a", vec![0.0, f32::NAN]), ActivationRecord::new("b", vec![f32::INFINITY, 0.0])];
    match encode(&flat(2, &recs[..1]), &recs[..1]) {
        Err(Error::NonFiniteValue { sample_id, index }) => assert_eq!((sample_id.as_str(), index), ("a", 1)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(encode(&flat(2, &recs[1..]), &recs[1..]), Err(Error::NonFiniteValue { .. })));

    // A NaN smuggled into the payload is caught on read.
    let ok = [ActivationRecord::new("a", vec![0.0, 1.0])];
    let mut bytes = encode(&flat(2, &ok), &ok).unwrap();
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    bytes[9 + hlen + 4..9 + hlen + 8].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::NonFiniteValue { .. })));
}

#[test]
fn shape_violations_are_refused() {
    let recs = [ActivationRecord::new("a", vec![0.0; 3])];
    assert!(matches!(encode(&flat(4, &recs), &recs), Err(Error::ShapeMismatch(_))));
    let dup = [ActivationRecord::new("a", vec![0.0]), ActivationRecord::new("a", vec![1.0])];
    assert!(matches!(encode(&flat(1, &dup), &dup), Err(Error::ShapeMismatch(_))));
    let mut wrong_count = flat(3, &recs);
    wrong_count.record_count = 2;
    assert!(encode(&wrong_count, &recs).is_err());
}

fn sample_bytes() -> Vec<u8> {
    let recs: Vec<_> = (0..4).map(|i| ActivationRecord::new(format!("id{i}"), vec![i as f32, -0.5, 2.25])).collect();
    encode(&flat(3, &recs), &recs).unwrap()
}

#[test]
fn truncation_is_detected() {
    let bytes = sample_bytes();
    for cut in [1, 4, 12, 30, bytes.len() / 2, bytes.len() - 5] {
        let r = decode(&bytes[..bytes.len() - cut], Path::new("t"));
        assert!(matches!(r, Err(Error::CorruptShard { .. })), "cut {cut}: {r:?}");
    }
}

#[test]
fn any_single_byte_change_to_magic_or_length_is_detected() {
    let bytes = sample_bytes();
    for pos in 0..9 {
        for flip in [0x01u8, 0x10, 0x80, 0xff] {
            let mut b = bytes.clone();
            b[pos] ^= flip;
            assert!(matches!(decode(&b, Path::new("c")), Err(Error::CorruptShard { .. })), "byte {pos} ^ {flip:#x}");
        }
    }
}

fn record_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>)> {
    (1usize..8, 0usize..6).prop_flat_map(|(w, n)| {
        (Just(w), prop::collection::vec(prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, w), n))
    })
}

proptest! {
    #[test]
    fn write_read_is_identity((w, rows) in record_strategy()) {
        let recs: Vec<_> = rows.into_iter().enumerate().map(|(i, v)| ActivationRecord::new(format!("s-{i}"), v)).collect();
        let header = flat(w, &recs);
        let bytes = encode(&header, &recs).unwrap();
        let shard = decode(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(&shard.header, &header);
        prop_assert_eq!(shard.records.len(), recs.len());
        for (a, b) in shard.records.iter().zip(&recs) {
            prop_assert_eq!(&a.sample_id, &b.sample_id);
            let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        prop_assert_eq!(encode(&shard.header, &shard.records).unwrap(), bytes);
    }
}

fn key(layer: u32, cat: CategoryId) -> ShardKey {
    ShardKey {
        model_id: "org/toy".into(),
        stage: Stage::VisionEncoder,
        layer_index: layer,
        pooling: Pooling::Avg,
        category_id: cat,
        distance_m: 5,
    }
}

fn write_keyed(root: &Path, key: &ShardKey, ids: &[&str]) {
    let recs: Vec<_> = ids.iter().enumerate().map(|(i, id)| ActivationRecord::new(*id, vec![key.layer_index as f32, i as f32])).collect();
    let mut h = ShardHeader::flat(&key.model_id, key.stage, key.layer_index, key.pooling, 2);
    h.record_count = recs.len();
    h.category_id = Some(key.category_id.clone());
    h.distance_m = Some(key.distance_m);
    write_shard(&root.join(key.relative_path()), &h, &recs).unwrap();
}

#[test]
fn query_filters_and_orders() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for l in [6, 7, 8] {
        write_keyed(root, &key(l, CategoryId::Presence1), &["b", "a"]);
    }
    let all = store::query(root, &RecordFilter::default(), None).unwrap();
    assert_eq!(all.len(), 6);
    let order: Vec<(u32, &str)> = all.iter().map(|r| (r.key.layer_index, r.sample_id.as_str())).collect();
    assert_eq!(order, [(6, "b"), (6, "a"), (7, "b"), (7, "a"), (8, "b"), (8, "a")]);

    let seven = store::query(root, &RecordFilter { layer_index: Some(7), ..Default::default() }, None).unwrap();
    assert_eq!(seven.len(), 2);
    assert!(seven.iter().all(|r| r.key.layer_index == 7 && r.values[0] == 7.0));
    assert_eq!(seven[0].key.model_id, "org/toy");

    let report = store::validate_store(root).unwrap();
    assert!(report.ok);
    assert_eq!(report.shards.len(), 3);
}

#[test]
fn query_joins_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_keyed(root, &key(0, CategoryId::Presence1), &["yes-0", "no-0", "stray"]);
    let rec = |id: &str, label: &str, town: &str, split| SampleRecord {
        sample_id: id.into(),
        image_uri: format!("{id}.png"),
        category_id: CategoryId::Presence1,
        class_label: label.into(),
        distance_m: 5,
        scene_id: town.into(),
        group_id: "g0".into(),
        split,
    };
    let m = Manifest::from_records(vec![rec("yes-0", "Yes", "Town15", Split::Test), rec("no-0", "No", "Town15", Split::Test)], CategoryBank::default());
    let rows = store::query(root, &RecordFilter { split: Some(Split::Test), ..Default::default() }, Some(&m)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].class_label.as_deref(), Some("Yes"));
    assert_eq!(rows[1].group_id.as_deref(), Some("g0"));
    assert!(store::query(root, &RecordFilter { split: Some(Split::Train), ..Default::default() }, Some(&m)).unwrap().is_empty());
}

#[test]
fn validate_flags_corrupt_shards_and_empty_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(store::validate_store(dir.path()), Err(Error::EmptyStore(_))));
    let k = key(1, CategoryId::Count1);
    write_keyed(dir.path(), &k, &["x"]);
    let path = dir.path().join(k.relative_path());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let report = store::validate_store(dir.path()).unwrap();
    assert!(!report.ok);
    assert!(report.shards[0].error.as_ref().unwrap().contains("corrupt"));
    assert!(matches!(read_shard(&path), Err(Error::CorruptShard { .. })));
}

#[test]
fn engine_pooling_matches_extractor_pooling_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, cols, dim) = (3, 4, 5);
    let grids: Vec<Vec<f32>> = (0..6)
        .map(|s| (0..rows * cols * dim).map(|i| ((i * 37 + s * 11) % 101) as f32 * 0.173 - 8.0).collect())
        .collect();
    let raw: Vec<_> = grids.iter().enumerate().map(|(i, g)| ActivationRecord::new(format!("r{i}"), g.clone())).collect();
    let mut h = ShardHeader::flat("m", Stage::VisionEncoder, 2, Pooling::RawGrid, 0);
    h.shape = vec![rows, cols, dim];
    h.grid_rows = Some(rows);
    h.grid_cols = Some(cols);
    h.has_cls = true;
    h.region_split_col = Some(1);
    h.record_count = raw.len();
    let path = dir.path().join("raw.aprb");
    write_shard(&path, &h, &raw).unwrap();
    assert_eq!(read_header(&path).unwrap(), h);

    let shard = read_shard(&path).unwrap();
    let avg = store::pool_shard(&shard, Pooling::Avg).unwrap();
    let reg = store::pool_shard(&shard, Pooling::Region).unwrap();
    for (i, g) in grids.iter().enumerate() {
        let grid = PatchGrid::new(rows, cols, dim, g.clone()).unwrap();
        assert_eq!(avg.records[i].values, avg_pool(&grid).unwrap());
        assert_eq!(reg.records[i].values, region_pool(&grid, 1).unwrap());
    }
    assert_eq!(avg.header.shape, [dim]);
    assert_eq!(reg.header.shape, [2 * dim]);
    // Pre-pooled shards written from the same kernel are byte-identical.
    let mut pre = ShardHeader::flat("m", Stage::VisionEncoder, 2, Pooling::Avg, dim);
    pre.record_count = raw.len();
    pre.has_cls = true;
    assert_eq!(encode(&pre, &avg.records).unwrap(), encode(&avg.header, &avg.records).unwrap());
}

#[test]
fn writes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let recs = [ActivationRecord::new("a", vec![0.25, -3.5])];
    let h = flat(2, &recs);
    let (p, q) = (dir.path().join("p.aprb"), dir.path().join("q/q.aprb"));
    let n = write_shard(&p, &h, &recs).unwrap();
    write_shard(&q, &h, &recs).unwrap();
    let a = std::fs::read(&p).unwrap();
    assert_eq!(a.len() as u64, n);
    assert_eq!(a, std::fs::read(&q).unwrap());
}
