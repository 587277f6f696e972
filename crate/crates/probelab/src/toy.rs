//! Synthetic stores: planted-direction shards and toy-VLM activations, each
//! with a matching manifest so the full pipeline runs without real models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use probelab_core::analysis::{Decoding, ModelAccuracyRow};
use probelab_core::category::{builtin_bank, CategoryId, CounterfactualCategory, STANDARD_DISTANCES_M};
use probelab_core::probe::derive_seed;
use probelab_core::steering::ProtocolEntry;
use probelab_core::toy::{PlantSpec, ToyVlm, ToyVlmSpec};
use probelab_core::types::{Pooling, Split, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{read_string, write_atomic, Error, Result};
use crate::manifest::{CategoryBank, Manifest, SampleRecord};
use crate::steer::SteeringFile;
use crate::store::{write_shard, ActivationRecord, ShardHeader, ShardKey, TokenRoles};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BANK_FILE: &str = "categories.json";
pub const MODEL_ACCURACY_FILE: &str = "model_accuracy.jsonl";
pub const OUTCOMES_FILE: &str = "steering_outcomes.jsonl";
pub const PROTOCOL_FILE: &str = "protocol_log.jsonl";

fn town(split: Split) -> &'static str {
    match split {
        Split::Train => "Town01",
        Split::Val => "Town12",
        Split::Test => "Town15",
    }
}

fn sample_id(cat: &CategoryId, d: u32, split: Split, label: &str, i: usize) -> String {
    format!("{cat}-{d}m-{split}-{label}-{i:05}")
}

fn record(cat: &CategoryId, d: u32, split: Split, label: &str, i: usize) -> SampleRecord {
    SampleRecord {
        sample_id: sample_id(cat, d, split, label, i),
        image_uri: format!("toy://{cat}/{d}m/{split}/{i:05}/{label}"),
        category_id: cat.clone(),
        class_label: label.to_string(),
        distance_m: d,
        scene_id: town(split).to_string(),
        group_id: format!("{cat}-{d}m-{split}-{i:05}"),
        split,
    }
}

/// Plant settings as written in a spec file. Distances are table keys, which
/// TOML keeps as strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantFile {
    pub feature_dim: usize,
    pub margin: f64,
    pub noise_sigma: f64,
    pub distance_attenuation: BTreeMap<String, f64>,
    pub gate_layer: Option<u32>,
    pub n_per_class: probelab_core::toy::SplitCounts,
}

impl Default for PlantFile {
    fn default() -> Self {
        let p = PlantSpec::default();
        PlantFile {
            feature_dim: p.feature_dim,
            margin: p.margin,
            noise_sigma: p.noise_sigma,
            distance_attenuation: BTreeMap::new(),
            gate_layer: None,
            n_per_class: p.n_per_class,
        }
    }
}

impl PlantFile {
    pub fn to_spec(&self, classes: usize) -> Result<PlantSpec> {
        let distance_attenuation = self
            .distance_attenuation
            .iter()
            .map(|(k, v)| {
                let d = k.trim_end_matches('m').parse::<u32>().map_err(|_| Error::Invalid(format!("distance key {k:?} is not a whole number")))?;
                Ok((d, *v))
            })
            .collect::<Result<_>>()?;
        let spec = PlantSpec {
            feature_dim: self.feature_dim,
            classes,
            planted_direction: None,
            margin: self.margin,
            noise_sigma: self.noise_sigma,
            distance_attenuation,
            gate_layer: self.gate_layer,
            n_per_class: self.n_per_class,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCategory {
    pub id: CategoryId,
    /// Categories with the same seed share a planted direction; their noise
    /// stays independent.
    #[serde(default)]
    pub direction_seed: Option<u64>,
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub gate_layer: Option<u32>,
    /// Answer list for categories outside the built-in bank.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub model_id: String,
    pub stage: Stage,
    pub pooling: Pooling,
    pub layers: u32,
    pub distances: Vec<u32>,
    pub plant: PlantFile,
    pub categories: Vec<SynthCategory>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            model_id: "toy".into(),
            stage: Stage::VisionEncoder,
            pooling: Pooling::Avg,
            layers: 6,
            distances: STANDARD_DISTANCES_M.to_vec(),
            plant: PlantFile::default(),
            categories: vec![SynthCategory {
                id: CategoryId::Presence1,
                direction_seed: None,
                margin: None,
                gate_layer: None,
                labels: None,
            }],
        }
    }
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_string(path)?).map_err(|e| Error::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub shards: usize,
    pub records: usize,
    pub manifest: PathBuf,
}

fn bank_with(categories: &[SynthCategory]) -> Result<CategoryBank> {
    let mut bank = CategoryBank { categories: builtin_bank(), ..Default::default() };
    for c in categories {
        if bank.get(&c.id).is_some() {
            continue;
        }
        let labels = c
            .labels
            .clone()
            .ok_or_else(|| Error::Invalid(format!("custom category {} needs labels", c.id)))?;
        let cat = CounterfactualCategory {
            concept: c.id.concept(),
            category_id: c.id.clone(),
            class_labels: labels,
            question: format!("Toy question for {}", c.id),
            distances_m: STANDARD_DISTANCES_M.to_vec(),
        };
        cat.validate()?;
        bank.categories.push(cat);
    }
    Ok(bank)
}

/// Write planted-direction shards for every (category, distance, layer),
/// plus `manifest.tsv` and `categories.json`, below `out`.
pub fn synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<SynthSummary> {
    let mut bank = bank_with(&spec.categories)?;
    // The saved bank describes what was generated, so count checks pass.
    for cat in bank.categories.iter_mut().filter(|b| spec.categories.iter().any(|c| c.id == b.category_id)) {
        cat.distances_m.retain(|d| spec.distances.contains(d));
    }
    let mut manifest = Vec::new();
    let mut shards = 0;
    let mut records = 0;
    for c in &spec.categories {
        let category = bank.get(&c.id).expect("bank holds every synth category");
        let mut plant = spec.plant.to_spec(category.num_classes())?;
        if let Some(m) = c.margin {
            plant.margin = m;
        }
        if c.gate_layer.is_some() {
            plant.gate_layer = c.gate_layer;
        }
        let direction_seed = c.direction_seed.unwrap_or_else(|| derive_seed(seed, &format!("direction/{}", c.id), 0));
        plant.planted_direction = Some(plant.direction(direction_seed));
        plant.validate()?;
        let noise_seed = derive_seed(seed, c.id.as_str(), 0);
        let distances = spec.distances.iter().copied().filter(|d| category.distances_m.contains(d));
        for d in distances {
            for split in Split::ALL {
                for label in &category.class_labels {
                    for i in 0..plant.n_per_class.get(split) {
                        manifest.push(record(&c.id, d, split, label, i));
                    }
                }
            }
            for layer in 0..spec.layers {
                let mut rows = Vec::new();
                for split in Split::ALL {
                    let data = plant.dataset(layer, d, split, noise_seed)?;
                    let per = plant.n_per_class.get(split);
                    for (k, label) in category.class_labels.iter().enumerate() {
                        for i in 0..per {
                            rows.push(ActivationRecord::new(sample_id(&c.id, d, split, label, i), data.row(k * per + i).to_vec()));
                        }
                    }
                }
                let key = ShardKey {
                    model_id: spec.model_id.clone(),
                    stage: spec.stage,
                    layer_index: if spec.stage == Stage::Projector { 0 } else { layer },
                    pooling: spec.pooling,
                    category_id: c.id.clone(),
                    distance_m: d,
                };
                let mut header = ShardHeader::flat(&key.model_id, key.stage, key.layer_index, key.pooling, plant.feature_dim);
                header.record_count = rows.len();
                header.category_id = Some(c.id.clone());
                header.distance_m = Some(d);
                records += rows.len();
                write_shard(&out.join(key.relative_path()), &header, &rows)?;
                shards += 1;
                if spec.stage == Stage::Projector {
                    break;
                }
            }
        }
    }
    let manifest_path = out.join(MANIFEST_FILE);
    Manifest::write(&manifest_path, &manifest)?;
    bank.save(&out.join(BANK_FILE))?;
    Ok(SynthSummary { shards, records, manifest: manifest_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSpec {
    pub model_id: String,
    pub category_id: CategoryId,
    pub distances: Vec<u32>,
    pub vlm: ToyVlmSpec,
    pub plant: PlantFile,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        GenerateSpec {
            model_id: "toy-vlm".into(),
            category_id: CategoryId::Presence1,
            distances: vec![5],
            vlm: ToyVlmSpec::default(),
            plant: PlantFile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringOutcome {
    pub spec_id: usize,
    pub alpha: f64,
    /// Samples the model assigned to this class before steering.
    pub source_class: usize,
    pub n: usize,
    pub flipped: usize,
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub shards: usize,
    pub model_accuracy: Vec<ModelAccuracyRow>,
    pub steering: Vec<SteeringOutcome>,
}

struct ToySample {
    id: String,
    class: usize,
    split: Split,
    distance_m: u32,
    x: Vec<f32>,
}

fn generate_samples(spec: &GenerateSpec, plant: &PlantSpec, category: &CounterfactualCategory, seed: u64) -> Vec<ToySample> {
    let direction = plant.direction(seed);
    let offset = plant.layer_offset(0, seed);
    let mut out = Vec::new();
    for &d in spec.distances.iter().filter(|d| category.distances_m.contains(d)) {
        for split in Split::ALL {
            for (class, label) in category.class_labels.iter().enumerate() {
                for i in 0..plant.n_per_class.get(split) {
                    out.push(ToySample {
                        id: sample_id(&category.category_id, d, split, label, i),
                        class,
                        split,
                        distance_m: d,
                        x: plant.sample(&direction, &offset, 0, d, split, class, i, seed),
                    });
                }
            }
        }
    }
    out
}

/// Run the toy VLM over a planted two-class task. Writes llm_concat shards of
/// every layer, a post_layernorm shard, the manifest and greedy test-split
/// model accuracy. With `intervention`, also replays its α plan over the
/// test samples and writes per-spec flip rates and a protocol log in which a
/// spec counts as changing the answer when it flips the majority.
pub fn generate(spec: &GenerateSpec, seed: u64, out: &Path, intervention: Option<&Path>) -> Result<GenerateSummary> {
    let bank = CategoryBank::default();
    let category = bank
        .get(&spec.category_id)
        .ok_or_else(|| Error::Invalid(format!("{} is not a built-in category", spec.category_id)))?
        .clone();
    let mut plant = spec.plant.to_spec(category.num_classes())?;
    plant.gate_layer = None;
    let vlm = ToyVlm::new(spec.vlm.clone(), &plant, seed)?;
    let samples = generate_samples(spec, &plant, &category, seed);
    let h = vlm.spec.hidden;
    let roles = TokenRoles { visual_indices_span: [0, vlm.visual_count()], last_token_index: vlm.seq_len() - 1 };

    // layer → distance → records; the last "layer" is post_layernorm.
    let n_layers = vlm.spec.layers;
    let mut per_shard: BTreeMap<(usize, u32), Vec<ActivationRecord>> = BTreeMap::new();
    let mut tally: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for s in &samples {
        let f = vlm.forward(&s.x, None)?;
        for (l, values) in f.layer_outputs.iter().enumerate() {
            per_shard.entry((l, s.distance_m)).or_default().push(ActivationRecord::new(&s.id, vlm.concat_features(values)?));
        }
        per_shard
            .entry((n_layers, s.distance_m))
            .or_default()
            .push(ActivationRecord::new(&s.id, vlm.concat_features(&f.post_layernorm)?));
        if s.split == Split::Test {
            let t = tally.entry(s.distance_m).or_default();
            t.0 += u64::from(f.label == s.class);
            t.1 += 1;
        }
    }
    let shards = per_shard.len();
    for ((l, d), rows) in per_shard {
        let (stage, layer_index) = if l == n_layers { (Stage::PostLayernorm, 0) } else { (Stage::Llm, l as u32) };
        let key = ShardKey {
            model_id: spec.model_id.clone(),
            stage,
            layer_index,
            pooling: Pooling::LlmConcat,
            category_id: spec.category_id.clone(),
            distance_m: d,
        };
        let mut header = ShardHeader::flat(&key.model_id, stage, layer_index, Pooling::LlmConcat, 2 * h);
        header.record_count = rows.len();
        header.token_roles = Some(roles);
        header.category_id = Some(key.category_id.clone());
        header.distance_m = Some(d);
        write_shard(&out.join(key.relative_path()), &header, &rows)?;
    }

    let manifest: Vec<SampleRecord> = samples
        .iter()
        .map(|s| record(&spec.category_id, s.distance_m, s.split, &category.class_labels[s.class], index_of(&s.id)))
        .collect();
    Manifest::write(&out.join(MANIFEST_FILE), &manifest)?;

    let model_accuracy: Vec<ModelAccuracyRow> = tally
        .into_iter()
        .map(|(d, (correct, total))| ModelAccuracyRow {
            model_id: spec.model_id.clone(),
            category_id: spec.category_id.to_string(),
            distance_m: d,
            decoding: Decoding::Greedy,
            accuracy: correct as f64 / total as f64,
            n_correct: correct,
            n_total: total,
        })
        .collect();
    write_jsonl(&out.join(MODEL_ACCURACY_FILE), &model_accuracy)?;

    let mut steering = Vec::new();
    if let Some(path) = intervention {
        let file = SteeringFile::read(path)?;
        let test: Vec<&ToySample> = samples
            .iter()
            .filter(|s| s.split == Split::Test && file.distance_m.is_none_or(|d| d == s.distance_m))
            .collect();
        let original: Vec<usize> = test.iter().map(|s| vlm.forward(&s.x, None).map(|f| f.label)).collect::<Result<_, _>>()?;
        let mut log = Vec::new();
        for plan in file.plan()? {
            let source_class = usize::from(plan.alpha < 0.0);
            let mut n = 0;
            let mut flipped = 0;
            for (s, &before) in test.iter().zip(&original) {
                if before != source_class {
                    continue;
                }
                n += 1;
                flipped += usize::from(vlm.forward(&s.x, Some(&plan))?.label != before);
            }
            let flip_rate = if n == 0 { 0.0 } else { flipped as f64 / n as f64 };
            let label = |c: usize| format!("Answer: {}", category.class_labels[c]);
            let changed = flip_rate > 0.5;
            log.push(ProtocolEntry {
                spec_id: plan.spec_id,
                original_text: label(source_class),
                steered_text: label(if changed { 1 - source_class } else { source_class }),
                judged_changed: changed,
            });
            steering.push(SteeringOutcome { spec_id: plan.spec_id, alpha: plan.alpha, source_class, n, flipped, flip_rate });
        }
        write_jsonl(&out.join(OUTCOMES_FILE), &steering)?;
        write_jsonl(&out.join(PROTOCOL_FILE), &log)?;
    }
    Ok(GenerateSummary { shards, model_accuracy, steering })
}

fn index_of(id: &str) -> usize {
    id.rsplit('-').next().and_then(|s| s.parse().ok()).expect("toy sample ids end in an index")
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serialises"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
