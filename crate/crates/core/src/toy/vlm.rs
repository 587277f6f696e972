use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::plant::PlantSpec;
use crate::pooling::{llm_concat, LlmSequence};
use crate::probe::derive_seed;
use crate::steering::InterventionSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Reads the planted concept off the last token.
    Aligned,
    /// Reads an unrelated direction; internal activations are unchanged.
    Corrupted,
}

/// Fixed random residual stack over `[visual tokens | text tokens]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyVlmSpec {
    pub layers: usize,
    pub hidden: usize,
    pub visual_rows: usize,
    pub visual_cols: usize,
    /// Text tokens after the visual block; the last one is the answer position.
    pub text_tokens: usize,
    pub readout: Readout,
    /// The concept reaches the visual tokens only from this layer on; a value
    /// `>= layers` keeps it out of the model entirely.
    pub gate_layer: Option<usize>,
    /// Weight of the causal-mean token mixing.
    pub mix: f64,
    /// Size of the random perturbation `G` in the mixing map `I + G`.
    pub mix_noise: f64,
    pub nonlinearity: f64,
    /// Per-coordinate scale of the fixed position and text embeddings.
    pub embed_scale: f64,
    /// Gain on the embedded input; the concept is a small signal riding on
    /// large position embeddings.
    pub input_scale: f64,
    pub weight_seed: u64,
}

impl Default for ToyVlmSpec {
    fn default() -> Self {
        ToyVlmSpec {
            layers: 6,
            hidden: 16,
            visual_rows: 2,
            visual_cols: 2,
            text_tokens: 3,
            readout: Readout::Aligned,
            gate_layer: None,
            mix: 0.5,
            mix_noise: 0.2,
            nonlinearity: 0.05,
            embed_scale: 1.0,
            input_scale: 0.25,
            weight_seed: 0,
        }
    }
}

struct Layer {
    mix: Vec<f64>,
    act: Vec<f64>,
}

pub struct ToyVlm {
    pub spec: ToyVlmSpec,
    input_dim: usize,
    /// `hidden × input_dim`, orthonormal columns orthogonal to the ones vector.
    embed: Vec<f64>,
    /// Planted direction mapped into the hidden space.
    direction: Vec<f64>,
    along_input: Vec<f64>,
    layers: Vec<Layer>,
    visual_pos: Vec<f64>,
    text: Vec<f64>,
    readout_w: Vec<f64>,
    readout_b: f64,
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyForward {
    /// Output of each layer, `len × hidden` row-major.
    pub layer_outputs: Vec<Vec<f32>>,
    /// Layer-normalised final activations, `len × hidden`.
    pub post_layernorm: Vec<f32>,
    pub score: f64,
    pub label: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Random `h × d` matrix whose columns are orthonormal and orthogonal to
/// the ones vector, so layer norm's centring leaves embedded inputs alone.
fn embedding(rng: &mut ChaCha8Rng, h: usize, d: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / libm::sqrt(h as f64); h]];
    while basis.len() < d + 1 {
        let mut v = gaussian(rng, h, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut e = vec![0.0; h * d];
    for (c, col) in basis[1..].iter().enumerate() {
        for a in 0..h {
            e[a * d + c] = col[a];
        }
    }
    e
}

fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + 1e-5);
    row.iter().map(|x| (x - mean) * inv).collect()
}

impl ToyVlm {
    /// Build the stack and calibrate the readout on the noise-free class
    /// means of `plant`.
    pub fn new(spec: ToyVlmSpec, plant: &PlantSpec, plant_seed: u64) -> Result<Self> {
        if plant.feature_dim >= spec.hidden {
            return Err(Error::InvalidConfig(alloc::format!(
                "hidden size {} must exceed the input dimension {}",
                spec.hidden, plant.feature_dim
            )));
        }
        if plant.classes != 2 {
            return Err(Error::InvalidConfig("the toy VLM answers two-class questions".into()));
        }
        if spec.layers == 0 || spec.text_tokens == 0 || spec.visual_rows * spec.visual_cols == 0 {
            return Err(Error::InvalidConfig("toy VLM needs layers, text and visual tokens".into()));
        }
        if !(spec.input_scale > 0.0 && spec.input_scale.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("input_scale must be positive, got {}", spec.input_scale)));
        }
        let h = spec.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.weight_seed, "toy-vlm", 0));
        let scale = 1.0 / libm::sqrt(h as f64);
        let layers = (0..spec.layers)
            .map(|_| {
                let mut mix = gaussian(&mut rng, h * h, scale * spec.mix_noise);
                for a in 0..h {
                    mix[a * h + a] += 1.0;
                }
                Layer { mix, act: gaussian(&mut rng, h * h, scale) }
            })
            .collect();
        let visual_pos = gaussian(&mut rng, spec.visual_rows * spec.visual_cols * h, spec.embed_scale);
        let text = gaussian(&mut rng, spec.text_tokens * h, spec.embed_scale);
        let orth = gaussian(&mut rng, h, 1.0);
        let d = plant.feature_dim;
        let embed = embedding(&mut rng, h, d);
        let along_input: Vec<f64> = plant.direction(plant_seed).iter().map(|&x| x as f64).collect();
        let direction = (0..h).map(|a| (0..d).map(|b| embed[a * d + b] * along_input[b]).sum()).collect();

        let mut vlm = ToyVlm {
            spec,
            input_dim: d,
            embed,
            direction,
            along_input,
            layers,
            visual_pos,
            text,
            readout_w: vec![0.0; h],
            readout_b: 0.0,
        };

        // Calibrate with the concept visible at every layer.
        let offset: Vec<f64> = plant.layer_offset(0, plant_seed).iter().map(|&x| x as f64).collect();
        let mean_input = |class: usize| -> Vec<f32> {
            let shift = plant.class_position(class) * plant.margin * plant.noise_sigma;
            offset.iter().zip(&vlm.along_input).map(|(o, u)| (o + shift * u) as f32).collect()
        };
        let (x0, x1) = (mean_input(0), mean_input(1));
        let z0 = vlm.last_normed(&x0, None, false)?;
        let z1 = vlm.last_normed(&x1, None, false)?;
        let mut r: Vec<f64> = z1.iter().zip(&z0).map(|(a, b)| a - b).collect();
        if vlm.spec.readout == Readout::Corrupted {
            let rr: f64 = r.iter().map(|x| x * x).sum();
            let proj: f64 = orth.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr.max(1e-300);
            let mut c: Vec<f64> = orth.iter().zip(&r).map(|(a, b)| a - proj * b).collect();
            let cn = libm::sqrt(c.iter().map(|x| x * x).sum());
            let rn = libm::sqrt(rr);
            c.iter_mut().for_each(|x| *x *= rn / cn);
            r = c;
        }
        let mid: Vec<f64> = z0.iter().zip(&z1).map(|(a, b)| 0.5 * (a + b)).collect();
        vlm.readout_b = -r.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>();
        vlm.readout_w = r;
        Ok(vlm)
    }

    pub fn seq_len(&self) -> usize {
        self.visual_count() + self.spec.text_tokens
    }

    pub fn visual_count(&self) -> usize {
        self.spec.visual_rows * self.spec.visual_cols
    }

    pub fn visual_indices(&self) -> Vec<usize> {
        (0..self.visual_count()).collect()
    }

    fn run(&self, x: &[f32], intervention: Option<&InterventionSpec>, gated: bool) -> Result<(Vec<Vec<f32>>, Vec<f64>)> {
        let h = self.spec.hidden;
        let d = self.input_dim;
        if x.len() != d {
            return Err(Error::DimMismatch { expected: d, found: x.len() });
        }
        let k = self.visual_count();
        let t = self.seq_len();
        let g = self.spec.input_scale;
        let along: f64 = g * x.iter().zip(&self.along_input).map(|(&a, u)| a as f64 * u).sum::<f64>();
        let embedded: Vec<f64> =
            (0..h).map(|a| g * (0..d).map(|b| self.embed[a * d + b] * x[b] as f64).sum::<f64>()).collect();
        let gate = if gated { self.spec.gate_layer } else { None };
        let mut state = vec![0.0f64; t * h];
        for i in 0..k {
            for j in 0..h {
                let mut v = embedded[j] + self.visual_pos[i * h + j];
                if gate.is_some() {
                    v -= along * self.direction[j];
                }
                state[i * h + j] = v;
            }
        }
        state[k * h..].copy_from_slice(&self.text);

        let mut outputs = Vec::with_capacity(self.spec.layers);
        let mut prefix = vec![0.0; h];
        let mut next = vec![0.0; t * h];
        for (l, layer) in self.layers.iter().enumerate() {
            if gate == Some(l) {
                for i in 0..k {
                    for j in 0..h {
                        state[i * h + j] += along * self.direction[j];
                    }
                }
            }
            prefix.iter_mut().for_each(|p| *p = 0.0);
            for i in 0..t {
                let row = &state[i * h..(i + 1) * h];
                for j in 0..h {
                    prefix[j] += row[j];
                }
                let inv = 1.0 / (i + 1) as f64;
                for a in 0..h {
                    let mut mixed = 0.0;
                    let mut pre = 0.0;
                    for b in 0..h {
                        mixed += layer.mix[a * h + b] * prefix[b] * inv;
                        pre += layer.act[a * h + b] * row[b];
                    }
                    next[i * h + a] =
                        row[a] + self.spec.mix * mixed + self.spec.nonlinearity * libm::tanh(pre);
                }
            }
            let mut out: Vec<f32> = next.iter().map(|&v| v as f32).collect();
            if let Some(spec) = intervention.filter(|s| s.layer_index as usize == l) {
                // The intervention result is what later layers see; dropping the
                // saved rows is intended.
                let _ = spec.apply(&mut out, h, &self.visual_indices(), t - 1)?;
            }
            state.iter_mut().zip(&out).for_each(|(s, &o)| *s = o as f64);
            outputs.push(out);
        }
        Ok((outputs, state))
    }

    fn last_normed(&self, x: &[f32], intervention: Option<&InterventionSpec>, gated: bool) -> Result<Vec<f64>> {
        let (_, state) = self.run(x, intervention, gated)?;
        let h = self.spec.hidden;
        let t = self.seq_len();
        Ok(layer_norm(&state[(t - 1) * h..]))
    }

    /// Forward pass; `intervention` is added at its layer before the
    /// following layers run.
    pub fn forward(&self, x: &[f32], intervention: Option<&InterventionSpec>) -> Result<ToyForward> {
        if let Some(spec) = intervention {
            if spec.layer_index as usize >= self.spec.layers {
                return Err(Error::InvalidConfig("intervention layer outside the model".into()));
            }
        }
        let (layer_outputs, state) = self.run(x, intervention, true)?;
        let h = self.spec.hidden;
        let mut post = Vec::with_capacity(state.len());
        for row in state.chunks(h) {
            post.extend(layer_norm(row).into_iter().map(|v| v as f32));
        }
        let last = &post[(self.seq_len() - 1) * h..];
        let score = self.readout_b
            + self.readout_w.iter().zip(last).map(|(w, &z)| w * z as f64).sum::<f64>();
        Ok(ToyForward { layer_outputs, post_layernorm: post, score, label: usize::from(score > 0.0) })
    }

    /// `[mean visual, last token]` of a `len × hidden` activation buffer.
    pub fn concat_features(&self, values: &[f32]) -> Result<Vec<f32>> {
        let seq = LlmSequence::new(self.seq_len(), self.spec.hidden, values.to_vec(), self.visual_indices())?;
        llm_concat(&seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant() -> PlantSpec {
        PlantSpec { feature_dim: 4, ..Default::default() }
    }

    #[test]
    fn forward_is_deterministic() {
        let vlm = ToyVlm::new(ToyVlmSpec::default(), &plant(), 1).unwrap();
        let x = vec![0.3f32; 4];
        let a = vlm.forward(&x, None).unwrap();
        let b = vlm.forward(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layer_outputs.len(), 6);
        assert_eq!(a.layer_outputs[0].len(), vlm.seq_len() * 16);
        assert_eq!(vlm.concat_features(&a.layer_outputs[2]).unwrap().len(), 32);
    }

    #[test]
    fn dims_checked() {
        let vlm = ToyVlm::new(ToyVlmSpec::default(), &plant(), 1).unwrap();
        assert!(matches!(vlm.forward(&[0.0; 3], None), Err(Error::DimMismatch { .. })));
        let bad = PlantSpec { feature_dim: 16, ..Default::default() };
        assert!(ToyVlm::new(ToyVlmSpec::default(), &bad, 1).is_err());
    }
}
