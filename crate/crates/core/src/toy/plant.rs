use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::normal_cdf;
use crate::probe::{derive_seed, Dataset};
use crate::types::Split;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train: 400, val: 400, test: 5000 }
    }
}

/// Gaussian class-conditional task with one planted direction.
///
/// Class `c` of `C` sits at `(c - (C-1)/2) · margin · σ` along the direction
/// (adjacent classes are `margin` noise-σ apart), scaled by the distance
/// attenuation and switched off below `gate_layer`. Noise is isotropic
/// `N(0, σ²I)` around a per-layer offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub feature_dim: usize,
    pub classes: usize,
    /// Unit vector; drawn from the seed when absent.
    pub planted_direction: Option<Vec<f32>>,
    pub margin: f64,
    pub noise_sigma: f64,
    /// Multiplier on the margin per distance; missing distances use 1.
    pub distance_attenuation: BTreeMap<u32, f64>,
    pub gate_layer: Option<u32>,
    pub n_per_class: SplitCounts,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            feature_dim: 4,
            classes: 2,
            planted_direction: None,
            margin: 4.0,
            noise_sigma: 1.0,
            distance_attenuation: BTreeMap::new(),
            gate_layer: None,
            n_per_class: SplitCounts::default(),
        }
    }
}

/// Random unit vector of length `dim`.
pub fn random_unit(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.feature_dim == 0 || self.classes < 2 {
            return bad(format!("need feature_dim >= 1 and classes >= 2"));
        }
        if !(self.noise_sigma > 0.0) || !(self.margin >= 0.0) {
            return bad(format!("bad margin {} / noise_sigma {}", self.margin, self.noise_sigma));
        }
        if let Some(u) = &self.planted_direction {
            if u.len() != self.feature_dim {
                return Err(Error::DimMismatch { expected: self.feature_dim, found: u.len() });
            }
            let norm = libm::sqrt(u.iter().map(|&x| x as f64 * x as f64).sum());
            if (norm - 1.0).abs() > 1e-4 {
                return bad(format!("planted direction has norm {norm}, expected 1"));
            }
        }
        if let Some((d, m)) = self.distance_attenuation.iter().find(|(_, m)| !(**m > 0.0 && **m <= 1.0)) {
            return bad(format!("attenuation {m} at {d} m outside (0, 1]"));
        }
        Ok(())
    }

    pub fn direction(&self, seed: u64) -> Vec<f32> {
        self.planted_direction
            .clone()
            .unwrap_or_else(|| random_unit(self.feature_dim, derive_seed(seed, "planted-direction", 0)))
    }

    pub fn attenuation(&self, distance_m: u32) -> f64 {
        self.distance_attenuation.get(&distance_m).copied().unwrap_or(1.0)
    }

    /// Class separation along the direction at `(layer, distance)`, in σ units.
    pub fn effective_margin(&self, layer: u32, distance_m: u32) -> f64 {
        if self.gate_layer.is_some_and(|g| layer < g) {
            0.0
        } else {
            self.margin * self.attenuation(distance_m)
        }
    }

    pub fn class_position(&self, class: usize) -> f64 {
        class as f64 - (self.classes as f64 - 1.0) / 2.0
    }

    /// Per-layer offset shared by every sample of that layer.
    pub fn layer_offset(&self, layer: u32, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "layer-offset", layer as u64));
        (0..self.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 * z) as f32
            })
            .collect()
    }

    /// One sample. Its noise depends on `(seed, layer, split, class, index)`
    /// only, so the same sample at different distances differs just in how far
    /// it sits along the planted direction.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        direction: &[f32],
        offset: &[f32],
        layer: u32,
        distance_m: u32,
        split: Split,
        class: usize,
        index: usize,
        seed: u64,
    ) -> Vec<f32> {
        let key = format!("sample/{layer}/{}/{class}", split.as_str());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key, index as u64));
        let shift = self.class_position(class) * self.effective_margin(layer, distance_m) * self.noise_sigma;
        (0..self.feature_dim)
            .map(|j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (offset[j] as f64 + shift * direction[j] as f64 + self.noise_sigma * z) as f32
            })
            .collect()
    }

    /// Every sample of one split at `(layer, distance)`, class-major.
    pub fn dataset(&self, layer: u32, distance_m: u32, split: Split, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let direction = self.direction(seed);
        let offset = self.layer_offset(layer, seed);
        let mut data = Dataset::new(self.feature_dim, self.classes);
        for class in 0..self.classes {
            for index in 0..self.n_per_class.get(split) {
                let x = self.sample(&direction, &offset, layer, distance_m, split, class, index, seed);
                data.push(&x, class)?;
            }
        }
        Ok(data)
    }

    /// Accuracy of the Bayes-optimal rule for a two-class task: `Φ(m/2)`.
    pub fn bayes_accuracy(&self, layer: u32, distance_m: u32) -> f64 {
        normal_cdf(self.effective_margin(layer, distance_m) / 2.0)
    }
}

/// Two-class logit vectors over a `vocab`-token vocabulary: `token` reads
/// `+shift` for class 0 and `-shift` for class 1, every logit carries
/// standard-normal noise. Class-major, `per_class` rows each.
pub fn planted_token_logits(vocab: usize, token: usize, shift: f32, per_class: usize, seed: u64) -> Result<Dataset> {
    if token >= vocab {
        return Err(Error::InvalidConfig(format!("token {token} outside a vocabulary of {vocab}")));
    }
    let mut data = Dataset::new(vocab, 2);
    let mut row = alloc::vec![0.0f32; vocab];
    for class in 0..2 {
        for index in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "planted-token", (class * per_class + index) as u64));
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z as f32;
            }
            row[token] += if class == 0 { shift } else { -shift };
            data.push(&row, class)?;
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_gated() {
        let spec = PlantSpec { gate_layer: Some(3), ..Default::default() };
        let a = spec.dataset(4, 5, Split::Val, 11).unwrap();
        let b = spec.dataset(4, 5, Split::Val, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 800);
        assert_eq!(spec.effective_margin(2, 5), 0.0);
        assert_eq!(spec.effective_margin(3, 5), 4.0);
    }

    #[test]
    fn distances_share_noise() {
        let mut spec = PlantSpec::default();
        spec.distance_attenuation.insert(50, 0.1);
        let u = spec.direction(3);
        let off = spec.layer_offset(0, 3);
        let near = spec.sample(&u, &off, 0, 5, Split::Train, 1, 7, 3);
        let far = spec.sample(&u, &off, 0, 50, Split::Train, 1, 7, 3);
        let along: f64 = near.iter().zip(&far).zip(&u).map(|((a, b), d)| (a - b) as f64 * *d as f64).sum();
        assert!((along - (2.0 - 0.2)).abs() < 1e-4, "{along}");
    }

    #[test]
    fn direction_is_unit() {
        let u = random_unit(32, 5);
        let n: f64 = u.iter().map(|&x| x as f64 * x as f64).sum();
        assert!((n - 1.0).abs() < 1e-6);
        let spec = PlantSpec { planted_direction: Some(alloc::vec![1.0, 1.0]), feature_dim: 2, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bayes_accuracy_closed_form() {
        let spec = PlantSpec::default();
        assert!((spec.bayes_accuracy(0, 5) - 0.977_249_868).abs() < 1e-8);
    }
}
