//! Synthetic labeled datasets and the clean/adversarial pair set.
//!
//! Two procedural generators with visibly different statistics stand in for
//! photographic data: `bars` places a bright band whose position encodes the
//! class, `blobs` places a smooth bump in a class-specific quadrant. Pixel
//! noise is seeded and images are snapped to the 8-bit grid so budgets like
//! 8/255 are exactly representable.

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::rng::{rng_from, standard_normal};
use crate::tensor::Tensor;

/// Generator family for synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Bars,
    Blobs,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Bars => "bars",
            SynthKind::Blobs => "blobs",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "bars" => Ok(SynthKind::Bars),
            "blobs" => Ok(SynthKind::Blobs),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

/// Provenance recorded alongside every generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: u64,
    pub size: usize,
}

/// Images with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Deterministic train/holdout index split derived from the dataset's own
    /// generation seed, so every consumer sees the same partition.
    pub fn split_indices(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng_from(crate::rng::derive_seed(self.meta.seed, 0x5B11_7));
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1, self.len().saturating_sub(1).max(1));
        let train = order[..cut].to_vec();
        let holdout = order[cut..].to_vec();
        (train, holdout)
    }
}

/// Generate a synthetic dataset.
///
/// Classes are balanced within one example; the generated order interleaves
/// classes and is then shuffled by the same seed.
pub fn gen_synthetic_dataset(
    kind: SynthKind,
    n: usize,
    classes: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if n < classes {
        return Err(DataError::Invalid(format!(
            "need n >= classes, got n={n}, classes={classes}"
        )));
    }
    if channels == 0 || size < 4 {
        return Err(DataError::Invalid(format!(
            "invalid image dims {channels}x{size}x{size}"
        )));
    }
    if kind == SynthKind::Bars && classes > size {
        return Err(DataError::Invalid(format!(
            "bars supports at most {size} classes at size {size}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let img = match kind {
            SynthKind::Bars => bars_image(label, classes, channels, size, &mut rng),
            SynthKind::Blobs => blobs_image(label, classes, channels, size, &mut rng),
        };
        images.push(img.quantize_8bit());
        labels.push(label);
    }
    // Shuffle so batches are not class-ordered.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let images = order.iter().map(|&i| images[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok(LabeledDataset {
        images,
        labels,
        classes,
        meta: DatasetMeta {
            kind: kind.as_str().to_string(),
            seed,
            size: n,
        },
    })
}

/// Horizontal bright band whose row band encodes the class, over a noisy
/// background. Moderate contrast keeps decision margins attackable.
fn bars_image(
    label: usize,
    classes: usize,
    channels: usize,
    size: usize,
    rng: &mut crate::rng::SeededRng,
) -> Tensor {
    const BACKGROUND: f32 = 0.40;
    const BAR: f32 = 0.45;
    const NOISE: f32 = 0.06;
    let band = size / classes;
    let y0 = label * band;
    let y1 = if label == classes - 1 { size } else { y0 + band };
    let mut data = vec![0.0f32; channels * size * size];
    for c in 0..channels {
        for y in 0..size {
            let base = if y >= y0 && y < y1 { BAR } else { BACKGROUND };
            for x in 0..size {
                let v = base + NOISE * standard_normal(rng);
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("bars shape")
}

/// Smooth bump centered in a class-specific location on a darker field;
/// spatial statistics differ clearly from `bars`.
fn blobs_image(
    label: usize,
    classes: usize,
    channels: usize,
    size: usize,
    rng: &mut crate::rng::SeededRng,
) -> Tensor {
    const BACKGROUND: f32 = 0.38;
    const AMPLITUDE: f32 = 0.10;
    const NOISE: f32 = 0.10;
    let sigma = size as f32 / 5.0;
    // Class centers spread around a circle.
    let angle = std::f32::consts::TAU * label as f32 / classes as f32;
    let r = size as f32 / 4.0;
    let cy = size as f32 / 2.0 + r * angle.sin() - 0.5;
    let cx = size as f32 / 2.0 + r * angle.cos() - 0.5;
    let mut data = vec![0.0f32; channels * size * size];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let bump = AMPLITUDE * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let v = BACKGROUND + bump + NOISE * standard_normal(rng);
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("blobs shape")
}

/// Aligned (clean, adversarial, label) triples from Stage I pair collection.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub clean: Vec<Tensor>,
    pub adversarial: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub epsilon: f32,
    pub attack_kind: String,
    pub shadow_id: String,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Check the stored budget and range invariants for every triple.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clean.len() != self.adversarial.len() || self.clean.len() != self.labels.len() {
            return Err(DataError::Invalid("misaligned pair arrays".into()));
        }
        for i in 0..self.len() {
            if self.clean[i].shape() != self.adversarial[i].shape() {
                return Err(DataError::Invalid(format!("pair {i}: shape mismatch")));
            }
            if !self.clean[i].in_unit_range() || !self.adversarial[i].in_unit_range() {
                return Err(DataError::Invalid(format!("pair {i}: values outside [0,1]")));
            }
            let dist = self.clean[i].linf_dist(&self.adversarial[i]);
            if dist > self.epsilon + 1e-6 {
                return Err(DataError::Invalid(format!(
                    "pair {i}: L-inf distance {dist} exceeds budget {}",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_synthetic_dataset(SynthKind::Bars, 40, 4, 3, 8, 9).unwrap();
        let b = gen_synthetic_dataset(SynthKind::Bars, 40, 4, 3, 8, 9).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images, b.images);
        let c = gen_synthetic_dataset(SynthKind::Bars, 40, 4, 3, 8, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn class_histogram_is_balanced() {
        for n in [40usize, 41, 43] {
            let d = gen_synthetic_dataset(SynthKind::Blobs, n, 4, 1, 8, 3).unwrap();
            let mut counts = vec![0usize; 4];
            for &l in &d.labels {
                counts[l] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            assert!(max - min <= 1, "n={n}: counts {counts:?}");
        }
    }

    #[test]
    fn images_are_quantized_unit_range() {
        let d = gen_synthetic_dataset(SynthKind::Bars, 24, 4, 3, 8, 5).unwrap();
        for img in &d.images {
            assert!(img.in_unit_range());
            assert_eq!(img, &img.quantize_8bit());
        }
    }

    #[test]
    fn nearest_centroid_separates_bars() {
        // Oracle for learnability: class centroids from one half classify the
        // other half almost perfectly.
        let d = gen_synthetic_dataset(SynthKind::Bars, 200, 4, 3, 8, 7).unwrap();
        let half = d.len() / 2;
        let dim = d.images[0].numel();
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..half {
            counts[d.labels[i]] += 1;
            for (j, &v) in d.images[i].data().iter().enumerate() {
                centroids[d.labels[i]][j] += v as f64;
            }
        }
        for (c, count) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut correct = 0usize;
        for i in half..d.len() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let dist: f64 = d.images[i]
                    .data()
                    .iter()
                    .zip(c.iter())
                    .map(|(&v, &m)| (v as f64 - m).powi(2))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            if best == d.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / (d.len() - half) as f64;
        assert!(acc >= 0.9, "centroid accuracy {acc}");
    }

    #[test]
    fn generators_have_distinct_statistics() {
        let bars = gen_synthetic_dataset(SynthKind::Bars, 64, 4, 1, 8, 2).unwrap();
        let blobs = gen_synthetic_dataset(SynthKind::Blobs, 64, 4, 1, 8, 2).unwrap();
        // Mean absolute horizontal gradient separates banded from smooth images.
        let roughness = |d: &LabeledDataset| -> f64 {
            let mut acc = 0.0f64;
            for img in &d.images {
                let s = img.shape()[1];
                let data = img.data();
                for y in 0..s {
                    for x in 1..s {
                        acc += (data[y * s + x] - data[y * s + x - 1]).abs() as f64;
                    }
                }
            }
            acc / d.len() as f64
        };
        assert!(roughness(&bars) != roughness(&blobs));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_synthetic_dataset(SynthKind::Bars, 3, 4, 3, 8, 0).is_err());
        assert!(gen_synthetic_dataset(SynthKind::Bars, 10, 1, 3, 8, 0).is_err());
        assert!(gen_synthetic_dataset(SynthKind::Bars, 10, 4, 0, 8, 0).is_err());
        assert!(gen_synthetic_dataset(SynthKind::Bars, 20, 16, 1, 8, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = gen_synthetic_dataset(SynthKind::Bars, 50, 4, 1, 8, 21).unwrap();
        let (tr1, ho1) = d.split_indices(0.8);
        let (tr2, ho2) = d.split_indices(0.8);
        assert_eq!(tr1, tr2);
        assert_eq!(ho1, ho2);
        assert_eq!(tr1.len() + ho1.len(), 50);
        let mut all: Vec<usize> = tr1.iter().chain(ho1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn pair_validation_catches_budget_violations() {
        let clean = vec![Tensor::full(&[1, 4, 4], 0.5)];
        let adv = vec![Tensor::full(&[1, 4, 4], 0.8)];
        let pairs = PairDataset {
            clean,
            adversarial: adv,
            labels: vec![0],
            epsilon: 0.1,
            attack_kind: "pgd".into(),
            shadow_id: "shadow".into(),
        };
        assert!(pairs.validate().is_err());
    }
}
