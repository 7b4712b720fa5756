//! White-box gradient attacks for Stage-I pair collection.

use rayon::prelude::*;

use crate::classifier::Classifier;
use crate::data::{LabeledDataset, PairDataset};
use crate::error::WhiteboxError;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Budget and iteration parameters for the projected-gradient attack.
#[derive(Debug, Clone)]
pub struct WhiteboxConfig {
    /// L-inf budget in [0,1].
    pub epsilon: f32,
    /// Per-iteration step size (0 < step <= epsilon).
    pub step_size: f32,
    /// Iteration count (>= 1).
    pub iterations: usize,
    /// Attack toward a chosen class instead of away from the true one.
    pub target_class: Option<usize>,
    /// Start from a random point inside the epsilon ball.
    pub random_start: bool,
}

impl WhiteboxConfig {
    pub fn validate(&self) -> Result<(), WhiteboxError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(WhiteboxError::InvalidConfig(format!(
                "epsilon {} out of (0, 1]",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(WhiteboxError::InvalidConfig(format!(
                "step size {} out of (0, epsilon]",
                self.step_size
            )));
        }
        if self.iterations < 1 {
            return Err(WhiteboxError::InvalidConfig("need >= 1 iteration".into()));
        }
        Ok(())
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project onto the epsilon ball around `origin` intersected with `[0,1]`.
fn project(x: &Tensor, origin: &Tensor, epsilon: f32) -> Tensor {
    origin
        .zip_map(x, |o, v| o + (v - o).clamp(-epsilon, epsilon))
        .clamped(0.0, 1.0)
}

/// Single sign-step attack: `clip(x + eps * sign(grad_x loss), 0, 1)`.
pub fn fgsm(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    epsilon: f32,
) -> Result<Tensor, WhiteboxError> {
    let (_, grad) = model.input_gradient(x, label)?;
    Ok(x.zip_map(&grad, |v, g| v + epsilon * sign(g)).clamped(0.0, 1.0))
}

/// Iterated projected sign steps. Untargeted ascends the loss on `label`;
/// targeted descends the loss on the target class. Returns the adversarial
/// image and the per-iteration loss trace.
pub fn pgd_traced(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    config: &WhiteboxConfig,
    seed: u64,
) -> Result<(Tensor, Vec<f32>), WhiteboxError> {
    config.validate()?;
    let mut current = if config.random_start {
        let mut rng = rng_from(seed);
        let jitter = x.map(|_| rand::Rng::gen_range(&mut rng, -config.epsilon..=config.epsilon));
        project(&x.zip_map(&jitter, |v, j| v + j), x, config.epsilon)
    } else {
        x.clone()
    };
    let mut trace = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let (loss, step) = match config.target_class {
            None => {
                let (loss, grad) = model.input_gradient(&current, label)?;
                (loss, current.zip_map(&grad, |v, g| v + config.step_size * sign(g)))
            }
            Some(target) => {
                let (loss, grad) = model.input_gradient(&current, target)?;
                (loss, current.zip_map(&grad, |v, g| v - config.step_size * sign(g)))
            }
        };
        trace.push(loss);
        current = project(&step, x, config.epsilon);
    }
    Ok((current, trace))
}

/// Iterated projected sign steps; see [`pgd_traced`].
pub fn pgd(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    config: &WhiteboxConfig,
    seed: u64,
) -> Result<Tensor, WhiteboxError> {
    Ok(pgd_traced(model, x, label, config, seed)?.0)
}

/// Stage-I collection: attack every selected input against the shadow model
/// and keep only the pairs whose adversarial member actually fools it.
pub fn collect_pairs(
    shadow: &Classifier,
    shadow_id: &str,
    dataset: &LabeledDataset,
    indices: &[usize],
    config: &WhiteboxConfig,
    seed: u64,
) -> Result<PairDataset, WhiteboxError> {
    config.validate()?;
    if indices.is_empty() {
        return Err(WhiteboxError::NoPairs {
            attempted: 0,
            shadow_acc: f64::NAN,
        });
    }
    let results: Vec<Option<(Tensor, Tensor, usize)>> = indices
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let x = &dataset.images[idx];
            let y = dataset.labels[idx];
            let adv = pgd(shadow, x, y, config, derive_seed(seed, i as u64)).ok()?;
            let predicted = shadow.label(&adv).ok()?;
            let fooled = match config.target_class {
                None => predicted != y,
                Some(t) => predicted == t,
            };
            fooled.then(|| (x.clone(), adv, y))
        })
        .collect();

    let kept: Vec<_> = results.into_iter().flatten().collect();
    if kept.is_empty() {
        let shadow_acc = shadow
            .accuracy(dataset, indices)
            .map(|a| a)
            .unwrap_or(f64::NAN);
        return Err(WhiteboxError::NoPairs {
            attempted: indices.len(),
            shadow_acc,
        });
    }
    let mut pairs = PairDataset {
        clean: Vec::with_capacity(kept.len()),
        adversarial: Vec::with_capacity(kept.len()),
        labels: Vec::with_capacity(kept.len()),
        epsilon: config.epsilon,
        attack_kind: if config.target_class.is_some() {
            "pgd-targeted".to_string()
        } else {
            "pgd".to_string()
        },
        shadow_id: shadow_id.to_string(),
    };
    for (clean, adv, y) in kept {
        pairs.clean.push(clean);
        pairs.adversarial.push(adv);
        pairs.labels.push(y);
    }
    pairs
        .validate()
        .map_err(|e| WhiteboxError::InvalidConfig(e.to_string()))?;
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_classifier, ArchKind, Classifier, ClassifierConfig};
    use crate::data::{gen_synthetic_dataset, SynthKind};

    const EPS16: f32 = 16.0 / 255.0;

    fn trained() -> (Classifier, LabeledDataset) {
        let data = gen_synthetic_dataset(SynthKind::Bars, 560, 4, 3, 8, 31).unwrap();
        let (model, acc) = train_classifier(
            &data,
            ClassifierConfig {
                arch: ArchKind::CnnA,
                channels: 3,
                size: 8,
                classes: 4,
            },
            16,
            77,
        )
        .unwrap();
        assert!(acc > 0.8, "fixture classifier too weak: {acc}");
        (model, data)
    }

    #[test]
    fn fgsm_zero_budget_is_identity() {
        let (model, data) = trained();
        let x = &data.images[0];
        // epsilon = 0 is outside the config contract for PGD, but FGSM's
        // formula degenerates cleanly.
        let adv = fgsm(&model, x, data.labels[0], 0.0).unwrap();
        assert_eq!(&adv, x);
    }

    #[test]
    fn fgsm_moves_pixels_by_epsilon_or_clips() {
        let (model, data) = trained();
        let x = &data.images[0];
        let adv = fgsm(&model, x, data.labels[0], EPS16).unwrap();
        let (_, grad) = model.input_gradient(x, data.labels[0]).unwrap();
        for i in 0..x.numel() {
            let (v, a, g) = (x.data()[i], adv.data()[i], grad.data()[i]);
            let delta = a - v;
            if g == 0.0 {
                assert_eq!(delta, 0.0);
            } else {
                let full = (delta.abs() - EPS16).abs() < 1e-6;
                let clipped = a == 0.0 || a == 1.0;
                assert!(full || clipped, "pixel {i}: delta {delta}");
            }
        }
        assert!(x.linf_dist(&adv) <= EPS16 + 1e-6);
    }

    #[test]
    fn fgsm_increases_misclassification_over_zero_budget() {
        let (model, data) = trained();
        let (_, holdout) = data.split_indices(0.8);
        let mut miss_clean = 0usize;
        let mut miss_fgsm = 0usize;
        for &i in &holdout {
            let x = &data.images[i];
            let y = data.labels[i];
            miss_clean += usize::from(model.label(x).unwrap() != y);
            let adv = fgsm(&model, x, y, EPS16).unwrap();
            miss_fgsm += usize::from(model.label(&adv).unwrap() != y);
        }
        assert!(
            miss_fgsm > miss_clean,
            "fgsm {miss_fgsm} vs clean {miss_clean} misclassifications"
        );
    }

    #[test]
    fn pgd_degenerates_to_fgsm() {
        let (model, data) = trained();
        let x = &data.images[1];
        let y = data.labels[1];
        let cfg = WhiteboxConfig {
            epsilon: EPS16,
            step_size: EPS16,
            iterations: 1,
            target_class: None,
            random_start: false,
        };
        let a = pgd(&model, x, y, &cfg, 0).unwrap();
        let b = fgsm(&model, x, y, EPS16).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn pgd_respects_ball_and_range_every_iteration() {
        let (model, data) = trained();
        let x = &data.images[2];
        let y = data.labels[2];
        // Instrument by running increasing iteration counts; each prefix is a
        // valid attack state because projection happens every step.
        for iters in 1..=8 {
            let cfg = WhiteboxConfig {
                epsilon: EPS16,
                step_size: 2.0 / 255.0,
                iterations: iters,
                target_class: None,
                random_start: true,
            };
            let adv = pgd(&model, x, y, &cfg, 9).unwrap();
            assert!(adv.in_unit_range());
            assert!(x.linf_dist(&adv) <= EPS16 + 1e-6, "iters {iters}");
        }
    }

    #[test]
    fn pgd_loss_is_mostly_nondecreasing() {
        let (model, data) = trained();
        let cfg = WhiteboxConfig {
            epsilon: EPS16,
            step_size: 2.0 / 255.0,
            iterations: 12,
            target_class: None,
            random_start: false,
        };
        let mut increases = 0usize;
        let mut total = 0usize;
        for i in 0..12 {
            let (_, trace) = pgd_traced(&model, &data.images[i], data.labels[i], &cfg, 0).unwrap();
            for w in trace.windows(2) {
                total += 1;
                increases += usize::from(w[1] >= w[0] - 1e-5);
            }
        }
        let frac = increases as f64 / total as f64;
        assert!(frac >= 0.9, "monotone fraction {frac}");
    }

    #[test]
    fn projection_is_idempotent_on_feasible_points() {
        let (_, data) = trained();
        let x = &data.images[3];
        let feasible = x.map(|v| (v + 0.01).min(1.0));
        let p = project(&feasible, x, EPS16);
        assert_eq!(p, feasible);
    }

    #[test]
    fn collect_pairs_keeps_only_fooling_pairs() {
        let (model, data) = trained();
        let idx: Vec<usize> = (0..60).collect();
        let cfg = WhiteboxConfig {
            epsilon: EPS16,
            step_size: 2.0 / 255.0,
            iterations: 20,
            target_class: None,
            random_start: true,
        };
        let pairs = collect_pairs(&model, "shadow", &data, &idx, &cfg, 3).unwrap();
        assert!(pairs.len() <= idx.len());
        assert!(!pairs.is_empty());
        pairs.validate().unwrap();
        for i in 0..pairs.len() {
            let label = model.label(&pairs.adversarial[i]).unwrap();
            assert_ne!(label, pairs.labels[i]);
        }
    }

    #[test]
    fn collect_pairs_against_constant_model_fails_with_diagnostics() {
        // A classifier with zeroed weights outputs identical logits for every
        // input; argmax ties resolve to class 0, so untargeted PGD can never
        // flip inputs whose label is already 0... and for other labels the
        // gradient is ~0 so nothing moves. Build a truly constant model by
        // zeroing everything.
        let data = gen_synthetic_dataset(SynthKind::Bars, 12, 4, 3, 8, 31).unwrap();
        let model = Classifier::build(
            ClassifierConfig {
                arch: ArchKind::CnnA,
                channels: 3,
                size: 8,
                classes: 4,
            },
            5,
        )
        .unwrap();
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        let zeroed: Vec<(String, Tensor)> = names
            .iter()
            .map(|n| (n.clone(), Tensor::zeros(model.params().get(n).unwrap().shape())))
            .collect();
        let mut params = crate::autodiff::ParamStore::new();
        for (n, t) in zeroed {
            params.insert(n, t);
        }
        let model = Classifier::from_params(*model.config(), params).unwrap();
        // Keep only label-0 inputs: the constant model predicts 0, and an
        // untargeted attack can never change a constant prediction.
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 0).collect();
        let cfg = WhiteboxConfig {
            epsilon: EPS16,
            step_size: 2.0 / 255.0,
            iterations: 5,
            target_class: None,
            random_start: false,
        };
        let err = collect_pairs(&model, "shadow", &data, &idx, &cfg, 3).unwrap_err();
        match err {
            WhiteboxError::NoPairs { attempted, .. } => assert_eq!(attempted, idx.len()),
            other => panic!("expected NoPairs, got {other}"),
        }
    }
}
