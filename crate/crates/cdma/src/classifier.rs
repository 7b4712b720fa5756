//! Small convolutional image classifiers.
//!
//! These play three roles: shadow models for pair collection, white-box
//! targets for the gradient attacks, and hard-label victims behind the query
//! oracle. Architectures intentionally differ in width and depth so shadow
//! and victim are never the same network family.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamHyper, AdamState, Graph, NodeId, ParamStore};
use crate::data::LabeledDataset;
use crate::error::ModelError;
use crate::rng::rng_from;
use crate::tensor::{argmax, Tensor};

/// Architecture family.
///
/// * `CnnA` — one 8-channel conv block, then a linear head.
/// * `CnnB` — two 12-channel conv layers with one pooling.
/// * `CnnC` — one 16-channel conv block and a hidden dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    CnnA,
    CnnB,
    CnnC,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::CnnA => "cnn-a",
            ArchKind::CnnB => "cnn-b",
            ArchKind::CnnC => "cnn-c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cnn-a" => Some(ArchKind::CnnA),
            "cnn-b" => Some(ArchKind::CnnB),
            "cnn-c" => Some(ArchKind::CnnC),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: ArchKind,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.classes < 2 {
            return Err(ModelError::InvalidConfig(
                "need channels >= 1 and classes >= 2".into(),
            ));
        }
        let div = 2;
        if self.size % div != 0 || self.size < div * 2 {
            return Err(ModelError::InvalidConfig(format!(
                "size {} incompatible with arch {} (needs multiple of {div})",
                self.size,
                self.arch.as_str()
            )));
        }
        Ok(())
    }
}

/// A built classifier: graph template plus parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    graph: Graph,
    params: ParamStore,
    logits: NodeId,
}

struct LayerSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn layer_specs(config: &ClassifierConfig) -> Vec<LayerSpec> {
    let (c, s, k) = (config.channels, config.size, config.classes);
    let spec = |name: &str, shape: Vec<usize>, fan_in: usize| LayerSpec {
        name: name.to_string(),
        shape,
        fan_in,
    };
    match config.arch {
        ArchKind::CnnA => {
            let flat = 8 * (s / 2) * (s / 2);
            vec![
                spec("conv1.w", vec![8, c, 3, 3], c * 9),
                spec("conv1.b", vec![8, 1, 1], c * 9),
                spec("fc.w", vec![flat, k], flat),
                spec("fc.b", vec![1, k], flat),
            ]
        }
        ArchKind::CnnB => {
            let flat = 12 * (s / 2) * (s / 2);
            vec![
                spec("conv1.w", vec![12, c, 3, 3], c * 9),
                spec("conv1.b", vec![12, 1, 1], c * 9),
                spec("conv2.w", vec![12, 12, 3, 3], 12 * 9),
                spec("conv2.b", vec![12, 1, 1], 12 * 9),
                spec("fc.w", vec![flat, k], flat),
                spec("fc.b", vec![1, k], flat),
            ]
        }
        ArchKind::CnnC => {
            let flat = 16 * (s / 2) * (s / 2);
            vec![
                spec("conv1.w", vec![16, c, 3, 3], c * 9),
                spec("conv1.b", vec![16, 1, 1], c * 9),
                spec("fc1.w", vec![flat, 32], flat),
                spec("fc1.b", vec![1, 32], flat),
                spec("fc2.w", vec![32, k], 32),
                spec("fc2.b", vec![1, k], 32),
            ]
        }
    }
}

impl Classifier {
    pub fn build(config: ClassifierConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut params = ParamStore::new();
        for l in layer_specs(&config) {
            params.init_uniform(&l.name, &l.shape, l.fan_in, &mut rng);
        }
        let (graph, logits) = Self::build_graph(&config)?;
        Ok(Classifier {
            config,
            graph,
            params,
            logits,
        })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layer_specs(&config);
        for l in &specs {
            match params.get(&l.name) {
                Some(t) if t.shape() == l.shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter `{}` has shape {:?}, config implies {:?}",
                        l.name,
                        t.shape(),
                        l.shape
                    )))
                }
                None => {
                    return Err(ModelError::InvalidConfig(format!(
                        "missing parameter `{}`",
                        l.name
                    )))
                }
            }
        }
        if params.len() != specs.len() {
            return Err(ModelError::InvalidConfig(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                specs.len()
            )));
        }
        let (graph, logits) = Self::build_graph(&config)?;
        Ok(Classifier {
            config,
            graph,
            params,
            logits,
        })
    }

    fn build_graph(config: &ClassifierConfig) -> Result<(Graph, NodeId), ModelError> {
        let (c, s) = (config.channels, config.size);
        let mut g = Graph::new();
        let x = g.input("x", vec![c, s, s])?;

        let conv_block =
            |g: &mut Graph, name: &str, x: NodeId, width: usize| -> Result<NodeId, ModelError> {
                let c_in = g.node_shape(x)[0];
                let w = g.param(&format!("{name}.w"), vec![width, c_in, 3, 3])?;
                let b = g.param(&format!("{name}.b"), vec![width, 1, 1])?;
                let conv = g.conv2d(x, w)?;
                let biased = g.add(conv, b)?;
                let act = g.relu(biased);
                Ok(g.avg_pool2(act)?)
            };

        let dense = |g: &mut Graph, name: &str, x: NodeId, out: usize| -> Result<NodeId, ModelError> {
            let in_dim = g.node_shape(x)[1];
            let w = g.param(&format!("{name}.w"), vec![in_dim, out])?;
            let b = g.param(&format!("{name}.b"), vec![1, out])?;
            let mm = g.matmul(x, w)?;
            Ok(g.add(mm, b)?)
        };

        let logits = match config.arch {
            ArchKind::CnnA => {
                let h = conv_block(&mut g, "conv1", x, 8)?;
                let flat = g.reshape(h, vec![1, 8 * (s / 2) * (s / 2)])?;
                dense(&mut g, "fc", flat, config.classes)?
            }
            ArchKind::CnnB => {
                let h1 = conv_block(&mut g, "conv1", x, 12)?;
                let c2w = g.param("conv2.w", vec![12, 12, 3, 3])?;
                let c2b = g.param("conv2.b", vec![12, 1, 1])?;
                let conv2 = g.conv2d(h1, c2w)?;
                let biased2 = g.add(conv2, c2b)?;
                let h2 = g.relu(biased2);
                let flat = g.reshape(h2, vec![1, 12 * (s / 2) * (s / 2)])?;
                dense(&mut g, "fc", flat, config.classes)?
            }
            ArchKind::CnnC => {
                let h = conv_block(&mut g, "conv1", x, 16)?;
                let flat = g.reshape(h, vec![1, 16 * (s / 2) * (s / 2)])?;
                let hidden = dense(&mut g, "fc1", flat, 32)?;
                let act = g.relu(hidden);
                dense(&mut g, "fc2", act, config.classes)?
            }
        };
        g.mark_output("logits", logits);
        Ok((g, logits))
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected = [self.config.channels, self.config.size, self.config.size];
        if x.shape() != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Raw logit vector of length K.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>, ModelError> {
        self.check_input(x)?;
        let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
        inputs.insert("x", x);
        let values = self.graph.eval(&self.params, &inputs, &[self.logits])?;
        Ok(values.get(self.logits).data().to_vec())
    }

    /// Hard label: argmax of the logits, ties broken toward the lowest index.
    pub fn label(&self, x: &Tensor) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy loss and its gradient with respect to the input image.
    pub fn input_gradient(&self, x: &Tensor, class: usize) -> Result<(f32, Tensor), ModelError> {
        self.check_input(x)?;
        let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
        inputs.insert("x", x);
        let values = self.graph.eval(&self.params, &inputs, &[self.logits])?;
        let logits = values.get(self.logits).data().to_vec();
        let (loss, dlogits) = cross_entropy(&logits, class);
        let adjoint = Tensor::new(vec![1, logits.len()], dlogits).expect("adjoint shape");
        let grads = self.graph.backward(&values, self.logits, adjoint)?;
        let gx = grads
            .inputs
            .get("x")
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((loss, gx))
    }

    /// Cross-entropy loss and parameter gradients for one labeled example.
    fn param_gradient(
        &self,
        x: &Tensor,
        class: usize,
    ) -> Result<(f32, crate::autodiff::Gradients), ModelError> {
        let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
        inputs.insert("x", x);
        let values = self.graph.eval(&self.params, &inputs, &[self.logits])?;
        let logits = values.get(self.logits).data().to_vec();
        let (loss, dlogits) = cross_entropy(&logits, class);
        let adjoint = Tensor::new(vec![1, logits.len()], dlogits).expect("adjoint shape");
        let grads = self.graph.backward(&values, self.logits, adjoint)?;
        Ok((loss, grads))
    }

    /// Top-1 accuracy over the given indices.
    pub fn accuracy(&self, data: &LabeledDataset, indices: &[usize]) -> Result<f64, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let correct: usize = indices
            .par_iter()
            .map(|&i| usize::from(self.label(&data.images[i]).unwrap_or(usize::MAX) == data.labels[i]))
            .sum();
        Ok(correct as f64 / indices.len() as f64)
    }
}

/// Softmax cross-entropy in f64 for stability; returns the loss and the
/// gradient wrt the logits (`softmax - onehot`).
pub fn cross_entropy(logits: &[f32], class: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[class] / z).ln() as f32;
    let grad: Vec<f32> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / z;
            (p - f64::from(i == class)) as f32
        })
        .collect();
    (loss, grad)
}

/// Training driver: minibatch Adam over cross-entropy.
///
/// The train/holdout split is derived from the dataset's generation seed;
/// `seed` drives parameter init and batch shuffling. Returns the classifier
/// and its held-out top-1 accuracy.
pub fn train_classifier(
    dataset: &LabeledDataset,
    config: ClassifierConfig,
    epochs: usize,
    seed: u64,
) -> Result<(Classifier, f64), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.labels.iter().any(|&l| l >= config.classes) {
        return Err(ModelError::InvalidConfig(
            "dataset labels exceed configured class count".into(),
        ));
    }
    let mut model = Classifier::build(config, seed)?;
    let (train_idx, holdout_idx) = dataset.split_indices(0.8);
    let mut adam = AdamState::new(AdamHyper::default(), &model.params);
    let mut rng = rng_from(crate::rng::derive_seed(seed, 0xBA7C_4));
    const BATCH: usize = 16;

    let mut order = train_idx.clone();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(BATCH) {
            // Per-example gradients in parallel, then an ordered accumulate so
            // float summation order stays fixed.
            let parts: Vec<(f32, crate::autodiff::Gradients)> = chunk
                .par_iter()
                .map(|&i| model.param_gradient(&dataset.images[i], dataset.labels[i]))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / chunk.len() as f32;
            let mut iter = parts.into_iter();
            let (_, mut accum) = iter.next().expect("non-empty chunk");
            for (_, t) in accum.params.iter_mut() {
                *t = t.scaled(scale);
            }
            for (_, grads) in iter {
                for (name, g) in grads.params.iter() {
                    let slot = accum.params.get_mut(name).unwrap();
                    *slot = slot.add_scaled(g, scale);
                }
            }
            adam_step(&mut model.params, &accum, &mut adam)?;
        }
    }
    let acc = model.accuracy(dataset, &holdout_idx)?;
    Ok((model, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, SynthKind};

    fn cfg(arch: ArchKind) -> ClassifierConfig {
        ClassifierConfig {
            arch,
            channels: 3,
            size: 8,
            classes: 4,
        }
    }

    #[test]
    fn logits_have_class_count_length() {
        for arch in [ArchKind::CnnA, ArchKind::CnnB, ArchKind::CnnC] {
            let m = Classifier::build(cfg(arch), 1).unwrap();
            let x = Tensor::full(&[3, 8, 8], 0.5);
            let l = m.logits(&x).unwrap();
            assert_eq!(l.len(), 4);
            assert!(l.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn logits_are_pure_and_label_consistent() {
        let m = Classifier::build(cfg(ArchKind::CnnA), 2).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.3);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.label(&x).unwrap(), argmax(&a));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Classifier::build(cfg(ArchKind::CnnA), 2).unwrap();
        let x = Tensor::full(&[3, 4, 4], 0.3);
        assert!(matches!(m.logits(&x), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = vec![1.0, -0.5, 2.0, 0.2];
        let (loss, grad) = cross_entropy(&logits, 2);
        assert!(loss > 0.0);
        let sum: f32 = grad.iter().sum();
        assert!(sum.abs() < 1e-6);
        assert!(grad[2] < 0.0);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Classifier::build(cfg(ArchKind::CnnA), 3).unwrap();
        let x = gen_synthetic_dataset(SynthKind::Bars, 4, 4, 3, 8, 1).unwrap().images[0].clone();
        let (_, grad) = m.input_gradient(&x, 1).unwrap();
        let h = 1e-3;
        for coord in [0usize, 17, 100, 191] {
            let mut xp = x.clone();
            xp.data_mut()[coord] += h;
            let (lp, _) = m.input_gradient(&xp, 1).unwrap();
            let mut xm = x.clone();
            xm.data_mut()[coord] -= h;
            let (lm, _) = m.input_gradient(&xm, 1).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let got = grad.data()[coord];
            let err = (got - fd).abs() / got.abs().max(fd.abs()).max(1.0);
            assert!(err < 1e-2, "coord {coord}: {got} vs {fd}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_synthetic_dataset(SynthKind::Bars, 60, 4, 3, 8, 11).unwrap();
        let (m1, a1) = train_classifier(&data, cfg(ArchKind::CnnA), 1, 5).unwrap();
        let (m2, a2) = train_classifier(&data, cfg(ArchKind::CnnA), 1, 5).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn untrained_accuracy_is_chance_level() {
        let data = gen_synthetic_dataset(SynthKind::Bars, 400, 4, 3, 8, 13).unwrap();
        let (_, acc) = train_classifier(&data, cfg(ArchKind::CnnA), 0, 5).unwrap();
        // 80 holdout samples at p = 1/4: binomial 3 sigma.
        let n = 80.0f64;
        let se = (0.25 * 0.75 / n).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * se, "untrained accuracy {acc}");
    }

    #[test]
    fn learns_separable_bars() {
        let data = gen_synthetic_dataset(SynthKind::Bars, 560, 4, 3, 8, 17).unwrap();
        let (_, acc) = train_classifier(&data, cfg(ArchKind::CnnA), 16, 5).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LabeledDataset {
            images: vec![],
            labels: vec![],
            classes: 4,
            meta: crate::data::DatasetMeta {
                kind: "bars".into(),
                seed: 0,
                size: 0,
            },
        };
        assert!(matches!(
            train_classifier(&data, cfg(ArchKind::CnnA), 1, 0),
            Err(ModelError::EmptyDataset)
        ));
    }
}
