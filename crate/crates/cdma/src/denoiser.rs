//! Conditional noise-prediction network.
//!
//! An encoder-decoder over `(C,H,W)` images with skip connections. The clean
//! image enters as a condition by channel-concatenation with the noisy image
//! at the network input; the timestep enters as a sinusoidal embedding that
//! is mapped through one learned dense layer per stage and added as a
//! per-channel bias. Downsampling is 2x2 average pooling, upsampling is 2x
//! nearest-neighbor, activations are SiLU throughout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::ModelError;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Shape and width of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Image channels C.
    pub channels: usize,
    /// Spatial size (H = W).
    pub size: usize,
    /// Channel count of the first hidden layer.
    pub base_width: usize,
    /// Number of down/up stages (>= 1).
    pub depth: usize,
    /// Sinusoidal time-embedding dimension (even).
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.size == 0 {
            return Err(ModelError::InvalidConfig(
                "channels and size must be positive".into(),
            ));
        }
        if self.depth < 1 {
            return Err(ModelError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.size % (1 << self.depth) != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "size {} not divisible by 2^depth; depth {} needs a multiple of {}",
                self.size,
                self.depth,
                1 << self.depth
            )));
        }
        if self.base_width < 4 {
            return Err(ModelError::InvalidConfig("base_width must be >= 4".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(ModelError::InvalidConfig(
                "time_dim must be even and >= 2".into(),
            ));
        }
        Ok(())
    }

    fn stage_width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Sinusoidal timestep embedding of fixed even dimension.
///
/// For integer `t` the output is `[sin(t/10000^(2i/d)) for i in 0..d/2]`
/// followed by the matching cosines; every component lies in `[-1, 1]`.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    debug_assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10000.0f64).powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 / freq;
        data[i] = angle.sin() as f32;
        data[half + i] = angle.cos() as f32;
    }
    Tensor::new(vec![1, dim], data).expect("embedding shape")
}

/// The denoiser: a reusable graph template plus its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    graph: Graph,
    params: ParamStore,
    output: NodeId,
    loss: NodeId,
}

/// Layer names and shapes are fully determined by the config; this walks the
/// architecture once so both graph building and checkpoint validation agree.
fn layer_specs(config: &DenoiserConfig) -> Vec<(String, Vec<usize>, usize)> {
    // (name, shape, fan_in)
    let mut specs = Vec::new();
    let c = config.channels;
    let d = config.time_dim;
    let conv = |name: &str, c_in: usize, c_out: usize, specs: &mut Vec<_>| {
        specs.push((format!("{name}.w"), vec![c_out, c_in, 3, 3], c_in * 9));
        specs.push((format!("{name}.b"), vec![c_out, 1, 1], c_in * 9));
        specs.push((format!("{name}.t"), vec![d, c_out], d));
    };
    conv("stem", 2 * c, config.stage_width(0), &mut specs);
    for i in 1..=config.depth {
        conv(
            &format!("down{i}"),
            config.stage_width(i - 1),
            config.stage_width(i),
            &mut specs,
        );
    }
    conv(
        "mid",
        config.stage_width(config.depth),
        config.stage_width(config.depth),
        &mut specs,
    );
    for i in (1..=config.depth).rev() {
        conv(
            &format!("up{i}"),
            config.stage_width(i) + config.stage_width(i - 1),
            config.stage_width(i - 1),
            &mut specs,
        );
    }
    // Final projection back to image channels; no time bias.
    specs.push((
        "out.w".to_string(),
        vec![c, config.stage_width(0), 3, 3],
        config.stage_width(0) * 9,
    ));
    specs.push(("out.b".to_string(), vec![c, 1, 1], config.stage_width(0) * 9));
    specs
}

impl Denoiser {
    /// Build the graph template and deterministically initialize parameters.
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in layer_specs(&config) {
            params.init_uniform(&name, &shape, fan_in, &mut rng);
        }
        let (graph, output, loss) = Self::build_graph(&config)?;
        Ok(Denoiser {
            config,
            graph,
            params,
            output,
            loss,
        })
    }

    /// Rebuild the graph for existing parameters (checkpoint load).
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape, _) in layer_specs(&config) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(ModelError::InvalidConfig(format!(
                        "missing parameter `{name}`"
                    )))
                }
            }
        }
        let expected = layer_specs(&config).len();
        if params.len() != expected {
            return Err(ModelError::InvalidConfig(format!(
                "parameter count {} does not match config ({expected})",
                params.len()
            )));
        }
        let (graph, output, loss) = Self::build_graph(&config)?;
        Ok(Denoiser {
            config,
            graph,
            params,
            output,
            loss,
        })
    }

    fn build_graph(config: &DenoiserConfig) -> Result<(Graph, NodeId, NodeId), ModelError> {
        let c = config.channels;
        let s = config.size;
        let mut g = Graph::new();
        let x_t = g.input("x_t", vec![c, s, s])?;
        let cond = g.input("cond", vec![c, s, s])?;
        let t_emb = g.input("t_emb", vec![1, config.time_dim])?;

        // One conv stage: conv + bias + per-channel time bias, SiLU.
        let stage = |g: &mut Graph, name: &str, x: NodeId, c_out: usize| -> Result<NodeId, ModelError> {
            let w = g.param(&format!("{name}.w"), {
                let c_in = g.node_shape(x)[0];
                vec![c_out, c_in, 3, 3]
            })?;
            let b = g.param(&format!("{name}.b"), vec![c_out, 1, 1])?;
            let tw = g.param(&format!("{name}.t"), vec![config.time_dim, c_out])?;
            let conv = g.conv2d(x, w)?;
            let biased = g.add(conv, b)?;
            let tproj = g.matmul(t_emb, tw)?;
            let tbias = g.reshape(tproj, vec![c_out, 1, 1])?;
            let with_t = g.add(biased, tbias)?;
            Ok(g.silu(with_t))
        };

        let joined = g.concat_channel(x_t, cond)?;
        let mut enc = Vec::with_capacity(config.depth + 1);
        enc.push(stage(&mut g, "stem", joined, config.stage_width(0))?);
        for i in 1..=config.depth {
            let pooled = g.avg_pool2(enc[i - 1])?;
            enc.push(stage(&mut g, &format!("down{i}"), pooled, config.stage_width(i))?);
        }
        let mut cur = stage(&mut g, "mid", enc[config.depth], config.stage_width(config.depth))?;
        for i in (1..=config.depth).rev() {
            let up = g.upsample2(cur)?;
            let skip = g.concat_channel(up, enc[i - 1])?;
            cur = stage(&mut g, &format!("up{i}"), skip, config.stage_width(i - 1))?;
        }
        let out_w = g.param("out.w", vec![c, config.stage_width(0), 3, 3])?;
        let out_b = g.param("out.b", vec![c, 1, 1])?;
        let proj = g.conv2d(cur, out_w)?;
        let output = g.add(proj, out_b)?;
        g.mark_output("noise", output);

        // Training head: mean squared error against the true noise.
        let target = g.input("target", vec![c, s, s])?;
        let diff = g.sub(output, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq, None)?;
        g.mark_output("loss", loss);

        Ok((g, output, loss))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    fn check_images(&self, x_t: &Tensor, condition: &Tensor) -> Result<(), ModelError> {
        let expected = [self.config.channels, self.config.size, self.config.size];
        if x_t.shape() != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                got: x_t.shape().to_vec(),
            });
        }
        if condition.shape() != x_t.shape() {
            return Err(ModelError::InputShape {
                expected: x_t.shape().to_vec(),
                got: condition.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Predicted noise for a noisy image at timestep `t` under `condition`.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        condition: &Tensor,
    ) -> Result<Tensor, ModelError> {
        self.check_images(x_t, condition)?;
        let emb = time_embedding(t, self.config.time_dim);
        let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
        inputs.insert("x_t", x_t);
        inputs.insert("cond", condition);
        inputs.insert("t_emb", &emb);
        let values = self.graph.eval(&self.params, &inputs, &[self.output])?;
        Ok(values.get(self.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            size: 8,
            base_width: 16,
            depth: 1,
            time_dim: 32,
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Denoiser::build(small_config(), 99).unwrap();
        let b = Denoiser::build(small_config(), 99).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Denoiser::build(small_config(), 100).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_shape_matches_input_shape() {
        for (depth, size, width) in [(1usize, 8usize, 16usize), (2, 8, 4), (1, 16, 8)] {
            let cfg = DenoiserConfig {
                channels: 3,
                size,
                base_width: width,
                depth,
                time_dim: 16,
            };
            let den = Denoiser::build(cfg, 5).unwrap();
            let x = Tensor::full(&[3, size, size], 0.3);
            let c = Tensor::full(&[3, size, size], 0.6);
            let out = den.predict_noise(&x, 7, &c).unwrap();
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn parameter_count_matches_hand_derived_total() {
        // Config (C=3, H=W=8, width=16, depth=1, d=32), counted layer by layer:
        //   stem: 16*6*9 + 16 + 32*16          = 864 + 16 + 512   = 1392
        //   down1: 32*16*9 + 32 + 32*32        = 4608 + 32 + 1024 = 5664
        //   mid:   32*32*9 + 32 + 32*32        = 9216 + 32 + 1024 = 10272
        //   up1:   16*48*9 + 16 + 32*16        = 6912 + 16 + 512  = 7440
        //   out:   3*16*9 + 3                  = 432 + 3          = 435
        let den = Denoiser::build(small_config(), 1).unwrap();
        assert_eq!(den.param_count(), 1392 + 5664 + 10272 + 7440 + 435);
    }

    #[test]
    fn predict_noise_is_pure() {
        let den = Denoiser::build(small_config(), 3).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.4);
        let c = Tensor::full(&[3, 8, 8], 0.1);
        let a = den.predict_noise(&x, 100, &c).unwrap();
        let b = den.predict_noise(&x, 100, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_shape_mismatch_is_rejected() {
        let den = Denoiser::build(small_config(), 3).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.4);
        let c = Tensor::full(&[3, 4, 4], 0.1);
        assert!(matches!(
            den.predict_noise(&x, 1, &c),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn indivisible_size_fails_at_build() {
        let cfg = DenoiserConfig {
            channels: 1,
            size: 6,
            base_width: 8,
            depth: 2,
            time_dim: 8,
        };
        assert!(matches!(
            Denoiser::build(cfg, 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn time_embedding_is_bounded_and_sized() {
        for t in [1usize, 17, 1999] {
            let e = time_embedding(t, 32);
            assert_eq!(e.shape(), &[1, 32]);
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        // Distinct timesteps embed differently.
        assert_ne!(time_embedding(3, 16), time_embedding(4, 16));
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        // The mean-squared-error head over sampled parameter coordinates.
        use std::collections::HashMap;

        let den = Denoiser::build(
            DenoiserConfig {
                channels: 1,
                size: 4,
                base_width: 4,
                depth: 1,
                time_dim: 8,
            },
            13,
        )
        .unwrap();
        let mut rng = crate::rng::rng_from(29);
        let x_t = crate::rng::normal_tensor(&mut rng, &[1, 4, 4]);
        let cond = crate::rng::normal_tensor(&mut rng, &[1, 4, 4]).map(|v| (0.5 + 0.1 * v).clamp(0.0, 1.0));
        let target = crate::rng::normal_tensor(&mut rng, &[1, 4, 4]);
        let emb = time_embedding(3, 8);
        let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
        inputs.insert("x_t", &x_t);
        inputs.insert("cond", &cond);
        inputs.insert("t_emb", &emb);
        inputs.insert("target", &target);
        let (_, grads) = den
            .graph()
            .loss_and_grad(den.params(), &inputs, den.loss_node())
            .unwrap();
        let h = 1e-3;
        let names: Vec<String> = den.params().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let analytic = &grads.params[&name];
            let stride = (analytic.numel() / 3).max(1);
            for coord in (0..analytic.numel()).step_by(stride) {
                let eval_at = |delta: f32| {
                    let mut p = den.params().clone();
                    p.get_mut(&name).unwrap().data_mut()[coord] += delta;
                    den.graph()
                        .eval(&p, &inputs, &[den.loss_node()])
                        .unwrap()
                        .get(den.loss_node())
                        .item()
                };
                let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                let got = analytic.data()[coord];
                let err = (got - fd).abs() / got.abs().max(fd.abs()).max(1.0);
                assert!(err < 1e-2, "{name}[{coord}]: {got} vs {fd} (err {err})");
            }
        }
    }

    #[test]
    fn changing_condition_changes_output() {
        let den = Denoiser::build(small_config(), 8).unwrap();
        let x = Tensor::full(&[3, 8, 8], 0.5);
        let c1 = Tensor::full(&[3, 8, 8], 0.2);
        let c2 = Tensor::full(&[3, 8, 8], 0.8);
        let o1 = den.predict_noise(&x, 50, &c1).unwrap();
        let o2 = den.predict_noise(&x, 50, &c2).unwrap();
        assert!(o1.linf_dist(&o2) > 0.0);
    }
}
