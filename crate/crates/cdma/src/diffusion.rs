//! Forward noising, denoiser training, and conditional reverse sampling.

use std::collections::HashMap;

use crate::autodiff::{adam_step, AdamHyper, AdamState};
use crate::denoiser::{time_embedding, Denoiser};
use crate::error::DiffusionError;
use crate::rng::{normal_tensor, SeededRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;

/// Schedule plus reverse-chain length used when sampling.
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub schedule: NoiseSchedule,
    /// Number of reverse steps S (1 <= S <= T). When S < T the chain runs on
    /// an evenly strided timestep subsequence that includes T and 1.
    pub sample_steps: usize,
}

impl DiffusionConfig {
    pub fn new(schedule: NoiseSchedule, sample_steps: usize) -> Result<Self, DiffusionError> {
        if sample_steps < 1 || sample_steps > schedule.timesteps() {
            return Err(DiffusionError::InvalidSampleSteps {
                steps: sample_steps,
                timesteps: schedule.timesteps(),
            });
        }
        Ok(DiffusionConfig {
            schedule,
            sample_steps,
        })
    }
}

/// Closed-form forward draw: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn add_noise(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check_timestep(t)?;
    let abar = schedule.alpha_bar(t);
    let signal = abar.sqrt();
    let sigma = (1.0 - abar).sqrt();
    Ok(x0.zip_map(noise, |x, n| signal * x + sigma * n))
}

/// One reverse transition from timestep `t_cur` down to `t_prev` (`t_prev = 0`
/// lands on the sample itself).
///
/// The posterior mean uses the predicted noise:
/// `mu = (x_t - beta_eff / sqrt(1 - abar_cur) * noise_hat) / sqrt(alpha_eff)`
/// and the transition adds `sqrt(beta_eff) * z`. For consecutive timesteps
/// `alpha_eff` is the tabulated `alpha_t` (so the strided sampler with S = T
/// is bit-identical to the full chain); for longer strides it is the carried
/// ratio `abar_cur / abar_prev`.
pub fn denoise_step(
    x_t: &Tensor,
    predicted_noise: &Tensor,
    t_cur: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check_timestep(t_cur)?;
    if t_prev >= t_cur {
        return Err(DiffusionError::TimestepOutOfRange {
            t: t_prev,
            max: t_cur - 1,
        });
    }
    let abar_cur = schedule.alpha_bar(t_cur);
    let (alpha_eff, beta_eff) = if t_prev + 1 == t_cur {
        (schedule.alpha(t_cur), schedule.beta(t_cur))
    } else {
        let ratio = abar_cur / schedule.alpha_bar(t_prev);
        (ratio, 1.0 - ratio)
    };
    let noise_coef = beta_eff / (1.0 - abar_cur).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha_eff.sqrt();
    let sigma = beta_eff.sqrt();
    let mut out = x_t.zip_map(predicted_noise, |x, n| inv_sqrt_alpha * (x - noise_coef * n));
    out = out.zip_map(z, |m, zz| m + sigma * zz);
    Ok(out)
}

/// Single full-chain reverse step from `t` to `t - 1` (`z` must be zero at
/// `t = 1`, where the chain lands on the sample).
pub fn p_sample_step(
    denoiser: &Denoiser,
    x_t: &Tensor,
    t: usize,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor, DiffusionError> {
    let predicted = denoiser
        .predict_noise(x_t, t, condition)
        .map_err(|e| match e {
            crate::error::ModelError::Graph(g) => DiffusionError::Graph(g),
            other => DiffusionError::Graph(crate::error::GraphError::Invalid(other.to_string())),
        })?;
    denoise_step(x_t, &predicted, t, t - 1, schedule, z)
}

/// Run the full conditional reverse chain from pure noise.
///
/// Deterministic given `seed`: the initial draw and every per-step `z` come
/// from one seeded stream. The final transition adds no noise, matching the
/// `z = 0` rule of the full chain at `t = 1`. The raw sample is returned
/// without any projection; budget constraints are applied by the attack
/// harness.
pub fn sample(
    denoiser: &Denoiser,
    condition: &Tensor,
    config: &DiffusionConfig,
    seed: u64,
) -> Result<Tensor, DiffusionError> {
    let schedule = &config.schedule;
    let steps = schedule.strided_steps(config.sample_steps)?;
    let mut rng = crate::rng::rng_from(seed);
    let mut x = normal_tensor(&mut rng, condition.shape());
    for i in (0..steps.len()).rev() {
        let t_cur = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let z = if i == 0 {
            Tensor::zeros(condition.shape())
        } else {
            normal_tensor(&mut rng, condition.shape())
        };
        let predicted = denoiser
            .predict_noise(&x, t_cur, condition)
            .map_err(|e| match e {
                crate::error::ModelError::Graph(g) => DiffusionError::Graph(g),
                other => {
                    DiffusionError::Graph(crate::error::GraphError::Invalid(other.to_string()))
                }
            })?;
        x = denoise_step(&x, &predicted, t_cur, t_prev, schedule, &z)?;
    }
    Ok(x)
}

/// Adam-backed trainer for the conditional denoiser.
#[derive(Debug)]
pub struct DiffusionTrainer {
    schedule: NoiseSchedule,
    adam: AdamState,
    steps_taken: u64,
}

impl DiffusionTrainer {
    pub fn new(schedule: NoiseSchedule, denoiser: &Denoiser, hyper: AdamHyper) -> Self {
        let adam = AdamState::new(hyper, denoiser.params());
        DiffusionTrainer {
            schedule,
            adam,
            steps_taken: 0,
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// One optimizer step over a minibatch of `(clean, adversarial)` pairs.
    ///
    /// Each example draws a fresh uniform timestep and a fresh standard-normal
    /// noise tensor; the loss is the mean squared error between that noise and
    /// the prediction, averaged over the batch. Returns the batch loss.
    pub fn train_step(
        &mut self,
        denoiser: &mut Denoiser,
        batch: &[(&Tensor, &Tensor)],
        rng: &mut SeededRng,
    ) -> Result<f32, DiffusionError> {
        assert!(!batch.is_empty(), "empty training batch");
        let t_max = self.schedule.timesteps();
        let dim = denoiser.config().time_dim;
        let loss_node = denoiser.loss_node();

        // Draw per-example (t, noise) up front so the RNG stream does not
        // depend on evaluation order.
        let draws: Vec<(usize, Tensor)> = batch
            .iter()
            .map(|(_, adv)| {
                let t = rng.gen_range(1..=t_max);
                (t, normal_tensor(rng, adv.shape()))
            })
            .collect();

        let scale = 1.0 / batch.len() as f32;
        let mut total_loss = 0.0f32;
        let mut accum: Option<crate::autodiff::Gradients> = None;
        for ((clean, adv), (t, noise)) in batch.iter().zip(draws.iter()) {
            let x_t = add_noise(adv, *t, noise, &self.schedule)?;
            let emb = time_embedding(*t, dim);
            let mut inputs: HashMap<&str, &Tensor> = HashMap::new();
            inputs.insert("x_t", &x_t);
            inputs.insert("cond", clean);
            inputs.insert("t_emb", &emb);
            inputs.insert("target", noise);
            let (loss, grads) = denoiser
                .graph()
                .loss_and_grad(denoiser.params(), &inputs, loss_node)?;
            if !loss.is_finite() {
                let norms: Vec<String> = grads
                    .params
                    .iter()
                    .map(|(n, g)| format!("{n}={:.3e}", g.l2_norm()))
                    .collect();
                return Err(DiffusionError::NonFiniteLoss {
                    step: self.steps_taken,
                    t: *t,
                    loss,
                    grad_norms: norms.join(", "),
                });
            }
            total_loss += loss * scale;
            match &mut accum {
                None => {
                    let mut g = grads;
                    for (_, t) in g.params.iter_mut() {
                        *t = t.scaled(scale);
                    }
                    accum = Some(g);
                }
                Some(acc) => {
                    for (name, g) in grads.params.iter() {
                        let slot = acc.params.get_mut(name).unwrap();
                        *slot = slot.add_scaled(g, scale);
                    }
                }
            }
        }

        let grads = accum.expect("non-empty batch");
        adam_step(denoiser.params_mut(), &grads, &mut self.adam)
            .map_err(|e| DiffusionError::Graph(crate::error::GraphError::Invalid(e.to_string())))?;
        self.steps_taken += 1;
        Ok(total_loss)
    }
}
