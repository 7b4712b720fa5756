//! Noise schedules for the forward diffusion process.
//!
//! A schedule fixes the per-step noise variances `beta_t` for `t = 1..=T`,
//! the derived `alpha_t = 1 - beta_t`, and the running products
//! `alpha_bar_t` that control the signal/noise mix at each step. The stored
//! `alpha_bar` values are the exact running product of the stored alphas, so
//! `alpha_bar_t == alpha_bar_{t-1} * alpha_t` holds bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::DiffusionError;

/// Cosine schedule offset.
const COSINE_S: f64 = 0.008;
/// Cosine betas are clipped to this ceiling near t = T.
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            "cosine" => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Precomputed `beta` / `alpha` / `alpha_bar` sequences, 1-indexed via accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f32>,
    alphas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// Build a schedule of the given kind.
    ///
    /// Linear: `beta_t` evenly spaced from `beta_start` to `beta_end`
    /// inclusive. Cosine: `alpha_bar` follows the squared-cosine profile with
    /// offset `s = 0.008` and ignores the beta bounds.
    pub fn build(
        kind: ScheduleKind,
        timesteps: usize,
        beta_start: f32,
        beta_end: f32,
    ) -> Result<Self, DiffusionError> {
        if timesteps < 1 {
            return Err(DiffusionError::InvalidTimesteps(timesteps));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(DiffusionError::InvalidBetaBounds {
                        beta_start: beta_start as f64,
                        beta_end: beta_end as f64,
                    });
                }
                linear_betas(timesteps, beta_start, beta_end)
            }
            ScheduleKind::Cosine => cosine_betas(timesteps),
        };
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut running = 1.0f32;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.timesteps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f32 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f32] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<(), DiffusionError> {
        self.check_t(t)
    }

    /// An evenly spaced sampling subsequence `s_1 < ... < s_S` of `{1..T}`
    /// that includes both endpoints (for `S >= 2`; `S = 1` degenerates to
    /// `[T]`, a single full-strength jump).
    pub fn strided_steps(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        let t = self.timesteps();
        if steps < 1 || steps > t {
            return Err(DiffusionError::InvalidSampleSteps {
                steps,
                timesteps: t,
            });
        }
        if steps == 1 {
            return Ok(vec![t]);
        }
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let pos = 1.0 + (t - 1) as f64 * i as f64 / (steps - 1) as f64;
            out.push(pos.round() as usize);
        }
        debug_assert!(out.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(out[0], 1);
        debug_assert_eq!(out[steps - 1], t);
        Ok(out)
    }
}

fn linear_betas(timesteps: usize, beta_start: f32, beta_end: f32) -> Vec<f32> {
    if timesteps == 1 {
        return vec![beta_start];
    }
    let n = (timesteps - 1) as f64;
    (0..timesteps)
        .map(|i| {
            // Lerp keeps both endpoints exact.
            let u = i as f64 / n;
            (beta_start as f64 * (1.0 - u) + beta_end as f64 * u) as f32
        })
        .collect()
}

fn cosine_betas(timesteps: usize) -> Vec<f32> {
    let f = |t: f64| {
        let arg = ((t / timesteps as f64 + COSINE_S) / (1.0 + COSINE_S))
            * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    (1..=timesteps)
        .map(|t| {
            let bar_t = f(t as f64) / f0;
            let bar_prev = f((t - 1) as f64) / f0;
            let beta = (1.0 - bar_t / bar_prev).min(COSINE_BETA_MAX);
            beta as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_are_exact() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2000, 1e-6, 0.01).unwrap();
        assert_eq!(s.beta(1), 1e-6f32);
        assert_eq!(s.beta(2000), 0.01f32);
    }

    #[test]
    fn alpha_bar_1_is_one_minus_beta_1() {
        for (kind, start, end) in [
            (ScheduleKind::Linear, 1e-6, 0.01),
            (ScheduleKind::Cosine, 0.0, 0.0),
        ] {
            let s = NoiseSchedule::build(kind, 100, start, end).unwrap();
            assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        }
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        // Independent oracle: accumulate the product in f64 from the betas.
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2000, 1e-6, 0.01).unwrap();
        let mut oracle = 1.0f64;
        for t in 1..=2000 {
            oracle *= 1.0 - s.beta(t) as f64;
        }
        let got = s.alpha_bar(2000) as f64;
        assert!((got - oracle).abs() < 1e-7, "got {got}, oracle {oracle}");
        assert!(got < 0.01);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_recomputable() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 500, 1e-4, 0.02).unwrap();
            let mut running = 1.0f32;
            for t in 1..=500 {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0, "{kind} beta_{t}");
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind} not decreasing at {t}");
                running *= s.alpha(t);
                assert_eq!(running.to_bits(), s.alpha_bar(t).to_bits(), "{kind} t={t}");
            }
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(matches!(
            NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.01),
            Err(DiffusionError::InvalidBetaBounds { .. })
        ));
        assert!(matches!(
            NoiseSchedule::build(ScheduleKind::Linear, 10, 0.02, 0.01),
            Err(DiffusionError::InvalidBetaBounds { .. })
        ));
        assert!(matches!(
            NoiseSchedule::build(ScheduleKind::Linear, 0, 1e-6, 0.01),
            Err(DiffusionError::InvalidTimesteps(0))
        ));
    }

    #[test]
    fn strided_steps_cover_endpoints() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2000, 1e-6, 0.01).unwrap();
        let steps = s.strided_steps(50).unwrap();
        assert_eq!(steps.len(), 50);
        assert_eq!(steps[0], 1);
        assert_eq!(steps[49], 2000);
        assert!(steps.windows(2).all(|w| w[0] < w[1]));

        let full = s.strided_steps(2000).unwrap();
        assert_eq!(full, (1..=2000).collect::<Vec<_>>());

        assert_eq!(s.strided_steps(1).unwrap(), vec![2000]);
        assert!(s.strided_steps(0).is_err());
        assert!(s.strided_steps(2001).is_err());
    }
}
