//! Run configuration: one JSON document per experiment.
//!
//! Every knob lives in the config so a run is reproducible from a single
//! artifact; CLI flags may override scalar fields. Seeds are mandatory —
//! nothing in the pipeline falls back to wall-clock seeding.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ArchKind;
use crate::data::SynthKind;
use crate::defenses::DefenseSpec;
use crate::error::ConfigError;
use crate::schedule::ScheduleKind;

/// An L-inf budget, accepted either as a `"16/255"` fraction string or as a
/// plain number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpsilonRepr", into = "EpsilonRepr")]
pub struct Epsilon(pub f32);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum EpsilonRepr {
    Text(String),
    Number(f64),
}

impl TryFrom<EpsilonRepr> for Epsilon {
    type Error = String;

    fn try_from(value: EpsilonRepr) -> Result<Self, Self::Error> {
        let v = match value {
            EpsilonRepr::Number(n) => n as f32,
            EpsilonRepr::Text(s) => parse_epsilon(&s).ok_or_else(|| {
                format!("cannot parse epsilon `{s}` (use e.g. \"16/255\" or 0.0627)")
            })?,
        };
        if !(v.is_finite() && v > 0.0 && v <= 1.0) {
            return Err(format!("epsilon {v} out of (0, 1]"));
        }
        Ok(Epsilon(v))
    }
}

impl From<Epsilon> for EpsilonRepr {
    fn from(e: Epsilon) -> Self {
        EpsilonRepr::Number(e.0 as f64)
    }
}

pub fn parse_epsilon(s: &str) -> Option<f32> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f32 = num.trim().parse().ok()?;
        let d: f32 = den.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        Some(n / d)
    } else {
        s.parse().ok()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub arch: ArchKind,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub epsilon: Epsilon,
    pub step_size: Epsilon,
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Optional targeted pair collection (class index).
    #[serde(default)]
    pub target_class: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_width: usize,
    pub depth: usize,
    pub time_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Reverse-chain length S.
    pub steps: usize,
    /// Sampling-time schedule kind; `None` reuses the training schedule.
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: Epsilon,
    pub q_max: u32,
    /// `untargeted` or `targeted`.
    pub mode: String,
    #[serde(default)]
    pub target_class: Option<usize>,
    /// How many holdout inputs to attack.
    pub inputs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub models: u64,
    pub pairs: u64,
    pub diffusion: u64,
    pub attack: u64,
}

/// The whole experiment in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: String,
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
    /// Second dataset with different statistics for the data-independent runs.
    pub dataset_alt: DatasetSpec,
    pub shadow: ModelSpec,
    pub victims: Vec<ModelSpec>,
    pub pairs: PairSpec,
    pub schedule: ScheduleSpec,
    pub train: TrainSpec,
    pub sampling: SamplingSpec,
    pub attack: AttackSpec,
    pub defenses: Vec<DefenseSpec>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.victims.is_empty() {
            return bad("need at least one victim model".into());
        }
        let mut ids: Vec<&str> = self.victims.iter().map(|v| v.id.as_str()).collect();
        ids.push(&self.shadow.id);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("model ids must be unique".into());
        }
        for spec in [&self.dataset, &self.dataset_alt] {
            if spec.n < spec.classes {
                return bad(format!("dataset n={} smaller than classes", spec.n));
            }
        }
        if self.dataset.classes != self.dataset_alt.classes
            || self.dataset.channels != self.dataset_alt.channels
            || self.dataset.size != self.dataset_alt.size
        {
            return bad("dataset and dataset_alt must share classes/channels/size".into());
        }
        if self.schedule.timesteps < 1 {
            return bad("schedule.timesteps must be >= 1".into());
        }
        if self.sampling.steps < 1 || self.sampling.steps > self.schedule.timesteps {
            return bad(format!(
                "sampling.steps {} out of [1, {}]",
                self.sampling.steps, self.schedule.timesteps
            ));
        }
        if self.attack.q_max < 1 {
            return bad("attack.q_max must be >= 1".into());
        }
        match self.attack.mode.as_str() {
            "untargeted" => {}
            "targeted" => {
                let t = self
                    .attack
                    .target_class
                    .ok_or_else(|| ConfigError::Invalid("targeted mode needs target_class".into()))?;
                if t >= self.dataset.classes {
                    return bad(format!("target_class {t} out of range"));
                }
            }
            other => return bad(format!("unknown attack mode `{other}`")),
        }
        if self.attack.inputs == 0 {
            return bad("attack.inputs must be >= 1".into());
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return bad("train.steps and train.batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Stable hash over the canonical JSON encoding; embedded in every output
    /// file so the report can refuse to mix runs. The output directory is
    /// not part of the hash — the same experiment in a different location is
    /// the same experiment.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = String::new();
        let canonical = serde_json::to_string(&canon).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut s = String::with_capacity(16);
        write!(s, "{hash:016x}").expect("hex format");
        s
    }
}

/// A reasonable desk-scale default config (also what `--emit-config` prints).
pub fn example_config() -> RunConfig {
    RunConfig {
        out_dir: "runs/demo".into(),
        seeds: Seeds {
            data: 11,
            models: 22,
            pairs: 33,
            diffusion: 44,
            attack: 55,
        },
        dataset: DatasetSpec {
            kind: SynthKind::Bars,
            n: 640,
            classes: 4,
            channels: 3,
            size: 8,
        },
        dataset_alt: DatasetSpec {
            kind: SynthKind::Blobs,
            n: 256,
            classes: 4,
            channels: 3,
            size: 8,
        },
        shadow: ModelSpec {
            id: "shadow".into(),
            arch: ArchKind::CnnA,
            epochs: 16,
        },
        victims: vec![
            ModelSpec {
                id: "victim-b".into(),
                arch: ArchKind::CnnB,
                epochs: 10,
            },
            ModelSpec {
                id: "victim-c".into(),
                arch: ArchKind::CnnC,
                epochs: 20,
            },
        ],
        // Pairs are collected at a larger budget than the attacks: the
        // projection of a scaled-up adversarial direction saturates toward
        // its sign pattern, which is what transfers.
        pairs: PairSpec {
            epsilon: Epsilon(24.0 / 255.0),
            step_size: Epsilon(6.0 / 255.0),
            iterations: 10,
            random_start: true,
            target_class: None,
        },
        schedule: ScheduleSpec {
            kind: ScheduleKind::Linear,
            timesteps: 2000,
            beta_start: 1e-6,
            beta_end: 0.01,
        },
        train: TrainSpec {
            steps: 8000,
            batch_size: 8,
            learning_rate: 2e-3,
            base_width: 16,
            depth: 1,
            time_dim: 32,
        },
        sampling: SamplingSpec {
            steps: 50,
            schedule: None,
        },
        attack: AttackSpec {
            epsilon: Epsilon(16.0 / 255.0),
            q_max: 1000,
            mode: "untargeted".into(),
            target_class: None,
            inputs: 64,
        },
        defenses: vec![
            DefenseSpec::BitDepthReduce { bits: 3 },
            DefenseSpec::MedianSmooth { window: 3 },
            DefenseSpec::JpegLite { quality: 75 },
            DefenseSpec::PixelDeflect {
                count: 100,
                window: 10,
                seed: 9,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_roundtrips() {
        let cfg = example_config();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.config_hash(), cfg.config_hash());
        assert_eq!(back.attack.epsilon, cfg.attack.epsilon);
    }

    #[test]
    fn epsilon_accepts_fraction_strings() {
        let e: Epsilon = serde_json::from_str("\"16/255\"").unwrap();
        assert!((e.0 - 16.0 / 255.0).abs() < 1e-7);
        let e: Epsilon = serde_json::from_str("0.05").unwrap();
        assert!((e.0 - 0.05).abs() < 1e-7);
        assert!(serde_json::from_str::<Epsilon>("\"x/255\"").is_err());
        assert!(serde_json::from_str::<Epsilon>("\"2\"").is_err());
        assert!(serde_json::from_str::<Epsilon>("0.0").is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = example_config();
        cfg.victims.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = example_config();
        cfg.victims[0].id = "shadow".into();
        assert!(cfg.validate().is_err());

        let mut cfg = example_config();
        cfg.sampling.steps = 5000;
        assert!(cfg.validate().is_err());

        let mut cfg = example_config();
        cfg.attack.mode = "targeted".into();
        assert!(cfg.validate().is_err(), "targeted without target_class");
        cfg.attack.target_class = Some(2);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = example_config();
        let mut b = example_config();
        assert_eq!(a.config_hash(), b.config_hash());
        b.attack.q_max = 999;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
