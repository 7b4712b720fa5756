//! The conditional-sampling black-box attack, query accounting, and metrics.
//!
//! One attack loop: sample a candidate conditioned on the clean image, project
//! it into the L-inf ball and `[0,1]`, spend one oracle query, stop on success
//! or when the budget runs out. Every loop iteration draws from an independent
//! noise stream derived from `(seed, iteration)`, so reruns are bit-identical
//! and retries are diverse.

use rayon::prelude::*;

use crate::classifier::Classifier;
use crate::data::LabeledDataset;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, DiffusionConfig};
use crate::error::AttackError;
use crate::oracle::{ClassifierOracle, DecisionOracle};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Untargeted attacks succeed on any label change; targeted attacks must hit
/// the chosen class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted(usize),
}

impl AttackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted(_) => "targeted",
        }
    }
}

/// Budget and seeding for one attack run.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// L-inf budget in [0,1].
    pub epsilon: f32,
    /// Query cap (>= 1).
    pub q_max: u32,
    pub mode: AttackMode,
    /// Base seed; per-input and per-iteration streams derive from it.
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self, true_label: usize) -> Result<(), AttackError> {
        if self.q_max < 1 {
            return Err(AttackError::InvalidConfig("q_max must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon {} out of (0, 1]",
                self.epsilon
            )));
        }
        if let AttackMode::Targeted(t) = self.mode {
            if t == true_label {
                return Err(AttackError::TargetIsTrueLabel(t));
            }
        }
        Ok(())
    }
}

/// Result of attacking one input.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub success: bool,
    pub queries_used: u32,
    pub adversarial: Option<Tensor>,
    pub victim_label: Option<usize>,
}

/// One attacked input with its provenance.
#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub input_id: usize,
    pub true_label: usize,
    pub outcome: AttackOutcome,
}

/// Clip `raw - origin` into the epsilon ball, then the result into `[0,1]`.
///
/// Feasible points pass through unchanged.
pub fn project_linf(raw: &Tensor, origin: &Tensor, epsilon: f32) -> Tensor {
    origin
        .zip_map(raw, |o, r| o + (r - o).clamp(-epsilon, epsilon))
        .clamped(0.0, 1.0)
}

/// Attack one input: sample-project-query until the oracle's label meets the
/// success criterion or the budget runs out.
pub fn cdma_attack<O: DecisionOracle>(
    denoiser: &Denoiser,
    diffusion: &DiffusionConfig,
    oracle: &mut O,
    x: &Tensor,
    true_label: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate(true_label)?;
    let mut iteration: u64 = 0;
    loop {
        let candidate_seed = derive_seed(config.seed, iteration);
        let raw = sample(denoiser, x, diffusion, candidate_seed)?;
        let candidate = project_linf(&raw, x, config.epsilon);
        match oracle.query(&candidate) {
            Err(crate::oracle::BudgetExhausted) => {
                return Ok(AttackOutcome {
                    success: false,
                    queries_used: oracle.q_max(),
                    adversarial: None,
                    victim_label: None,
                });
            }
            Ok(label) => {
                let success = match config.mode {
                    AttackMode::Untargeted => label != true_label,
                    AttackMode::Targeted(t) => label == t,
                };
                if success {
                    return Ok(AttackOutcome {
                        success: true,
                        queries_used: oracle.queries_used(),
                        adversarial: Some(candidate),
                        victim_label: Some(label),
                    });
                }
            }
        }
        iteration += 1;
    }
}

/// Attack a set of inputs in parallel; each input owns a private oracle and a
/// seed stream derived from `(config.seed, input index)`.
pub fn attack_dataset(
    denoiser: &Denoiser,
    diffusion: &DiffusionConfig,
    victim: &Classifier,
    dataset: &LabeledDataset,
    indices: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackRecord>, AttackError> {
    indices
        .par_iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let per_input = AttackConfig {
                seed: derive_seed(config.seed, idx as u64),
                ..config.clone()
            };
            let mut oracle = ClassifierOracle::new(victim, config.q_max);
            let outcome = cdma_attack(
                denoiser,
                diffusion,
                &mut oracle,
                &dataset.images[idx],
                dataset.labels[idx],
                &per_input,
            )?;
            debug_assert_eq!(
                outcome.queries_used,
                oracle.queries_used(),
                "ledger drift at input {pos}"
            );
            Ok(AttackRecord {
                input_id: idx,
                true_label: dataset.labels[idx],
                outcome,
            })
        })
        .collect()
}

/// Aggregate metrics: success rate over all attempts, mean and lower-median
/// query counts over successful attempts only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub attempts: usize,
    pub successes: usize,
    /// Percent, `successes / attempts * 100`.
    pub asr: f64,
    /// Mean queries over successes; `None` when there are no successes.
    pub avg_queries: Option<f64>,
    /// Lower median of the success query counts; `None` without successes.
    pub median_queries: Option<u32>,
}

impl MetricsReport {
    pub fn format_avg(&self) -> String {
        self.avg_queries
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".to_string())
    }

    pub fn format_median(&self) -> String {
        self.median_queries
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string())
    }
}

/// The success/query pair that metric aggregation needs; attack outcomes and
/// parsed CSV rows both reduce to this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackQueries {
    pub success: bool,
    pub queries: u32,
}

/// Compute ASR / average / median queries from per-input outcomes.
pub fn compute_metrics(outcomes: &[AttackOutcome]) -> Result<MetricsReport, AttackError> {
    let pairs: Vec<AttackQueries> = outcomes
        .iter()
        .map(|o| AttackQueries {
            success: o.success,
            queries: o.queries_used,
        })
        .collect();
    compute_metrics_from(&pairs)
}

/// Compute metrics from bare success/query pairs.
pub fn compute_metrics_from(outcomes: &[AttackQueries]) -> Result<MetricsReport, AttackError> {
    if outcomes.is_empty() {
        return Err(AttackError::EmptyOutcomes);
    }
    let attempts = outcomes.len();
    let mut success_queries: Vec<u32> = outcomes
        .iter()
        .filter(|o| o.success)
        .map(|o| o.queries)
        .collect();
    success_queries.sort_unstable();
    let successes = success_queries.len();
    let asr = successes as f64 / attempts as f64 * 100.0;
    let (avg, median) = if successes == 0 {
        (None, None)
    } else {
        let sum: u64 = success_queries.iter().map(|&q| q as u64).sum();
        let avg = sum as f64 / successes as f64;
        // Lower median: element at index (n-1)/2 of the sorted multiset.
        let median = success_queries[(successes - 1) / 2];
        (Some(avg), Some(median))
    };
    Ok(MetricsReport {
        attempts,
        successes,
        asr,
        avg_queries: avg,
        median_queries: median,
    })
}

pub fn metrics_of_records(records: &[AttackRecord]) -> Result<MetricsReport, AttackError> {
    let outcomes: Vec<AttackOutcome> = records.iter().map(|r| r.outcome.clone()).collect();
    compute_metrics(&outcomes)
}

/// Evaluate stored successful AEs against another victim, one query each.
/// Returns the fraction (percent) that also fool the second victim, plus the
/// counts behind it.
pub fn transfer_eval(
    records: &[AttackRecord],
    target: &Classifier,
) -> Result<(f64, usize, usize), AttackError> {
    let transferable: Vec<(&Tensor, usize)> = records
        .iter()
        .filter(|r| r.outcome.success)
        .filter_map(|r| r.outcome.adversarial.as_ref().map(|ae| (ae, r.true_label)))
        .collect();
    if transferable.is_empty() {
        return Ok((0.0, 0, 0));
    }
    let fooled: usize = transferable
        .par_iter()
        .map(|(ae, y)| {
            let mut oracle = ClassifierOracle::new(target, 1);
            usize::from(oracle.query(ae).map(|label| label != *y).unwrap_or(false))
        })
        .sum();
    let total = transferable.len();
    Ok((fooled as f64 / total as f64 * 100.0, fooled, total))
}

/// Per-victim result of the model-independent protocol.
#[derive(Debug, Clone)]
pub struct VictimAsr {
    pub victim_id: String,
    pub asr: f64,
    pub attempts: usize,
    pub successes: usize,
    /// Per input: (input id, victim label, fooled).
    pub per_input: Vec<(usize, usize, bool)>,
}

/// Model-independent attack: sample exactly one candidate per input without
/// any feedback, then verify that fixed candidate against every victim with
/// one query each.
pub fn model_independent_eval(
    denoiser: &Denoiser,
    diffusion: &DiffusionConfig,
    victims: &[(String, &Classifier)],
    dataset: &LabeledDataset,
    indices: &[usize],
    epsilon: f32,
    seed: u64,
) -> Result<Vec<VictimAsr>, AttackError> {
    if victims.is_empty() {
        return Err(AttackError::InvalidConfig("need at least one victim".into()));
    }
    // One AE per input: iteration stream 0 of the per-input seed.
    let candidates: Vec<(usize, Tensor)> = indices
        .par_iter()
        .map(|&idx| {
            let per_input = derive_seed(seed, idx as u64);
            let raw = sample(denoiser, &dataset.images[idx], diffusion, derive_seed(per_input, 0))?;
            Ok((idx, project_linf(&raw, &dataset.images[idx], epsilon)))
        })
        .collect::<Result<_, AttackError>>()?;

    victims
        .iter()
        .map(|(id, victim)| {
            let per_input: Vec<(usize, usize, bool)> = candidates
                .par_iter()
                .map(|(idx, ae)| {
                    let mut oracle = ClassifierOracle::new(victim, 1);
                    let label = oracle.query(ae).expect("fresh single-query ledger");
                    (*idx, label, label != dataset.labels[*idx])
                })
                .collect();
            let successes = per_input.iter().filter(|(_, _, fooled)| *fooled).count();
            Ok(VictimAsr {
                victim_id: id.clone(),
                asr: successes as f64 / per_input.len() as f64 * 100.0,
                attempts: per_input.len(),
                successes,
                per_input,
            })
        })
        .collect()
}

/// Post-hoc verification of attack records, outside any ledger: successful
/// outcomes must re-classify to their recorded label and satisfy the budget
/// and range invariants.
pub fn verify_records(
    records: &[AttackRecord],
    dataset: &LabeledDataset,
    victim: &Classifier,
    epsilon: f32,
) -> Result<(), AttackError> {
    for r in records {
        if !r.outcome.success {
            continue;
        }
        let ae = r.outcome.adversarial.as_ref().ok_or_else(|| {
            AttackError::InvalidConfig(format!("record {} succeeded without an AE", r.input_id))
        })?;
        let clean = &dataset.images[r.input_id];
        let dist = clean.linf_dist(ae);
        if dist > epsilon + 1e-6 {
            return Err(AttackError::InvalidConfig(format!(
                "record {}: L-inf {dist} exceeds budget {epsilon}",
                r.input_id
            )));
        }
        if !ae.in_unit_range() {
            return Err(AttackError::InvalidConfig(format!(
                "record {}: AE outside [0,1]",
                r.input_id
            )));
        }
        let label = victim.label(ae)?;
        if Some(label) != r.outcome.victim_label {
            return Err(AttackError::InvalidConfig(format!(
                "record {}: victim label {label} != recorded {:?}",
                r.input_id, r.outcome.victim_label
            )));
        }
        if label == r.true_label {
            return Err(AttackError::InvalidConfig(format!(
                "record {}: recorded success does not fool the victim",
                r.input_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::oracle::BudgetExhausted;
    use crate::schedule::{NoiseSchedule, ScheduleKind};

    /// Scripted oracle for accounting tests: returns `wrong_label` on the
    /// k-th query (1-based) and `true_label` otherwise, counting every
    /// completed invocation independently of the ledger arithmetic.
    struct ScriptedOracle {
        true_label: usize,
        wrong_label: usize,
        succeed_at: Option<u32>,
        calls: u32,
        q_max: u32,
    }

    impl ScriptedOracle {
        fn new(succeed_at: Option<u32>, q_max: u32) -> Self {
            ScriptedOracle {
                true_label: 0,
                wrong_label: 1,
                succeed_at,
                calls: 0,
                q_max,
            }
        }
    }

    impl DecisionOracle for ScriptedOracle {
        fn query(&mut self, _x: &Tensor) -> Result<usize, BudgetExhausted> {
            if self.calls >= self.q_max {
                return Err(BudgetExhausted);
            }
            self.calls += 1;
            if self.succeed_at == Some(self.calls) {
                Ok(self.wrong_label)
            } else {
                Ok(self.true_label)
            }
        }

        fn queries_used(&self) -> u32 {
            self.calls
        }

        fn q_max(&self) -> u32 {
            self.q_max
        }
    }

    fn tiny_setup() -> (Denoiser, DiffusionConfig) {
        let den = Denoiser::build(
            DenoiserConfig {
                channels: 1,
                size: 4,
                base_width: 4,
                depth: 1,
                time_dim: 8,
            },
            3,
        )
        .unwrap();
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let cfg = DiffusionConfig::new(sched, 5).unwrap();
        (den, cfg)
    }

    fn atk(q_max: u32) -> AttackConfig {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            q_max,
            mode: AttackMode::Untargeted,
            seed: 1,
        }
    }

    #[test]
    fn projection_contract_holds() {
        let origin = Tensor::full(&[1, 2, 2], 0.5);
        let raw = Tensor::full(&[1, 2, 2], 1.0);
        let eps = 16.0 / 255.0;
        let got = project_linf(&raw, &origin, eps);
        for &v in got.data() {
            assert!((v - (0.5 + eps)).abs() < 1e-7);
        }
        // Feasible points pass through.
        let feasible = Tensor::full(&[1, 2, 2], 0.52);
        assert_eq!(project_linf(&feasible, &origin, eps), feasible);
    }

    #[test]
    fn constant_wrong_oracle_succeeds_first_query() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let mut oracle = ScriptedOracle::new(Some(1), 1000);
        let out = cdma_attack(&den, &diff, &mut oracle, &x, 0, &atk(1000)).unwrap();
        assert!(out.success);
        assert_eq!(out.queries_used, 1);
        assert_eq!(oracle.calls, 1);
        assert_eq!(out.victim_label, Some(1));
        let ae = out.adversarial.unwrap();
        assert!(x.linf_dist(&ae) <= 16.0 / 255.0 + 1e-6);
        assert!(ae.in_unit_range());
    }

    #[test]
    fn impossible_attack_exhausts_budget_exactly() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let mut oracle = ScriptedOracle::new(None, 17);
        let out = cdma_attack(&den, &diff, &mut oracle, &x, 0, &atk(17)).unwrap();
        assert!(!out.success);
        assert_eq!(out.queries_used, 17);
        assert_eq!(oracle.calls, 17);
    }

    #[test]
    fn success_at_k_uses_exactly_k_queries() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        for k in [1u32, 7, 50] {
            let mut oracle = ScriptedOracle::new(Some(k), 50);
            let out = cdma_attack(&den, &diff, &mut oracle, &x, 0, &atk(50)).unwrap();
            assert!(out.success, "k={k}");
            assert_eq!(out.queries_used, k);
            assert_eq!(oracle.calls, k);
        }
    }

    #[test]
    fn targeted_mode_checks_target_label() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        // Oracle flips to label 1 at query 3; target is 1.
        let mut oracle = ScriptedOracle::new(Some(3), 10);
        let cfg = AttackConfig {
            mode: AttackMode::Targeted(1),
            ..atk(10)
        };
        let out = cdma_attack(&den, &diff, &mut oracle, &x, 0, &cfg).unwrap();
        assert!(out.success);
        assert_eq!(out.queries_used, 3);

        // Target equal to the true label is rejected up front.
        let bad = AttackConfig {
            mode: AttackMode::Targeted(0),
            ..atk(10)
        };
        let mut oracle = ScriptedOracle::new(Some(1), 10);
        assert!(matches!(
            cdma_attack(&den, &diff, &mut oracle, &x, 0, &bad),
            Err(AttackError::TargetIsTrueLabel(0))
        ));
        assert_eq!(oracle.calls, 0);
    }

    #[test]
    fn attack_is_bit_reproducible() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let run = || {
            let mut oracle = ScriptedOracle::new(Some(4), 10);
            cdma_attack(&den, &diff, &mut oracle, &x, 0, &atk(10)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.queries_used, b.queries_used);
        assert_eq!(a.adversarial.unwrap(), b.adversarial.unwrap());
    }

    #[test]
    fn candidates_vary_across_iterations() {
        // Retry diversity: iterations 0 and 1 must produce different
        // candidates for the same input.
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let s0 = sample(&den, &x, &diff, derive_seed(1, 0)).unwrap();
        let s1 = sample(&den, &x, &diff, derive_seed(1, 1)).unwrap();
        assert!(s0.linf_dist(&s1) > 0.0);
    }

    #[test]
    fn metrics_match_hand_computed_fixtures() {
        let mk = |success: bool, q: u32| AttackOutcome {
            success,
            queries_used: q,
            adversarial: None,
            victim_label: None,
        };
        // Successes q = [1,1,3] of 3 attempts.
        let m = compute_metrics(&[mk(true, 1), mk(true, 1), mk(true, 3)]).unwrap();
        assert_eq!(m.asr, 100.0);
        assert_eq!(m.avg_queries, Some(5.0 / 3.0));
        assert_eq!(m.median_queries, Some(1));

        // 1 success (q=7) of 4 attempts.
        let m = compute_metrics(&[mk(false, 10), mk(true, 7), mk(false, 10), mk(false, 10)])
            .unwrap();
        assert_eq!(m.asr, 25.0);
        assert_eq!(m.avg_queries, Some(7.0));
        assert_eq!(m.median_queries, Some(7));

        // Even count: lower median.
        let m = compute_metrics(&[mk(true, 1), mk(true, 3)]).unwrap();
        assert_eq!(m.median_queries, Some(1));

        // No successes.
        let m = compute_metrics(&[mk(false, 5), mk(false, 5)]).unwrap();
        assert_eq!(m.asr, 0.0);
        assert_eq!(m.avg_queries, None);
        assert_eq!(m.median_queries, None);
        assert_eq!(m.format_avg(), "-");

        assert!(matches!(
            compute_metrics(&[]),
            Err(AttackError::EmptyOutcomes)
        ));
    }

    #[test]
    fn asr_is_monotone_in_q_max() {
        let (den, diff) = tiny_setup();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let mut prev_successes = 0usize;
        for q_max in [1u32, 3, 5, 9] {
            let mut successes = 0usize;
            for (i, k) in [2u32, 4, 6, 100].iter().enumerate() {
                let cfg = AttackConfig {
                    seed: i as u64,
                    ..atk(q_max)
                };
                let mut oracle = ScriptedOracle::new(Some(*k), q_max);
                let out = cdma_attack(&den, &diff, &mut oracle, &x, 0, &cfg).unwrap();
                successes += usize::from(out.success);
            }
            assert!(successes >= prev_successes, "q_max {q_max}");
            prev_successes = successes;
        }
    }
}
