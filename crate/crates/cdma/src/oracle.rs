//! Hard-label oracles with exact query accounting.
//!
//! The attack path sees classifiers only through [`DecisionOracle`]: a label
//! per query and nothing else. Every completed query increments the ledger by
//! exactly one; a query that would exceed the cap returns
//! [`BudgetExhausted`] without touching the model or the counter.

use crate::classifier::Classifier;
use crate::defenses::DefenseSpec;
use crate::error::ModelError;
use crate::tensor::Tensor;

/// Signal returned when the query cap would be exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExhausted;

/// Exact counter of oracle invocations, capped at `q_max`.
#[derive(Debug, Clone)]
pub struct QueryLedger {
    used: u32,
    q_max: u32,
}

impl QueryLedger {
    pub fn new(q_max: u32) -> Self {
        QueryLedger { used: 0, q_max }
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn q_max(&self) -> u32 {
        self.q_max
    }

    pub fn remaining(&self) -> u32 {
        self.q_max - self.used
    }

    /// Charge one query, or signal exhaustion if the cap is reached.
    pub fn charge(&mut self) -> Result<(), BudgetExhausted> {
        if self.used >= self.q_max {
            return Err(BudgetExhausted);
        }
        self.used += 1;
        Ok(())
    }
}

/// Anything the attack can query for hard labels.
pub trait DecisionOracle {
    /// Classify `x`, consuming one unit of budget.
    fn query(&mut self, x: &Tensor) -> Result<usize, BudgetExhausted>;

    /// Completed queries so far.
    fn queries_used(&self) -> u32;

    /// The query cap.
    fn q_max(&self) -> u32;
}

/// A classifier behind a ledger, optionally with input-transformation
/// defenses applied before classification.
pub struct ClassifierOracle<'a> {
    model: &'a Classifier,
    ledger: QueryLedger,
    defenses: Vec<DefenseSpec>,
}

impl<'a> ClassifierOracle<'a> {
    pub fn new(model: &'a Classifier, q_max: u32) -> Self {
        ClassifierOracle {
            model,
            ledger: QueryLedger::new(q_max),
            defenses: Vec::new(),
        }
    }

    /// Wrap with a defense: queries are transformed before classification,
    /// ledger semantics unchanged.
    pub fn defended(model: &'a Classifier, q_max: u32, defense: DefenseSpec) -> Self {
        ClassifierOracle {
            model,
            ledger: QueryLedger::new(q_max),
            defenses: vec![defense],
        }
    }

    fn classify(&self, x: &Tensor) -> Result<usize, ModelError> {
        if self.defenses.is_empty() {
            return self.model.label(x);
        }
        let mut img = x.clone();
        for d in &self.defenses {
            img = d.apply(&img).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        }
        self.model.label(&img)
    }
}

impl DecisionOracle for ClassifierOracle<'_> {
    fn query(&mut self, x: &Tensor) -> Result<usize, BudgetExhausted> {
        self.ledger.charge()?;
        // Model errors (shape mismatch etc.) are programming errors on the
        // attack side, not budget conditions.
        Ok(self.classify(x).expect("oracle input must be a valid image"))
    }

    fn queries_used(&self) -> u32 {
        self.ledger.used()
    }

    fn q_max(&self) -> u32 {
        self.ledger.q_max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ArchKind, Classifier, ClassifierConfig};

    fn model() -> Classifier {
        Classifier::build(
            ClassifierConfig {
                arch: ArchKind::CnnA,
                channels: 1,
                size: 8,
                classes: 3,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn two_queries_count_two() {
        let m = model();
        let mut oracle = ClassifierOracle::new(&m, 10);
        let x = Tensor::full(&[1, 8, 8], 0.5);
        oracle.query(&x).unwrap();
        oracle.query(&x).unwrap();
        assert_eq!(oracle.queries_used(), 2);
    }

    #[test]
    fn exhausted_ledger_signals_without_counting() {
        let m = model();
        let mut oracle = ClassifierOracle::new(&m, 2);
        let x = Tensor::full(&[1, 8, 8], 0.5);
        assert!(oracle.query(&x).is_ok());
        assert!(oracle.query(&x).is_ok());
        assert_eq!(oracle.query(&x), Err(BudgetExhausted));
        assert_eq!(oracle.queries_used(), 2);
        // Still exhausted on retry; counter never exceeds the cap.
        assert_eq!(oracle.query(&x), Err(BudgetExhausted));
        assert_eq!(oracle.queries_used(), 2);
    }

    #[test]
    fn identity_parameter_defense_preserves_labels() {
        // Bit-depth reduction at b=7 is the identity on 7-bit-grid data, so
        // the defended oracle must agree with the undefended one everywhere.
        let m = model();
        let levels = 127.0f32;
        let mut rng = crate::rng::rng_from(12);
        for _ in 0..50 {
            let img = crate::rng::normal_tensor(&mut rng, &[1, 8, 8])
                .map(|v| ((0.5 + 0.25 * v).clamp(0.0, 1.0) * levels).round() / levels);
            let mut plain = ClassifierOracle::new(&m, 10);
            let mut defended = ClassifierOracle::defended(
                &m,
                10,
                crate::defenses::DefenseSpec::BitDepthReduce { bits: 7 },
            );
            assert_eq!(plain.query(&img).unwrap(), defended.query(&img).unwrap());
        }
    }

    #[test]
    fn oracle_label_matches_soft_argmax() {
        let m = model();
        let mut oracle = ClassifierOracle::new(&m, 100);
        for i in 0..20 {
            let x = Tensor::full(&[1, 8, 8], i as f32 / 20.0);
            let hard = oracle.query(&x).unwrap();
            let soft = m.logits(&x).unwrap();
            assert_eq!(hard, crate::tensor::argmax(&soft));
        }
    }
}
