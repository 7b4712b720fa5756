//! Bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::OptimError;
use crate::tensor::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new(hyper: AdamHyper, params: &ParamStore) -> Self {
        let first = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let second = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            hyper,
            step: 0,
            first,
            second,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One in-place Adam update. Increments `state.step` by exactly 1.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    // Validate everything before mutating anything.
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let p_shape = params.get(name).unwrap().shape().to_vec();
        let g = grads
            .params
            .get(name)
            .ok_or_else(|| OptimError::MissingGradient { name: name.clone() })?;
        if g.shape() != p_shape.as_slice() {
            return Err(OptimError::ShapeMismatch {
                name: name.clone(),
                expected: p_shape,
                got: g.shape().to_vec(),
            });
        }
        let m = state
            .first
            .get(name)
            .ok_or_else(|| OptimError::MissingGradient { name: name.clone() })?;
        if m.shape() != p_shape.as_slice() {
            return Err(OptimError::ShapeMismatch {
                name: name.clone(),
                expected: p_shape,
                got: m.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f32;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powf(t);
    let bias2 = 1.0 - h.beta2.powf(t);

    for name in &names {
        let g = &grads.params[name];
        let m = state.first.get_mut(name).unwrap();
        let v = state.second.get_mut(name).unwrap();
        let p = params.get_mut(name).unwrap();
        let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
        for i in 0..gd.len() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gd[i];
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn grads_of(entries: &[(&str, Tensor)]) -> Gradients {
        Gradients {
            params: entries
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect::<BTreeMap<_, _>>(),
            inputs: BTreeMap::new(),
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[3], 0.5));
        let mut state = AdamState::new(AdamHyper::default(), &params);
        let grads = grads_of(&[("w", Tensor::zeros(&[3]))]);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap(), &Tensor::full(&[3], 0.5));
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut state = AdamState::new(AdamHyper::default(), &params);
        let grads = grads_of(&[("w", Tensor::new(vec![2], vec![2.0, -0.7]).unwrap())]);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let w = params.get("w").unwrap().data();
        let lr = AdamHyper::default().lr;
        assert!((w[0] + lr).abs() < 1e-6 * lr.abs().max(1.0), "w0 = {}", w[0]);
        assert!((w[1] - lr).abs() < 1e-6, "w1 = {}", w[1]);
    }

    #[test]
    fn updates_are_bit_deterministic() {
        let run = || {
            let mut params = ParamStore::new();
            params.insert("w", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
            let mut state = AdamState::new(AdamHyper::default(), &params);
            for i in 1..=5 {
                let grads = grads_of(&[(
                    "w",
                    Tensor::new(vec![3], vec![0.3 * i as f32, -0.1, 0.05]).unwrap(),
                )]);
                adam_step(&mut params, &grads, &mut state).unwrap();
            }
            params
                .get("w")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected_without_mutation() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[3], 1.0));
        let mut state = AdamState::new(AdamHyper::default(), &params);
        let grads = grads_of(&[("w", Tensor::zeros(&[4]))]);
        let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, OptimError::ShapeMismatch { .. }));
        assert_eq!(params.get("w").unwrap(), &Tensor::full(&[3], 1.0));
        assert_eq!(state.step(), 0);
    }
}
