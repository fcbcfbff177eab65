//! AdamW with decoupled weight decay, plus the warmup + cosine-annealing
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::lora::AdapterSet;
use crate::numerics::Tensor;

use super::{TrainConfig, TrainError};

/// Standard LLM-training moment coefficients.
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates per trainable tensor. Moments exist only
/// for adapter tensors; the frozen base never appears here.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl OptimizerState {
    /// Zero moments shaped after the adapter set's trainable tensors.
    pub fn for_adapters(adapters: &AdapterSet) -> Self {
        let moments = adapters
            .named_tensors()
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Moments {
                        m: Tensor::zeros(t.shape()),
                        v: Tensor::zeros(t.shape()),
                    },
                )
            })
            .collect();
        OptimizerState { step: 0, moments }
    }
}

/// One decoupled-weight-decay Adam step with bias correction:
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
/// Parameters without a gradient entry are treated as zero-gradient.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);

    for (name, theta) in params.iter_mut() {
        let zero;
        let grad = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(theta.shape());
                &zero
            }
        };
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
        let entry = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments {
                m: Tensor::zeros(theta.shape()),
                v: Tensor::zeros(theta.shape()),
            });
        let n = theta.numel();
        assert_eq!(grad.numel(), n, "gradient shape mismatch for {name}");
        for i in 0..n {
            let g = grad.data()[i];
            let m = BETA1 * entry.m.data()[i] + (1.0 - BETA1) * g;
            let v = BETA2 * entry.v.data()[i] + (1.0 - BETA2) * g * g;
            entry.m.data_mut()[i] = m;
            entry.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let t = theta.data()[i];
            theta.data_mut()[i] = t - lr * m_hat / (v_hat.sqrt() + EPSILON) - lr * weight_decay * t;
        }
    }
    Ok(())
}

/// Learning rate at `step`: linear warmup from 0 over `warmup_steps`, then
/// cosine decay to 0 at `max_iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let max = cfg.max_iters;
    let warmup = cfg.warmup_steps;
    if max == 0 {
        return 0.0;
    }
    if warmup > 0 && step <= warmup {
        return cfg.learning_rate * step as f64 / warmup as f64;
    }
    if step >= max {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (max - warmup) as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max_iters: usize) -> TrainConfig {
        TrainConfig {
            max_iters,
            ..TrainConfig::paper_defaults(max_iters)
        }
    }

    fn scalar_params(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(
            "w".to_string(),
            Tensor::from_vec(&[1], vec![value]).unwrap(),
        )])
    }

    fn scalar_grads(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(
            "w".to_string(),
            Tensor::from_vec(&[1], vec![value]).unwrap(),
        )])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = scalar_params(1.25);
        let mut state = OptimizerState { step: 0, moments: BTreeMap::new() };
        adamw_step(&mut params, &scalar_grads(0.0), &mut state, 0.1, 0.0).unwrap();
        assert_eq!(params["w"].data()[0], 1.25);
    }

    #[test]
    fn pure_decay_term() {
        // g = 0, wd = 0.01, lr = 0.1, theta = 1.0 -> 0.999
        let mut params = scalar_params(1.0);
        let mut state = OptimizerState { step: 0, moments: BTreeMap::new() };
        adamw_step(&mut params, &scalar_grads(0.0), &mut state, 0.1, 0.01).unwrap();
        assert!((params["w"].data()[0] - 0.999).abs() < 1e-15);
    }

    /// Independent scalar reference of one bias-corrected AdamW step.
    fn adamw_scalar_reference(theta: f64, g: f64, lr: f64, wd: f64, step: u64) -> f64 {
        assert_eq!(step, 1, "reference covers the first step");
        let m = (1.0 - BETA1) * g;
        let v = (1.0 - BETA2) * g * g;
        let m_hat = m / (1.0 - BETA1);
        let v_hat = v / (1.0 - BETA2);
        theta - lr * m_hat / (v_hat.sqrt() + EPSILON) - lr * wd * theta
    }

    #[test]
    fn first_step_matches_scalar_reference() {
        let mut params = scalar_params(0.3);
        let mut state = OptimizerState { step: 0, moments: BTreeMap::new() };
        adamw_step(&mut params, &scalar_grads(0.5), &mut state, 2e-4, 0.01).unwrap();
        let want = adamw_scalar_reference(0.3, 0.5, 2e-4, 0.01, 1);
        assert!(
            (params["w"].data()[0] - want).abs() < 1e-10,
            "{} vs {want}",
            params["w"].data()[0]
        );
    }

    #[test]
    fn decay_contracts_toward_zero() {
        let mut params = scalar_params(-2.0);
        let mut state = OptimizerState { step: 0, moments: BTreeMap::new() };
        let mut last = 2.0;
        for _ in 0..50 {
            adamw_step(&mut params, &scalar_grads(0.0), &mut state, 0.05, 0.1).unwrap();
            let now = params["w"].data()[0].abs();
            assert!(now < last, "|theta| must strictly decrease");
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = scalar_params(1.0);
        let mut state = OptimizerState { step: 0, moments: BTreeMap::new() };
        let err = adamw_step(&mut params, &scalar_grads(f64::NAN), &mut state, 0.1, 0.0)
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { .. }));
    }

    #[test]
    fn schedule_pins() {
        let c = cfg(10_000);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 2e-4);
        assert_eq!(lr_at(10_000, &c), 0.0);
        // Cosine midpoint is half amplitude.
        let mid = 100 + (10_000 - 100) / 2;
        assert!((lr_at(mid, &c) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_nonincreasing_after_warmup() {
        let c = cfg(500);
        // Continuity at the warmup boundary.
        let before = lr_at(99, &c);
        let at = lr_at(100, &c);
        let after = lr_at(101, &c);
        assert!(before < at);
        assert!((at - c.learning_rate).abs() < 1e-18);
        assert!(after < at);
        let mut last = at;
        for step in 101..=500 {
            let lr = lr_at(step, &c);
            assert!(lr <= last + 1e-18, "step {step}: {lr} > {last}");
            last = lr;
        }
        assert_eq!(lr_at(500, &c), 0.0);
        assert_eq!(lr_at(501, &c), 0.0);
    }

    #[test]
    fn degenerate_zero_iters() {
        let c = cfg(0);
        assert_eq!(lr_at(0, &c), 0.0);
    }
}
