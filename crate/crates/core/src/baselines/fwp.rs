//! Fixed-weight penalty: ascend `J_r - w J_c` with a constant `w`.

use serde::{Deserialize, Serialize};

use crate::ccac::{penalized_gradient, BpttGrads, Trainer, TrainerConfig, TrainerState, UpdateRule};
use crate::env::{InitSpec, System};
use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwpConfig {
    pub weight: f64,
}

impl Default for FwpConfig {
    fn default() -> Self {
        Self { weight: 20.0 }
    }
}

impl FwpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("fwp weight must be finite and >= 0, got {}", self.weight)));
        }
        Ok(())
    }

    /// `base` with the actor update replaced by the fixed-weight rule.
    pub fn trainer_config(&self, base: &TrainerConfig) -> TrainerConfig {
        TrainerConfig {
            update_rule: UpdateRule::FixedWeight { weight: self.weight },
            ..base.clone()
        }
    }
}

/// `grad J_r - weight * grad J_c`, with no switching and no schedule.
pub fn fwp_gradient(g: &BpttGrads, cfg: &FwpConfig) -> ParamVector {
    penalized_gradient(g, cfg.weight)
}

/// Reward-only actor (weight 0) trained for `iters` iterations.
pub fn unconstrained_actor_train<S: System>(
    base: &TrainerConfig,
    sys: S,
    init: InitSpec,
    seed: u64,
    iters: usize,
) -> Result<(Trainer<S>, TrainerState)> {
    let cfg = FwpConfig { weight: 0.0 }.trainer_config(base);
    let trainer = Trainer::new(cfg, sys, init)?;
    let mut state = trainer.initial_state(seed)?;
    for _ in 0..iters {
        state = trainer.train_iteration(&state)?;
    }
    Ok((trainer, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccac::proxy_gradient;

    fn grads() -> BpttGrads {
        BpttGrads {
            grad_jr: ParamVector(vec![1.0, -2.0, 0.5, 3.0]),
            grad_jc: ParamVector(vec![0.25, 1.5, -1.0, 0.0]),
        }
    }

    #[test]
    fn zero_weight_is_reward_gradient() {
        let g = grads();
        assert_eq!(fwp_gradient(&g, &FwpConfig { weight: 0.0 }), g.grad_jr);
    }

    #[test]
    fn equal_gradients_scale_by_one_minus_weight() {
        let g = BpttGrads {
            grad_jr: ParamVector(vec![1.0, -2.0, 0.5]),
            grad_jc: ParamVector(vec![1.0, -2.0, 0.5]),
        };
        let d = fwp_gradient(&g, &FwpConfig { weight: 20.0 });
        assert_eq!(d.0, vec![-19.0, 38.0, -9.5]);
    }

    #[test]
    fn matches_penalty_branch_when_coefficient_is_forced() {
        // b_k (1 - delta - p) = 80 * 0.25 = 20 with normalisation switched off
        let g = grads();
        let cfg = TrainerConfig {
            delta: 0.25,
            normalize_penalty: false,
            ..TrainerConfig::default()
        };
        let w = 20.0;
        let step = proxy_gradient(&g, 0.5, 4.0 * w, &cfg);
        assert_eq!(step.coefficient, w);
        let fwp = fwp_gradient(&g, &FwpConfig { weight: w });
        for (a, b) in step.direction.iter().zip(fwp.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_negative_weight() {
        assert!(FwpConfig { weight: -1.0 }.validate().is_err());
        assert!(FwpConfig { weight: f64::NAN }.validate().is_err());
    }

    #[test]
    fn trainer_config_swaps_only_the_rule() {
        let base = TrainerConfig::default();
        let cfg = FwpConfig { weight: 10.0 }.trainer_config(&base);
        assert_eq!(cfg.update_rule, UpdateRule::FixedWeight { weight: 10.0 });
        assert_eq!(cfg.trajectories, base.trajectories);
        assert_eq!(cfg.delta, base.delta);
    }
}
