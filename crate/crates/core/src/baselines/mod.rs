//! Comparison methods sharing the model and rollout machinery.

pub mod fwp;
pub mod mfpd;
pub mod shield;

pub use fwp::{fwp_gradient, unconstrained_actor_train, FwpConfig};
pub use mfpd::{dual_update, MfpdConfig, MfpdMetrics, MfpdState, MfpdTrainer};
pub use shield::{shield_project, Shield, ShieldConfig, ShieldedPolicy};
