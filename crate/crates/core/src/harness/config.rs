//! Experiment configuration file (TOML).
//!
//! `delta` and `gamma` of the trainer are derived from `threshold` and the
//! `[env]` section; repeating them under `[trainer]` is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FwpConfig, MfpdConfig, ShieldConfig};
use crate::ccac::{TrainerConfig, UpdateRule};
use crate::env::{CarFollowing, DynamicsParams, InitSpec, RewardParams, TruncatedNormal};
use crate::error::{Error, Result};
use crate::harness::eval::EvalSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ccac,
    Fwp,
    Mfpd,
    Shielding,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ccac => "ccac",
            Method::Fwp => "fwp",
            Method::Mfpd => "mfpd",
            Method::Shielding => "shielding",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub v_e_mps: (f64, f64),
    pub v_f_mps: (f64, f64),
    pub eps_m: (f64, f64),
}

impl Default for InitSection {
    fn default() -> Self {
        let d = InitSpec::default();
        Self {
            v_e_mps: d.v_e,
            v_f_mps: d.v_f,
            eps_m: d.eps,
        }
    }
}

impl From<InitSection> for InitSpec {
    fn from(s: InitSection) -> Self {
        InitSpec {
            v_e: s.v_e_mps,
            v_f: s.v_f_mps,
            eps: s.eps_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub time_step_s: f64,
    pub gamma: f64,
    pub gap_min_m: f64,
    pub speed_reward_per_mps: f64,
    pub gap_penalty_per_m: f64,
    pub action_min_mps2: f64,
    pub action_max_mps2: f64,
    pub noise: TruncatedNormal,
    pub init: InitSection,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = DynamicsParams::default();
        let r = RewardParams::default();
        Self {
            time_step_s: d.time_step,
            gamma: r.gamma,
            gap_min_m: r.gap_min,
            speed_reward_per_mps: r.w_v,
            gap_penalty_per_m: r.w_eps,
            action_min_mps2: d.action_bounds.0,
            action_max_mps2: d.action_bounds.1,
            noise: d.noise,
            init: InitSection::default(),
        }
    }
}

impl EnvSection {
    pub fn system(&self) -> Result<CarFollowing> {
        CarFollowing::new(
            DynamicsParams::car_following(self.time_step_s, self.noise, (self.action_min_mps2, self.action_max_mps2)),
            RewardParams {
                w_v: self.speed_reward_per_mps,
                w_eps: self.gap_penalty_per_m,
                gamma: self.gamma,
                gap_min: self.gap_min_m,
            },
        )
    }

    pub fn init(&self) -> Result<InitSpec> {
        let init: InitSpec = self.init.into();
        init.validate()?;
        Ok(init)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldSection {
    /// Risk level of the projection; defaults to `1 - threshold`.
    pub delta: Option<f64>,
    /// Steps over which the risk is split; defaults to the trainer horizon.
    pub horizon: Option<usize>,
    pub grid_step: f64,
}

impl Default for ShieldSection {
    fn default() -> Self {
        Self {
            delta: None,
            horizon: None,
            grid_step: ShieldConfig::default().grid_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Required joint safe probability `1 - delta`.
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Iterations between learning-curve evaluations; 0 disables them.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_curve_episodes")]
    pub curve_episodes: usize,
    /// Stop a seed early once the convergence check passes.
    #[serde(default)]
    pub stop_on_convergence: bool,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub fwp: FwpConfig,
    #[serde(default)]
    pub mfpd: MfpdConfig,
    #[serde(default)]
    pub shield: ShieldSection,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_curve_episodes() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(t)) = table.get("trainer") {
            for key in ["delta", "gamma"] {
                if t.contains_key(key) {
                    return Err(Error::Config(format!(
                        "trainer.{key} is derived (from threshold / env.gamma); remove it"
                    )));
                }
            }
            if t.contains_key("update_rule") {
                return Err(Error::Config("trainer.update_rule is set by `method`; remove it".into()));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.trainer.delta = 1.0 - cfg.threshold;
        cfg.trainer.gamma = cfg.env.gamma;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Reloads a config written by [`ExperimentConfig::to_toml_string`],
    /// which carries the derived keys.
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0,1), got {}", self.threshold)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds contains duplicates".into()));
        }
        if self.eval_every > 0 && self.curve_episodes == 0 {
            return Err(Error::Config("curve_episodes must be >= 1 when eval_every > 0".into()));
        }
        self.env.system()?;
        self.env.init()?;
        self.trainer_config().validate()?;
        self.fwp.validate()?;
        self.mfpd.validate()?;
        if self.method == Method::Shielding {
            self.shield_config().validate()?;
        }
        Ok(())
    }

    /// Trainer settings with the actor rule implied by `method`.
    pub fn trainer_config(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        t.delta = 1.0 - self.threshold;
        t.gamma = self.env.gamma;
        t.update_rule = match self.method {
            Method::Ccac | Method::Mfpd => UpdateRule::Proxy,
            Method::Fwp => UpdateRule::FixedWeight { weight: self.fwp.weight },
            Method::Shielding => UpdateRule::FixedWeight { weight: 0.0 },
        };
        t
    }

    pub fn shield_config(&self) -> ShieldConfig {
        ShieldConfig {
            delta: self.shield.delta.unwrap_or(1.0 - self.threshold),
            horizon: self.shield.horizon.unwrap_or(self.trainer.horizon),
            grid_step: self.shield.grid_step,
        }
    }
}
