//! Stochastic car-following system.
//!
//! The state is `[v_e, v_f, eps]` (ego speed, front-car speed, gap). One step
//! of length `T` is the linear map
//!
//! ```text
//! s' = A s + B a + D xi,   A = [[1,0,0],[0,1,0],[-T,T,1]],  B = [T,0,0],  D = [0,0,T]
//! ```
//!
//! with `xi` a standard normal truncated to `(-5, 5)`. The state is safe while
//! `h(s) = gap_min - eps < 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub v_e: f64,
    pub v_f: f64,
    pub eps: f64,
}

impl State {
    pub const fn new(v_e: f64, v_f: f64, eps: f64) -> Self {
        Self { v_e, v_f, eps }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.v_e, self.v_f, self.eps]
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.v_e.is_finite() && self.v_f.is_finite() && self.eps.is_finite()
    }
}

/// Ego acceleration in m/s².
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Action(pub f64);

/// Standard normal conditioned on `(lo, hi)`, shifted and scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for TruncatedNormal {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            lo: -5.0,
            hi: 5.0,
        }
    }
}

impl TruncatedNormal {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !(self.std > 0.0) {
            return Err(Error::Config(format!(
                "noise needs lo < hi and std > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Rejection sampling from the untruncated normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = self.mean + self.std * z;
            if x > self.lo && x < self.hi {
                return x;
            }
        }
    }

    /// Density on the support (zero outside).
    pub fn pdf(&self, x: f64) -> f64 {
        if x <= self.lo || x >= self.hi {
            return 0.0;
        }
        let z = (x - self.mean) / self.std;
        let mass = std_normal_cdf((self.hi - self.mean) / self.std)
            - std_normal_cdf((self.lo - self.mean) / self.std);
        (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * self.std * mass)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let f_lo = std_normal_cdf((self.lo - self.mean) / self.std);
        let f_hi = std_normal_cdf((self.hi - self.mean) / self.std);
        (std_normal_cdf((x - self.mean) / self.std) - f_lo) / (f_hi - f_lo)
    }

    pub fn variance(&self) -> f64 {
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let z = std_normal_cdf(b) - std_normal_cdf(a);
        let m = (phi(a) - phi(b)) / z;
        self.std * self.std * (1.0 + (a * phi(a) - b * phi(b)) / z - m * m)
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Linear dynamics `s' = A s + B a + D xi` with action and noise bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    pub time_step: f64,
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub d: [f64; 3],
    pub noise: TruncatedNormal,
    pub action_bounds: (f64, f64),
}

impl DynamicsParams {
    pub fn car_following(time_step: f64, noise: TruncatedNormal, action_bounds: (f64, f64)) -> Self {
        let t = time_step;
        Self {
            time_step: t,
            a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-t, t, 1.0]],
            b: [t, 0.0, 0.0],
            d: [0.0, 0.0, t],
            noise,
            action_bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.time_step > 0.0) {
            return Err(Error::Config("time step must be > 0".into()));
        }
        if !(self.action_bounds.0 < self.action_bounds.1) {
            return Err(Error::Config("action bounds need lo < hi".into()));
        }
        Ok(())
    }
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self::car_following(0.1, TruncatedNormal::default(), (-4.0, 3.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    pub w_v: f64,
    pub w_eps: f64,
    pub gamma: f64,
    pub gap_min: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            w_v: 0.2,
            w_eps: 0.05,
            gamma: 0.98,
            gap_min: 2.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.gap_min > 0.0) {
            return Err(Error::Config("gap_min must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-component uniform ranges for the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub v_e: (f64, f64),
    pub v_f: (f64, f64),
    pub eps: (f64, f64),
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            v_e: (3.0, 7.0),
            v_f: (5.0, 7.0),
            eps: (3.0, 9.0),
        }
    }
}

impl InitSpec {
    pub fn point(s: State) -> Self {
        Self {
            v_e: (s.v_e, s.v_e),
            v_f: (s.v_f, s.v_f),
            eps: (s.eps, s.eps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("v_e", self.v_e), ("v_f", self.v_f), ("eps", self.eps)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::EmptyRange(name));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> State {
        State::new(
            0.5 * (self.v_e.0 + self.v_e.1),
            0.5 * (self.v_f.0 + self.v_f.1),
            0.5 * (self.eps.0 + self.eps.1),
        )
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Independent uniform draws per component.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, init: &InitSpec) -> Result<State> {
    init.validate()?;
    Ok(State::new(
        uniform(rng, init.v_e),
        uniform(rng, init.v_f),
        uniform(rng, init.eps),
    ))
}

/// Interface a rollout and BPTT need from a system model.
pub trait System: Sync {
    fn step_unchecked(&self, s: &State, a: f64, xi: f64) -> State;
    /// `(∂f/∂s, ∂f/∂a)` at `(s, a, xi)`.
    fn jacobians(&self, s: &State, a: f64, xi: f64) -> ([[f64; 3]; 3], [f64; 3]);
    fn reward(&self, s: &State) -> f64;
    fn reward_grad(&self, s: &State) -> [f64; 3];
    fn constraint_h(&self, s: &State) -> f64;
    fn constraint_grad(&self, s: &State) -> [f64; 3];
    fn action_bounds(&self) -> (f64, f64);
    fn gamma(&self) -> f64;
    fn sample_disturbance(&self, rng: &mut dyn rand::RngCore) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarFollowing {
    pub dynamics: DynamicsParams,
    pub reward: RewardParams,
}

impl Default for CarFollowing {
    fn default() -> Self {
        Self {
            dynamics: DynamicsParams::default(),
            reward: RewardParams::default(),
        }
    }
}

impl CarFollowing {
    pub fn new(dynamics: DynamicsParams, reward: RewardParams) -> Result<Self> {
        dynamics.validate()?;
        reward.validate()?;
        Ok(Self { dynamics, reward })
    }

    /// One checked transition. Bounds are closed: the extreme action and noise
    /// values are accepted.
    pub fn step(&self, s: &State, a: Action, xi: f64) -> Result<State> {
        let (lo, hi) = self.dynamics.action_bounds;
        if !(a.0 >= lo && a.0 <= hi) {
            return Err(Error::ActionOutOfBounds { action: a.0, lo, hi });
        }
        let n = self.dynamics.noise;
        if !(xi >= n.lo && xi <= n.hi) {
            return Err(Error::NoiseOutOfSupport { xi, lo: n.lo, hi: n.hi });
        }
        Ok(self.step_unchecked(s, a.0, xi))
    }

    /// `(A, B)`; constant for the linear system.
    pub fn dynamics_jacobians(&self) -> ([[f64; 3]; 3], [f64; 3]) {
        (self.dynamics.a, self.dynamics.b)
    }
}

impl System for CarFollowing {
    #[inline]
    fn step_unchecked(&self, s: &State, a: f64, xi: f64) -> State {
        let p = &self.dynamics;
        let x = s.to_array();
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = p.a[i][0] * x[0] + p.a[i][1] * x[1] + p.a[i][2] * x[2] + p.b[i] * a + p.d[i] * xi;
        }
        State::from_array(out)
    }

    fn jacobians(&self, _s: &State, _a: f64, _xi: f64) -> ([[f64; 3]; 3], [f64; 3]) {
        self.dynamics_jacobians()
    }

    #[inline]
    fn reward(&self, s: &State) -> f64 {
        self.reward.w_v * s.v_e - self.reward.w_eps * s.eps
    }

    fn reward_grad(&self, _s: &State) -> [f64; 3] {
        [self.reward.w_v, 0.0, -self.reward.w_eps]
    }

    #[inline]
    fn constraint_h(&self, s: &State) -> f64 {
        self.reward.gap_min - s.eps
    }

    fn constraint_grad(&self, _s: &State) -> [f64; 3] {
        [0.0, 0.0, -1.0]
    }

    fn action_bounds(&self) -> (f64, f64) {
        self.dynamics.action_bounds
    }

    fn gamma(&self) -> f64 {
        self.reward.gamma
    }

    fn sample_disturbance(&self, rng: &mut dyn rand::RngCore) -> f64 {
        self.dynamics.noise.sample(rng)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn st() -> impl Strategy<Value = State> {
        (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64).prop_map(|(a, b, c)| State::new(a, b, c))
    }

    proptest! {
        #[test]
        fn step_is_affine(s1 in st(), s2 in st(), a1 in -2.0..1.5f64, a2 in -2.0..1.5f64,
                          x1 in -2.5..2.5f64, x2 in -2.5..2.5f64) {
            let e = CarFollowing::default();
            let zero = e.step_unchecked(&State::default(), 0.0, 0.0).to_array();
            let sum = State::from_array([s1.v_e + s2.v_e, s1.v_f + s2.v_f, s1.eps + s2.eps]);
            let lhs = e.step_unchecked(&sum, a1 + a2, x1 + x2).to_array();
            let r1 = e.step_unchecked(&s1, a1, x1).to_array();
            let r2 = e.step_unchecked(&s2, a2, x2).to_array();
            for i in 0..3 {
                let rhs = (r1[i] - zero[i]) + (r2[i] - zero[i]);
                prop_assert!((lhs[i] - zero[i] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn constraint_decreases_with_gap(e1 in -10.0..10.0f64, d in 1e-6..5.0f64) {
            let env = CarFollowing::default();
            prop_assert!(env.constraint_h(&State::new(0.0, 0.0, e1 + d)) < env.constraint_h(&State::new(0.0, 0.0, e1)));
        }
    }
}
