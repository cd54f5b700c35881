//! Action projection onto a chance-constrained safe set.
//!
//! The commanded acceleration reaches the gap with a two-step delay, so the
//! shield constrains `eps_{t+2}`. For the linear model
//!
//! ```text
//! eps_{t+2} = c . s_t + k_a a_t + k_xi (xi_t + xi_{t+1})
//! ```
//!
//! and the per-decision condition `Pr{eps_{t+2} <= gap_min} <= delta / N`
//! reduces to an upper bound on `a_t` through a quantile of the sum of two
//! disturbances. The projection keeps the proposed action when it satisfies
//! the bound and otherwise moves it onto the bound; when even maximal braking
//! cannot satisfy it the lower action bound is returned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CarFollowing, State, System, TruncatedNormal};
use crate::error::{Error, Result};
use crate::rollout::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShieldConfig {
    pub delta: f64,
    /// Steps over which `delta` is split evenly.
    pub horizon: usize,
    /// Integration step for the disturbance-sum distribution.
    pub grid_step: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            horizon: 80,
            grid_step: 1e-3,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("shield delta must lie in (0,1), got {}", self.delta)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("shield horizon must be >= 1".into()));
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 0.1) {
            return Err(Error::Config(format!("shield grid_step must lie in (0, 0.1], got {}", self.grid_step)));
        }
        Ok(())
    }

    /// Risk budget per decision.
    pub fn per_step_risk(&self) -> f64 {
        self.delta / self.horizon as f64
    }
}

/// Distribution of `xi + xi'` for independent copies of a truncated normal,
/// integrated as `F(x) = sum_k f(u_k) F_xi(x - u_k) du` over a midpoint grid.
#[derive(Debug, Clone)]
pub struct NoiseSum {
    noise: TruncatedNormal,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseSum {
    pub fn new(noise: TruncatedNormal, step: f64) -> Result<Self> {
        noise.validate()?;
        let cells = ((noise.hi - noise.lo) / step).ceil() as usize;
        let du = (noise.hi - noise.lo) / cells as f64;
        let nodes: Vec<f64> = (0..cells).map(|k| noise.lo + (k as f64 + 0.5) * du).collect();
        let mut weights: Vec<f64> = nodes.iter().map(|&u| noise.pdf(u) * du).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { noise, nodes, weights })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &w)| w * self.noise.cdf(x - u))
            .sum()
    }

    /// Smallest `x` with `cdf(x) >= p`, by bisection.
    pub fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (2.0 * self.noise.lo, 2.0 * self.noise.hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        hi
    }
}

/// Two-step chance-constrained projection for the car-following model.
#[derive(Debug, Clone)]
pub struct Shield {
    cfg: ShieldConfig,
    state_coef: [f64; 3],
    action_coef: f64,
    noise_coef: f64,
    gap_min: f64,
    bounds: (f64, f64),
    /// Lower `delta / N` quantile of `xi_t + xi_{t+1}`.
    noise_quantile: f64,
}

impl Shield {
    pub fn new(sys: &CarFollowing, cfg: ShieldConfig) -> Result<Self> {
        cfg.validate()?;
        let p = &sys.dynamics;
        let a = p.a;
        let row = |m: &[[f64; 3]; 3], v: &[f64; 3]| m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2];
        let state_coef = [0, 1, 2].map(|j| (0..3).map(|k| a[2][k] * a[k][j]).sum::<f64>());
        let action_coef = row(&a, &p.b);
        let first_noise = row(&a, &p.d);
        let second_noise = p.d[2];
        if p.b[2] != 0.0 || action_coef >= 0.0 || second_noise <= 0.0 || first_noise != second_noise {
            return Err(Error::InvalidSpec(
                "shield needs a two-step action delay on the gap with equal disturbance gains".into(),
            ));
        }
        let sum = NoiseSum::new(p.noise, cfg.grid_step)?;
        Ok(Self {
            cfg,
            state_coef,
            action_coef,
            noise_coef: second_noise,
            gap_min: sys.reward.gap_min,
            bounds: sys.action_bounds(),
            noise_quantile: sum.quantile(cfg.per_step_risk()),
        })
    }

    pub fn config(&self) -> &ShieldConfig {
        &self.cfg
    }

    pub fn noise_quantile(&self) -> f64 {
        self.noise_quantile
    }

    /// Noise-free part of `eps_{t+2}` for action `a`.
    pub fn predicted_gap(&self, s: &State, a: f64) -> f64 {
        let x = s.to_array();
        self.state_coef[0] * x[0] + self.state_coef[1] * x[1] + self.state_coef[2] * x[2] + self.action_coef * a
    }

    /// `eps_{t+2}` for action `a` and disturbance sum `noise_sum`.
    pub fn two_step_gap(&self, s: &State, a: f64, noise_sum: f64) -> f64 {
        self.predicted_gap(s, a) + self.noise_coef * noise_sum
    }

    /// Largest action meeting the per-decision risk bound; may lie outside
    /// the action bounds.
    pub fn threshold(&self, s: &State) -> f64 {
        let free = self.predicted_gap(s, 0.0);
        (free + self.noise_coef * self.noise_quantile - self.gap_min) / -self.action_coef
    }

    /// Closest admissible action to `a_raw`.
    #[inline]
    pub fn project(&self, s: &State, a_raw: f64) -> f64 {
        let (lo, hi) = self.bounds;
        let a_max = self.threshold(s);
        if a_max < lo {
            return lo;
        }
        a_raw.clamp(lo, hi).min(a_max)
    }

    /// True when no action within bounds meets the risk bound.
    pub fn infeasible(&self, s: &State) -> bool {
        self.threshold(s) < self.bounds.0
    }
}

/// Free-function form of [`Shield::project`].
pub fn shield_project(s: &State, a_raw: f64, shield: &Shield) -> f64 {
    shield.project(s, a_raw)
}

/// Wraps a policy so every action passes through the shield.
pub struct ShieldedPolicy<'a, P> {
    pub inner: &'a P,
    pub shield: &'a Shield,
}

impl<P: Policy> Policy for ShieldedPolicy<'_, P> {
    type Scratch = P::Scratch;

    fn scratch(&self) -> P::Scratch {
        self.inner.scratch()
    }

    fn act_batch(&self, states: &[State], scratch: &mut P::Scratch, rngs: &mut [ChaCha8Rng], out: &mut [f64]) {
        self.inner.act_batch(states, scratch, rngs, out);
        for (a, s) in out.iter_mut().zip(states) {
            *a = self.shield.project(s, *a);
        }
    }
}

/// Monte-Carlo estimate of `Pr{eps_{t+2} <= gap_min}` for action `a`,
/// over pre-drawn disturbance sums.
pub fn mc_two_step_violation(shield: &Shield, s: &State, a: f64, samples: &[f64]) -> f64 {
    let bad = samples
        .iter()
        .filter(|&&xs| shield.two_step_gap(s, a, xs) <= shield.gap_min)
        .count();
    bad as f64 / samples.len() as f64
}

/// Draws `n` sums of two independent disturbances.
pub fn sample_noise_sums(noise: &TruncatedNormal, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| noise.sample(&mut rng) + noise.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::State;
    use proptest::prelude::*;

    fn shield(delta: f64, horizon: usize) -> (CarFollowing, Shield) {
        let sys = CarFollowing::default();
        let sh = Shield::new(
            &sys,
            ShieldConfig {
                delta,
                horizon,
                grid_step: 1e-3,
            },
        )
        .unwrap();
        (sys, sh)
    }

    #[test]
    fn two_step_gap_matches_simulation() {
        let (sys, sh) = shield(0.1, 80);
        let s = State::new(6.0, 5.0, 4.0);
        let (a, x0, x1) = (1.3, 0.4, -1.1);
        let s1 = sys.step_unchecked(&s, a, x0);
        let s2 = sys.step_unchecked(&s1, -2.0, x1);
        assert!((sh.two_step_gap(&s, a, x0 + x1) - s2.eps).abs() < 1e-12);
        // eps + 2T(v_f - v_e) - T^2 a
        assert!((sh.predicted_gap(&s, a) - (4.0 + 0.2 * (5.0 - 6.0) - 0.01 * a)).abs() < 1e-12);
    }

    #[test]
    fn sum_quantile_matches_monte_carlo() {
        let noise = TruncatedNormal::default();
        let sum = NoiseSum::new(noise, 1e-3).unwrap();
        let mut draws = sample_noise_sums(&noise, 10_000_000, 11);
        draws.sort_by(f64::total_cmp);
        for p in [0.1, 0.5, 0.9] {
            let mc = draws[(p * draws.len() as f64) as usize];
            let q = sum.quantile(p);
            assert!((q - mc).abs() < 1e-3, "p={p}: {q} vs {mc}");
        }
        // Tail: Monte-Carlo error dominates, so compare against its own spread.
        let p = 0.1 / 80.0;
        let mc = draws[(p * draws.len() as f64) as usize];
        let q = sum.quantile(p);
        let density = (sum.cdf(q + 1e-3) - sum.cdf(q - 1e-3)) / 2e-3;
        let se = (p * (1.0 - p) / draws.len() as f64).sqrt() / density;
        assert!((q - mc).abs() < 4.0 * se, "{q} vs {mc} (se {se})");
        assert!((sum.cdf(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inactive_when_gap_is_huge() {
        let (_, sh) = shield(0.1, 80);
        let s = State::new(5.0, 6.0, 50.0);
        for a in [-4.0, -1.0, 0.0, 2.5, 3.0] {
            assert_eq!(sh.project(&s, a), a);
        }
    }

    #[test]
    fn falls_back_to_full_braking() {
        let (_, sh) = shield(0.1, 80);
        let s = State::new(15.0, 5.0, 2.05);
        assert!(sh.infeasible(&s));
        assert_eq!(sh.project(&s, 3.0), -4.0);
        assert_eq!(shield_project(&s, 0.0, &sh), -4.0);
    }

    fn bisection_oracle(sh: &Shield, s: &State, risk: f64, samples: &[f64]) -> f64 {
        let (mut lo, mut hi) = (-4.0, 3.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mc_two_step_violation(sh, s, mid, samples) <= risk {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// State whose threshold sits at `a_target`.
    fn binding_state(sh: &Shield, v_e: f64, v_f: f64, a_target: f64) -> State {
        // threshold = (eps + 2T(v_f - v_e) + T q - gap_min) / T^2
        let t = 0.1;
        let eps = sh.gap_min - t * sh.noise_quantile() - 2.0 * t * (v_f - v_e) + t * t * a_target;
        State::new(v_e, v_f, eps)
    }

    #[test]
    fn binding_threshold_matches_bisection_oracle() {
        let (sys, sh) = shield(0.1, 1);
        let samples = sample_noise_sums(&sys.dynamics.noise, 2_000_000, 5);
        for (target, risk, tol) in [(0.5, 0.1, 0.1), (-2.0, 0.1, 0.1)] {
            let s = binding_state(&sh, 6.0, 5.0, target);
            let a_star = sh.threshold(&s);
            assert!((a_star - target).abs() < 1e-9);
            assert_eq!(sh.project(&s, 3.0), a_star);
            let oracle = bisection_oracle(&sh, &s, risk, &samples);
            // threshold moves by k_xi / |k_a| = 1/T per unit of quantile error
            assert!((oracle - a_star).abs() < tol, "{oracle} vs {a_star}");
        }

        // Tail risk: widen by the Monte-Carlo quantile spread.
        let (sys, sh) = shield(0.1, 80);
        let risk = 0.1 / 80.0;
        let s = binding_state(&sh, 4.0, 7.0, 1.0);
        let a_star = sh.threshold(&s);
        assert!((a_star - 1.0).abs() < 1e-9);
        let sum = NoiseSum::new(sys.dynamics.noise, 1e-3).unwrap();
        let q = sh.noise_quantile();
        let density = (sum.cdf(q + 1e-3) - sum.cdf(q - 1e-3)) / 2e-3;
        let se_a = (risk * (1.0 - risk) / samples.len() as f64).sqrt() / density / 0.1;
        let oracle = bisection_oracle(&sh, &s, risk, &samples);
        assert!((oracle - a_star).abs() < 4.0 * se_a, "{oracle} vs {a_star} (se {se_a})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn projection_is_idempotent_and_bounded(
            v_e in 0.0..20.0f64, v_f in 0.0..20.0f64, eps in 0.0..20.0f64, a in -4.0..3.0f64,
        ) {
            let (_, sh) = shield(0.1, 80);
            let s = State::new(v_e, v_f, eps);
            let p = sh.project(&s, a);
            prop_assert!((-4.0..=3.0).contains(&p));
            prop_assert_eq!(sh.project(&s, p), p);
            prop_assert!(p <= a);
            if !sh.infeasible(&s) {
                prop_assert!(p <= sh.threshold(&s));
            }
        }
    }
}
