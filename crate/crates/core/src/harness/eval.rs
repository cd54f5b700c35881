//! Frozen-policy evaluation: joint safety over the first `N` steps and the
//! truncated discounted return, streamed without storing trajectories.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_initial_state, InitSpec, State, System};
use crate::error::{Error, Result};
use crate::rollout::{stream, Policy, SafeProbEstimate};

const LANE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub episodes: usize,
    /// Steps over which joint safety is judged.
    pub safe_horizon: usize,
    /// Truncation of the discounted return.
    pub return_horizon: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            safe_horizon: 80,
            return_horizon: 500,
            seed: 0xE7A1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub safe: usize,
    pub safe_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_return: f64,
    pub return_std_err: f64,
    /// Mean per-step violation frequency over the safe horizon.
    pub violation_rate: f64,
}

/// Rolls `spec.episodes` episodes of `policy`; episode `i` uses stream
/// `(spec.seed, i)`, so different policies see common random numbers.
pub fn evaluate_policy<S: System, P: Policy>(sys: &S, policy: &P, init: &InitSpec, spec: &EvalSpec) -> Result<EvalResult> {
    if spec.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if spec.safe_horizon == 0 || spec.return_horizon == 0 {
        return Err(Error::Config("evaluation horizons must be >= 1".into()));
    }
    init.validate()?;
    let (lo, hi) = sys.action_bounds();
    let gamma = sys.gamma();
    let steps = spec.safe_horizon.max(spec.return_horizon);
    let mut scratch = policy.scratch();
    let (mut safe, mut violations) = (0usize, 0usize);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut start = 0;
    while start < spec.episodes {
        let len = LANE.min(spec.episodes - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + len).map(|i| stream(spec.seed, i as u64)).collect();
        let mut states: Vec<State> = rngs
            .iter_mut()
            .map(|r| sample_initial_state(r, init))
            .collect::<Result<_>>()?;
        let mut ok = vec![true; len];
        let mut ret = vec![0.0; len];
        let mut acts = vec![0.0; len];
        let mut disc = 1.0;
        for t in 0..steps {
            policy.act_batch(&states, &mut scratch, &mut rngs, &mut acts);
            for j in 0..len {
                let s = states[j];
                if t < spec.return_horizon {
                    ret[j] += disc * sys.reward(&s);
                }
                let xi = sys.sample_disturbance(&mut rngs[j]);
                let next = sys.step_unchecked(&s, acts[j].clamp(lo, hi), xi);
                if t < spec.safe_horizon && sys.constraint_h(&next) >= 0.0 {
                    ok[j] = false;
                    violations += 1;
                }
                states[j] = next;
            }
            disc *= gamma;
        }
        safe += ok.iter().filter(|&&f| f).count();
        sum += ret.iter().sum::<f64>();
        sum_sq += ret.iter().map(|r| r * r).sum::<f64>();
        start += len;
    }
    let n = spec.episodes as f64;
    let est = SafeProbEstimate::from_counts(safe, spec.episodes);
    let (ci_low, ci_high) = est.wilson_interval(1.96);
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(EvalResult {
        episodes: spec.episodes,
        safe,
        safe_prob: est.p_hat,
        ci_low,
        ci_high,
        mean_return: mean,
        return_std_err: (var / n).sqrt(),
        violation_rate: violations as f64 / (n * spec.safe_horizon as f64),
    })
}

/// Mean gap `eps_t` for `t = 0..=steps` over `repeats` runs from `init`.
pub fn gap_profile<S: System, P: Policy>(
    sys: &S,
    policy: &P,
    init: &InitSpec,
    repeats: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::Config("gap simulation needs at least one repeat".into()));
    }
    let (lo, hi) = sys.action_bounds();
    let mut scratch = policy.scratch();
    let mut rngs: Vec<ChaCha8Rng> = (0..repeats).map(|i| stream(seed, i as u64)).collect();
    let mut states: Vec<State> = rngs
        .iter_mut()
        .map(|r| sample_initial_state(r, init))
        .collect::<Result<_>>()?;
    let mut acts = vec![0.0; repeats];
    let mean_gap = |s: &[State]| s.iter().map(|s| s.eps).sum::<f64>() / repeats as f64;
    let mut out = vec![mean_gap(&states)];
    for _ in 0..steps {
        policy.act_batch(&states, &mut scratch, &mut rngs, &mut acts);
        for j in 0..repeats {
            let xi = sys.sample_disturbance(&mut rngs[j]);
            states[j] = sys.step_unchecked(&states[j], acts[j].clamp(lo, hi), xi);
        }
        out.push(mean_gap(&states));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CarFollowing;
    use crate::rollout::{rollout_batch, ConstantPolicy};

    #[test]
    fn zero_episodes_is_an_error() {
        let spec = EvalSpec {
            episodes: 0,
            ..EvalSpec::default()
        };
        assert!(evaluate_policy(&CarFollowing::default(), &ConstantPolicy(0.0), &InitSpec::default(), &spec).is_err());
    }

    #[test]
    fn safety_matches_rollout_batch_with_same_streams() {
        let sys = CarFollowing::default();
        let init = InitSpec::default();
        let pol = ConstantPolicy(0.8);
        let spec = EvalSpec {
            episodes: 300,
            safe_horizon: 40,
            return_horizon: 40,
            seed: 12,
        };
        let r = evaluate_policy(&sys, &pol, &init, &spec).unwrap();
        let b = rollout_batch(&sys, &pol, &init, 300, 40, 12).unwrap();
        let safe = b.safe_flags.iter().filter(|&&f| f).count();
        assert_eq!(r.safe, safe);
        let mean: f64 = b.discounted_returns(0.98).iter().sum::<f64>() / 300.0;
        assert!((r.mean_return - mean).abs() < 1e-9);
        assert!(r.ci_low <= r.safe_prob && r.safe_prob <= r.ci_high);
    }

    #[test]
    fn full_braking_from_wide_gap_is_safe() {
        // Gap grows by roughly T * (v_f - v_e) each step once the ego slows.
        let sys = CarFollowing::default();
        let init = InitSpec::point(State::new(5.0, 6.0, 30.0));
        let spec = EvalSpec {
            episodes: 2000,
            ..EvalSpec::default()
        };
        let r = evaluate_policy(&sys, &ConstantPolicy(-4.0), &init, &spec).unwrap();
        assert!(r.ci_high >= 1.0 - 1e-12, "{r:?}");
        assert_eq!(r.safe, 2000);
    }

    #[test]
    fn gap_profile_is_deterministic_and_starts_at_init() {
        let sys = CarFollowing::default();
        let init = InitSpec::point(State::new(5.0, 6.0, 6.0));
        let a = gap_profile(&sys, &ConstantPolicy(0.0), &init, 20, 50, 3).unwrap();
        let b = gap_profile(&sys, &ConstantPolicy(0.0), &init, 20, 50, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 51);
        assert_eq!(a[0], 6.0);
    }
}
