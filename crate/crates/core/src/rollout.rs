//! Batched Monte-Carlo rollouts and the estimators built on them.
//!
//! Trajectory `i` of a batch draws everything (initial state, policy noise,
//! disturbances) from its own stream seeded by `(master_seed, i)`, so a batch
//! is a pure function of the policy, the seed and the batch shape.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{sample_initial_state, InitSpec, State, System};
use crate::error::Result;
use crate::nn::{BatchCache, Mlp};

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// A state-feedback controller evaluated on batches of states.
pub trait Policy: Sync {
    /// Reusable work buffers.
    type Scratch;
    fn scratch(&self) -> Self::Scratch;
    /// Writes one action per state into `out`. `rngs[i]` is the stream of the
    /// trajectory owning `states[i]`; stochastic policies draw from it.
    fn act_batch(&self, states: &[State], scratch: &mut Self::Scratch, rngs: &mut [ChaCha8Rng], out: &mut [f64]);
}

/// Deterministic network policy `a = pi(s; theta)`.
#[derive(Clone, Copy)]
pub struct NetPolicy<'a> {
    pub net: &'a Mlp,
    pub params: &'a [f64],
}

impl Policy for NetPolicy<'_> {
    type Scratch = (Vec<f64>, BatchCache);

    fn scratch(&self) -> Self::Scratch {
        (Vec::new(), BatchCache::default())
    }

    fn act_batch(&self, states: &[State], (inputs, cache): &mut Self::Scratch, _: &mut [ChaCha8Rng], out: &mut [f64]) {
        inputs.clear();
        for s in states {
            inputs.extend_from_slice(&s.to_array());
        }
        out.copy_from_slice(self.net.forward_batch(self.params, inputs, cache));
    }
}

/// Constant action, handy for tests and reference runs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    type Scratch = ();
    fn scratch(&self) {}
    fn act_batch(&self, _: &[State], _: &mut (), _: &mut [ChaCha8Rng], out: &mut [f64]) {
        out.fill(self.0);
    }
}

impl<F: Fn(&State) -> f64 + Sync> Policy for F {
    type Scratch = ();
    fn scratch(&self) {}
    fn act_batch(&self, states: &[State], _: &mut (), _: &mut [ChaCha8Rng], out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(states) {
            *o = self(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub m: usize,
    pub n: usize,
    /// `m * (n + 1)` states, trajectory-major.
    pub states: Vec<State>,
    /// `m * n` entries each.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub noises: Vec<f64>,
    pub safe_flags: Vec<bool>,
}

impl TrajectoryBatch {
    #[inline]
    pub fn state(&self, i: usize, t: usize) -> &State {
        &self.states[i * (self.n + 1) + t]
    }

    pub fn trajectory_states(&self, i: usize) -> &[State] {
        &self.states[i * (self.n + 1)..(i + 1) * (self.n + 1)]
    }

    #[inline]
    pub fn action(&self, i: usize, t: usize) -> f64 {
        self.actions[i * self.n + t]
    }

    #[inline]
    pub fn reward(&self, i: usize, t: usize) -> f64 {
        self.rewards[i * self.n + t]
    }

    #[inline]
    pub fn noise(&self, i: usize, t: usize) -> f64 {
        self.noises[i * self.n + t]
    }

    /// Unsafe steps among `1..=n` of trajectory `i`.
    pub fn violations<S: System>(&self, sys: &S, i: usize) -> usize {
        self.trajectory_states(i)[1..]
            .iter()
            .filter(|s| sys.constraint_h(s) >= 0.0)
            .count()
    }

    /// Discounted reward over the stored horizon, per trajectory.
    pub fn discounted_returns(&self, gamma: f64) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                let mut g = 0.0;
                let mut d = 1.0;
                for t in 0..self.n {
                    g += d * self.reward(i, t);
                    d *= gamma;
                }
                g
            })
            .collect()
    }

    /// One row per `(trajectory, step)`; the final state of each trajectory
    /// gets a row with empty action, reward and noise columns.
    pub fn dump_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["traj", "t", "v_e", "v_f", "eps", "action", "reward", "noise", "traj_safe"])?;
        for i in 0..self.m {
            for t in 0..=self.n {
                let s = self.state(i, t);
                let (a, r, x) = if t < self.n {
                    (
                        self.action(i, t).to_string(),
                        self.reward(i, t).to_string(),
                        self.noise(i, t).to_string(),
                    )
                } else {
                    (String::new(), String::new(), String::new())
                };
                out.write_record([
                    i.to_string(),
                    t.to_string(),
                    s.v_e.to_string(),
                    s.v_f.to_string(),
                    s.eps.to_string(),
                    a,
                    r,
                    x,
                    (self.safe_flags[i] as u8).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulates `m` trajectories of `n` steps through `sys`.
///
/// Per trajectory the stream is consumed as: initial state, then for every
/// step the policy (if it samples) followed by the disturbance. Actions are
/// clipped to the system's bounds before stepping. Trajectories advance in
/// lockstep so the policy sees the whole batch at once.
pub fn rollout_batch<S: System, P: Policy>(
    sys: &S,
    policy: &P,
    init: &InitSpec,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    rollout_batch_with(sys, policy, &mut policy.scratch(), init, m, n, seed)
}

/// [`rollout_batch`] with caller-owned policy scratch, for policies that
/// record per-call data the caller needs afterwards.
pub fn rollout_batch_with<S: System, P: Policy>(
    sys: &S,
    policy: &P,
    scratch: &mut P::Scratch,
    init: &InitSpec,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    assert!(m >= 1 && n >= 1, "rollout needs m >= 1 and n >= 1");
    init.validate()?;
    let (lo, hi) = sys.action_bounds();
    let mut rngs: Vec<ChaCha8Rng> = (0..m).map(|i| stream(seed, i as u64)).collect();
    let mut cur = Vec::with_capacity(m);
    for rng in rngs.iter_mut() {
        cur.push(sample_initial_state(rng, init)?);
    }
    let mut batch = TrajectoryBatch {
        m,
        n,
        states: vec![State::default(); m * (n + 1)],
        actions: vec![0.0; m * n],
        rewards: vec![0.0; m * n],
        noises: vec![0.0; m * n],
        safe_flags: vec![true; m],
    };
    let mut acts = vec![0.0; m];
    for (i, s) in cur.iter().enumerate() {
        batch.states[i * (n + 1)] = *s;
    }
    for t in 0..n {
        policy.act_batch(&cur, scratch, &mut rngs, &mut acts);
        for i in 0..m {
            let a = acts[i].clamp(lo, hi);
            let xi = sys.sample_disturbance(&mut rngs[i]);
            let s = cur[i];
            let k = i * n + t;
            batch.actions[k] = a;
            batch.rewards[k] = sys.reward(&s);
            batch.noises[k] = xi;
            let next = sys.step_unchecked(&s, a, xi);
            batch.safe_flags[i] &= sys.constraint_h(&next) < 0.0;
            batch.states[i * (n + 1) + t + 1] = next;
            cur[i] = next;
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeProbEstimate {
    pub p_hat: f64,
    pub safe: usize,
    pub total: usize,
    pub std_err: f64,
}

impl SafeProbEstimate {
    pub fn from_counts(safe: usize, total: usize) -> Self {
        assert!(total > 0 && safe <= total);
        let p = safe as f64 / total as f64;
        Self {
            p_hat: p,
            safe,
            total,
            std_err: (p * (1.0 - p) / total as f64).sqrt(),
        }
    }

    /// Wilson score interval at the given normal quantile (1.96 for 95%).
    pub fn wilson_interval(&self, z: f64) -> (f64, f64) {
        let n = self.total as f64;
        let p = self.p_hat;
        let denom = 1.0 + z * z / n;
        let centre = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        ((centre - half).max(0.0), (centre + half).min(1.0))
    }
}

/// Fraction of trajectories that stay safe over all of steps `1..=n`.
pub fn estimate_safe_prob(batch: &TrajectoryBatch) -> SafeProbEstimate {
    let safe = batch.safe_flags.iter().filter(|&&f| f).count();
    SafeProbEstimate::from_counts(safe, batch.m)
}

/// Mean count of unsafe steps per trajectory (undiscounted indicator cost).
pub fn empirical_jc<S: System>(sys: &S, batch: &TrajectoryBatch) -> f64 {
    let total: usize = (0..batch.m).map(|i| batch.violations(sys, i)).sum();
    total as f64 / batch.m as f64
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth stand-in for the indicator cost: `sigmoid(eta * h(s_next))`.
pub fn surrogate_cost<S: System>(sys: &S, s_next: &State, eta: f64) -> f64 {
    sigmoid(eta * sys.constraint_h(s_next))
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::env::CarFollowing;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn boole_bound_holds(k_gap in 0.0..2.0f64, k_vel in 0.0..3.0f64, target in 1.0..6.0f64, seed in any::<u64>()) {
            let sys = CarFollowing::default();
            let policy = move |s: &State| (k_gap * (s.eps - target) - k_vel * (s.v_e - s.v_f)).clamp(-4.0, 3.0);
            let b = rollout_batch(&sys, &policy, &InitSpec::default(), 64, 30, seed).unwrap();
            let p = estimate_safe_prob(&b).p_hat;
            prop_assert!(1.0 - empirical_jc(&sys, &b) <= p + 1e-12);
            prop_assert!(p <= 1.0);
        }

        #[test]
        fn surrogate_is_monotone_in_h(e1 in -5.0..8.0f64, d in 1e-3..3.0f64, eta in 0.1..20.0f64) {
            let sys = CarFollowing::default();
            let lo = surrogate_cost(&sys, &State::new(0.0, 0.0, e1 + d), eta);
            let hi = surrogate_cost(&sys, &State::new(0.0, 0.0, e1), eta);
            prop_assert!(lo <= hi);
            prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }
}
