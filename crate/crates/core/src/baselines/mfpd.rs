//! Model-free primal-dual baseline.
//!
//! A Gaussian policy `a ~ N(mu(s), sigma^2)` is trained by likelihood-ratio
//! gradients on the Lagrangian `J_r - lambda (J_c - delta)`, treating the
//! environment as a black box. A reward critic `V_r(s)` and a cost critic
//! `V_c(s, tau)` (tau: remaining fraction of the horizon) serve as baselines,
//! and the multiplier follows projected dual ascent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ccac::{clip_norm, OptState, TrainerConfig};
use crate::env::{InitSpec, State, System};
use crate::error::{Error, Result};
use crate::nn::{BatchCache, BatchScratch, LayerSpec, Mlp, ParamVector, RowSink};
use crate::rollout::{
    derive_seed, empirical_jc, estimate_safe_prob, rollout_batch_with, NetPolicy, Policy, TrajectoryBatch,
};

const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfpdConfig {
    pub dual_lr: f64,
    pub lambda_init: f64,
    pub init_log_std: f64,
    pub log_std_lr: f64,
    pub min_log_std: f64,
    pub max_log_std: f64,
    /// Rescale the combined advantage to zero mean and unit variance.
    pub standardize_advantage: bool,
    /// Close the reward-to-go with `V_r(s_N)`; otherwise it is truncated at N.
    pub bootstrap_tail: bool,
    /// Rescale each critic step direction to at most this L2 norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_max_grad_norm: Option<f64>,
}

impl Default for MfpdConfig {
    fn default() -> Self {
        Self {
            dual_lr: 0.01,
            lambda_init: 0.0,
            init_log_std: 0.0,
            log_std_lr: 1e-3,
            min_log_std: -3.0,
            max_log_std: 1.0,
            standardize_advantage: true,
            bootstrap_tail: false,
            critic_max_grad_norm: None,
        }
    }
}

impl MfpdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dual_lr >= 0.0) || !(self.log_std_lr >= 0.0) {
            return bad("mfpd learning rates must be >= 0");
        }
        if !(self.lambda_init >= 0.0) {
            return bad("mfpd lambda_init must be >= 0");
        }
        if !(self.min_log_std <= self.init_log_std && self.init_log_std <= self.max_log_std) {
            return bad("mfpd needs min_log_std <= init_log_std <= max_log_std");
        }
        if self.critic_max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("mfpd critic_max_grad_norm must be > 0");
        }
        Ok(())
    }
}

/// `max(0, lambda + lr (jc - delta))`.
pub fn dual_update(lambda: f64, jc: f64, delta: f64, lr: f64) -> f64 {
    (lambda + lr * (jc - delta)).max(0.0)
}

/// Samples `mu(s) + sigma * e` and appends every `e` to the scratch log in
/// call order (step-major within a lockstep rollout).
pub struct GaussianPolicy<'a> {
    pub net: &'a Mlp,
    pub params: &'a [f64],
    pub log_std: f64,
}

#[derive(Default)]
pub struct GaussianScratch {
    inputs: Vec<f64>,
    cache: BatchCache,
    pub noise: Vec<f64>,
}

impl Policy for GaussianPolicy<'_> {
    type Scratch = GaussianScratch;

    fn scratch(&self) -> GaussianScratch {
        GaussianScratch::default()
    }

    fn act_batch(&self, states: &[State], sc: &mut GaussianScratch, rngs: &mut [ChaCha8Rng], out: &mut [f64]) {
        sc.inputs.clear();
        for s in states {
            sc.inputs.extend_from_slice(&s.to_array());
        }
        let mu = self.net.forward_batch(self.params, &sc.inputs, &mut sc.cache);
        let sigma = self.log_std.exp();
        for ((o, &m), rng) in out.iter_mut().zip(mu).zip(rngs.iter_mut()) {
            let e: f64 = rng.sample(StandardNormal);
            sc.noise.push(e);
            *o = m + sigma * e;
        }
    }
}

/// Chunked pass computing `sum_r w_r d net(x_r)/d params`, where `w_r` is
/// chosen from the row index and the network output.
pub fn weighted_param_grad(
    net: &Mlp,
    params: &[f64],
    inputs: &[f64],
    mut weight: impl FnMut(usize, f64) -> f64,
) -> ParamVector {
    let dim = net.input_dim();
    let rows = inputs.len() / dim;
    let wt = net.transposed(params);
    let mut grad = ParamVector::zeros(net.param_count());
    let mut cache = net.new_batch_cache(CHUNK_ROWS.min(rows));
    let mut scratch = BatchScratch::default();
    let mut upstream = Vec::with_capacity(CHUNK_ROWS);
    let ones = vec![1.0; CHUNK_ROWS];
    let mut d_in = vec![0.0; CHUNK_ROWS * dim];
    let mut start = 0;
    while start < rows {
        let len = CHUNK_ROWS.min(rows - start);
        let out = net.forward_batch(params, &inputs[start * dim..(start + len) * dim], &mut cache);
        upstream.clear();
        upstream.extend(out.iter().enumerate().map(|(j, &y)| weight(start + j, y)));
        net.backward_batch(
            &wt,
            &cache,
            &upstream,
            &mut [RowSink {
                coefs: &ones[..len],
                grad: &mut grad,
            }],
            &mut d_in[..len * dim],
            &mut scratch,
        );
        start += len;
    }
    grad
}

/// Outputs of a scalar network over row-major inputs.
pub fn forward_rows(net: &Mlp, params: &[f64], inputs: &[f64]) -> Vec<f64> {
    let dim = net.input_dim();
    let mut cache = BatchCache::default();
    inputs
        .chunks(CHUNK_ROWS * dim)
        .flat_map(|c| net.forward_batch(params, c, &mut cache).to_vec())
        .collect()
}

/// Mean of `adv_r * grad log pi(a_r | s_r)` with `a_r = mu(s_r) + sigma e_r`,
/// returned for the mean-network parameters and for `log sigma`.
pub fn likelihood_ratio_grads(
    net: &Mlp,
    params: &[f64],
    log_std: f64,
    inputs: &[f64],
    noise: &[f64],
    adv: &[f64],
) -> (ParamVector, f64) {
    let rows = adv.len();
    let scale = 1.0 / (rows as f64 * log_std.exp());
    let g = weighted_param_grad(net, params, inputs, |r, _| adv[r] * noise[r] * scale);
    let g_log_std = adv.iter().zip(noise).map(|(a, e)| a * (e * e - 1.0)).sum::<f64>() / rows as f64;
    (g, g_log_std)
}

/// Discounted reward-to-go closed by `tail`, and undiscounted
/// cost-to-go, both indexed `i * N + t`.
pub fn reward_and_cost_to_go<S: System>(sys: &S, batch: &TrajectoryBatch, gamma: f64, tail: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (batch.m, batch.n);
    let mut yr = vec![0.0; m * n];
    let mut yc = vec![0.0; m * n];
    for i in 0..m {
        let mut r_acc = tail[i];
        let mut c_acc = 0.0;
        for t in (0..n).rev() {
            r_acc = batch.reward(i, t) + gamma * r_acc;
            if sys.constraint_h(batch.state(i, t + 1)) >= 0.0 {
                c_acc += 1.0;
            }
            yr[i * n + t] = r_acc;
            yc[i * n + t] = c_acc;
        }
    }
    (yr, yc)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MfpdMetrics {
    pub k: usize,
    pub p_hat: f64,
    pub jc: f64,
    /// Batch mean of the N-step return from `s_0`, closed by the critic when bootstrapping.
    pub return_est: f64,
    /// Multiplier used in this iteration's policy step.
    pub lambda: f64,
    pub std: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfpdState {
    pub actor_params: ParamVector,
    pub log_std: f64,
    pub reward_critic_params: ParamVector,
    pub cost_critic_params: ParamVector,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
    pub actor_opt: OptState,
    pub reward_opt: OptState,
    pub cost_opt: OptState,
    pub last_metrics: Option<MfpdMetrics>,
}

#[derive(Debug, Clone)]
pub struct MfpdTrainer<S: System> {
    pub cfg: TrainerConfig,
    pub mfpd: MfpdConfig,
    pub sys: S,
    pub init: InitSpec,
    pub actor: Mlp,
    pub reward_critic: Mlp,
    pub cost_critic: Mlp,
}

impl<S: System> MfpdTrainer<S> {
    pub fn new(cfg: TrainerConfig, mfpd: MfpdConfig, sys: S, init: InitSpec) -> Result<Self> {
        cfg.validate()?;
        mfpd.validate()?;
        init.validate()?;
        Ok(Self {
            actor: Mlp::new(cfg.actor_spec(sys.action_bounds()))?,
            reward_critic: Mlp::new(LayerSpec::relu_mlp(3, &cfg.hidden, 1))?,
            cost_critic: Mlp::new(LayerSpec::relu_mlp(4, &cfg.hidden, 1))?,
            cfg,
            mfpd,
            sys,
            init,
        })
    }

    pub fn initial_state(&self, seed: u64) -> Result<MfpdState> {
        let (_, actor_params) = Mlp::init(self.actor.spec().clone(), derive_seed(seed, u64::MAX))?;
        let (_, vr) = Mlp::init(self.reward_critic.spec().clone(), derive_seed(seed, u64::MAX - 1))?;
        let (_, vc) = Mlp::init(self.cost_critic.spec().clone(), derive_seed(seed, u64::MAX - 2))?;
        Ok(MfpdState {
            actor_opt: OptState::new(self.cfg.optimizer, actor_params.len()),
            reward_opt: OptState::new(self.cfg.optimizer, vr.len()),
            cost_opt: OptState::new(self.cfg.optimizer, vc.len()),
            actor_params,
            log_std: self.mfpd.init_log_std,
            reward_critic_params: vr,
            cost_critic_params: vc,
            lambda: self.mfpd.lambda_init,
            k: 0,
            seed,
            last_metrics: None,
        })
    }

    /// Deterministic policy used for evaluation: the Gaussian mean.
    pub fn policy<'a>(&'a self, params: &'a [f64]) -> NetPolicy<'a> {
        NetPolicy {
            net: &self.actor,
            params,
        }
    }

    /// Batch statistics of the current Gaussian policy on iteration `k`'s
    /// seed, without updating anything.
    pub fn measure(&self, state: &MfpdState) -> Result<MfpdMetrics> {
        let cfg = &self.cfg;
        let (m, n) = (cfg.trajectories, cfg.horizon);
        let policy = GaussianPolicy {
            net: &self.actor,
            params: &state.actor_params,
            log_std: state.log_std,
        };
        let batch = rollout_batch_with(
            &self.sys,
            &policy,
            &mut policy.scratch(),
            &self.init,
            m,
            n,
            derive_seed(state.seed, state.k as u64),
        )?;
        let tail = self.tail_values(state, &batch);
        let (yr, _) = reward_and_cost_to_go(&self.sys, &batch, cfg.gamma, &tail);
        Ok(MfpdMetrics {
            k: state.k,
            p_hat: estimate_safe_prob(&batch).p_hat,
            jc: empirical_jc(&self.sys, &batch),
            return_est: (0..m).map(|i| yr[i * n]).sum::<f64>() / m as f64,
            lambda: state.lambda,
            std: state.log_std.exp(),
            actor_lr: cfg.actor_lr.at(state.k, cfg.max_iters),
            critic_lr: cfg.critic_lr,
        })
    }

    fn tail_values(&self, state: &MfpdState, batch: &TrajectoryBatch) -> Vec<f64> {
        if !self.mfpd.bootstrap_tail {
            return vec![0.0; batch.m];
        }
        let terminal: Vec<f64> = (0..batch.m).flat_map(|i| batch.state(i, batch.n).to_array()).collect();
        forward_rows(&self.reward_critic, &state.reward_critic_params, &terminal)
    }

    pub fn iteration(&self, state: &MfpdState) -> Result<MfpdState> {
        let cfg = &self.cfg;
        let (m, n) = (cfg.trajectories, cfg.horizon);
        let k = state.k;
        let policy = GaussianPolicy {
            net: &self.actor,
            params: &state.actor_params,
            log_std: state.log_std,
        };
        let mut scratch = policy.scratch();
        let batch = rollout_batch_with(
            &self.sys,
            &policy,
            &mut scratch,
            &self.init,
            m,
            n,
            derive_seed(state.seed, k as u64),
        )?;
        let p_hat = estimate_safe_prob(&batch).p_hat;
        let jc = empirical_jc(&self.sys, &batch);

        let rows = m * n;
        let mut s_in = Vec::with_capacity(rows * 3);
        let mut c_in = Vec::with_capacity(rows * 4);
        let mut noise = vec![0.0; rows];
        for i in 0..m {
            for t in 0..n {
                let x = batch.state(i, t).to_array();
                s_in.extend_from_slice(&x);
                c_in.extend_from_slice(&x);
                c_in.push((n - t) as f64 / n as f64);
                noise[i * n + t] = scratch.noise[t * m + i];
            }
        }
        let tail = self.tail_values(state, &batch);
        let (yr, yc) = reward_and_cost_to_go(&self.sys, &batch, cfg.gamma, &tail);

        let inv_rows = 1.0 / rows as f64;
        let mut adv_r = vec![0.0; rows];
        let mut g_vr = weighted_param_grad(&self.reward_critic, &state.reward_critic_params, &s_in, |r, v| {
            adv_r[r] = yr[r] - v;
            (v - yr[r]) * inv_rows
        });
        let mut adv_c = vec![0.0; rows];
        let mut g_vc = weighted_param_grad(&self.cost_critic, &state.cost_critic_params, &c_in, |r, v| {
            adv_c[r] = yc[r] - v;
            (v - yc[r]) * inv_rows
        });

        let lambda = state.lambda;
        let mut adv: Vec<f64> = adv_r
            .iter()
            .zip(&adv_c)
            .map(|(ar, ac)| (ar - lambda * ac) / (1.0 + lambda))
            .collect();
        if self.mfpd.standardize_advantage {
            let mean = adv.iter().sum::<f64>() * inv_rows;
            let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() * inv_rows;
            let inv_sd = 1.0 / var.sqrt().max(1e-8);
            adv.iter_mut().for_each(|a| *a = (*a - mean) * inv_sd);
        }
        let (mut g_actor, g_log_std) =
            likelihood_ratio_grads(&self.actor, &state.actor_params, state.log_std, &s_in, &noise, &adv);

        let mut next = state.clone();
        g_vr.scale(-1.0);
        g_vc.scale(-1.0);
        clip_norm(&mut g_vr, self.mfpd.critic_max_grad_norm);
        clip_norm(&mut g_vc, self.mfpd.critic_max_grad_norm);
        next.reward_opt
            .apply(&mut next.reward_critic_params, &g_vr, cfg.critic_lr);
        next.cost_opt
            .apply(&mut next.cost_critic_params, &g_vc, cfg.critic_lr);
        clip_norm(&mut g_actor, cfg.max_grad_norm);
        let actor_lr = cfg.actor_lr.at(k, cfg.max_iters);
        next.actor_opt
            .apply(&mut next.actor_params, &g_actor, actor_lr);
        next.log_std = (state.log_std + self.mfpd.log_std_lr * g_log_std)
            .clamp(self.mfpd.min_log_std, self.mfpd.max_log_std);
        next.lambda = dual_update(lambda, jc, cfg.delta, self.mfpd.dual_lr);

        if !next.actor_params.is_finite()
            || !next.reward_critic_params.is_finite()
            || !next.cost_critic_params.is_finite()
            || !next.log_std.is_finite()
        {
            return Err(Error::Divergence {
                iteration: k,
                what: "non-finite primal-dual parameters".into(),
            });
        }
        next.k = k + 1;
        next.last_metrics = Some(MfpdMetrics {
            k,
            p_hat,
            jc,
            return_est: (0..m).map(|i| yr[i * n]).sum::<f64>() / m as f64,
            lambda,
            std: state.log_std.exp(),
            actor_lr,
            critic_lr: cfg.critic_lr,
        });
        Ok(next)
    }
}
