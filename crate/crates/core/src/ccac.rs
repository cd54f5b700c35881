//! Chance-constrained actor-critic training.
//!
//! One iteration rolls out `M` trajectories of `N` steps through the model,
//! estimates the joint safe probability `p = m / M`, takes a semi-gradient
//! step on the critic against N-step bootstrapped targets, and ascends the
//! actor along the exterior-point proxy direction
//!
//! ```text
//! g = grad J_r                              if p >= 1 - delta
//! g = grad J_r - w_k * grad J_c             otherwise, w_k from b_k (1 - delta - p)
//! ```
//!
//! where both actor gradients are propagated analytically through the
//! dynamics over the stored trajectories.

use serde::{Deserialize, Serialize};

use crate::env::{sample_initial_state, InitSpec, State, System};
use crate::error::{Error, Result};
use crate::nn::{axpy, BatchCache, BatchScratch, GradSink, LayerSpec, Mlp, ParamVector, RowSink};
use crate::rollout::{
    derive_seed, empirical_jc, estimate_safe_prob, rollout_batch, sigmoid, stream, NetPolicy,
    TrajectoryBatch,
};

/// Linearly interpolated learning rate over `max_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub const fn constant(lr: f64) -> Self {
        Self { start: lr, end: lr }
    }

    pub fn at(&self, k: usize, max_iters: usize) -> f64 {
        if max_iters == 0 {
            return self.start;
        }
        let frac = (k as f64 / max_iters as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient steps.
    Sgd,
    Adam,
}

/// How the actor combines the reward and cost gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdateRule {
    /// Exterior-point proxy gradient with scheduled penalty factor.
    Proxy,
    /// `grad J_r - weight * grad J_c`, no switching and no schedule.
    FixedWeight { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub trajectories: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub actor_lr: LrSchedule,
    pub critic_lr: f64,
    pub eta: f64,
    pub delta: f64,
    pub b0: f64,
    pub b_growth: f64,
    pub b_cap: f64,
    pub zeta: f64,
    pub max_iters: usize,
    /// Cap on the cost-gradient weight after relative normalisation.
    pub w_max: f64,
    pub eps_norm: f64,
    /// Rescale the cost gradient to the reward gradient's norm before weighting.
    pub normalize_penalty: bool,
    pub optimizer: OptimizerKind,
    /// Rescale the actor step direction to at most this L2 norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub hidden: Vec<usize>,
    pub update_rule: UpdateRule,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            trajectories: 8192,
            horizon: 80,
            gamma: 0.98,
            actor_lr: LrSchedule {
                start: 36e-5,
                end: 2e-5,
            },
            critic_lr: 2e-4,
            eta: 10.0,
            delta: 0.1,
            b0: 1000.0,
            b_growth: 1.01,
            b_cap: 10000.0,
            zeta: 1e-4,
            max_iters: 1500,
            w_max: 10.0,
            eps_norm: 1e-8,
            normalize_penalty: true,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: None,
            hidden: vec![64, 64],
            update_rule: UpdateRule::Proxy,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.trajectories == 0 || self.horizon == 0 {
            return bad("trajectories and horizon must be >= 1");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0,1)");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0,1)");
        }
        if !(self.b0 > 0.0) || !(self.b_growth >= 1.0) || !(self.b_cap >= self.b0) {
            return bad("penalty schedule needs b0 > 0, b_growth >= 1, b_cap >= b0");
        }
        if !(self.actor_lr.start >= 0.0 && self.actor_lr.end >= 0.0 && self.critic_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.eta > 0.0) || !(self.zeta > 0.0) || !(self.w_max > 0.0) {
            return bad("eta, zeta and w_max must be > 0");
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad("max_grad_norm must be > 0");
            }
        }
        if let UpdateRule::FixedWeight { weight } = self.update_rule {
            if !(weight >= 0.0) {
                return bad("fixed penalty weight must be >= 0");
            }
        }
        Ok(())
    }

    pub fn actor_spec(&self, bounds: (f64, f64)) -> LayerSpec {
        LayerSpec::relu_mlp(3, &self.hidden, 1).with_squash(bounds.0, bounds.1)
    }

    pub fn critic_spec(&self) -> LayerSpec {
        LayerSpec::relu_mlp(4, &self.hidden, 1)
    }
}

/// Scales `g` down to norm `max_norm` when it is longer.
pub fn clip_norm(g: &mut ParamVector, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = g.norm();
        if n > c {
            g.scale(c / n);
        }
    }
}

/// `min(b0 * b_growth^k, b_cap)`.
pub fn penalty_factor(k: usize, cfg: &TrainerConfig) -> f64 {
    let exp = k.min(i32::MAX as usize) as i32;
    (cfg.b0 * cfg.b_growth.powi(exp)).min(cfg.b_cap)
}

/// Per-trajectory `sum_t gamma^t r_t + gamma^N Q(s_N, pi(s_N))`, held constant.
pub fn n_step_target(
    batch: &TrajectoryBatch,
    actor: &Mlp,
    actor_params: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
    cfg: &TrainerConfig,
) -> Result<Vec<f64>> {
    if batch.n != cfg.horizon {
        return Err(Error::Horizon {
            batch: batch.n,
            config: cfg.horizon,
        });
    }
    let mut ac = actor.new_cache();
    let mut cc = critic.new_cache();
    let tail = cfg.gamma.powi(batch.n as i32);
    let returns = batch.discounted_returns(cfg.gamma);
    Ok((0..batch.m)
        .map(|i| {
            let s_n = batch.state(i, batch.n);
            let a_n = actor.eval_scalar(actor_params, &s_n.to_array(), &mut ac);
            let q = critic.eval_scalar(critic_params, &sa(s_n, a_n), &mut cc);
            returns[i] + tail * q
        })
        .collect())
}

#[inline]
fn sa(s: &State, a: f64) -> [f64; 4] {
    [s.v_e, s.v_f, s.eps, a]
}

/// Mean of `(Q(s_0, a_0; w) - y) dQ/dw` over trajectories.
pub fn critic_semi_gradient(
    batch: &TrajectoryBatch,
    targets: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
) -> ParamVector {
    let mut grad = ParamVector::zeros(critic.param_count());
    let mut cache = critic.new_cache();
    let mut d_in = [0.0; 4];
    let inv_m = 1.0 / batch.m as f64;
    for (i, &y) in targets.iter().enumerate() {
        let x = sa(batch.state(i, 0), batch.action(i, 0));
        let q = critic.eval_scalar(critic_params, &x, &mut cache);
        critic.backward_cached(
            critic_params,
            &cache,
            &[1.0],
            &mut [GradSink {
                scale: (q - y) * inv_m,
                grad: &mut grad,
            }],
            &mut d_in,
        );
    }
    grad
}

/// `0.5 * mean (y - Q(s_0, a_0; w))^2`.
pub fn critic_loss(batch: &TrajectoryBatch, targets: &[f64], critic: &Mlp, critic_params: &[f64]) -> f64 {
    let mut cache = critic.new_cache();
    targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let q = critic.eval_scalar(critic_params, &sa(batch.state(i, 0), batch.action(i, 0)), &mut cache);
            0.5 * (y - q) * (y - q)
        })
        .sum::<f64>()
        / batch.m as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpttGrads {
    pub grad_jr: ParamVector,
    pub grad_jc: ParamVector,
}

fn check_replay(batch: &TrajectoryBatch) -> Result<()> {
    let need = batch.m * batch.n;
    if batch.noises.len() != need || batch.states.len() != batch.m * (batch.n + 1) {
        return Err(Error::Format(format!(
            "batch lacks stored disturbances for replay ({} of {need})",
            batch.noises.len()
        )));
    }
    Ok(())
}

/// Sample objectives on the replayed trajectories for the given actor
/// parameters: initial states and disturbances are taken from `batch`,
/// everything downstream is re-simulated.
///
/// Returns `(J_r, J_c)` where `J_r` includes the `gamma^N Q(s_N, a_N)` tail and
/// `J_c` sums the sigmoid surrogate over steps `1..=N`.
pub fn replay_objectives<S: System>(
    batch: &TrajectoryBatch,
    sys: &S,
    actor: &Mlp,
    actor_params: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
    cfg: &TrainerConfig,
) -> Result<(f64, f64)> {
    check_replay(batch)?;
    let mut ac = actor.new_cache();
    let mut cc = critic.new_cache();
    let (mut jr, mut jc) = (0.0, 0.0);
    for i in 0..batch.m {
        let mut s = *batch.state(i, 0);
        let mut disc = 1.0;
        for t in 0..batch.n {
            let a = actor.eval_scalar(actor_params, &s.to_array(), &mut ac);
            jr += disc * sys.reward(&s);
            s = sys.step_unchecked(&s, a, batch.noise(i, t));
            jc += sigmoid(cfg.eta * sys.constraint_h(&s));
            disc *= cfg.gamma;
        }
        let a = actor.eval_scalar(actor_params, &s.to_array(), &mut ac);
        jr += disc * critic.eval_scalar(critic_params, &sa(&s, a), &mut cc);
    }
    Ok((jr / batch.m as f64, jc / batch.m as f64))
}

#[inline]
fn vec_mat(v: &[f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, vi) in v.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += vi * m[i][j];
        }
    }
    out
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Policy gradients of the sample reward and surrogate-cost objectives,
/// back-propagated through the model over the replayed trajectories.
///
/// Equivalent to the forward sensitivity recursion in
/// [`bptt_grads_forward`] but computed with state adjoints, which costs one
/// actor backward pass per step instead of propagating a `3 x P` sensitivity.
/// Trajectories are processed in lockstep chunks so every layer runs as a
/// matrix product over the chunk.
pub fn bptt_grads<S: System>(
    batch: &TrajectoryBatch,
    sys: &S,
    actor: &Mlp,
    actor_params: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
    cfg: &TrainerConfig,
) -> Result<BpttGrads> {
    check_replay(batch)?;
    let n = batch.n;
    let p = actor.param_count();
    let mut grad_jr = ParamVector::zeros(p);
    let mut grad_jc = ParamVector::zeros(p);
    let chunk = batch.m.min(BPTT_CHUNK);
    let actor_t = actor.transposed(actor_params);
    let critic_t = critic.transposed(critic_params);
    let mut caches: Vec<BatchCache> = (0..=n).map(|_| actor.new_batch_cache(chunk)).collect();
    let mut critic_cache = critic.new_batch_cache(chunk);
    let mut scratch = BatchScratch::default();
    let mut states = vec![State::default(); (n + 1) * chunk];
    let mut inputs = vec![0.0; chunk * 4];
    let ones = vec![1.0; chunk];
    let mut d_actor = vec![0.0; chunk * 3];
    let mut d_critic = vec![0.0; chunk * 4];
    let mut lam_s = vec![[0.0; 3]; chunk];
    let mut mu_s = vec![[0.0; 3]; chunk];
    let mut lam_a = vec![0.0; chunk];
    let mut mu_a = vec![0.0; chunk];
    let discounts: Vec<f64> = (0..=n).map(|t| cfg.gamma.powi(t as i32)).collect();

    let mut start = 0;
    while start < batch.m {
        let rows = chunk.min(batch.m - start);
        for b in 0..rows {
            states[b] = *batch.state(start + b, 0);
        }
        for t in 0..=n {
            let (cur, next) = states[t * chunk..].split_at_mut(chunk);
            inputs.truncate(0);
            for s in &cur[..rows] {
                inputs.extend_from_slice(&s.to_array());
            }
            let actions = actor.forward_batch(actor_params, &inputs, &mut caches[t]);
            if t < n {
                for b in 0..rows {
                    next[b] = sys.step_unchecked(&cur[b], actions[b], batch.noise(start + b, t));
                }
            }
        }

        // Terminal: gamma^N Q(s_N, a_N) for J_r, last surrogate cost for J_c.
        let last = &states[n * chunk..n * chunk + rows];
        inputs.truncate(0);
        for (s, &a) in last.iter().zip(caches[n].output()) {
            inputs.extend_from_slice(&sa(s, a));
        }
        critic.forward_batch(critic_params, &inputs, &mut critic_cache);
        critic.backward_batch(
            &critic_t,
            &critic_cache,
            &ones[..rows],
            &mut [],
            &mut d_critic[..rows * 4],
            &mut scratch,
        );
        let tail = discounts[n];
        for b in 0..rows {
            let dq = &d_critic[b * 4..b * 4 + 4];
            lam_s[b] = [tail * dq[0], tail * dq[1], tail * dq[2]];
            lam_a[b] = tail * dq[3];
            mu_s[b] = cost_grad(sys, &last[b], cfg.eta);
            mu_a[b] = 0.0;
        }

        for t in (0..=n).rev() {
            if t < n {
                // lam_s / mu_s hold the adjoints of s_{t+1}.
                for b in 0..rows {
                    let s = &states[t * chunk + b];
                    let (jac_s, jac_a) = sys.jacobians(s, caches[t].output()[b], batch.noise(start + b, t));
                    lam_a[b] = dot3(&lam_s[b], &jac_a);
                    mu_a[b] = dot3(&mu_s[b], &jac_a);
                    let mut nl = vec_mat(&lam_s[b], &jac_s);
                    let mut nm = vec_mat(&mu_s[b], &jac_s);
                    let rg = sys.reward_grad(s);
                    for j in 0..3 {
                        nl[j] += discounts[t] * rg[j];
                    }
                    if t >= 1 {
                        let cg = cost_grad(sys, s, cfg.eta);
                        for j in 0..3 {
                            nm[j] += cg[j];
                        }
                    }
                    lam_s[b] = nl;
                    mu_s[b] = nm;
                }
            }
            actor.backward_batch(
                &actor_t,
                &caches[t],
                &ones[..rows],
                &mut [
                    RowSink {
                        coefs: &lam_a[..rows],
                        grad: &mut grad_jr,
                    },
                    RowSink {
                        coefs: &mu_a[..rows],
                        grad: &mut grad_jc,
                    },
                ],
                &mut d_actor[..rows * 3],
                &mut scratch,
            );
            for b in 0..rows {
                for j in 0..3 {
                    lam_s[b][j] += lam_a[b] * d_actor[b * 3 + j];
                    mu_s[b][j] += mu_a[b] * d_actor[b * 3 + j];
                }
            }
        }
        start += rows;
    }
    let inv_m = 1.0 / batch.m as f64;
    grad_jr.scale(inv_m);
    grad_jc.scale(inv_m);
    Ok(BpttGrads { grad_jr, grad_jc })
}

/// Trajectories per lockstep chunk in [`bptt_grads`].
const BPTT_CHUNK: usize = 128;

/// d sigmoid(eta h(s)) / ds
#[inline]
fn cost_grad<S: System>(sys: &S, s: &State, eta: f64) -> [f64; 3] {
    let sg = sigmoid(eta * sys.constraint_h(s));
    let k = eta * sg * (1.0 - sg);
    let hg = sys.constraint_grad(s);
    [k * hg[0], k * hg[1], k * hg[2]]
}

/// Reference implementation with the forward sensitivity recursion
/// `phi_{t+1} = dF/ds phi_t + dF/da psi_t`, `psi_t = dpi/ds phi_t + grad_theta pi`,
/// `phi_0 = 0`. Same contract as [`bptt_grads`]; O(P) memory per state
/// component, so it is only used to cross-check the adjoint version.
pub fn bptt_grads_forward<S: System>(
    batch: &TrajectoryBatch,
    sys: &S,
    actor: &Mlp,
    actor_params: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
    cfg: &TrainerConfig,
) -> Result<BpttGrads> {
    check_replay(batch)?;
    let n = batch.n;
    let p = actor.param_count();
    let mut grad_jr = ParamVector::zeros(p);
    let mut grad_jc = ParamVector::zeros(p);
    let mut cache = actor.new_cache();
    let mut cc = critic.new_cache();
    for i in 0..batch.m {
        let mut phi = vec![vec![0.0; p]; 3];
        let mut s = *batch.state(i, 0);
        let mut disc = 1.0;
        for t in 0..=n {
            let x = s.to_array();
            let a = actor.eval_scalar(actor_params, &x, &mut cache);
            let mut grad_pi = vec![0.0; p];
            let mut dpi_ds = [0.0; 3];
            actor.backward_cached(
                actor_params,
                &cache,
                &[1.0],
                &mut [GradSink {
                    scale: 1.0,
                    grad: &mut grad_pi,
                }],
                &mut dpi_ds,
            );
            let mut psi = grad_pi;
            for j in 0..3 {
                axpy(dpi_ds[j], &phi[j], &mut psi);
            }
            if t >= 1 {
                let cg = cost_grad(sys, &s, cfg.eta);
                for j in 0..3 {
                    axpy(cg[j], &phi[j], &mut grad_jc);
                }
            }
            if t == n {
                let mut d_q = [0.0; 4];
                critic.eval_scalar(critic_params, &sa(&s, a), &mut cc);
                critic.backward_cached(critic_params, &cc, &[1.0], &mut [], &mut d_q);
                for j in 0..3 {
                    axpy(disc * d_q[j], &phi[j], &mut grad_jr);
                }
                axpy(disc * d_q[3], &psi, &mut grad_jr);
                break;
            }
            let rg = sys.reward_grad(&s);
            for j in 0..3 {
                axpy(disc * rg[j], &phi[j], &mut grad_jr);
            }
            let xi = batch.noise(i, t);
            let (jac_s, jac_a) = sys.jacobians(&s, a, xi);
            let mut next = vec![vec![0.0; p]; 3];
            for (r, row) in next.iter_mut().enumerate() {
                for j in 0..3 {
                    if jac_s[r][j] != 0.0 {
                        axpy(jac_s[r][j], &phi[j], row);
                    }
                }
                if jac_a[r] != 0.0 {
                    axpy(jac_a[r], &psi, row);
                }
            }
            phi = next;
            s = sys.step_unchecked(&s, a, xi);
            disc *= cfg.gamma;
        }
    }
    let inv_m = 1.0 / batch.m as f64;
    grad_jr.scale(inv_m);
    grad_jc.scale(inv_m);
    Ok(BpttGrads { grad_jr, grad_jc })
}

/// Actor ascent direction and the weight finally applied to `grad J_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyStep {
    pub direction: ParamVector,
    /// `b_k * max(1 - delta - p, 0)` before normalisation.
    pub raw_weight: f64,
    /// Multiplier actually applied to `grad J_c`.
    pub coefficient: f64,
}

/// `grad J_r - coef * grad J_c`.
pub fn penalized_gradient(g: &BpttGrads, coef: f64) -> ParamVector {
    let mut d = g.grad_jr.clone();
    d.axpy(-coef, &g.grad_jc);
    d
}

/// Exterior-point proxy direction. When `p_hat >= 1 - delta` the reward
/// gradient is returned untouched.
pub fn proxy_gradient(g: &BpttGrads, p_hat: f64, b_k: f64, cfg: &TrainerConfig) -> ProxyStep {
    let slack = 1.0 - cfg.delta - p_hat;
    if slack <= 0.0 {
        return ProxyStep {
            direction: g.grad_jr.clone(),
            raw_weight: 0.0,
            coefficient: 0.0,
        };
    }
    let raw = b_k * slack;
    let coefficient = if cfg.normalize_penalty {
        raw.min(cfg.w_max) * g.grad_jr.norm() / g.grad_jc.norm().max(cfg.eps_norm)
    } else {
        raw
    };
    ProxyStep {
        direction: penalized_gradient(g, coefficient),
        raw_weight: raw,
        coefficient,
    }
}

/// Proxy-gradient ascent on `f(x) = -x^2` under the surrogate constraint
/// `sigmoid(x) >= 1 - delta`, with cost `1 - sigmoid(x)`. Returns the final
/// iterate.
pub fn exterior_point_toy(x0: f64, lr: f64, iters: usize, cfg: &TrainerConfig) -> f64 {
    let mut x = x0;
    for k in 0..iters {
        let p = sigmoid(x);
        let g = BpttGrads {
            grad_jr: ParamVector(vec![-2.0 * x]),
            grad_jc: ParamVector(vec![-p * (1.0 - p)]),
        };
        x += lr * proxy_gradient(&g, p, penalty_factor(k, cfg), cfg).direction[0];
    }
    x
}

/// Central-difference comparison of the analytic gradients on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub jr_error: f64,
    pub jc_error: f64,
    pub critic_error: f64,
    /// Smallest |pre-activation| of any ReLU unit met while replaying; small
    /// values mean a finite difference may straddle a kink.
    pub relu_margin: f64,
}

/// Checks [`bptt_grads`] against [`replay_objectives`] and
/// [`critic_semi_gradient`] against [`critic_loss`] by central differences.
/// Errors are [`max_rel_error`](crate::nn::max_rel_error) values.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<S: System>(
    batch: &TrajectoryBatch,
    sys: &S,
    actor: &Mlp,
    actor_params: &[f64],
    critic: &Mlp,
    critic_params: &[f64],
    cfg: &TrainerConfig,
    step: f64,
) -> Result<GradCheck> {
    use crate::nn::max_rel_error;
    let g = bptt_grads(batch, sys, actor, actor_params, critic, critic_params, cfg)?;
    let mut fd_r = vec![0.0; actor_params.len()];
    let mut fd_c = vec![0.0; actor_params.len()];
    let mut p = actor_params.to_vec();
    for j in 0..p.len() {
        let orig = p[j];
        p[j] = orig + step;
        let (r1, c1) = replay_objectives(batch, sys, actor, &p, critic, critic_params, cfg)?;
        p[j] = orig - step;
        let (r0, c0) = replay_objectives(batch, sys, actor, &p, critic, critic_params, cfg)?;
        p[j] = orig;
        fd_r[j] = (r1 - r0) / (2.0 * step);
        fd_c[j] = (c1 - c0) / (2.0 * step);
    }

    let targets = n_step_target(batch, actor, actor_params, critic, critic_params, cfg)?;
    let gw = critic_semi_gradient(batch, &targets, critic, critic_params);
    let mut w = critic_params.to_vec();
    let mut fd_w = vec![0.0; w.len()];
    for j in 0..w.len() {
        let orig = w[j];
        w[j] = orig + step;
        let l1 = critic_loss(batch, &targets, critic, &w);
        w[j] = orig - step;
        let l0 = critic_loss(batch, &targets, critic, &w);
        w[j] = orig;
        fd_w[j] = (l1 - l0) / (2.0 * step);
    }

    let mut margin = f64::INFINITY;
    let mut ac = actor.new_cache();
    for i in 0..batch.m {
        let mut s = *batch.state(i, 0);
        for t in 0..=batch.n {
            let x = s.to_array();
            margin = margin.min(actor.min_relu_margin(actor_params, &x));
            let a = actor.eval_scalar(actor_params, &x, &mut ac);
            if t == batch.n {
                margin = margin.min(critic.min_relu_margin(critic_params, &sa(&s, a)));
            } else {
                s = sys.step_unchecked(&s, a, batch.noise(i, t));
            }
        }
        margin = margin.min(critic.min_relu_margin(critic_params, &sa(batch.state(i, 0), batch.action(i, 0))));
    }
    Ok(GradCheck {
        jr_error: max_rel_error(&g.grad_jr, &fd_r),
        jc_error: max_rel_error(&g.grad_jc, &fd_c),
        critic_error: max_rel_error(&gw, &fd_w),
        relu_margin: margin,
    })
}

/// Optimiser state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, m, v, t: 0 }
    }

    /// `params += lr * step(direction)`; pass a negated gradient to descend.
    pub fn apply(&mut self, params: &mut [f64], direction: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => axpy(lr, direction, params),
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t as i32);
                let c2 = 1.0 - B2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(direction)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p += lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub k: usize,
    pub p_hat: f64,
    pub jc: f64,
    /// Batch mean of the N-step return with the critic tail.
    pub return_est: f64,
    pub b_k: f64,
    pub penalty_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub actor_params: ParamVector,
    pub critic_params: ParamVector,
    pub k: usize,
    pub seed: u64,
    pub actor_opt: OptState,
    pub critic_opt: OptState,
    pub last_metrics: Option<IterationMetrics>,
}

/// Networks, model and configuration shared by every iteration.
#[derive(Debug, Clone)]
pub struct Trainer<S: System> {
    pub cfg: TrainerConfig,
    pub sys: S,
    pub init: InitSpec,
    pub actor: Mlp,
    pub critic: Mlp,
}

impl<S: System> Trainer<S> {
    pub fn new(cfg: TrainerConfig, sys: S, init: InitSpec) -> Result<Self> {
        cfg.validate()?;
        init.validate()?;
        let actor = Mlp::new(cfg.actor_spec(sys.action_bounds()))?;
        let critic = Mlp::new(cfg.critic_spec())?;
        Ok(Self {
            cfg,
            sys,
            init,
            actor,
            critic,
        })
    }

    pub fn initial_state(&self, seed: u64) -> Result<TrainerState> {
        let (_, actor_params) = Mlp::init(self.actor.spec().clone(), derive_seed(seed, u64::MAX))?;
        let (_, critic_params) = Mlp::init(self.critic.spec().clone(), derive_seed(seed, u64::MAX - 1))?;
        Ok(TrainerState {
            actor_opt: OptState::new(self.cfg.optimizer, actor_params.len()),
            critic_opt: OptState::new(self.cfg.optimizer, critic_params.len()),
            actor_params,
            critic_params,
            k: 0,
            seed,
            last_metrics: None,
        })
    }

    pub fn policy<'a>(&'a self, params: &'a [f64]) -> NetPolicy<'a> {
        NetPolicy {
            net: &self.actor,
            params,
        }
    }

    /// One pass: rollout, safe-probability estimate, critic step, actor step.
    pub fn train_iteration(&self, state: &TrainerState) -> Result<TrainerState> {
        let cfg = &self.cfg;
        let k = state.k;
        let mut next = state.clone();
        let batch = rollout_batch(
            &self.sys,
            &self.policy(&state.actor_params),
            &self.init,
            cfg.trajectories,
            cfg.horizon,
            derive_seed(state.seed, k as u64),
        )?;
        let p_hat = estimate_safe_prob(&batch).p_hat;
        let jc = empirical_jc(&self.sys, &batch);

        let targets = n_step_target(
            &batch,
            &self.actor,
            &state.actor_params,
            &self.critic,
            &state.critic_params,
            cfg,
        )?;
        let mut critic_grad = critic_semi_gradient(&batch, &targets, &self.critic, &state.critic_params);
        critic_grad.scale(-1.0);
        next.critic_opt
            .apply(&mut next.critic_params, &critic_grad, cfg.critic_lr);

        let grads = bptt_grads(
            &batch,
            &self.sys,
            &self.actor,
            &state.actor_params,
            &self.critic,
            &next.critic_params,
            cfg,
        )?;
        let b_k = penalty_factor(k, cfg);
        let (mut direction, coef) = match cfg.update_rule {
            UpdateRule::Proxy => {
                let step = proxy_gradient(&grads, p_hat, b_k, cfg);
                (step.direction, step.coefficient)
            }
            UpdateRule::FixedWeight { weight } => (penalized_gradient(&grads, weight), weight),
        };
        clip_norm(&mut direction, cfg.max_grad_norm);
        let actor_lr = cfg.actor_lr.at(k, cfg.max_iters);
        next.actor_opt
            .apply(&mut next.actor_params, &direction, actor_lr);

        if !next.actor_params.is_finite() || !next.critic_params.is_finite() {
            return Err(Error::Divergence {
                iteration: k,
                what: "non-finite network parameters".into(),
            });
        }
        let return_est = targets.iter().sum::<f64>() / targets.len() as f64;
        if !return_est.is_finite() {
            return Err(Error::Divergence {
                iteration: k,
                what: "non-finite critic targets".into(),
            });
        }
        next.k = k + 1;
        next.last_metrics = Some(IterationMetrics {
            k,
            p_hat,
            jc,
            return_est,
            b_k,
            penalty_coef: coef,
            actor_lr,
            critic_lr: cfg.critic_lr,
        });
        Ok(next)
    }

    /// Metrics of the current parameters on iteration `k`'s batch, without
    /// updating anything.
    pub fn measure(&self, state: &TrainerState) -> Result<IterationMetrics> {
        let cfg = &self.cfg;
        let k = state.k;
        let batch = rollout_batch(
            &self.sys,
            &self.policy(&state.actor_params),
            &self.init,
            cfg.trajectories,
            cfg.horizon,
            derive_seed(state.seed, k as u64),
        )?;
        let targets = n_step_target(
            &batch,
            &self.actor,
            &state.actor_params,
            &self.critic,
            &state.critic_params,
            cfg,
        )?;
        Ok(IterationMetrics {
            k,
            p_hat: estimate_safe_prob(&batch).p_hat,
            jc: empirical_jc(&self.sys, &batch),
            return_est: targets.iter().sum::<f64>() / targets.len() as f64,
            b_k: penalty_factor(k, cfg),
            penalty_coef: 0.0,
            actor_lr: cfg.actor_lr.at(k, cfg.max_iters),
            critic_lr: cfg.critic_lr,
        })
    }

    /// Fixed probe set for convergence checks: 256 states from `init` under a
    /// dedicated seed.
    pub fn probe_states(&self) -> Vec<State> {
        let mut rng = stream(0xC0DE_CCAC, 0);
        (0..256)
            .map(|_| sample_initial_state(&mut rng, &self.init).expect("validated init"))
            .collect()
    }

    /// True iff both the critic value and the policy action move by at most
    /// `zeta` on every probe state.
    pub fn convergence_check(&self, prev: &TrainerState, cur: &TrainerState, probes: &[State], zeta: f64) -> bool {
        let mut ac = self.actor.new_cache();
        let mut cc = self.critic.new_cache();
        let mut dq: f64 = 0.0;
        let mut dpi: f64 = 0.0;
        for s in probes {
            let x = s.to_array();
            let a0 = self.actor.eval_scalar(&prev.actor_params, &x, &mut ac);
            let a1 = self.actor.eval_scalar(&cur.actor_params, &x, &mut ac);
            let q0 = self.critic.eval_scalar(&prev.critic_params, &sa(s, a0), &mut cc);
            let q1 = self.critic.eval_scalar(&cur.critic_params, &sa(s, a1), &mut cc);
            dpi = dpi.max((a1 - a0).abs());
            dq = dq.max((q1 - q0).abs());
        }
        dq <= zeta && dpi <= zeta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CarFollowing;
    use crate::nn::max_rel_error;
    use crate::rollout::ConstantPolicy;

    fn tiny_cfg() -> TrainerConfig {
        TrainerConfig {
            trajectories: 4,
            horizon: 3,
            hidden: vec![2, 2],
            max_iters: 10,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn penalty_schedule() {
        let cfg = TrainerConfig::default();
        assert_eq!(penalty_factor(0, &cfg), 1000.0);
        assert!((penalty_factor(100, &cfg) - 1000.0 * 1.01f64.powi(100)).abs() < 1e-9);
        assert_eq!(penalty_factor(232, &cfg), 10000.0);
        assert!(penalty_factor(231, &cfg) < 10000.0);
        assert_eq!(penalty_factor(1_000_000, &cfg), 10000.0);
        let mut prev = 0.0;
        for k in 0..400 {
            let b = penalty_factor(k, &cfg);
            assert!(b >= prev);
            prev = b;
        }
    }

    fn scalar_critic() -> (Mlp, ParamVector) {
        // Q(s, a) = bias: no inputs contribute
        let spec = LayerSpec {
            input_dim: 4,
            hidden_dims: vec![],
            output_dim: 1,
            activations: vec![crate::nn::Activation::Linear],
            output_squash: None,
        };
        (Mlp::new(spec).unwrap(), ParamVector(vec![0.0, 0.0, 0.0, 0.0, 5.0]))
    }

    #[test]
    fn scalar_critic_semi_gradient_by_hand() {
        let sys = CarFollowing::default();
        let b = rollout_batch(&sys, &ConstantPolicy(0.0), &InitSpec::default(), 1, 1, 0).unwrap();
        let (critic, w) = scalar_critic();
        let g = critic_semi_gradient(&b, &[3.0], &critic, &w);
        assert_eq!(g[4], 2.0);
        let g0 = critic_semi_gradient(&b, &[5.0], &critic, &w);
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn n_step_target_by_hand() {
        let sys = CarFollowing::default();
        let init = InitSpec::point(State::new(5.0, 6.0, 6.0));
        let b = rollout_batch(&sys, &ConstantPolicy(0.0), &init, 1, 1, 0).unwrap();
        let cfg = TrainerConfig {
            horizon: 1,
            hidden: vec![2],
            ..TrainerConfig::default()
        };
        let (actor, theta) = Mlp::init(cfg.actor_spec((-4.0, 3.0)), 1).unwrap();
        let (critic, mut w) = scalar_critic();
        w[4] = 10.0;
        let y = n_step_target(&b, &actor, &theta, &critic, &w, &cfg).unwrap();
        assert!((y[0] - 10.5).abs() < 1e-12, "{y:?}");

        let zero_w = ParamVector::zeros(5);
        let mut zb = b.clone();
        zb.rewards.iter_mut().for_each(|r| *r = 0.0);
        assert_eq!(n_step_target(&zb, &actor, &theta, &critic, &zero_w, &cfg).unwrap(), vec![0.0]);

        let g0 = TrainerConfig { gamma: 0.0, ..cfg.clone() };
        assert!((n_step_target(&b, &actor, &theta, &critic, &w, &g0).unwrap()[0] - 0.7).abs() < 1e-12);

        let wrong = TrainerConfig { horizon: 2, ..cfg };
        assert!(matches!(
            n_step_target(&b, &actor, &theta, &critic, &w, &wrong),
            Err(Error::Horizon { .. })
        ));
    }

    #[test]
    fn one_step_linear_policy_by_hand() {
        // a = theta * v_e (single linear unit without bias or squash), N = 1.
        // J_r = r(s0) + g Q(s1, theta v_e1), s1 = (v_e + T theta v_e, v_f, eps + T(v_f - v_e) + T xi),
        // critic Q = c . [v_e, v_f, eps, a].
        let sys = CarFollowing::default();
        let init = InitSpec::point(State::new(5.0, 6.0, 6.0));
        let b = rollout_batch(&sys, &ConstantPolicy(0.0), &init, 1, 1, 3).unwrap();
        let actor_spec = LayerSpec {
            input_dim: 3,
            hidden_dims: vec![],
            output_dim: 1,
            activations: vec![crate::nn::Activation::Linear],
            output_squash: None,
        };
        let actor = Mlp::new(actor_spec).unwrap();
        let theta = 0.2;
        let tp = [theta, 0.0, 0.0, 0.0];
        let critic_spec = LayerSpec {
            input_dim: 4,
            hidden_dims: vec![],
            output_dim: 1,
            activations: vec![crate::nn::Activation::Linear],
            output_squash: None,
        };
        let critic = Mlp::new(critic_spec).unwrap();
        let c = [0.3, -0.1, 0.05, 0.7];
        let wp = [c[0], c[1], c[2], c[3], 0.0];
        let cfg = TrainerConfig {
            horizon: 1,
            ..TrainerConfig::default()
        };
        let g = bptt_grads(&b, &sys, &actor, &tp, &critic, &wp, &cfg).unwrap();
        let (t, v_e, gamma) = (0.1, 5.0, 0.98);
        // d v_e1/d theta = T v_e ; d a1/d theta = v_e1 + theta * T v_e
        let v_e1 = v_e + t * theta * v_e;
        let dv = t * v_e;
        let da1 = v_e1 + theta * dv;
        let expected = gamma * (c[0] * dv + c[3] * da1);
        assert!((g.grad_jr[0] - expected).abs() < 1e-12, "{} vs {expected}", g.grad_jr[0]);
        // gap at t=1 does not depend on a0, so the surrogate gradient vanishes
        assert!(g.grad_jc[0].abs() < 1e-15);
    }

    #[test]
    fn constant_policy_has_zero_gradients() {
        let sys = CarFollowing::default();
        let cfg = tiny_cfg();
        let (actor, mut theta) = Mlp::init(cfg.actor_spec((-4.0, 3.0)), 2).unwrap();
        // zero the first layer: output no longer depends on the state, but the
        // deeper weights still receive gradients; zeroing every weight makes
        // grad_theta pi vanish except through the output bias.
        theta.iter_mut().for_each(|v| *v = 0.0);
        let (critic, w) = Mlp::init(cfg.critic_spec(), 3).unwrap();
        let b = rollout_batch(&sys, &NetPolicy { net: &actor, params: &theta }, &InitSpec::default(), 4, 3, 0).unwrap();
        let g = bptt_grads(&b, &sys, &actor, &theta, &critic, &w, &cfg).unwrap();
        // Only the final bias can move the (constant) action.
        let last_bias = theta.len() - 1;
        for (i, v) in g.grad_jr.iter().enumerate() {
            if i != last_bias {
                assert_eq!(*v, 0.0);
            }
        }
        for (i, v) in g.grad_jc.iter().enumerate() {
            if i != last_bias {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn adjoint_and_forward_recursions_agree() {
        let sys = CarFollowing::default();
        let cfg = TrainerConfig {
            trajectories: 6,
            horizon: 12,
            hidden: vec![5, 4],
            ..TrainerConfig::default()
        };
        let (actor, theta) = Mlp::init(cfg.actor_spec((-4.0, 3.0)), 5).unwrap();
        let (critic, w) = Mlp::init(cfg.critic_spec(), 6).unwrap();
        let init = InitSpec {
            eps: (1.5, 4.0),
            ..InitSpec::default()
        };
        let b = rollout_batch(&sys, &NetPolicy { net: &actor, params: &theta }, &init, 6, 12, 8).unwrap();
        let rev = bptt_grads(&b, &sys, &actor, &theta, &critic, &w, &cfg).unwrap();
        let fwd = bptt_grads_forward(&b, &sys, &actor, &theta, &critic, &w, &cfg).unwrap();
        assert!(max_rel_error(&rev.grad_jr, &fwd.grad_jr) < 1e-12);
        assert!(max_rel_error(&rev.grad_jc, &fwd.grad_jc) < 1e-12);
    }

    /// Glorot weights plus uniform jitter on every parameter, so no unit sits
    /// exactly on its kink.
    fn random_net(spec: LayerSpec, seed: u64) -> (Mlp, ParamVector) {
        use rand::Rng;
        let (net, mut p) = Mlp::init(spec, seed).unwrap();
        let mut rng = stream(seed, 1);
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        (net, p)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let sys = CarFollowing::default();
        let cfg = tiny_cfg();
        let init = InitSpec {
            eps: (1.8, 4.0),
            ..InitSpec::default()
        };
        let mut checked = 0;
        for seed in 0..12u64 {
            let (actor, theta) = random_net(cfg.actor_spec((-4.0, 3.0)), 100 + seed);
            let (critic, w) = random_net(cfg.critic_spec(), 200 + seed);
            let b = rollout_batch(&sys, &NetPolicy { net: &actor, params: &theta }, &init, 4, 3, seed).unwrap();
            let r = gradient_check(&b, &sys, &actor, &theta, &critic, &w, &cfg, 1e-5).unwrap();
            if r.relu_margin < 1e-3 {
                continue;
            }
            checked += 1;
            assert!(r.jr_error < 1e-4 && r.jc_error < 1e-4 && r.critic_error < 1e-4, "seed {seed}: {r:?}");
        }
        assert!(checked >= 6);
    }

    #[test]
    fn clipping_caps_only_long_directions() {
        let mut g = ParamVector(vec![3.0, 4.0]);
        clip_norm(&mut g, None);
        assert_eq!(g.0, vec![3.0, 4.0]);
        clip_norm(&mut g, Some(10.0));
        assert_eq!(g.0, vec![3.0, 4.0]);
        clip_norm(&mut g, Some(1.0));
        assert!((g.0[0] - 0.6).abs() < 1e-15 && (g.0[1] - 0.8).abs() < 1e-15);
        let bad = TrainerConfig {
            max_grad_norm: Some(0.0),
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn raw_rule() -> TrainerConfig {
        TrainerConfig {
            normalize_penalty: false,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn toy_settles_on_the_constraint_boundary() {
        for x0 in [-3.0, -0.5, 0.0, 0.7, 2.197, 4.0] {
            let p = sigmoid(exterior_point_toy(x0, 1e-3, 20_000, &raw_rule()));
            assert!((0.89..=0.91).contains(&p), "raw x0={x0}: p={p}");
        }
        for x0 in [0.3, 0.7, 2.197, 4.0] {
            let p = sigmoid(exterior_point_toy(x0, 1e-3, 20_000, &TrainerConfig::default()));
            assert!((0.89..=0.91).contains(&p), "normalized x0={x0}: p={p}");
        }
        // The normalized weight scales with |grad f| = 2|x|, so a start left of
        // the unconstrained optimum only creeps towards it.
        let stuck = exterior_point_toy(-1.0, 1e-3, 20_000, &TrainerConfig::default());
        assert!(stuck < 0.0 && stuck > -1e-3);
        // Without an active constraint the optimum is x = 0.
        let free = TrainerConfig {
            delta: 0.99,
            ..TrainerConfig::default()
        };
        assert!(exterior_point_toy(2.0, 1e-3, 20_000, &free).abs() < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn toy_converges_from_anywhere(x0 in -4.0..5.0f64, lr in 2e-4..2e-3f64) {
            let p = sigmoid(exterior_point_toy(x0, lr, 20_000, &raw_rule()));
            proptest::prop_assert!((0.89..=0.91).contains(&p), "p = {}", p);
        }

        #[test]
        fn normalized_toy_converges_from_the_right(x0 in 0.05..5.0f64, lr in 2e-4..2e-3f64) {
            let p = sigmoid(exterior_point_toy(x0, lr, 20_000, &TrainerConfig::default()));
            proptest::prop_assert!((0.89..=0.91).contains(&p), "p = {}", p);
        }
    }

    #[test]
    fn missing_noise_is_rejected() {
        let sys = CarFollowing::default();
        let cfg = tiny_cfg();
        let (actor, theta) = Mlp::init(cfg.actor_spec((-4.0, 3.0)), 5).unwrap();
        let (critic, w) = Mlp::init(cfg.critic_spec(), 6).unwrap();
        let mut b = rollout_batch(&sys, &ConstantPolicy(0.0), &InitSpec::default(), 4, 3, 0).unwrap();
        b.noises.clear();
        assert!(bptt_grads(&b, &sys, &actor, &theta, &critic, &w, &cfg).is_err());
    }

    fn grads(r: Vec<f64>, c: Vec<f64>) -> BpttGrads {
        BpttGrads {
            grad_jr: ParamVector(r),
            grad_jc: ParamVector(c),
        }
    }

    #[test]
    fn proxy_gradient_switching() {
        let cfg = TrainerConfig::default();
        let g = grads(vec![0.3, -1.2, 2.5], vec![1.0, 4.0, -0.5]);
        for p in [0.9, 0.95, 1.0] {
            let s = proxy_gradient(&g, p, 1000.0, &cfg);
            assert_eq!(s.direction, g.grad_jr);
            assert_eq!(s.coefficient, 0.0);
        }
        let eq = grads(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let s = proxy_gradient(&eq, 0.8, 1000.0, &cfg);
        assert!((s.raw_weight - 100.0).abs() < 1e-9);
        assert!((s.coefficient - cfg.w_max).abs() < 1e-12);
        let raw = TrainerConfig {
            normalize_penalty: false,
            ..cfg
        };
        assert!((proxy_gradient(&eq, 0.8, 1000.0, &raw).coefficient - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let cfg = TrainerConfig {
            trajectories: 8,
            horizon: 5,
            hidden: vec![4, 4],
            actor_lr: LrSchedule::constant(0.0),
            critic_lr: 0.0,
            ..TrainerConfig::default()
        };
        let t = Trainer::new(cfg, CarFollowing::default(), InitSpec::default()).unwrap();
        let s0 = t.initial_state(1).unwrap();
        let s1 = t.train_iteration(&s0).unwrap();
        assert_eq!(s1.actor_params, s0.actor_params);
        assert_eq!(s1.critic_params, s0.critic_params);
        assert_eq!(s1.k, 1);
        let probes = t.probe_states();
        assert!(t.convergence_check(&s0, &s1, &probes, 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainerConfig {
            trajectories: 16,
            horizon: 10,
            hidden: vec![8, 8],
            ..TrainerConfig::default()
        };
        let t = Trainer::new(cfg, CarFollowing::default(), InitSpec::default()).unwrap();
        let run = || {
            let mut s = t.initial_state(42).unwrap();
            for _ in 0..5 {
                s = t.train_iteration(&s).unwrap();
            }
            s
        };
        let s = run();
        assert_eq!(s, run());
        let logged = t.train_iteration(&s).unwrap().last_metrics.unwrap();
        let measured = t.measure(&s).unwrap();
        assert_eq!((measured.p_hat, measured.jc, measured.return_est), (logged.p_hat, logged.jc, logged.return_est));
    }

    #[test]
    fn convergence_check_is_a_conjunction() {
        let cfg = TrainerConfig {
            hidden: vec![4, 4],
            ..TrainerConfig::default()
        };
        let t = Trainer::new(cfg, CarFollowing::default(), InitSpec::default()).unwrap();
        let s0 = t.initial_state(3).unwrap();
        let probes = t.probe_states();
        assert_eq!(probes, t.probe_states());
        assert!(t.convergence_check(&s0, &s0, &probes, 1e-4));
        let mut moved = s0.clone();
        let last = moved.actor_params.len() - 1;
        moved.actor_params[last] += 0.5;
        assert!(!t.convergence_check(&s0, &moved, &probes, 1e-4));
    }

    #[test]
    fn adam_moves_parameters_along_direction() {
        let mut opt = OptState::new(OptimizerKind::Adam, 2);
        let mut p = vec![0.0, 0.0];
        opt.apply(&mut p, &[1.0, -2.0], 0.1);
        assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-6);
    }
}
