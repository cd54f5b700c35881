//! C ABI over the car-following environment, trained policies and the
//! action shield.
//!
//! Every fallible call returns a [`CcacStatus`]; on failure the message is
//! kept per thread and can be read with [`ccac_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. A handle may
//! be moved between threads but must not be used from two at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ccac::baselines::{Shield, ShieldConfig};
use ccac::env::{Action, CarFollowing, State, System};
use ccac::harness::config::ExperimentConfig;
use ccac::harness::run::{RunDir, RunPolicy};
use ccac::nn::{BatchCache, Mlp};
use ccac::rollout::Policy;
use ccac::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfBounds = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Panic = 7,
}

/// Environment state: ego speed (m/s), lead speed (m/s), gap (m).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcacState {
    pub v_e: f64,
    pub v_f: f64,
    pub eps: f64,
}

impl From<CcacState> for State {
    fn from(s: CcacState) -> Self {
        State::new(s.v_e, s.v_f, s.eps)
    }
}

impl From<State> for CcacState {
    fn from(s: State) -> Self {
        CcacState {
            v_e: s.v_e,
            v_f: s.v_f,
            eps: s.eps,
        }
    }
}

/// Car-following system.
pub struct CcacEnv {
    sys: CarFollowing,
}

/// Frozen actor, optionally wrapped by a shield.
pub struct CcacPolicy {
    inner: RunPolicy,
    scratch: (Vec<f64>, BatchCache),
}

/// Two-step chance-constraint projection.
pub struct CcacShield {
    shield: Shield,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CcacStatus {
    match e {
        Error::ActionOutOfBounds { .. } | Error::NoiseOutOfSupport { .. } => CcacStatus::OutOfBounds,
        Error::Io(_) => CcacStatus::Io,
        Error::Format(_) | Error::Csv(_) | Error::Json(_) => CcacStatus::Format,
        Error::Divergence { .. } => CcacStatus::Numerical,
        _ => CcacStatus::InvalidArgument,
    }
}

struct Fail(CcacStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CcacStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CcacStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CcacStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(CcacStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated) and returns the full message length in bytes, excluding
/// the terminator. Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ccac_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates the environment with default parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_new_default(out: *mut *mut CcacEnv) -> CcacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(CcacEnv {
            sys: CarFollowing::default(),
        }));
        Ok(())
    })
}

/// Creates the environment described by the `[env]` section of an
/// experiment config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_from_config(config_path: *const c_char, out: *mut *mut CcacEnv) -> CcacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        *out = Box::into_raw(Box::new(CcacEnv { sys: cfg.env.system()? }));
        Ok(())
    })
}

/// Advances one step with disturbance `xi`. Fails with `OutOfBounds` when
/// the action or the disturbance leaves its closed range.
///
/// # Safety
/// `env` must be a live handle; `next` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_step(
    env: *const CcacEnv,
    state: CcacState,
    action: f64,
    xi: f64,
    next: *mut CcacState,
) -> CcacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let next = out_ref(next, "next")?;
        *next = env.sys.step(&state.into(), Action(action), xi)?.into();
        Ok(())
    })
}

/// Per-step reward of a state.
///
/// # Safety
/// `env` must be a live handle; `reward` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_reward(env: *const CcacEnv, state: CcacState, reward: *mut f64) -> CcacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        *out_ref(reward, "reward")? = env.sys.reward(&state.into());
        Ok(())
    })
}

/// Writes whether the state satisfies the gap constraint.
///
/// # Safety
/// `env` must be a live handle; `safe` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_is_safe(env: *const CcacEnv, state: CcacState, safe: *mut bool) -> CcacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        *out_ref(safe, "safe")? = env.sys.constraint_h(&state.into()) < 0.0;
        Ok(())
    })
}

/// Draws one disturbance from the environment's noise law, deterministically
/// from `seed`.
///
/// # Safety
/// `env` must be a live handle; `xi` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_sample_disturbance(env: *const CcacEnv, seed: u64, xi: *mut f64) -> CcacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let mut rng = ccac::rollout::stream(seed, 0);
        *out_ref(xi, "xi")? = env.sys.sample_disturbance(&mut rng);
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccac_env_free(env: *mut CcacEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Loads the policy of one seed from a training run directory. Shielding
/// runs come back wrapped by their shield.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_policy_load_run(run_dir: *const c_char, seed: u64, out: *mut *mut CcacPolicy) -> CcacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let dir = RunDir::open(&path_arg(run_dir, "run_dir")?)?;
        let inner = dir.policy(seed)?;
        let scratch = inner.scratch();
        *out = Box::into_raw(Box::new(CcacPolicy { inner, scratch }));
        Ok(())
    })
}

/// Loads a bare actor parameter file (no shield).
///
/// # Safety
/// `params_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_policy_load_params(params_path: *const c_char, out: *mut *mut CcacPolicy) -> CcacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (actor, params) = Mlp::load_params_file(&path_arg(params_path, "params_path")?, None)?;
        if actor.input_dim() != 3 || actor.output_dim() != 1 {
            return Err(Fail(
                CcacStatus::InvalidArgument,
                format!("actor must map 3 inputs to 1 output, got {} -> {}", actor.input_dim(), actor.output_dim()),
            ));
        }
        let inner = RunPolicy {
            actor,
            params,
            shield: None,
        };
        let scratch = inner.scratch();
        *out = Box::into_raw(Box::new(CcacPolicy { inner, scratch }));
        Ok(())
    })
}

/// Deterministic action for a state.
///
/// # Safety
/// `policy` must be a live handle not used concurrently; `action` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_policy_act(policy: *mut CcacPolicy, state: CcacState, action: *mut f64) -> CcacStatus {
    guard(|| {
        let p = out_ref(policy, "policy")?;
        let action = out_ref(action, "action")?;
        let mut a = [0.0];
        p.inner.act_batch(&[state.into()], &mut p.scratch, &mut [], &mut a);
        *action = a[0];
        Ok(())
    })
}

/// Writes whether the policy applies a shield after the actor.
///
/// # Safety
/// `policy` must be a live handle; `shielded` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_policy_is_shielded(policy: *const CcacPolicy, shielded: *mut bool) -> CcacStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        *out_ref(shielded, "shielded")? = p.inner.shield.is_some();
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccac_policy_free(policy: *mut CcacPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Builds a shield for `env` with joint risk `delta` split over `horizon`
/// decisions.
///
/// # Safety
/// `env` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_shield_new(
    env: *const CcacEnv,
    delta: f64,
    horizon: usize,
    out: *mut *mut CcacShield,
) -> CcacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let out = out_ref(out, "out")?;
        let cfg = ShieldConfig {
            delta,
            horizon,
            ..ShieldConfig::default()
        };
        let shield = Shield::new(&env.sys, cfg)?;
        *out = Box::into_raw(Box::new(CcacShield { shield }));
        Ok(())
    })
}

/// Projects a proposed action onto the admissible set of `state`.
///
/// # Safety
/// `shield` must be a live handle; `action` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_shield_project(
    shield: *const CcacShield,
    state: CcacState,
    proposed: f64,
    action: *mut f64,
) -> CcacStatus {
    guard(|| {
        let sh = handle(shield, "shield")?;
        if proposed.is_nan() {
            return Err(Fail(CcacStatus::InvalidArgument, "proposed action is NaN".into()));
        }
        *out_ref(action, "action")? = sh.shield.project(&state.into(), proposed);
        Ok(())
    })
}

/// Largest admissible acceleration at `state` before clamping to the action
/// range.
///
/// # Safety
/// `shield` must be a live handle; `threshold` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccac_shield_threshold(shield: *const CcacShield, state: CcacState, threshold: *mut f64) -> CcacStatus {
    guard(|| {
        let sh = handle(shield, "shield")?;
        *out_ref(threshold, "threshold")? = sh.shield.threshold(&state.into());
        Ok(())
    })
}

/// # Safety
/// `shield` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccac_shield_free(shield: *mut CcacShield) {
    if !shield.is_null() {
        drop(Box::from_raw(shield));
    }
}
