//! Training orchestration and the on-disk run layout.
//!
//! ```text
//! <output_dir>/
//!   config.toml        resolved configuration snapshot
//!   manifest.json      seeds, per-seed status, versions
//!   seed-<s>/metrics.csv
//!   seed-<s>/actor.params, critic.params | reward_critic.params, cost_critic.params, mfpd.json
//!   seed-<s>/FAILED    present only when the seed diverged
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{MfpdState, MfpdTrainer, Shield};
use crate::ccac::{penalty_factor, Trainer, TrainerState};
use crate::env::{CarFollowing, InitSpec, State};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::eval::{evaluate_policy, EvalResult, EvalSpec};
use crate::nn::{BatchCache, Mlp, ParamVector};
use crate::rollout::{NetPolicy, Policy};
use rand_chacha::ChaCha8Rng;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_COLUMNS: [&str; 13] = [
    "k",
    "method",
    "p_hat",
    "jc",
    "return_est",
    "eval_return",
    "eval_safe_prob",
    "b_k",
    "penalty_coef",
    "actor_lr",
    "critic_lr",
    "lambda",
    "policy_std",
];

/// One line of `metrics.csv`. Row `k` describes the parameters before the
/// `k`-th update; the last row describes the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub method: Method,
    pub p_hat: f64,
    pub jc: f64,
    pub return_est: f64,
    pub eval_return: Option<f64>,
    pub eval_safe_prob: Option<f64>,
    pub b_k: Option<f64>,
    pub penalty_coef: Option<f64>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lambda: Option<f64>,
    pub policy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedStatus {
    Completed { iterations: usize },
    Converged { iterations: usize },
    Diverged { iteration: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub dir: String,
    #[serde(flatten)]
    pub status: SeedStatus,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub metrics_schema_version: u32,
    pub crate_version: String,
    pub method: Method,
    pub label: String,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub config_file: String,
    pub runs: Vec<SeedRecord>,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Short method name, with the weight for fixed-penalty runs.
pub fn method_label(cfg: &ExperimentConfig) -> String {
    match cfg.method {
        Method::Fwp => format!("fwp-{}", cfg.fwp.weight),
        m => m.as_str().to_string(),
    }
}

/// Callback receiving every metrics row as it is written.
pub type Progress<'a> = &'a (dyn Fn(u64, &MetricsRow) + Sync);

/// Trains every seed (concurrently, one thread per seed) and writes the run
/// directory. Diverged seeds keep their partial metrics and last finite
/// parameters, get a `FAILED` marker, and make the call return an error
/// after the manifest is written.
pub fn cmd_train(cfg: &ExperimentConfig, progress: Option<Progress<'_>>) -> Result<Manifest> {
    cfg.validate()?;
    let root = &cfg.output_dir;
    fs::create_dir_all(root)?;
    fs::write(root.join("config.toml"), cfg.to_toml_string()?)?;
    let results: Vec<Result<SeedRecord>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || train_seed(cfg, seed, progress)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("training thread panicked".into()))))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        metrics_schema_version: METRICS_SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        method: cfg.method,
        label: method_label(cfg),
        threshold: cfg.threshold,
        seeds: cfg.seeds.clone(),
        config_file: "config.toml".into(),
        runs,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(bad) = manifest.runs.iter().find(|r| matches!(r.status, SeedStatus::Diverged { .. })) {
        if let SeedStatus::Diverged { iteration, message } = &bad.status {
            return Err(Error::Divergence {
                iteration: *iteration,
                what: format!("seed {}: {message}", bad.seed),
            });
        }
    }
    Ok(manifest)
}

struct SeedWriter<'a> {
    csv: csv::Writer<fs::File>,
    seed: u64,
    progress: Option<Progress<'a>>,
}

impl SeedWriter<'_> {
    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.serialize(row)?;
        self.csv.flush()?;
        if let Some(p) = self.progress {
            p(self.seed, row);
        }
        Ok(())
    }
}

fn curve_point<P: Policy>(
    cfg: &ExperimentConfig,
    sys: &CarFollowing,
    init: &InitSpec,
    policy: &P,
    k: usize,
    last: bool,
) -> Result<Option<EvalResult>> {
    if cfg.eval_every == 0 || !(last || k % cfg.eval_every == 0) {
        return Ok(None);
    }
    let spec = EvalSpec {
        episodes: cfg.curve_episodes,
        ..cfg.eval
    };
    evaluate_policy(sys, policy, init, &spec).map(Some)
}

fn train_seed(cfg: &ExperimentConfig, seed: u64, progress: Option<Progress<'_>>) -> Result<SeedRecord> {
    let dir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join("FAILED"));
    let mut out = SeedWriter {
        csv: csv::Writer::from_path(dir.join("metrics.csv"))?,
        seed,
        progress,
    };
    let started = Instant::now();
    let status = match cfg.method {
        Method::Mfpd => train_mfpd(cfg, seed, &dir, &mut out)?,
        _ => train_model_based(cfg, seed, &dir, &mut out)?,
    };
    if let SeedStatus::Diverged { iteration, message } = &status {
        fs::write(dir.join("FAILED"), format!("diverged at iteration {iteration}: {message}\n"))?;
    }
    Ok(SeedRecord {
        seed,
        dir: format!("seed-{seed}"),
        status,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn train_model_based(cfg: &ExperimentConfig, seed: u64, dir: &Path, out: &mut SeedWriter<'_>) -> Result<SeedStatus> {
    let sys = cfg.env.system()?;
    let init = cfg.env.init()?;
    let trainer = Trainer::new(cfg.trainer_config(), sys.clone(), init)?;
    let probes = trainer.probe_states();
    let mut state = trainer.initial_state(seed)?;
    let max_iters = trainer.cfg.max_iters;
    let row = |state: &TrainerState, m: crate::ccac::IterationMetrics, ev: Option<EvalResult>| MetricsRow {
        k: state.k,
        method: cfg.method,
        p_hat: m.p_hat,
        jc: m.jc,
        return_est: m.return_est,
        eval_return: ev.map(|e| e.mean_return),
        eval_safe_prob: ev.map(|e| e.safe_prob),
        b_k: Some(penalty_factor(state.k, &trainer.cfg)),
        penalty_coef: Some(m.penalty_coef),
        actor_lr: m.actor_lr,
        critic_lr: m.critic_lr,
        lambda: None,
        policy_std: None,
    };
    let mut status = SeedStatus::Completed { iterations: max_iters };
    while state.k < max_iters {
        let next = match trainer.train_iteration(&state) {
            Ok(n) => n,
            Err(Error::Divergence { iteration, what }) => {
                status = SeedStatus::Diverged {
                    iteration,
                    message: what,
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let ev = curve_point(cfg, &sys, &init, &trainer.policy(&state.actor_params), state.k, false)?;
        out.write(&row(&state, next.last_metrics.expect("set by train_iteration"), ev))?;
        let converged = cfg.stop_on_convergence
            && trainer.convergence_check(&state, &next, &probes, trainer.cfg.zeta);
        state = next;
        if converged {
            status = SeedStatus::Converged { iterations: state.k };
            break;
        }
    }
    if !matches!(status, SeedStatus::Diverged { .. }) {
        let ev = curve_point(cfg, &sys, &init, &trainer.policy(&state.actor_params), state.k, true)?;
        out.write(&row(&state, trainer.measure(&state)?, ev))?;
    }
    trainer
        .actor
        .save_params_file(&state.actor_params, &dir.join("actor.params"))?;
    trainer
        .critic
        .save_params_file(&state.critic_params, &dir.join("critic.params"))?;
    Ok(status)
}

/// Scalars of a primal-dual run that are not network parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfpdExtras {
    pub k: usize,
    pub log_std: f64,
    pub lambda: f64,
}

fn train_mfpd(cfg: &ExperimentConfig, seed: u64, dir: &Path, out: &mut SeedWriter<'_>) -> Result<SeedStatus> {
    let sys = cfg.env.system()?;
    let init = cfg.env.init()?;
    let trainer = MfpdTrainer::new(cfg.trainer_config(), cfg.mfpd, sys.clone(), init)?;
    let mut state = trainer.initial_state(seed)?;
    let max_iters = trainer.cfg.max_iters;
    let row = |state: &MfpdState, m: crate::baselines::MfpdMetrics, ev: Option<EvalResult>| MetricsRow {
        k: state.k,
        method: cfg.method,
        p_hat: m.p_hat,
        jc: m.jc,
        return_est: m.return_est,
        eval_return: ev.map(|e| e.mean_return),
        eval_safe_prob: ev.map(|e| e.safe_prob),
        b_k: None,
        penalty_coef: None,
        actor_lr: m.actor_lr,
        critic_lr: m.critic_lr,
        lambda: Some(m.lambda),
        policy_std: Some(m.std),
    };
    let mut status = SeedStatus::Completed { iterations: max_iters };
    while state.k < max_iters {
        let next = match trainer.iteration(&state) {
            Ok(n) => n,
            Err(Error::Divergence { iteration, what }) => {
                status = SeedStatus::Diverged {
                    iteration,
                    message: what,
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let ev = curve_point(cfg, &sys, &init, &trainer.policy(&state.actor_params), state.k, false)?;
        out.write(&row(&state, next.last_metrics.expect("set by iteration"), ev))?;
        state = next;
    }
    if !matches!(status, SeedStatus::Diverged { .. }) {
        let ev = curve_point(cfg, &sys, &init, &trainer.policy(&state.actor_params), state.k, true)?;
        out.write(&row(&state, trainer.measure(&state)?, ev))?;
    }
    trainer
        .actor
        .save_params_file(&state.actor_params, &dir.join("actor.params"))?;
    trainer
        .reward_critic
        .save_params_file(&state.reward_critic_params, &dir.join("reward_critic.params"))?;
    trainer
        .cost_critic
        .save_params_file(&state.cost_critic_params, &dir.join("cost_critic.params"))?;
    let extras = MfpdExtras {
        k: state.k,
        log_std: state.log_std,
        lambda: state.lambda,
    };
    fs::write(dir.join("mfpd.json"), serde_json::to_string_pretty(&extras)?)?;
    Ok(status)
}

/// Frozen policy of one trained seed: the actor, wrapped by the shield for
/// shielding runs.
pub struct RunPolicy {
    pub actor: Mlp,
    pub params: ParamVector,
    pub shield: Option<Shield>,
}

impl RunPolicy {
    pub fn net(&self) -> NetPolicy<'_> {
        NetPolicy {
            net: &self.actor,
            params: &self.params,
        }
    }
}

impl Policy for RunPolicy {
    type Scratch = (Vec<f64>, BatchCache);

    fn scratch(&self) -> Self::Scratch {
        self.net().scratch()
    }

    fn act_batch(&self, states: &[State], scratch: &mut Self::Scratch, rngs: &mut [ChaCha8Rng], out: &mut [f64]) {
        self.net().act_batch(states, scratch, rngs, out);
        if let Some(sh) = &self.shield {
            for (a, s) in out.iter_mut().zip(states) {
                *a = sh.project(s, *a);
            }
        }
    }
}

/// A finished run directory opened for evaluation.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: Manifest,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let config = ExperimentConfig::from_snapshot(&fs::read_to_string(root.join(&manifest.config_file))?)?;
        Ok(Self {
            root: root.to_path_buf(),
            config,
            manifest,
        })
    }

    pub fn label(&self) -> &str {
        &self.manifest.label
    }

    pub fn system(&self) -> Result<CarFollowing> {
        self.config.env.system()
    }

    pub fn init(&self) -> Result<InitSpec> {
        self.config.env.init()
    }

    /// Seeds whose training finished without diverging.
    pub fn usable_seeds(&self) -> Vec<u64> {
        self.manifest
            .runs
            .iter()
            .filter(|r| !matches!(r.status, SeedStatus::Diverged { .. }))
            .map(|r| r.seed)
            .collect()
    }

    pub fn policy(&self, seed: u64) -> Result<RunPolicy> {
        let sys = self.system()?;
        let spec = self.config.trainer_config().actor_spec((self.config.env.action_min_mps2, self.config.env.action_max_mps2));
        let (actor, params) = Mlp::load_params_file(&seed_dir(&self.root, seed).join("actor.params"), Some(&spec))?;
        let shield = match self.config.method {
            Method::Shielding => Some(Shield::new(&sys, self.config.shield_config())?),
            _ => None,
        };
        Ok(RunPolicy { actor, params, shield })
    }

    pub fn metrics(&self, seed: u64) -> Result<Vec<MetricsRow>> {
        let mut r = csv::Reader::from_path(seed_dir(&self.root, seed).join("metrics.csv"))?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: &str, dir: &Path, iters: usize) -> ExperimentConfig {
        let text = format!(
            r#"
method = "{method}"
threshold = 0.9
seeds = [3, 4]
output_dir = "{}"
eval_every = 2
curve_episodes = 20
[trainer]
trajectories = 16
horizon = 8
hidden = [4, 4]
max_iters = {iters}
[fwp]
weight = 20
[eval]
episodes = 50
"#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn run_directory_layout_and_reload() {
        let tmp = tempfile::tempdir().unwrap();
        for method in ["ccac", "fwp", "mfpd", "shielding"] {
            let root = tmp.path().join(method);
            let cfg = tiny(method, &root, 3);
            let m = cmd_train(&cfg, None).unwrap();
            assert_eq!(m.seeds, vec![3, 4]);
            let run = RunDir::open(&root).unwrap();
            assert_eq!(run.config, cfg);
            let rows = run.metrics(3).unwrap();
            assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
            assert!(rows[0].eval_return.is_some() && rows[1].eval_return.is_none() && rows[3].eval_return.is_some());
            assert_eq!(rows[0].lambda.is_some(), method == "mfpd");
            let pol = run.policy(4).unwrap();
            assert_eq!(pol.shield.is_some(), method == "shielding");
        }
    }

    #[test]
    fn metrics_header_is_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny("ccac", tmp.path(), 1);
        cmd_train(&cfg, None).unwrap();
        let text = fs::read_to_string(seed_dir(tmp.path(), 3).join("metrics.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    }

    #[test]
    fn zero_iterations_leave_only_initial_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny("ccac", tmp.path(), 0);
        cmd_train(&cfg, None).unwrap();
        let run = RunDir::open(tmp.path()).unwrap();
        let rows = run.metrics(3).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, 0);
        assert!(run.policy(3).is_ok());
    }

    #[test]
    fn reruns_are_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tiny("ccac", &tmp.path().join("a"), 3);
        let b = tiny("ccac", &tmp.path().join("b"), 3);
        cmd_train(&a, None).unwrap();
        cmd_train(&b, None).unwrap();
        for seed in [3, 4] {
            let read = |root: &Path| fs::read(seed_dir(root, seed).join("metrics.csv")).unwrap();
            assert_eq!(read(&tmp.path().join("a")), read(&tmp.path().join("b")));
        }
    }

    #[test]
    fn divergence_is_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny("fwp", tmp.path(), 6);
        cfg.trainer.actor_lr = crate::ccac::LrSchedule::constant(1e300);
        cfg.trainer.critic_lr = 1e300;
        let err = cmd_train(&cfg, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        let run = RunDir::open(tmp.path()).unwrap();
        assert!(seed_dir(tmp.path(), 3).join("FAILED").exists());
        assert!(run.usable_seeds().is_empty());
        assert!(seed_dir(tmp.path(), 3).join("actor.params").exists());
        assert!(run.policy(3).unwrap().params.is_finite());
    }
}
