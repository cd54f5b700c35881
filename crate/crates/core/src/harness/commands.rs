//! Evaluation, gap simulation, latency and comparison commands over run
//! directories.

use std::fs;
use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{sample_initial_state, InitSpec, State};
use crate::error::{Error, Result};
use crate::harness::config::Method;
use crate::harness::eval::{evaluate_policy, gap_profile, EvalResult, EvalSpec};
use crate::harness::run::RunDir;
use crate::rollout::{stream, SafeProbEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub method: Method,
    pub threshold: f64,
    pub spec: EvalSpec,
    /// Pooled over all seeds' episodes.
    pub safe_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean over seeds of each seed's mean return.
    pub mean_return: f64,
    /// Spread of the seed means (standard error across seeds).
    pub return_seed_std_err: f64,
    pub per_seed: Vec<SeedEval>,
}

/// Evaluates every usable seed with common random numbers and writes
/// `eval.json` into the run directory.
pub fn cmd_evaluate(run_dir: &Path, episodes: Option<usize>, horizon: Option<usize>) -> Result<EvalReport> {
    let run = RunDir::open(run_dir)?;
    let mut spec = run.config.eval;
    if let Some(e) = episodes {
        spec.episodes = e;
    }
    if let Some(h) = horizon {
        spec.safe_horizon = h;
    }
    let report = evaluate_run(&run, &spec)?;
    fs::write(run_dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn evaluate_run(run: &RunDir, spec: &EvalSpec) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let seeds = run.usable_seeds();
    if seeds.is_empty() {
        return Err(Error::Format(format!("{}: no seed finished training", run.root.display())));
    }
    let sys = run.system()?;
    let init = run.init()?;
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let policy = run.policy(seed)?;
            Ok(SeedEval {
                seed,
                result: evaluate_policy(&sys, &policy, &init, spec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let safe: usize = per_seed.iter().map(|s| s.result.safe).sum();
    let total: usize = per_seed.iter().map(|s| s.result.episodes).sum();
    let pooled = SafeProbEstimate::from_counts(safe, total);
    let (ci_low, ci_high) = pooled.wilson_interval(1.96);
    let means: Vec<f64> = per_seed.iter().map(|s| s.result.mean_return).collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let se = if means.len() > 1 {
        (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        label: run.label().to_string(),
        method: run.config.method,
        threshold: run.config.threshold,
        spec: *spec,
        safe_prob: pooled.p_hat,
        ci_low,
        ci_high,
        mean_return: mean,
        return_seed_std_err: se,
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub label: String,
    pub t: usize,
    pub mean_gap_m: f64,
}

/// Mean gap over time from a fixed initial state for each run, averaged over
/// the run's seeds; every run sees the same disturbance streams.
pub fn cmd_gap_sim(runs: &[PathBuf], init: State, repeats: usize, steps: usize, seed: u64) -> Result<Vec<GapRow>> {
    if runs.is_empty() {
        return Err(Error::Config("gap-sim needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in runs {
        let run = RunDir::open(dir)?;
        let sys = run.system()?;
        let seeds = run.usable_seeds();
        if seeds.is_empty() {
            return Err(Error::Format(format!("{}: no seed finished training", dir.display())));
        }
        let mut acc = vec![0.0; steps + 1];
        for &s in &seeds {
            let policy = run.policy(s)?;
            let prof = gap_profile(&sys, &policy, &InitSpec::point(init), repeats, steps, seed)?;
            acc.iter_mut().zip(&prof).for_each(|(a, p)| *a += p / seeds.len() as f64);
        }
        rows.extend(acc.into_iter().enumerate().map(|(t, g)| GapRow {
            label: run.label().to_string(),
            t,
            mean_gap_m: g,
        }));
    }
    Ok(rows)
}

pub fn write_gap_csv<W: Write>(rows: &[GapRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
}

pub const WARMUP_CALLS: usize = 100;

/// Times `trials` single calls after [`WARMUP_CALLS`] untimed ones; the
/// argument is the call index.
pub fn measure_latency(trials: usize, mut call: impl FnMut(usize) -> f64) -> LatencyStats {
    for i in 0..WARMUP_CALLS {
        black_box(call(black_box(i)));
    }
    let mut ms: Vec<f64> = (0..trials)
        .map(|i| {
            let t0 = Instant::now();
            black_box(call(black_box(i)));
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let median = if trials % 2 == 1 {
        ms[trials / 2]
    } else {
        0.5 * (ms[trials / 2 - 1] + ms[trials / 2])
    };
    LatencyStats {
        trials,
        warmup: WARMUP_CALLS,
        median_ms: median,
        mean_ms: ms.iter().sum::<f64>() / trials as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeitReport {
    pub label: String,
    pub method: Method,
    /// Policy network forward pass for one state.
    pub policy: LatencyStats,
    /// Shield projection of one proposed action (shielding runs only).
    pub shield: Option<LatencyStats>,
    /// Everything needed to produce one action.
    pub per_action: LatencyStats,
}

/// Single-threaded per-action latency of the first usable seed's controller;
/// writes `timeit.json` into the run directory.
pub fn cmd_timeit(run_dir: &Path, trials: usize) -> Result<TimeitReport> {
    if trials < 100 {
        return Err(Error::Config(format!("timeit needs at least 100 trials, got {trials}")));
    }
    let run = RunDir::open(run_dir)?;
    let seed = *run
        .usable_seeds()
        .first()
        .ok_or_else(|| Error::Format("no seed finished training".into()))?;
    let policy = run.policy(seed)?;
    let init = run.init()?;
    let mut rng = stream(0x71AE, 0);
    let states: Vec<State> = (0..1024)
        .map(|_| sample_initial_state(&mut rng, &init))
        .collect::<Result<_>>()?;
    let mut cache = policy.actor.new_cache();
    let mut forward = |i: usize| {
        let s = &states[i % states.len()];
        policy.actor.eval_scalar(&policy.params, &s.to_array(), &mut cache)
    };
    let policy_stats = measure_latency(trials, &mut forward);
    let (shield, per_action) = match &policy.shield {
        Some(sh) => {
            let mut cache = policy.actor.new_cache();
            let raw: Vec<f64> = states
                .iter()
                .map(|s| policy.actor.eval_scalar(&policy.params, &s.to_array(), &mut cache))
                .collect();
            let proj = measure_latency(trials, |i| {
                let j = i % states.len();
                sh.project(&states[j], raw[j])
            });
            let both = measure_latency(trials, |i| {
                let s = &states[i % states.len()];
                let a = policy.actor.eval_scalar(&policy.params, &s.to_array(), &mut cache);
                sh.project(s, a)
            });
            (Some(proj), both)
        }
        None => (None, policy_stats),
    };
    let report = TimeitReport {
        label: run.label().to_string(),
        method: run.config.method,
        policy: policy_stats,
        shield,
        per_action,
    };
    fs::write(run_dir.join("timeit.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub const COMPARE_COLUMNS: [&str; 10] = [
    "label",
    "method",
    "threshold",
    "seeds",
    "safe_prob",
    "ci_low",
    "ci_high",
    "mean_return",
    "return_seed_std_err",
    "latency_median_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub method: Method,
    pub threshold: f64,
    pub seeds: usize,
    pub safe_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_return: f64,
    pub return_seed_std_err: f64,
    pub latency_median_ms: Option<f64>,
}

/// One row per run, from `eval.json` (evaluated on the spot when missing) and
/// `timeit.json` when present. Runs trained for different thresholds are
/// rejected.
pub fn cmd_compare(runs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut rows = Vec::new();
    for dir in runs {
        let eval_path = dir.join("eval.json");
        let report: EvalReport = if eval_path.exists() {
            serde_json::from_str(&fs::read_to_string(&eval_path)?)?
        } else {
            cmd_evaluate(dir, None, None)?
        };
        let timing_path = dir.join("timeit.json");
        let latency = if timing_path.exists() {
            let t: TimeitReport = serde_json::from_str(&fs::read_to_string(&timing_path)?)?;
            Some(t.per_action.median_ms)
        } else {
            None
        };
        rows.push(CompareRow {
            label: report.label,
            method: report.method,
            threshold: report.threshold,
            seeds: report.per_seed.len(),
            safe_prob: report.safe_prob,
            ci_low: report.ci_low,
            ci_high: report.ci_high,
            mean_return: report.mean_return,
            return_seed_std_err: report.return_seed_std_err,
            latency_median_ms: latency,
        });
    }
    let first = rows[0].threshold;
    if let Some(bad) = rows.iter().find(|r| r.threshold != first) {
        return Err(Error::Config(format!(
            "runs use different thresholds ({} vs {}); compare one threshold at a time",
            first, bad.threshold
        )));
    }
    Ok(rows)
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text table of a comparison.
pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>8} {:>20} {:>16} {:>12}\n",
        "method", "threshold", "seeds", "safe prob (95% CI)", "return", "latency ms"
    );
    for r in rows {
        let lat = r.latency_median_ms.map_or("-".to_string(), |l| format!("{l:.4}"));
        s.push_str(&format!(
            "{:<12} {:>9.3} {:>8} {:>7.2}% [{:>5.2},{:>5.2}] {:>9.2} ± {:<4.2} {:>12}\n",
            r.label,
            r.threshold,
            r.seeds,
            100.0 * r.safe_prob,
            100.0 * r.ci_low,
            100.0 * r.ci_high,
            r.mean_return,
            r.return_seed_std_err,
            lat
        ));
    }
    s
}
