use ccac::baselines::{unconstrained_actor_train, MfpdConfig, MfpdTrainer, Shield, ShieldConfig, ShieldedPolicy};
use ccac::ccac::TrainerConfig;
use ccac::env::{CarFollowing, InitSpec, System};
use ccac::harness::eval::{evaluate_policy, EvalSpec};
use ccac::rollout::rollout_batch;

fn small() -> TrainerConfig {
    TrainerConfig {
        trajectories: 128,
        horizon: 80,
        hidden: vec![16, 16],
        max_iters: 30,
        ..TrainerConfig::default()
    }
}

#[test]
fn unconstrained_actor_ends_far_below_the_threshold() {
    let sys = CarFollowing::default();
    let init = InitSpec::default();
    let (trainer, state) = unconstrained_actor_train(&small(), sys.clone(), init, 11, 30).unwrap();
    let m = trainer.measure(&state).unwrap();
    assert!(m.p_hat < 0.5, "p_hat {}", m.p_hat);

    let (_, again) = unconstrained_actor_train(&small(), sys, init, 11, 30).unwrap();
    assert_eq!(again.actor_params, state.actor_params);
}

#[test]
fn shield_bounds_the_unconstrained_actor() {
    let sys = CarFollowing::default();
    let init = InitSpec::default();
    let (trainer, state) = unconstrained_actor_train(&small(), sys.clone(), init, 12, 30).unwrap();
    let shield = Shield::new(&sys, ShieldConfig::default()).unwrap();
    let raw = trainer.policy(&state.actor_params);
    let shielded = ShieldedPolicy {
        inner: &raw,
        shield: &shield,
    };
    let batch = rollout_batch(&sys, &shielded, &init, 64, 80, 3).unwrap();
    let (lo, hi) = sys.action_bounds();
    let mut cache = trainer.actor.new_cache();
    for i in 0..64 {
        for t in 0..80 {
            let s = batch.state(i, t);
            let a = batch.action(i, t);
            let proposed = trainer.actor.eval_scalar(&state.actor_params, &s.to_array(), &mut cache);
            assert!(a >= lo && a <= hi);
            assert!(a <= proposed + 1e-12, "{a} > {proposed}");
            assert_eq!(shield.project(s, a), a);
        }
    }
    let spec = EvalSpec {
        episodes: 400,
        ..EvalSpec::default()
    };
    let bare = evaluate_policy(&sys, &raw, &init, &spec).unwrap();
    let guarded = evaluate_policy(&sys, &shielded, &init, &spec).unwrap();
    assert!(guarded.violation_rate < bare.violation_rate);
}

#[test]
fn mfpd_dual_variable_reacts_to_violations() {
    let sys = CarFollowing::default();
    let tight = InitSpec {
        eps: (2.2, 3.0),
        ..InitSpec::default()
    };
    let cfg = TrainerConfig {
        trajectories: 64,
        ..small()
    };
    let trainer = MfpdTrainer::new(cfg, MfpdConfig::default(), sys, tight).unwrap();
    let mut state = trainer.initial_state(5).unwrap();
    let mut lambdas = vec![state.lambda];
    for _ in 0..5 {
        state = trainer.iteration(&state).unwrap();
        lambdas.push(state.lambda);
    }
    assert!(lambdas.iter().all(|&l| l >= 0.0));
    let m = state.last_metrics.unwrap();
    assert!(m.jc > 0.1, "jc {}", m.jc);
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]), "{lambdas:?}");
    assert!(*lambdas.last().unwrap() > 0.0);
}
