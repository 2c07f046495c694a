use bithrust_core::env::{EnvConfig, Method, PolicyEnv, ResetSpread, RewardWeights, Transition, Vehicle};
use bithrust_core::eval::{compare, run_experiment, ExperimentConfig, Mark};
use bithrust_core::policy::{PolicyNetwork, OBS_DIM};
use bithrust_core::Config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn experiment(method: Method, transition: Transition, n: usize) -> ExperimentConfig {
    ExperimentConfig {
        method,
        transition,
        n,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn shipped_config_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    assert_eq!(Config::load(path.as_ref()).unwrap(), Config::default());
}

#[test]
fn baselines_invert_from_randomized_starts() {
    for transition in Transition::ALL {
        for method in [Method::StepHfca, Method::StepHfcaOca, Method::MinsnapHfcaOca] {
            let report = run_experiment(&experiment(method, transition, 6), None, false)
                .unwrap()
                .report;
            let agg = report.aggregate();
            assert_eq!(agg.settled, 6, "{method} {transition}");
            assert!(agg.pooled_rmse.is_finite() && agg.pooled_rmse < 1.0, "{method} {transition}");
        }
    }
}

#[test]
fn traces_end_in_the_target_posture() {
    let out = run_experiment(&experiment(Method::StepHfcaOca, Transition::Itn, 2), None, true).unwrap();
    let target = Transition::Itn.target_body_gravity();
    for trace in &out.traces {
        let last = trace.last().unwrap();
        let g = last.state.body_gravity();
        assert!(g.angle(&target).to_degrees() < 10.0);
        assert!((last.t - 3.0).abs() < 1e-9);
        assert_eq!(trace.len(), 3001);
    }
}

#[test]
fn comparison_ranks_all_baselines() {
    let reports: Vec<_> = [Method::StepHfca, Method::StepHfcaOca, Method::MinsnapHfcaOca]
        .into_iter()
        .map(|m| run_experiment(&experiment(m, Transition::Nti, 3), None, false).unwrap().report)
        .collect();
    let table = compare(&reports).unwrap();
    assert_eq!(table.rows.len(), 3);
    let bests = table
        .rows
        .iter()
        .filter(|r| r.marks.first() == Some(&Mark::Best))
        .count();
    assert!(bests >= 1);
}

#[test]
fn untrained_policy_runs_a_full_episode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let policy = PolicyNetwork::new(&[16, 16], &mut rng);
    let out = run_experiment(&experiment(Method::PolicyHfcaOca, Transition::Nti, 2), Some(&policy), true)
        .unwrap();
    assert_eq!(out.traces[0].len(), 3001);
    assert!(out.report.aggregate().pooled_rmse.is_finite());
}

#[test]
fn holding_the_target_posture_at_zero_offset_inverts() {
    let cfg = EnvConfig {
        reset: ResetSpread::zero(),
        ..Default::default()
    };
    let mut env = PolicyEnv::new(cfg, Vehicle::default(), Transition::Nti, RewardWeights::nti(), 3).unwrap();
    let obs = env.reset();
    assert_eq!(obs.len(), OBS_DIM);
    // zero modulation with η = −1
    let action = [0.0, 0.0, 0.0, -1.0];
    let mut total = 0.0;
    loop {
        let s = env.step(&action, None).unwrap();
        total += s.cost;
        if s.done {
            break;
        }
    }
    let g = env.state().body_gravity();
    assert!(g.angle(&Transition::Nti.target_body_gravity()).to_degrees() < 10.0);
    assert!(total.is_finite());
}
