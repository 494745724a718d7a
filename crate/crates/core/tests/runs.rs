use std::collections::HashMap;
use std::fs;

use approx_zooming::env::PiecewiseLinear;
use approx_zooming::harness::{
    self, read_summary_csv, read_trajectory_csv, EnvSpec, ExperimentConfig, Manifest, ModelSpec, VariantSpec,
    DIAGNOSTICS_HEADER, FREQUENCY_HEADER, MANIFEST_FILE, SUMMARY_HEADER, TRAJECTORY_HEADER,
};
use approx_zooming::metrics::{arm_frequency, kappa};
use approx_zooming::partition::{flag_threshold, Phase};
use approx_zooming::policy::{ApproxZooming, KMode, PolicyConfig, Variant};
use approx_zooming::{Environment, FlagMode, RewardModel};

fn constant_pair() -> RewardModel {
    let flat = |h: f64| PiecewiseLinear::new(vec![[0.0, h], [1.0, h]]).unwrap();
    RewardModel::FiniteTypes {
        lipschitz: 1.0,
        type_of_arm: vec![0, 1],
        type_functions: vec![flat(1.0), flat(0.0)],
    }
}

fn small_config(dir: &std::path::Path, arms: usize, horizon: u64, reps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EnvSpec {
        model: ModelSpec::Zigzag {
            num_arms: arms,
            lipschitz: 1.0,
            permutation_seed: None,
        },
        noise_std: 1e-2,
        horizon,
        base_seed: 11,
    });
    cfg.replications = reps;
    cfg.output_dir = Some(dir.to_path_buf());
    cfg.defaults.flag_mode = Some(FlagMode::Simulation);
    cfg.defaults.k_mode = Some(KMode::Fixed(1));
    cfg
}

#[test]
fn suboptimal_arm_plays_stay_under_the_ucb_ceiling() {
    let horizon = 20_000;
    let noise_var = 1e-6;
    let mut env = Environment::new(constant_pair(), 0.0, horizon, 5).unwrap();
    let cfg = PolicyConfig::new(Variant::Learned, 1.0, noise_var, horizon);
    let mut policy = ApproxZooming::new(cfg.clone(), &env).unwrap();
    let mut log = Vec::new();
    for _ in 0..horizon {
        log.push(policy.step(&mut env).unwrap());
    }
    let state = policy.state();
    let root_split = state.ball(0).unwrap().split_time().expect("root was subpartitioned");
    let params = cfg.confidence();

    let mut losing_ucb_plays = 0;
    for ball in state.balls().iter().filter(|b| b.arms() == [1]) {
        // A ball is flagged on the first play past the threshold.
        let ceiling = flag_threshold(FlagMode::Theory, &params, ball.width()).floor() + 1.0;
        assert!(
            ball.ucb_plays() as f64 <= ceiling,
            "ball {} played {} times, ceiling {ceiling}",
            ball.id(),
            ball.ucb_plays()
        );
        losing_ucb_plays += ball.ucb_plays();
    }
    let after_split = log
        .iter()
        .filter(|r| r.t > root_split && r.phase == Phase::UcbPhase)
        .count() as u64;
    assert!(after_split > horizon / 2);
    assert!(
        (losing_ucb_plays as f64) < 0.05 * after_split as f64,
        "arm 2 took {losing_ucb_plays} of {after_split} UCB trials"
    );
}

#[test]
fn flagged_contexts_are_uniform_on_the_ball() {
    let horizon = 30_000;
    let model = RewardModel::zigzag(8, 1.0).unwrap();
    let mut env = Environment::new(model, 0.05, horizon, 3).unwrap();
    let mut cfg = PolicyConfig::new(Variant::Learned, 1.0, 0.0025, horizon);
    cfg.k_mode = KMode::Fixed(4);
    let mut policy = ApproxZooming::new(cfg, &env).unwrap();

    let mut by_ball: HashMap<usize, Vec<f64>> = HashMap::new();
    for _ in 0..horizon {
        let r = policy.step(&mut env).unwrap();
        if r.phase == Phase::FlaggedPhase {
            by_ball.entry(r.ball).or_default().push(r.x);
        }
    }
    let mut checked = 0;
    for (id, xs) in by_ball.iter().filter(|(_, xs)| xs.len() >= 1000) {
        let ball = policy.state().ball(*id).unwrap();
        let (u, w) = (ball.c0(), ball.width());
        let n = xs.len() as f64;
        let mut counts = [0u64; 10];
        for &x in xs {
            counts[(((x - u) / w * 10.0) as usize).min(9)] += 1;
        }
        let sd = (n * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n / 10.0).abs() <= 5.0 * sd,
                "ball {id}: bin counts {counts:?}"
            );
        }
        checked += 1;
    }
    assert!(checked >= 1);
}

#[test]
fn variants_see_identical_contexts_within_a_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 6, 3000, 2);
    let manifest = harness::run_experiment(&cfg).unwrap();
    assert_eq!(manifest.runs.len(), 8);
    for rep in 0..2 {
        let xs: Vec<Vec<f64>> = manifest
            .runs
            .iter()
            .filter(|r| r.replication == rep)
            .map(|r| {
                let log = read_trajectory_csv(&dir.path().join(r.trajectory.as_ref().unwrap())).unwrap();
                log.records.iter().map(|t| t.x).collect()
            })
            .collect();
        assert_eq!(xs.len(), 4);
        assert!(xs.windows(2).all(|w| w[0] == w[1]));
    }
    let a: Vec<f64> = read_trajectory_csv(&dir.path().join(manifest.runs[0].trajectory.as_ref().unwrap()))
        .unwrap()
        .records
        .iter()
        .map(|t| t.x)
        .collect();
    let other = manifest.runs.iter().find(|r| r.replication == 1).unwrap();
    let b: Vec<f64> = read_trajectory_csv(&dir.path().join(other.trajectory.as_ref().unwrap()))
        .unwrap()
        .records
        .iter()
        .map(|t| t.x)
        .collect();
    assert_ne!(a, b);
}

#[test]
fn artifacts_follow_the_declared_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5, 2500, 1);
    let manifest = harness::run_experiment(&cfg).unwrap();
    assert_eq!(manifest.status, "complete");
    assert_eq!(Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), manifest);

    let first_line = |name: &str| {
        fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    for r in &manifest.runs {
        assert_eq!(first_line(r.trajectory.as_ref().unwrap()), TRAJECTORY_HEADER.join(","));
        assert_eq!(first_line(&r.summary), SUMMARY_HEADER.join(","));
        let rows = read_summary_csv(&dir.path().join(&r.summary)).unwrap();
        assert_eq!(rows.len(), 100);
        assert_eq!(rows.last().unwrap().t, 2500);
        assert!(rows
            .windows(2)
            .all(|w| w[0].t < w[1].t && w[0].cum_regret <= w[1].cum_regret));
        assert_eq!(rows.last().unwrap().cum_regret, r.final_cum_regret);
        assert_eq!(r.trials, 2500);
    }
    assert_eq!(
        first_line(manifest.arm_frequency.as_ref().unwrap()),
        FREQUENCY_HEADER.join(",")
    );
    assert_eq!(
        first_line(manifest.diagnostics.as_ref().unwrap()),
        DIAGNOSTICS_HEADER.join(",")
    );

    // Frequency counts add up to the horizon for every run.
    let mut rdr = csv::Reader::from_path(dir.path().join(harness::FREQUENCY_FILE)).unwrap();
    let mut totals: HashMap<String, u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *totals.entry(rec[0].to_string()).or_default() += rec[5].parse::<u64>().unwrap();
    }
    assert_eq!(totals.len(), 4);
    assert!(totals.values().all(|&n| n == 2500));

    // Diagnostics rows carry f* and a κ consistent with the model.
    let model = cfg.environment.model.build().unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join(harness::DIAGNOSTICS_FILE)).unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let x: f64 = rec[1].parse().unwrap();
        assert_eq!(rec[2].parse::<f64>().unwrap(), model.best_value(x));
        assert_eq!(rec[4].parse::<f64>().unwrap(), kappa(&model, x));
        n += 1;
    }
    assert_eq!(n, cfg.frequency_bins);
}

#[test]
fn failed_run_still_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 4, 500, 1);
    cfg.variants = vec![
        VariantSpec::plain(Variant::NoSimilarity),
        VariantSpec::plain(Variant::Learned),
    ];
    // A directory squatting on the trajectory path makes one job fail mid-run.
    fs::create_dir(dir.path().join("learned_r000_trajectory.csv")).unwrap();
    assert!(harness::run_experiment(&cfg).is_err());
    let manifest = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.status, "failed");
    assert!(manifest.error.is_some());
    assert_eq!(manifest.runs.len(), 1);
}

#[test]
fn final_quarter_mass_tracks_the_optimal_arms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 20, 40_000, 1);
    cfg.environment.noise_std = 0.0;
    cfg.variants = vec![VariantSpec::plain(Variant::OracleTrue)];
    cfg.write_trajectories = Some(true);
    let manifest = harness::run_experiment(&cfg).unwrap();
    let model = cfg.environment.model.build().unwrap();
    let log = read_trajectory_csv(&dir.path().join(manifest.runs[0].trajectory.as_ref().unwrap())).unwrap();
    let bins = cfg.frequency_bins;
    let k = model.num_arms();
    let freq = arm_frequency(&log, k, 4, bins);

    let (mut mode_gap, mut uniform_gap) = (0.0, 0.0);
    for b in 0..bins {
        let x = (b as f64 + 0.5) / bins as f64;
        let best = model.best_value(x);
        let mode = freq.mode_arm(3, b).expect("every bin is visited");
        mode_gap += best - model.value(mode, x);
        uniform_gap += (0..k).map(|a| best - model.value(a, x)).sum::<f64>() / k as f64;
    }
    assert!(
        mode_gap < 0.5 * uniform_gap,
        "mode arms lose {mode_gap:.3} against {uniform_gap:.3} for uniform play"
    );
    let quarter = log.records.len() / 4;
    let loss = |rs: &[approx_zooming::TrialRecord]| rs.iter().map(|r| r.regret()).sum::<f64>();
    assert!(loss(&log.records[3 * quarter..]) < loss(&log.records[..quarter]));
}

#[test]
fn full_size_preset_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let text = ExperimentConfig::full_scale_preset().to_toml_string().unwrap();
    let mut cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::full_scale_preset());
    cfg.output_dir = Some(dir.path().to_path_buf());
    cfg.write_trajectories = Some(false);
    let manifest = harness::run_experiment(&cfg).unwrap();
    assert_eq!((manifest.num_arms, manifest.horizon), (200, 100_000));
    assert_eq!(manifest.runs.len(), 4);
    for r in &manifest.runs {
        assert_eq!(r.trials, 100_000);
        assert!(r.trajectory.is_none());
        assert_eq!(read_summary_csv(&dir.path().join(&r.summary)).unwrap().len(), 100);
    }
}
