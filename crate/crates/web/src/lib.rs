//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string; the page in `www/` draws it on a canvas.

use approx_zooming::cluster::{cluster_threshold, subpartition, Cluster, DistanceSource};
use approx_zooming::estimator::SampleSet;
use approx_zooming::harness::ModelSpec;
use approx_zooming::metrics::{kappa, ArmFrequency, RegretAccumulator};
use approx_zooming::partition::DyadicInterval;
use approx_zooming::policy::{run_with, KMode, PolicyConfig, Variant};
use approx_zooming::{Environment, FlagMode, RewardModel};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest simulation the page may request.
pub const MAX_HORIZON: u64 = 200_000;
pub const MAX_ARMS: usize = 400;

fn build_model(preset: &str, arms: usize, lipschitz: f64) -> Result<RewardModel, String> {
    if arms == 0 || arms > MAX_ARMS {
        return Err(format!("arm count must be in 1..={MAX_ARMS}"));
    }
    let spec = match preset {
        "zigzag" => ModelSpec::Zigzag {
            num_arms: arms,
            lipschitz,
            permutation_seed: None,
        },
        "ridge" => ModelSpec::LatentRidge {
            num_arms: arms,
            lipschitz,
        },
        "finite_types" => ModelSpec::FiniteTypes {
            num_arms: arms,
            num_types: 4.min(arms),
            lipschitz,
        },
        other => return Err(format!("unknown preset {other:?}")),
    };
    spec.build().map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct RewardMap {
    pub xs: Vec<f64>,
    /// `curves[a][j]` is `f_a(xs[j])`.
    pub curves: Vec<Vec<f64>>,
    pub f_star: Vec<f64>,
    pub argmax: Vec<Vec<usize>>,
    pub kappa: Vec<f64>,
}

pub fn reward_map(preset: &str, arms: usize, lipschitz: f64, points: usize) -> Result<RewardMap, String> {
    let model = build_model(preset, arms, lipschitz)?;
    let points = points.clamp(2, 2000);
    let xs: Vec<f64> = (0..points).map(|j| j as f64 / (points - 1) as f64).collect();
    let curves = (0..arms)
        .map(|a| xs.iter().map(|&x| model.value(a, x)).collect())
        .collect();
    Ok(RewardMap {
        curves,
        f_star: xs.iter().map(|&x| model.best_value(x)).collect(),
        argmax: xs.iter().map(|&x| model.optimal_reward(x).argmax).collect(),
        kappa: xs.iter().map(|&x| kappa(&model, x)).collect(),
        xs,
    })
}

#[derive(Debug, Serialize)]
pub struct LiveBall {
    pub c0: f64,
    pub c1: f64,
    pub arms: Vec<usize>,
    pub state: String,
}

#[derive(Debug, Serialize)]
pub struct VariantRun {
    pub variant: String,
    pub t: Vec<u64>,
    pub avg_cum_reward: Vec<f64>,
    pub cum_regret: Vec<f64>,
    /// Final-quarter play counts, `heat[bin][arm]`.
    pub heat: Vec<Vec<u64>>,
    pub balls: Vec<LiveBall>,
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub num_arms: usize,
    pub bins: usize,
    pub runs: Vec<VariantRun>,
}

const CURVE_POINTS: u64 = 200;
const HEAT_BINS: usize = 50;

pub fn simulate(preset: &str, arms: usize, horizon: u64, noise_std: f64, seed: u64) -> Result<Simulation, String> {
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(format!("horizon must be in 1..={MAX_HORIZON}"));
    }
    let model = build_model(preset, arms, 1.0)?;
    let mut runs = Vec::new();
    for variant in Variant::ALL {
        if variant == Variant::OracleMetric && model.arm_params().is_none() {
            continue;
        }
        let mut cfg = PolicyConfig::new(variant, 1.0, noise_std * noise_std, horizon);
        cfg.flag_mode = FlagMode::Simulation;
        cfg.k_mode = KMode::Fixed(1);
        cfg.seed = seed;
        // Shared context stream so the curves are paired.
        let mut env = Environment::with_streams(model.clone(), noise_std, horizon, seed, seed ^ 0x9e37_79b9)
            .map_err(|e| e.to_string())?;
        let stride = horizon.div_ceil(CURVE_POINTS);
        let mut acc = RegretAccumulator::default();
        let mut freq = ArmFrequency::new(4, arms, HEAT_BINS, horizon);
        let mut run = VariantRun {
            variant: variant.label().to_string(),
            t: Vec::new(),
            avg_cum_reward: Vec::new(),
            cum_regret: Vec::new(),
            heat: Vec::new(),
            balls: Vec::new(),
        };
        let policy = run_with(&mut env, &cfg, |r| {
            acc.push(r);
            freq.record(r.t, r.x, r.arm);
            if r.t % stride == 0 || r.t == horizon {
                run.t.push(r.t);
                run.avg_cum_reward.push(acc.avg_cum_reward());
                run.cum_regret.push(acc.cum_regret);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        run.heat = (0..HEAT_BINS)
            .map(|b| (0..arms).map(|a| freq.get(3, a, b)).collect())
            .collect();
        run.balls = policy
            .state()
            .balls()
            .iter()
            .filter(|b| b.is_live())
            .map(|b| LiveBall {
                c0: b.c0(),
                c1: b.c1(),
                arms: b.arms().to_vec(),
                state: b.state().to_string(),
            })
            .collect();
        runs.push(run);
    }
    Ok(Simulation {
        num_arms: arms,
        bins: HEAT_BINS,
        runs,
    })
}

#[derive(Debug, Serialize)]
pub struct HalfClusters {
    pub u: f64,
    pub v: f64,
    pub threshold: f64,
    pub oracle: Vec<Vec<usize>>,
    pub learned: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize)]
pub struct ClusterView {
    pub samples_used: u64,
    pub halves: Vec<HalfClusters>,
}

fn members(cs: &[Cluster]) -> Vec<Vec<usize>> {
    cs.iter().map(|c| c.members.clone()).collect()
}

/// Cluster all arms on the two halves of a dyadic interval, once with true
/// distances and once from `k` noisy samples per bucket.
pub fn cluster_view(
    preset: &str,
    arms: usize,
    depth: u8,
    index: u64,
    noise_std: f64,
    k: usize,
    seed: u64,
) -> Result<ClusterView, String> {
    if depth > 10 || k == 0 || k > 50 {
        return Err("need depth <= 10 and 1 <= k <= 50".into());
    }
    let model = build_model(preset, arms, 1.0)?;
    let iv = DyadicInterval::new(depth, index).map_err(|e| e.to_string())?;
    let (u, v) = (iv.start(), iv.end());
    let all: Vec<usize> = (0..arms).collect();

    let mut env = Environment::new(model.clone(), noise_std, 1, seed).map_err(|e| e.to_string())?;
    let mut samples = SampleSet::new(u, v, &all).map_err(|e| e.to_string())?;
    let mut used = 0;
    while let Some(a) = samples.first_unsatisfied(k) {
        let x = u + env.sample_context() * (v - u);
        let y = env.observe(a, x).map_err(|e| e.to_string())?;
        samples.insert(a, x, y).map_err(|e| e.to_string())?;
        used += 1;
    }
    let oracle = subpartition(&all, u, v, 1.0, &DistanceSource::OracleTrue(&model)).map_err(|e| e.to_string())?;
    let learned = subpartition(
        &all,
        u,
        v,
        1.0,
        &DistanceSource::Learned {
            samples: &samples,
            k,
            noise_var: noise_std * noise_std,
        },
    )
    .map_err(|e| e.to_string())?;
    let mid = iv.midpoint();
    Ok(ClusterView {
        samples_used: used,
        halves: vec![
            HalfClusters {
                u,
                v: mid,
                threshold: cluster_threshold(1.0, u, mid),
                oracle: members(&oracle.left),
                learned: members(&learned.left),
            },
            HalfClusters {
                u: mid,
                v,
                threshold: cluster_threshold(1.0, mid, v),
                oracle: members(&oracle.right),
                learned: members(&learned.right),
            },
        ],
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = rewardMap)]
pub fn reward_map_js(preset: &str, arms: usize, lipschitz: f64, points: usize) -> Result<String, JsValue> {
    to_js(reward_map(preset, arms, lipschitz, points))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(preset: &str, arms: usize, horizon: u32, noise_std: f64, seed: u32) -> Result<String, JsValue> {
    to_js(simulate(preset, arms, horizon as u64, noise_std, seed as u64))
}

#[wasm_bindgen(js_name = clusterView)]
pub fn cluster_view_js(
    preset: &str,
    arms: usize,
    depth: u8,
    index: u32,
    noise_std: f64,
    k: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(cluster_view(
        preset,
        arms,
        depth,
        index as u64,
        noise_std,
        k,
        seed as u64,
    ))
}
