//! Regret, reward curves, arm-frequency matrices and model diagnostics.
//!
//! Everything here is a pure function of a trajectory or a model; grid
//! resolutions are parameters with the defaults in [`Resolutions`].

use serde::{Deserialize, Serialize};

use crate::env::{RewardModel, OPTIMALITY_TOL};
use crate::partition::Ball;
use crate::policy::{TrajectoryLog, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Resolutions {
    /// Context points per ball for `gap` and `diam`.
    pub ball_grid: usize,
    /// Context points per interval for the κ filter of `m_i`.
    pub m_i_grid: usize,
    /// Context points on `[0, 1]` for `mu_kappa`.
    pub mu_kappa_grid: usize,
}

impl Default for Resolutions {
    fn default() -> Self {
        Self {
            ball_grid: 1000,
            m_i_grid: 100,
            mu_kappa_grid: 10_000,
        }
    }
}

/// `n` evenly spaced points on `[u, v]` including both ends (the midpoint if `n == 1`).
pub fn uniform_grid(u: f64, v: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (v - u) / (n - 1) as f64 } else { 0.0 };
    let start = if n > 1 { u } else { 0.5 * (u + v) };
    (0..n).map(move |j| {
        if n > 1 && j == n - 1 {
            v
        } else {
            start + step * j as f64
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretSummary {
    pub instantaneous: Vec<f64>,
    /// `cumulative[t-1]` is the regret over trials `1..=t`.
    pub cumulative: Vec<f64>,
    /// `avg_cum_reward[t-1]` is the mean observed payoff over trials `1..=t`.
    pub avg_cum_reward: Vec<f64>,
}

impl RegretSummary {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Regret accumulated over trials `from+1..=to`.
    pub fn between(&self, from: usize, to: usize) -> f64 {
        let at = |t: usize| if t == 0 { 0.0 } else { self.cumulative[t - 1] };
        at(to) - at(from)
    }
}

/// Running sums for streaming logs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegretAccumulator {
    pub trials: u64,
    pub cum_regret: f64,
    pub cum_payoff: f64,
}

impl RegretAccumulator {
    pub fn push(&mut self, rec: &TrialRecord) {
        self.trials += 1;
        self.cum_regret += rec.regret();
        self.cum_payoff += rec.payoff;
    }

    pub fn avg_cum_reward(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.cum_payoff / self.trials as f64
        }
    }
}

pub fn regret(log: &TrajectoryLog) -> RegretSummary {
    let n = log.len();
    let mut out = RegretSummary {
        instantaneous: Vec::with_capacity(n),
        cumulative: Vec::with_capacity(n),
        avg_cum_reward: Vec::with_capacity(n),
    };
    let mut acc = RegretAccumulator::default();
    for rec in &log.records {
        acc.push(rec);
        out.instantaneous.push(rec.regret());
        out.cumulative.push(acc.cum_regret);
        out.avg_cum_reward.push(acc.avg_cum_reward());
    }
    out
}

/// Selection counts per (quarter, arm, context bin).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmFrequency {
    num_quarters: usize,
    num_arms: usize,
    bins: usize,
    horizon: u64,
    counts: Vec<u64>,
}

impl ArmFrequency {
    pub fn new(num_quarters: usize, num_arms: usize, bins: usize, horizon: u64) -> Self {
        assert!(num_quarters > 0 && bins > 0 && horizon > 0, "empty frequency layout");
        Self {
            num_quarters,
            num_arms,
            bins,
            horizon,
            counts: vec![0; num_quarters * num_arms * bins],
        }
    }

    pub fn num_quarters(&self) -> usize {
        self.num_quarters
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Period of trial `t` (1-based): trials are cut into equal consecutive blocks.
    pub fn quarter_of(&self, t: u64) -> usize {
        let q = (t.saturating_sub(1) as u128 * self.num_quarters as u128 / self.horizon as u128) as usize;
        q.min(self.num_quarters - 1)
    }

    pub fn bin_of(&self, x: f64) -> usize {
        ((x * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn record(&mut self, t: u64, x: f64, arm: usize) {
        let (q, b) = (self.quarter_of(t), self.bin_of(x));
        self.counts[(q * self.num_arms + arm) * self.bins + b] += 1;
    }

    pub fn get(&self, quarter: usize, arm: usize, bin: usize) -> u64 {
        self.counts[(quarter * self.num_arms + arm) * self.bins + bin]
    }

    pub fn quarter_total(&self, quarter: usize) -> u64 {
        let len = self.num_arms * self.bins;
        self.counts[quarter * len..(quarter + 1) * len].iter().sum()
    }

    /// Arm with the most selections in a bin during a quarter; `None` if the bin is empty.
    pub fn mode_arm(&self, quarter: usize, bin: usize) -> Option<usize> {
        (0..self.num_arms)
            .map(|a| (a, self.get(quarter, a, bin)))
            .filter(|&(_, c)| c > 0)
            .fold(None, |best: Option<(usize, u64)>, (a, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((a, c)),
            })
            .map(|(a, _)| a)
    }

    /// `(quarter, arm, bin, count)` rows in that order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize, u64)> + '_ {
        (0..self.num_quarters).flat_map(move |q| {
            (0..self.num_arms).flat_map(move |a| (0..self.bins).map(move |b| (q, a, b, self.get(q, a, b))))
        })
    }
}

pub fn arm_frequency(log: &TrajectoryLog, num_arms: usize, num_quarters: usize, bins: usize) -> ArmFrequency {
    let mut freq = ArmFrequency::new(num_quarters, num_arms, bins, log.len().max(1) as u64);
    for rec in &log.records {
        freq.record(rec.t, rec.x, rec.arm);
    }
    freq
}

/// Gap between the best reward at `x` and the best strictly suboptimal arm.
/// When every arm is optimal there is no competitor and the result is `f*(x)`.
pub fn kappa(model: &RewardModel, x: f64) -> f64 {
    let best = model.best_value(x);
    let runner_up = (0..model.num_arms())
        .map(|a| model.value(a, x))
        .filter(|&v| v < best - OPTIMALITY_TOL)
        .fold(0.0, f64::max);
    best - runner_up
}

/// Smallest suboptimality `f*(x) - f_a(x)` over `[c0, c1] × arms`.
pub fn gap(model: &RewardModel, c0: f64, c1: f64, arms: &[usize], points: usize) -> f64 {
    uniform_grid(c0, c1, points)
        .flat_map(|x| {
            let best = model.best_value(x);
            arms.iter().map(move |&a| best - model.value(a, x))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest minus smallest expected reward over `[c0, c1] × arms`.
pub fn diam(model: &RewardModel, c0: f64, c1: f64, arms: &[usize], points: usize) -> f64 {
    let (lo, hi) = uniform_grid(c0, c1, points)
        .flat_map(|x| arms.iter().map(move |&a| model.value(a, x)))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi < lo {
        0.0
    } else {
        hi - lo
    }
}

/// Largest sup-norm difference between two of `arms` on `[c0, c1]`.
pub fn max_pairwise_sup(model: &RewardModel, c0: f64, c1: f64, arms: &[usize], points: usize) -> f64 {
    let xs: Vec<f64> = uniform_grid(c0, c1, points).collect();
    let mut worst = 0.0f64;
    for (i, &a) in arms.iter().enumerate() {
        for &b in &arms[i + 1..] {
            for &x in &xs {
                worst = worst.max((model.value(a, x) - model.value(b, x)).abs());
            }
        }
    }
    worst
}

pub fn ball_gap(model: &RewardModel, ball: &Ball, points: usize) -> f64 {
    gap(model, ball.c0(), ball.c1(), ball.arms(), points)
}

pub fn ball_diam(model: &RewardModel, ball: &Ball, points: usize) -> f64 {
    diam(model, ball.c0(), ball.c1(), ball.arms(), points)
}

/// Count of (interval, arm) pairs at scale `2^-i` that are both near a small
/// κ and near-optimal at the interval's right end.
pub fn m_i(model: &RewardModel, i: u32, lipschitz: f64, points: usize) -> u64 {
    assert!((1..40).contains(&i), "scale index out of range");
    let cells = 1u64 << i;
    let width = (-(i as f64)).exp2();
    let kappa_cut = 20.0 * lipschitz * width;
    let gap_cut = 22.0 * lipschitz * width;
    let mut total = 0;
    for l in 1..=cells {
        let (u, v) = ((l - 1) as f64 * width, l as f64 * width);
        let near_flat = uniform_grid(u, v, points).any(|x| kappa(model, x) <= kappa_cut);
        if !near_flat {
            continue;
        }
        let best = model.best_value(v);
        total += (0..model.num_arms())
            .filter(|&a| best - model.value(a, v) <= gap_cut)
            .count() as u64;
    }
    total
}

/// κ on `points` evenly spaced contexts in `[0, 1]`.
pub fn kappa_profile(model: &RewardModel, points: usize) -> Vec<f64> {
    uniform_grid(0.0, 1.0, points).map(|x| kappa(model, x)).collect()
}

/// Fraction of a uniform grid on `[0, 1]` where `κ(x) <= z`.
pub fn mu_kappa(model: &RewardModel, z: f64, points: usize) -> f64 {
    mu_kappa_from_profile(&kappa_profile(model, points), z)
}

pub fn mu_kappa_from_profile(profile: &[f64], z: f64) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    profile.iter().filter(|&&k| k <= z).count() as f64 / profile.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PiecewiseLinear;
    use crate::partition::Phase;

    fn line(a: f64, b: f64) -> PiecewiseLinear {
        PiecewiseLinear::new(vec![[0.0, a], [1.0, b]]).unwrap()
    }

    /// f_0(x) = x, f_1(x) = 1 - x.
    fn crossing() -> RewardModel {
        RewardModel::FiniteTypes {
            lipschitz: 1.0,
            type_of_arm: vec![0, 1],
            type_functions: vec![line(0.0, 1.0), line(1.0, 0.0)],
        }
    }

    fn rec(t: u64, x: f64, arm: usize, payoff: f64, f_star: f64, f_arm: f64) -> TrialRecord {
        TrialRecord {
            t,
            x,
            ball: 0,
            phase: Phase::UcbPhase,
            arm,
            payoff,
            f_star,
            f_arm,
        }
    }

    #[test]
    fn grid_endpoints() {
        let g: Vec<f64> = uniform_grid(0.25, 0.5, 3).collect();
        assert_eq!(g, vec![0.25, 0.375, 0.5]);
        assert_eq!(uniform_grid(0.0, 1.0, 1).collect::<Vec<_>>(), vec![0.5]);
    }

    #[test]
    fn regret_sums() {
        let log = TrajectoryLog {
            records: vec![rec(1, 0.1, 0, 0.4, 0.8, 0.5), rec(2, 0.2, 1, 1.0, 0.9, 0.7)],
        };
        let s = regret(&log);
        assert!((s.total() - 0.5).abs() < 1e-15);
        assert!((s.avg_cum_reward[1] - 0.7).abs() < 1e-15);
        assert!((s.between(1, 2) - 0.2).abs() < 1e-15);
        assert_eq!(regret(&TrajectoryLog::default()).total(), 0.0);
    }

    #[test]
    fn frequency_conservation() {
        let records: Vec<_> = (1..=10)
            .map(|t| rec(t, t as f64 / 10.5, (t % 3) as usize, 0.0, 0.0, 0.0))
            .collect();
        let f = arm_frequency(&TrajectoryLog { records }, 3, 4, 5);
        let totals: Vec<u64> = (0..4).map(|q| f.quarter_total(q)).collect();
        assert_eq!(totals.iter().sum::<u64>(), 10);
        assert!(totals.iter().all(|&c| c == 2 || c == 3));
        assert_eq!(f.rows().count(), 4 * 3 * 5);
        assert_eq!(f.quarter_of(1), 0);
        assert_eq!(f.quarter_of(10), 3);
        assert_eq!(f.bin_of(1.0), 4);
    }

    #[test]
    fn kappa_examples() {
        let m = crossing();
        assert!((kappa(&m, 0.75) - 0.5).abs() < 1e-15);
        let same = RewardModel::FiniteTypes {
            lipschitz: 1.0,
            type_of_arm: vec![0, 0],
            type_functions: vec![line(0.2, 0.6)],
        };
        assert!((kappa(&same, 0.5) - 0.4).abs() < 1e-15);
        let margin = RewardModel::FiniteTypes {
            lipschitz: 1.0,
            type_of_arm: vec![0, 1, 2],
            type_functions: vec![line(0.3, 0.3), line(0.5, 0.5), line(0.8, 0.8)],
        };
        assert!((kappa(&margin, 0.4) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn gap_and_diam_examples() {
        let m = crossing();
        assert_eq!(gap(&m, 0.0, 0.5, &[1], 1000), 0.0);
        assert!((gap(&m, 0.0, 0.25, &[0], 1000) - 0.5).abs() < 1e-12);
        let flat = RewardModel::FiniteTypes {
            lipschitz: 1.0,
            type_of_arm: vec![0],
            type_functions: vec![line(0.4, 0.4)],
        };
        assert_eq!(diam(&flat, 0.0, 1.0, &[0], 1000), 0.0);
        assert!((diam(&m, 0.0, 0.5, &[0, 1], 1000) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn m_i_small_scales_saturate() {
        let m = crossing();
        assert_eq!(m_i(&m, 1, 1.0, 100), 4);
        assert_eq!(m_i(&m, 3, 1.0, 100), 16);
    }

    #[test]
    fn m_i_brute_force_at_fine_scale() {
        let m = RewardModel::zigzag(5, 1.0).unwrap();
        let i = 7;
        let w = (-(i as f64)).exp2();
        let mut expect = 0;
        for l in 1..=(1u64 << i) {
            let (u, v) = ((l - 1) as f64 * w, l as f64 * w);
            let min_k = (0..100)
                .map(|j| u + (v - u) * j as f64 / 99.0)
                .map(|x| {
                    let vals: Vec<f64> = (0..5).map(|a| m.value(a, x)).collect();
                    let best = vals.iter().cloned().fold(f64::MIN, f64::max);
                    let second = vals.iter().cloned().filter(|&y| y < best - 1e-12).fold(0.0, f64::max);
                    best - second
                })
                .fold(f64::INFINITY, f64::min);
            if min_k <= 20.0 * w {
                let best = (0..5).map(|a| m.value(a, v)).fold(f64::MIN, f64::max);
                expect += (0..5).filter(|&a| best - m.value(a, v) <= 22.0 * w).count() as u64;
            }
        }
        assert_eq!(m_i(&m, i, 1.0, 100), expect);
    }

    #[test]
    fn mu_kappa_examples() {
        let m = crossing();
        assert_eq!(mu_kappa(&m, 1.0, 10_000), 1.0);
        assert!(mu_kappa(&m, 0.0, 10_000) <= 2e-4);
        let prof = kappa_profile(&m, 10_000);
        let mut last = 0.0;
        for z in [0.0, 0.01, 0.1, 0.3, 0.5, 0.9, 1.0] {
            let v = mu_kappa_from_profile(&prof, z);
            assert!(v >= last);
            last = v;
        }
        // κ(x) = |2x - 1| so μ({κ ≤ z}) = z.
        assert!((mu_kappa_from_profile(&prof, 0.3) - 0.3).abs() < 1e-3);
    }
}
