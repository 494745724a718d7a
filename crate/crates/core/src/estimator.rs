//! Reward-function estimation from flagged-phase samples and arm distances.
//!
//! Distances between two arms on an interval `[u, v]` are root-mean-square
//! differences of their reward functions over the fixed grid
//! `z_i = (1 - i/200) u + (i/200) v`, `i = 1..=200`. The true distance uses
//! the model; the estimated one uses k-nearest-neighbour estimates and
//! subtracts the `2σ²/k` noise bias before taking the root.

use std::cell::OnceCell;

use crate::env::RewardModel;
use crate::error::{Error, Result};

/// Number of grid points in a distance evaluation.
pub const GRID_POINTS: usize = 200;

/// Number of equal context buckets checked by the sufficient-data condition.
pub const SUFFDATA_BUCKETS: usize = 64;

/// The distance grid `z_1, ..., z_200` on `[u, v]`; `z_200 = v`.
pub fn distance_grid(u: f64, v: f64) -> impl Iterator<Item = f64> {
    (1..=GRID_POINTS).map(move |i| {
        let w = i as f64 / GRID_POINTS as f64;
        (1.0 - w) * u + w * v
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub context: f64,
    pub payoff: f64,
    /// Insertion order within the owning [`SampleSet`].
    pub seq: u64,
}

/// Samples of one arm. Stored in arrival order; the sorted view is built on
/// first read after an insert.
#[derive(Debug, Clone, Default)]
pub struct ArmSamples {
    arrivals: Vec<Sample>,
    sorted: OnceCell<Vec<Sample>>,
    buckets: Vec<u32>,
}

impl ArmSamples {
    /// Samples sorted by context, then insertion order.
    pub fn samples(&self) -> &[Sample] {
        self.sorted.get_or_init(|| {
            let mut v = self.arrivals.clone();
            v.sort_by(|a, b| a.context.total_cmp(&b.context));
            v
        })
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn bucket_counts(&self) -> &[u32] {
        &self.buckets
    }

    fn satisfied(&self, k: usize) -> bool {
        self.buckets.iter().all(|&c| c as usize >= k)
    }
}

/// Flagged-phase observations of a ball, per arm.
#[derive(Debug, Clone)]
pub struct SampleSet {
    c0: f64,
    c1: f64,
    arms: Vec<usize>,
    per_arm: Vec<ArmSamples>,
    next_seq: u64,
}

impl SampleSet {
    /// An empty store for the ball `[c0, c1] × arms`; `arms` must be sorted.
    pub fn new(c0: f64, c1: f64, arms: &[usize]) -> Result<Self> {
        if !(c1 > c0) {
            return Err(Error::invalid(format!("empty interval [{c0}, {c1}]")));
        }
        if arms.is_empty() || arms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("arm list must be nonempty and strictly ascending"));
        }
        let per_arm = arms
            .iter()
            .map(|_| ArmSamples {
                buckets: vec![0; SUFFDATA_BUCKETS],
                ..ArmSamples::default()
            })
            .collect();
        Ok(Self {
            c0,
            c1,
            arms: arms.to_vec(),
            per_arm,
            next_seq: 0,
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.c0, self.c1)
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    /// Total number of samples over all arms.
    pub fn len(&self) -> usize {
        self.per_arm.iter().map(ArmSamples::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, arm: usize) -> Result<usize> {
        self.arms
            .binary_search(&arm)
            .map_err(|_| Error::invalid(format!("arm {arm} does not belong to this sample set")))
    }

    pub fn arm(&self, arm: usize) -> Result<&ArmSamples> {
        Ok(&self.per_arm[self.slot(arm)?])
    }

    fn bucket_of(&self, x: f64) -> usize {
        let b = ((x - self.c0) / (self.c1 - self.c0) * SUFFDATA_BUCKETS as f64).floor();
        (b.max(0.0) as usize).min(SUFFDATA_BUCKETS - 1)
    }

    pub fn insert(&mut self, arm: usize, context: f64, payoff: f64) -> Result<()> {
        if !(self.c0..=self.c1).contains(&context) {
            return Err(Error::invalid(format!(
                "context {context} outside [{}, {}]",
                self.c0, self.c1
            )));
        }
        let slot = self.slot(arm)?;
        let bucket = self.bucket_of(context);
        let seq = self.next_seq;
        self.next_seq += 1;
        let entry = &mut self.per_arm[slot];
        entry.arrivals.push(Sample { context, payoff, seq });
        entry.sorted.take();
        entry.buckets[bucket] += 1;
        Ok(())
    }

    /// Every one of the 64 buckets holds at least `k` samples of `arm`.
    pub fn suff_data(&self, arm: usize, k: usize) -> Result<bool> {
        Ok(self.per_arm[self.slot(arm)?].satisfied(k))
    }

    pub fn all_suff_data(&self, k: usize) -> bool {
        self.per_arm.iter().all(|s| s.satisfied(k))
    }

    /// Lowest-indexed arm still short of data.
    pub fn first_unsatisfied(&self, k: usize) -> Option<usize> {
        self.arms
            .iter()
            .zip(&self.per_arm)
            .find(|(_, s)| !s.satisfied(k))
            .map(|(&a, _)| a)
    }
}

/// Mean payoff over exactly the `k` samples nearest to `x`.
///
/// Ties in distance go to the earlier-inserted sample.
pub fn knn_estimate(samples: &ArmSamples, x: f64, k: usize) -> Result<f64> {
    let s = samples.samples();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if s.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} samples available, {k} neighbours requested",
            s.len()
        )));
    }
    let dist = |i: usize| (s[i].context - x).abs();

    // Grow a window [lo, hi) to k elements to find the k-th smallest distance.
    let start = s.partition_point(|p| p.context < x);
    let (mut lo, mut hi) = (start, start);
    while hi - lo < k {
        let take_left = match (lo > 0, hi < s.len()) {
            (true, true) => dist(lo - 1) <= dist(hi),
            (l, _) => l,
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    let kth = dist(lo).max(dist(hi - 1));

    // Everything strictly closer than `kth` is in; distance ties fill the rest
    // in insertion order.
    let mut sum = 0.0;
    let mut taken = 0;
    let mut ties = Vec::new();
    let mut i = lo;
    while i > 0 && dist(i - 1) == kth {
        i -= 1;
    }
    let mut j = hi;
    while j < s.len() && dist(j) == kth {
        j += 1;
    }
    for (idx, p) in s.iter().enumerate().take(j).skip(i) {
        if dist(idx) < kth {
            sum += p.payoff;
            taken += 1;
        } else {
            ties.push(*p);
        }
    }
    ties.sort_by_key(|p| p.seq);
    for p in ties.iter().take(k - taken) {
        sum += p.payoff;
    }
    Ok(sum / k as f64)
}

/// kNN estimates of one arm at every distance-grid point of `[u, v]`.
pub fn knn_profile(samples: &ArmSamples, u: f64, v: f64, k: usize) -> Result<Vec<f64>> {
    distance_grid(u, v).map(|z| knn_estimate(samples, z, k)).collect()
}

/// True reward of one arm at every distance-grid point of `[u, v]`.
pub fn true_profile(model: &RewardModel, arm: usize, u: f64, v: f64) -> Result<Vec<f64>> {
    model.check_arm(arm)?;
    Ok(distance_grid(u, v).map(|z| model.value(arm, z)).collect())
}

/// `(1/200) Σ (p_i - q_i)²`.
pub fn mean_square_difference(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
}

/// `sqrt(max(0, ms - 2σ²/k))`.
pub fn bias_corrected_distance(mean_square: f64, noise_var: f64, k: usize) -> f64 {
    (mean_square - 2.0 * noise_var / k as f64).max(0.0).sqrt()
}

fn check_interval(u: f64, v: f64) -> Result<()> {
    if !(0.0 <= u && u < v && v <= 1.0) {
        return Err(Error::invalid(format!("need 0 <= u < v <= 1, got [{u}, {v}]")));
    }
    Ok(())
}

/// Grid L2 distance between the true reward functions of two arms on `[u, v]`.
pub fn true_distance(model: &RewardModel, a: usize, b: usize, u: f64, v: f64) -> Result<f64> {
    check_interval(u, v)?;
    let p = true_profile(model, a, u, v)?;
    let q = true_profile(model, b, u, v)?;
    Ok(mean_square_difference(&p, &q).sqrt())
}

/// Bias-corrected kNN estimate of [`true_distance`].
///
/// Both arms must satisfy the sufficient-data condition for `k` in `samples`.
pub fn est_distance(samples: &SampleSet, a: usize, b: usize, u: f64, v: f64, k: usize, noise_var: f64) -> Result<f64> {
    check_interval(u, v)?;
    for arm in [a, b] {
        if !samples.suff_data(arm, k)? {
            return Err(Error::InsufficientData(format!(
                "arm {arm} lacks {k} samples in every bucket"
            )));
        }
    }
    let p = knn_profile(samples.arm(a)?, u, v, k)?;
    let q = knn_profile(samples.arm(b)?, u, v, k)?;
    Ok(bias_corrected_distance(mean_square_difference(&p, &q), noise_var, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PiecewiseLinear;

    fn set_with(points: &[(f64, f64)]) -> SampleSet {
        let mut s = SampleSet::new(0.0, 1.0, &[0]).unwrap();
        for &(x, y) in points {
            s.insert(0, x, y).unwrap();
        }
        s
    }

    fn crossing() -> RewardModel {
        RewardModel::FiniteTypes {
            lipschitz: 1.0,
            type_of_arm: vec![0, 1],
            type_functions: vec![
                PiecewiseLinear::new(vec![[0.0, 1.0], [1.0, 0.0]]).unwrap(),
                PiecewiseLinear::new(vec![[0.0, 0.0], [1.0, 1.0]]).unwrap(),
            ],
        }
    }

    /// Brute-force kNN: sort every sample by (distance, seq).
    fn knn_oracle(samples: &[Sample], x: f64, k: usize) -> f64 {
        let mut v: Vec<_> = samples.to_vec();
        v.sort_by(|a, b| {
            (a.context - x)
                .abs()
                .total_cmp(&(b.context - x).abs())
                .then(a.seq.cmp(&b.seq))
        });
        v.iter().take(k).map(|s| s.payoff).sum::<f64>() / k as f64
    }

    #[test]
    fn grid_endpoints() {
        let g: Vec<f64> = distance_grid(0.2, 0.6).collect();
        assert_eq!(g.len(), 200);
        assert_eq!(g[199], 0.6);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[0] - 0.202).abs() < 1e-15);
    }

    #[test]
    fn knn_hand_enumerated() {
        let s = set_with(&[(0.1, 1.0), (0.2, 2.0), (0.9, 9.0)]);
        let arm = s.arm(0).unwrap();
        assert_eq!(knn_estimate(arm, 0.15, 2).unwrap(), 1.5);
        assert_eq!(knn_estimate(arm, 0.5, 3).unwrap(), 4.0);
        assert!(matches!(knn_estimate(arm, 0.5, 4), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn knn_constant_function() {
        let pts: Vec<_> = (0..50).map(|i| (i as f64 / 50.0, 0.37)).collect();
        let s = set_with(&pts);
        for k in [1, 5, 50] {
            assert!((knn_estimate(s.arm(0).unwrap(), 0.61, k).unwrap() - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn knn_ties_prefer_earlier_insertion() {
        // 0.4 and 0.6 are equidistant from 0.5; the later-inserted 0.4 loses.
        let s = set_with(&[(0.6, 10.0), (0.4, 20.0), (0.4, 30.0)]);
        assert_eq!(knn_estimate(s.arm(0).unwrap(), 0.5, 1).unwrap(), 10.0);
        assert_eq!(knn_estimate(s.arm(0).unwrap(), 0.5, 2).unwrap(), 15.0);
    }

    #[test]
    fn knn_matches_oracle_with_duplicates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = SampleSet::new(0.0, 1.0, &[0]).unwrap();
        for _ in 0..300 {
            // coarse contexts force many exact ties
            let x = (rng.random_range(0..40) as f64) / 40.0;
            s.insert(0, x, rng.random()).unwrap();
        }
        let arm = s.arm(0).unwrap();
        for i in 0..=80 {
            let x = i as f64 / 80.0;
            for k in [1, 3, 8, 17, 300] {
                let got = knn_estimate(arm, x, k).unwrap();
                let want = knn_oracle(arm.samples(), x, k);
                assert!((got - want).abs() < 1e-12, "x={x} k={k}");
            }
        }
    }

    #[test]
    fn suffdata_buckets() {
        let mut s = SampleSet::new(0.0, 1.0, &[2, 5]).unwrap();
        for b in 0..63 {
            s.insert(2, (b as f64 + 0.5) / 64.0, 0.0).unwrap();
        }
        assert!(!s.suff_data(2, 1).unwrap());
        assert_eq!(s.first_unsatisfied(1), Some(2));
        s.insert(2, 63.5 / 64.0, 0.0).unwrap();
        assert!(s.suff_data(2, 1).unwrap());
        assert!(!s.suff_data(2, 2).unwrap());
        assert_eq!(s.first_unsatisfied(1), Some(5));
        assert!(!s.all_suff_data(1));
        assert!(s.insert(7, 0.5, 0.0).is_err());
        assert!(s.insert(2, 1.5, 0.0).is_err());
    }

    #[test]
    fn suffdata_at_k26_needs_1664_samples() {
        let mut s = SampleSet::new(0.25, 0.5, &[0]).unwrap();
        for i in 0..(26 * 64) {
            let b = i % 64;
            s.insert(0, 0.25 + (b as f64 + 0.5) / 64.0 * 0.25, 0.0).unwrap();
            assert_eq!(s.suff_data(0, 26).unwrap(), i == 26 * 64 - 1);
        }
    }

    #[test]
    fn true_distance_examples() {
        let z = RewardModel::Zigzag {
            lipschitz: 1.0,
            arm_params: vec![0.25, 0.75, 0.1],
        };
        assert_eq!(true_distance(&z, 2, 2, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(true_distance(&z, 0, 1, 0.0, 1.0).unwrap(), 0.0);

        // Oracle: explicit sum over the 200 grid points of (1 - i/100)^2.
        let brute: f64 = (1..=200).map(|i| (1.0 - i as f64 / 100.0).powi(2)).sum::<f64>() / 200.0;
        let d = true_distance(&crossing(), 0, 1, 0.0, 1.0).unwrap();
        assert!((d - brute.sqrt()).abs() < 1e-12);
        assert!((d - 0.57735).abs() < 1e-4);
        assert!(true_distance(&crossing(), 0, 1, 0.5, 0.5).is_err());
    }

    #[test]
    fn est_distance_identical_data_is_zero() {
        let mut s = SampleSet::new(0.0, 1.0, &[0, 1]).unwrap();
        for i in 0..640 {
            let x = (i as f64 + 0.5) / 640.0;
            let y = (x * 7.0).sin();
            s.insert(0, x, y).unwrap();
            s.insert(1, x, y).unwrap();
        }
        assert_eq!(est_distance(&s, 0, 1, 0.0, 0.5, 3, 0.0).unwrap(), 0.0);
        assert_eq!(est_distance(&s, 0, 0, 0.5, 1.0, 3, 0.0).unwrap(), 0.0);
        assert!(matches!(
            est_distance(&s, 0, 1, 0.0, 0.5, 11, 0.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn est_distance_noiseless_dense_matches_truth() {
        let m = crossing();
        let mut s = SampleSet::new(0.0, 1.0, &[0, 1]).unwrap();
        let n = 200_000;
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            s.insert(0, x, m.value(0, x)).unwrap();
            s.insert(1, x, m.value(1, x)).unwrap();
        }
        let d = est_distance(&s, 0, 1, 0.0, 1.0, 1, 0.0).unwrap();
        let truth = true_distance(&m, 0, 1, 0.0, 1.0).unwrap();
        assert!((d - truth).abs() < 1e-3);
        assert!((d - 0.57735).abs() < 1e-3);
    }

    #[test]
    fn clamp_rule() {
        assert_eq!(bias_corrected_distance(0.0001, 0.0002, 2), 0.0);
        assert!((bias_corrected_distance(0.25, 0.0, 5) - 0.5).abs() < 1e-15);
    }
}
