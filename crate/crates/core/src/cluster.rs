//! Greedy center-based clustering of a ball's arms on each half of its
//! context interval.
//!
//! Arms are visited in ascending order. An arm farther than
//! `(3/16) L (v - u)` from every existing center becomes a new center;
//! otherwise it joins its nearest center (earliest center on ties).

use crate::env::RewardModel;
use crate::error::{Error, Result};
use crate::estimator::{bias_corrected_distance, knn_profile, mean_square_difference, true_profile, SampleSet};

/// Where pairwise arm distances come from.
#[derive(Debug, Clone, Copy)]
pub enum DistanceSource<'a> {
    /// Bias-corrected kNN estimates from a ball's flagged-phase samples.
    Learned {
        samples: &'a SampleSet,
        k: usize,
        noise_var: f64,
    },
    /// True grid distances evaluated on the model.
    OracleTrue(&'a RewardModel),
    /// `|θ_a - θ_b|` over latent parameters indexed by arm.
    OracleMetric(&'a [f64]),
    /// No similarity: every arm is its own cluster.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub center: usize,
    /// Members in visit order; the center comes first.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub left: Vec<Cluster>,
    pub right: Vec<Cluster>,
}

impl Clustering {
    pub fn left_sets(&self) -> Vec<Vec<usize>> {
        self.left.iter().map(|c| c.members.clone()).collect()
    }

    pub fn right_sets(&self) -> Vec<Vec<usize>> {
        self.right.iter().map(|c| c.members.clone()).collect()
    }
}

/// Separation threshold `(3/16) L (v - u)`.
pub fn cluster_threshold(lipschitz: f64, u: f64, v: f64) -> f64 {
    3.0 / 16.0 * lipschitz * (v - u)
}

/// Pairwise distances on one half-interval, precomputed per arm.
enum HalfMetric<'a> {
    Profiles {
        profiles: Vec<Vec<f64>>,
        noise_var: f64,
        k: Option<usize>,
    },
    Params(&'a [f64]),
    Discrete,
}

impl HalfMetric<'_> {
    fn build<'a>(arms: &[usize], u: f64, v: f64, dist: &DistanceSource<'a>) -> Result<HalfMetric<'a>> {
        Ok(match *dist {
            DistanceSource::Learned { samples, k, noise_var } => {
                for &a in arms {
                    if !samples.suff_data(a, k)? {
                        return Err(Error::InsufficientData(format!(
                            "arm {a} lacks {k} samples in every bucket"
                        )));
                    }
                }
                let profiles = arms
                    .iter()
                    .map(|&a| knn_profile(samples.arm(a)?, u, v, k))
                    .collect::<Result<_>>()?;
                HalfMetric::Profiles {
                    profiles,
                    noise_var,
                    k: Some(k),
                }
            }
            DistanceSource::OracleTrue(model) => HalfMetric::Profiles {
                profiles: arms
                    .iter()
                    .map(|&a| true_profile(model, a, u, v))
                    .collect::<Result<_>>()?,
                noise_var: 0.0,
                k: None,
            },
            DistanceSource::OracleMetric(params) => {
                if let Some(&a) = arms.iter().find(|&&a| a >= params.len()) {
                    return Err(Error::invalid(format!("no latent parameter for arm {a}")));
                }
                HalfMetric::Params(params)
            }
            DistanceSource::None => HalfMetric::Discrete,
        })
    }

    /// Distance between the arms at positions `i`, `j` of the visit order.
    fn distance(&self, arms: &[usize], i: usize, j: usize) -> f64 {
        match self {
            HalfMetric::Profiles { profiles, noise_var, k } => {
                let ms = mean_square_difference(&profiles[i], &profiles[j]);
                match k {
                    Some(k) => bias_corrected_distance(ms, *noise_var, *k),
                    None => ms.sqrt(),
                }
            }
            HalfMetric::Params(p) => (p[arms[i]] - p[arms[j]]).abs(),
            HalfMetric::Discrete => {
                if i == j {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

/// Greedy pass over `0..n` with a distance oracle on positions.
///
/// Returns `(center position, member positions)` groups.
pub fn greedy_cluster(n: usize, threshold: f64, mut dist: impl FnMut(usize, usize) -> f64) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let nearest =
            groups
                .iter()
                .enumerate()
                .map(|(g, (c, _))| (g, dist(i, *c)))
                .fold(None::<(usize, f64)>, |best, (g, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((g, d)),
                });
        match nearest {
            Some((g, d)) if d <= threshold => groups[g].1.push(i),
            _ => groups.push((i, vec![i])),
        }
    }
    groups
}

fn cluster_half(arms: &[usize], u: f64, v: f64, lipschitz: f64, dist: &DistanceSource<'_>) -> Result<Vec<Cluster>> {
    let metric = HalfMetric::build(arms, u, v, dist)?;
    let threshold = cluster_threshold(lipschitz, u, v);
    let groups = greedy_cluster(arms.len(), threshold, |i, j| metric.distance(arms, i, j));

    // Center separation and member radius must hold under the distance used.
    for (gi, (ci, members)) in groups.iter().enumerate() {
        for &m in members {
            let d = metric.distance(arms, m, *ci);
            if d > threshold {
                return Err(Error::invariant(format!(
                    "arm {} sits {d} from its center {} (threshold {threshold})",
                    arms[m], arms[*ci]
                )));
            }
        }
        for (cj, _) in &groups[..gi] {
            let d = metric.distance(arms, *ci, *cj);
            if !(d > threshold) {
                return Err(Error::invariant(format!(
                    "centers {} and {} only {d} apart (threshold {threshold})",
                    arms[*ci], arms[*cj]
                )));
            }
        }
    }

    Ok(groups
        .into_iter()
        .map(|(c, members)| Cluster {
            center: arms[c],
            members: members.into_iter().map(|m| arms[m]).collect(),
        })
        .collect())
}

/// Cluster `arms` separately on `[c0, mid]` and `[mid, c1]`.
pub fn subpartition(arms: &[usize], c0: f64, c1: f64, lipschitz: f64, dist: &DistanceSource<'_>) -> Result<Clustering> {
    if arms.is_empty() {
        return Err(Error::invalid("cannot cluster an empty arm set"));
    }
    if !(c1 > c0) {
        return Err(Error::invalid(format!("empty interval [{c0}, {c1}]")));
    }
    let mid = 0.5 * (c0 + c1);
    Ok(Clustering {
        left: cluster_half(arms, c0, mid, lipschitz, dist)?,
        right: cluster_half(arms, mid, c1, lipschitz, dist)?,
    })
}
