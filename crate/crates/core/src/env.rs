//! Ground-truth environments.
//!
//! A [`RewardModel`] is the expected-reward surface `f_a(x)` over contexts in
//! `[0, 1]`; an [`Environment`] wraps one with uniform context arrivals and
//! additive Gaussian payoff noise. Contexts and noise come from two separate
//! seeded ChaCha streams so that different policies can be replayed against
//! the same context sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rewards within this distance of the best arm count as optimal.
///
/// Arms whose reward functions coincide mathematically can differ by an ulp
/// after floating-point folding (e.g. zigzag parameters mirrored around 0.5).
pub const OPTIMALITY_TOL: f64 = 1e-12;

/// A piecewise-linear function on `[0, 1]`, constant beyond its end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct PiecewiseLinear {
    knots: Vec<[f64; 2]>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<[f64; 2]>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("piecewise-linear function needs at least one knot"));
        }
        for w in knots.windows(2) {
            if !(w[1][0] > w[0][0]) {
                return Err(Error::invalid("knot positions must be strictly increasing"));
            }
        }
        for &[x, y] in &knots {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid(format!("knot ({x}, {y}) outside [0,1]x[0,1]")));
            }
        }
        Ok(Self { knots })
    }

    /// `max(0, height - slope * |x - center|)`, clipped to `[0, 1]`.
    pub fn tent(center: f64, height: f64, slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center) || !(0.0..=1.0).contains(&height) || slope <= 0.0 {
            return Err(Error::invalid("tent needs center, height in [0,1] and slope > 0"));
        }
        let eval = |x: f64| (height - slope * (x - center).abs()).max(0.0);
        let reach = height / slope;
        let mut xs = vec![0.0, center, 1.0];
        if center - reach > 0.0 {
            xs.push(center - reach);
        }
        if center + reach < 1.0 {
            xs.push(center + reach);
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        Self::new(xs.into_iter().map(|x| [x, eval(x)]).collect())
    }

    pub fn knots(&self) -> &[[f64; 2]] {
        &self.knots
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        let first = k[0];
        let last = k[k.len() - 1];
        if x <= first[0] {
            return first[1];
        }
        if x >= last[0] {
            return last[1];
        }
        let hi = k.partition_point(|p| p[0] <= x);
        let [x0, y0] = k[hi - 1];
        let [x1, y1] = k[hi];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn max_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<[f64; 2]>> for PiecewiseLinear {
    type Error = Error;

    fn try_from(knots: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(knots)
    }
}

impl From<PiecewiseLinear> for Vec<[f64; 2]> {
    fn from(p: PiecewiseLinear) -> Self {
        p.knots
    }
}

/// One peak of a [`JointReward::Bumps`] surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub context: f64,
    pub feature: f64,
    pub height: f64,
}

/// A joint reward `g(x, θ)` that is L-Lipschitz in both arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointReward {
    /// `g(x, θ) = max(0, 1 - L|x - θ|)`.
    Ridge { lipschitz: f64 },
    /// `g(x, θ) = clamp(max_j h_j - L(|x - x_j| + |θ - θ_j|), 0, 1)`.
    Bumps { lipschitz: f64, bumps: Vec<Bump> },
}

impl JointReward {
    pub fn lipschitz(&self) -> f64 {
        match self {
            JointReward::Ridge { lipschitz } | JointReward::Bumps { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn eval(&self, x: f64, theta: f64) -> f64 {
        match self {
            JointReward::Ridge { lipschitz } => (1.0 - lipschitz * (x - theta).abs()).max(0.0),
            JointReward::Bumps { lipschitz, bumps } => bumps
                .iter()
                .map(|b| b.height - lipschitz * ((x - b.context).abs() + (theta - b.feature).abs()))
                .fold(0.0, f64::max)
                .min(1.0),
        }
    }
}

/// Ground-truth expected reward surface `f_a(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RewardModel {
    /// `f_a(x) = max(0, 1 - L|x - φ_a|)` with `φ_a = 4 min_{z∈{0,½,1}} |θ_a - z|`.
    Zigzag { lipschitz: f64, arm_params: Vec<f64> },
    /// Each arm shares the reward function of its type.
    FiniteTypes {
        lipschitz: f64,
        type_of_arm: Vec<usize>,
        type_functions: Vec<PiecewiseLinear>,
    },
    /// `f_a(x) = g(x, θ_a)` for a latent feature `θ_a`.
    LatentLipschitz { arm_params: Vec<f64>, joint: JointReward },
}

/// Zigzag fold of a latent parameter onto the peak location.
pub fn zigzag_peak(theta: f64) -> f64 {
    let d = [0.0, 0.5, 1.0]
        .iter()
        .map(|z: &f64| (theta - z).abs())
        .fold(f64::INFINITY, f64::min);
    4.0 * d
}

impl RewardModel {
    /// Zigzag preset with evenly spaced parameters `θ_a = (a + 1) / K`.
    pub fn zigzag(num_arms: usize, lipschitz: f64) -> Result<Self> {
        let arm_params = (1..=num_arms).map(|i| i as f64 / num_arms as f64).collect();
        let model = RewardModel::Zigzag { lipschitz, arm_params };
        model.validate()?;
        Ok(model)
    }

    /// Finite-types preset: `num_types` tents of slope `L` centred at
    /// `(j + ½) / Θ`, arm `a` has type `a mod Θ`. Adjacent tents cross with
    /// opposite slopes of magnitude `L`, so the gap to the runner-up grows
    /// linearly away from every policy switch.
    pub fn finite_types(num_arms: usize, num_types: usize, lipschitz: f64) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::invalid("need at least one arm type"));
        }
        let type_functions = (0..num_types)
            .map(|j| PiecewiseLinear::tent((j as f64 + 0.5) / num_types as f64, 1.0, lipschitz))
            .collect::<Result<Vec<_>>>()?;
        let type_of_arm = (0..num_arms).map(|a| a % num_types).collect();
        let model = RewardModel::FiniteTypes {
            lipschitz,
            type_of_arm,
            type_functions,
        };
        model.validate()?;
        Ok(model)
    }

    /// Ridge preset `g(x, θ) = 1 - L|x - θ|` with `θ_a = (a + 1) / K`.
    pub fn latent_ridge(num_arms: usize, lipschitz: f64) -> Result<Self> {
        let arm_params = (1..=num_arms).map(|i| i as f64 / num_arms as f64).collect();
        let model = RewardModel::LatentLipschitz {
            arm_params,
            joint: JointReward::Ridge { lipschitz },
        };
        model.validate()?;
        Ok(model)
    }

    /// A random bump surface with uniformly drawn arm features.
    pub fn random_latent<R: Rng + ?Sized>(num_arms: usize, lipschitz: f64, rng: &mut R) -> Result<Self> {
        let num_bumps = rng.random_range(1..=4);
        let bumps = (0..num_bumps)
            .map(|_| Bump {
                context: rng.random(),
                feature: rng.random(),
                height: rng.random_range(0.5..=1.0),
            })
            .collect();
        let arm_params = (0..num_arms).map(|_| rng.random()).collect();
        let model = RewardModel::LatentLipschitz {
            arm_params,
            joint: JointReward::Bumps { lipschitz, bumps },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_arms() == 0 {
            return Err(Error::invalid("model needs at least one arm"));
        }
        let l = self.lipschitz();
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::invalid(format!("Lipschitz constant must be positive, got {l}")));
        }
        if let Some(params) = self.arm_params() {
            if params.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::invalid("arm parameters must lie in [0,1]"));
            }
        }
        if let RewardModel::FiniteTypes {
            type_of_arm,
            type_functions,
            lipschitz,
        } = self
        {
            if let Some(&bad) = type_of_arm.iter().find(|&&t| t >= type_functions.len()) {
                return Err(Error::invalid(format!("arm type {bad} has no type function")));
            }
            if let Some(f) = type_functions.iter().find(|f| f.max_slope() > lipschitz + 1e-12) {
                return Err(Error::invalid(format!(
                    "type function slope {} exceeds L = {lipschitz}",
                    f.max_slope()
                )));
            }
        }
        Ok(())
    }

    pub fn num_arms(&self) -> usize {
        match self {
            RewardModel::Zigzag { arm_params, .. } | RewardModel::LatentLipschitz { arm_params, .. } => {
                arm_params.len()
            }
            RewardModel::FiniteTypes { type_of_arm, .. } => type_of_arm.len(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            RewardModel::Zigzag { lipschitz, .. } | RewardModel::FiniteTypes { lipschitz, .. } => *lipschitz,
            RewardModel::LatentLipschitz { joint, .. } => joint.lipschitz(),
        }
    }

    /// Latent arm parameters `θ_a`, when the family has them.
    pub fn arm_params(&self) -> Option<&[f64]> {
        match self {
            RewardModel::Zigzag { arm_params, .. } | RewardModel::LatentLipschitz { arm_params, .. } => {
                Some(arm_params)
            }
            RewardModel::FiniteTypes { .. } => None,
        }
    }

    /// `f_a(x)` without bounds checking on `arm`.
    ///
    /// Panics if `arm >= num_arms()`.
    #[inline]
    pub fn value(&self, arm: usize, x: f64) -> f64 {
        match self {
            RewardModel::Zigzag { lipschitz, arm_params } => {
                (1.0 - lipschitz * (x - zigzag_peak(arm_params[arm])).abs()).max(0.0)
            }
            RewardModel::FiniteTypes {
                type_of_arm,
                type_functions,
                ..
            } => type_functions[type_of_arm[arm]].eval(x),
            RewardModel::LatentLipschitz { arm_params, joint } => joint.eval(x, arm_params[arm]),
        }
    }

    pub fn expected_reward(&self, arm: usize, x: f64) -> Result<f64> {
        self.check_arm(arm)?;
        Ok(self.value(arm, x))
    }

    pub fn check_arm(&self, arm: usize) -> Result<()> {
        let num_arms = self.num_arms();
        if arm >= num_arms {
            return Err(Error::ArmOutOfRange { arm, num_arms });
        }
        Ok(())
    }

    /// `f*(x) = max_a f_a(x)`.
    pub fn best_value(&self, x: f64) -> f64 {
        (0..self.num_arms())
            .map(|a| self.value(a, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn optimal_reward(&self, x: f64) -> Optimum {
        let values: Vec<f64> = (0..self.num_arms()).map(|a| self.value(a, x)).collect();
        let value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let argmax = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| value - v <= OPTIMALITY_TOL)
            .map(|(a, _)| a)
            .collect();
        Optimum { value, argmax }
    }

    /// The model with arms relabelled: new arm `a` behaves like old arm `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_arms();
        let mut seen = vec![false; k];
        if perm.len() != k {
            return Err(Error::invalid("permutation length must equal the arm count"));
        }
        for &p in perm {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("not a permutation of the arms"));
            }
        }
        let pick = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        Ok(match self {
            RewardModel::Zigzag { lipschitz, arm_params } => RewardModel::Zigzag {
                lipschitz: *lipschitz,
                arm_params: pick(arm_params),
            },
            RewardModel::FiniteTypes {
                lipschitz,
                type_of_arm,
                type_functions,
            } => RewardModel::FiniteTypes {
                lipschitz: *lipschitz,
                type_of_arm: perm.iter().map(|&p| type_of_arm[p]).collect(),
                type_functions: type_functions.clone(),
            },
            RewardModel::LatentLipschitz { arm_params, joint } => RewardModel::LatentLipschitz {
                arm_params: pick(arm_params),
                joint: joint.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub value: f64,
    /// Every arm attaining `value` (within [`OPTIMALITY_TOL`]), ascending.
    pub argmax: Vec<usize>,
}

/// A reward model together with context and noise streams.
#[derive(Debug, Clone)]
pub struct Environment {
    model: RewardModel,
    noise_std: f64,
    horizon: u64,
    context_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Environment {
    /// Both streams derive from `seed` (on distinct ChaCha stream ids).
    pub fn new(model: RewardModel, noise_std: f64, horizon: u64, seed: u64) -> Result<Self> {
        Self::with_streams(model, noise_std, horizon, seed, seed)
    }

    pub fn with_streams(
        model: RewardModel,
        noise_std: f64,
        horizon: u64,
        context_seed: u64,
        noise_seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::invalid(format!("noise std must be >= 0, got {noise_std}")));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        let mut context_rng = ChaCha8Rng::seed_from_u64(context_seed);
        context_rng.set_stream(0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        noise_rng.set_stream(1);
        Ok(Self {
            model,
            noise_std,
            horizon,
            context_rng,
            noise_rng,
        })
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn num_arms(&self) -> usize {
        self.model.num_arms()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Uniform draw from `[0, 1)`.
    pub fn sample_context(&mut self) -> f64 {
        self.context_rng.random::<f64>()
    }

    /// Noisy payoff `f_a(x) + ε`, `ε ~ N(0, σ²)`. Not clipped.
    pub fn observe(&mut self, arm: usize, x: f64) -> Result<f64> {
        let mean = self.model.expected_reward(arm, x)?;
        let z: f64 = self.noise_rng.sample(StandardNormal);
        Ok(mean + self.noise_std * z)
    }
}
