//! The Approx-Zooming trial loop and its three benchmark variants.
//!
//! Every trial: a context arrives; if a flagged ball covers it the widest such
//! ball is played on its lowest arm still short of data, and once every arm
//! has enough data the ball is split by clustering. Otherwise the covering
//! active ball with the largest UCB is played round-robin, and flagged when
//! its play count crosses the flagging threshold.
//!
//! The oracle variants split at flag time from oracle distances, without a
//! sampling phase. The no-similarity variant starts from `K` singleton balls
//! and only ever splits contexts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{subpartition, DistanceSource};
use crate::env::{Environment, RewardModel};
use crate::error::{Error, Result};
use crate::partition::{BallId, BallState, ConfidenceParams, FlagMode, PartitionState, Phase};

/// Numerator of the per-bucket sample requirement `k`.
pub const K_FORMULA_CONSTANT: f64 = 5431.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Distances estimated from flagged-phase samples.
    Learned,
    /// Free access to the true grid distances.
    OracleTrue,
    /// Free access to `|θ_a - θ_b|`.
    OracleMetric,
    /// Every arm in its own ball; only contexts are split.
    NoSimilarity,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Learned,
        Variant::OracleTrue,
        Variant::OracleMetric,
        Variant::NoSimilarity,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Learned => "learned",
            Variant::OracleTrue => "oracle_true",
            Variant::OracleMetric => "oracle_metric",
            Variant::NoSimilarity => "no_similarity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// `k = ⌈5431 σ² ln(T |A|) / (L² Δ²)⌉`, at least 1.
    Formula,
    Fixed(usize),
}

/// Order in which a splitting ball's arms are offered to the greedy clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitOrder {
    Ascending,
    /// A fresh uniformly random order per split, drawn from the policy seed.
    Shuffled,
}

fn default_visit_order() -> VisitOrder {
    VisitOrder::Shuffled
}

fn default_ucb_constant() -> f64 {
    6.0
}

fn default_delta_min() -> f64 {
    (-20f64).exp2()
}

fn default_true() -> bool {
    true
}

fn default_flag_mode() -> FlagMode {
    FlagMode::Theory
}

fn default_k_mode() -> KMode {
    KMode::Formula
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub lipschitz: f64,
    /// Noise variance σ² assumed by the confidence radius and `D̂`.
    pub noise_var: f64,
    pub horizon: u64,
    #[serde(default = "default_ucb_constant")]
    pub ucb_constant: f64,
    #[serde(default = "default_flag_mode")]
    pub flag_mode: FlagMode,
    #[serde(default = "default_k_mode")]
    pub k_mode: KMode,
    /// Balls this narrow are never flagged.
    #[serde(default = "default_delta_min")]
    pub delta_min: f64,
    /// Split flagged single-arm balls at once instead of sampling them.
    #[serde(default = "default_true")]
    pub singleton_skip: bool,
    #[serde(default = "default_visit_order")]
    pub visit_order: VisitOrder,
    /// Seed of the policy's own randomness (the shuffled visit order).
    #[serde(default)]
    pub seed: u64,
    /// Run the full partition audit after every trial.
    #[serde(default)]
    pub check_invariants: bool,
}

impl PolicyConfig {
    pub fn new(variant: Variant, lipschitz: f64, noise_var: f64, horizon: u64) -> Self {
        Self {
            variant,
            lipschitz,
            noise_var,
            horizon,
            ucb_constant: default_ucb_constant(),
            flag_mode: default_flag_mode(),
            k_mode: default_k_mode(),
            delta_min: default_delta_min(),
            singleton_skip: true,
            visit_order: default_visit_order(),
            seed: 0,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lipschitz", self.lipschitz)?;
        positive("ucb_constant", self.ucb_constant)?;
        positive("delta_min", self.delta_min)?;
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::Config(format!("noise_var must be >= 0, got {}", self.noise_var)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.delta_min < (-(crate::partition::MAX_DEPTH as f64 - 1.0)).exp2() {
            return Err(Error::Config(format!(
                "delta_min {} is below the supported depth",
                self.delta_min
            )));
        }
        if self.k_mode == KMode::Fixed(0) {
            return Err(Error::Config("fixed k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn confidence(&self) -> ConfidenceParams {
        ConfidenceParams {
            lipschitz: self.lipschitz,
            noise_var: self.noise_var,
            ln_horizon: (self.horizon as f64).ln(),
            ucb_constant: self.ucb_constant,
        }
    }

    /// Per-bucket sample requirement for a ball with `num_arms` arms and width `width`.
    pub fn suffdata_k(&self, num_arms: usize, width: f64) -> usize {
        match self.k_mode {
            KMode::Fixed(k) => k,
            KMode::Formula => {
                let k = K_FORMULA_CONSTANT * self.noise_var * (self.horizon as f64 * num_arms as f64).ln()
                    / (self.lipschitz.powi(2) * width * width);
                (k.ceil().min(u32::MAX as f64) as usize).max(1)
            }
        }
    }
}

/// One trial. `f_star` and `f_arm` come from the model and are never seen by
/// the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub t: u64,
    pub x: f64,
    pub ball: BallId,
    pub phase: Phase,
    pub arm: usize,
    pub payoff: f64,
    pub f_star: f64,
    pub f_arm: f64,
}

impl TrialRecord {
    pub fn regret(&self) -> f64 {
        self.f_star - self.f_arm
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrialRecord>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_regret(&self) -> f64 {
        self.records.iter().map(TrialRecord::regret).sum()
    }

    pub fn total_payoff(&self) -> f64 {
        self.records.iter().map(|r| r.payoff).sum()
    }
}

enum Oracle {
    None,
    True(RewardModel),
    Metric(Vec<f64>),
}

/// A running Approx-Zooming policy.
pub struct ApproxZooming {
    cfg: PolicyConfig,
    params: ConfidenceParams,
    state: PartitionState,
    oracle: Oracle,
    rng: ChaCha8Rng,
    t: u64,
}

fn visit_order(order: VisitOrder, rng: &mut ChaCha8Rng, arms: &[usize]) -> Vec<usize> {
    let mut out = arms.to_vec();
    if order == VisitOrder::Shuffled {
        out.shuffle(rng);
    }
    out
}

impl ApproxZooming {
    /// Set up the initial partition. The environment's model is consulted only
    /// by the oracle variants.
    pub fn new(cfg: PolicyConfig, env: &Environment) -> Result<Self> {
        cfg.validate()?;
        if cfg.horizon != env.horizon() {
            return Err(Error::Config(format!(
                "policy horizon {} differs from environment horizon {}",
                cfg.horizon,
                env.horizon()
            )));
        }
        let model = env.model();
        let num_arms = model.num_arms();
        let oracle = match cfg.variant {
            Variant::OracleTrue => Oracle::True(model.clone()),
            Variant::OracleMetric => Oracle::Metric(
                model
                    .arm_params()
                    .ok_or_else(|| Error::Config("the metric oracle needs a model with latent arm parameters".into()))?
                    .to_vec(),
            ),
            Variant::Learned | Variant::NoSimilarity => Oracle::None,
        };
        let state = match cfg.variant {
            Variant::NoSimilarity => PartitionState::singletons(num_arms)?,
            _ => PartitionState::new(num_arms)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let mut policy = Self {
            rng,
            params: cfg.confidence(),
            cfg,
            state,
            oracle,
            t: 0,
        };
        if policy.cfg.variant != Variant::NoSimilarity {
            policy.on_flagged(0, 0)?;
        }
        Ok(policy)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PartitionState {
        &self.state
    }

    /// Number of trials played so far.
    pub fn trials(&self) -> u64 {
        self.t
    }

    /// Play one trial on a fresh context from `env`.
    pub fn step(&mut self, env: &mut Environment) -> Result<TrialRecord> {
        let x = env.sample_context();
        self.step_with_context(x, env)
    }

    /// Play one trial on the given context.
    pub fn step_with_context(&mut self, x: f64, env: &mut Environment) -> Result<TrialRecord> {
        self.try_step(x, env).map_err(|e| self.with_snapshot(e))
    }

    fn try_step(&mut self, x: f64, env: &mut Environment) -> Result<TrialRecord> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!("context {x} outside [0, 1]")));
        }
        let t = self.t + 1;
        self.state.set_trial(t);
        let (id, phase) = self.state.select_ball(x, &self.params)?;
        let arm = self.state.select_arm(id, phase)?;
        let payoff = env.observe(arm, x)?;
        self.state.record_play(id, arm, x, payoff)?;

        let ball = self.state.ball(id).expect("selected ball exists");
        match phase {
            Phase::FlaggedPhase => {
                if ball.suffdata_complete() {
                    self.split_learned(id, t)?;
                }
            }
            Phase::UcbPhase => {
                if ball.width() > self.cfg.delta_min && ball.should_flag(self.cfg.flag_mode, &self.params) {
                    self.state.flag(id, t, None)?;
                    self.on_flagged(id, t)?;
                }
            }
        }
        if self.cfg.check_invariants {
            self.state.check_invariants()?;
        }
        self.t = t;

        let model = env.model();
        Ok(TrialRecord {
            t,
            x,
            ball: id,
            phase,
            arm,
            payoff,
            f_star: model.best_value(x),
            f_arm: model.value(arm, x),
        })
    }

    /// Decide what a freshly flagged ball does: split now, or start sampling.
    fn on_flagged(&mut self, id: BallId, t: u64) -> Result<()> {
        let ball = self.state.ball(id).expect("flagged ball exists");
        debug_assert_eq!(ball.state(), BallState::Flagged);
        let arms = visit_order(self.cfg.visit_order, &mut self.rng, ball.arms());
        let (c0, c1) = (ball.c0(), ball.c1());
        let width = ball.width();
        let singletons = || arms.iter().map(|&a| vec![a]).collect::<Vec<_>>();

        let (left, right) = match (&self.oracle, self.cfg.variant) {
            (Oracle::True(model), _) => {
                let c = subpartition(&arms, c0, c1, self.cfg.lipschitz, &DistanceSource::OracleTrue(model))?;
                (c.left_sets(), c.right_sets())
            }
            (Oracle::Metric(params), _) => {
                let c = subpartition(&arms, c0, c1, self.cfg.lipschitz, &DistanceSource::OracleMetric(params))?;
                (c.left_sets(), c.right_sets())
            }
            (Oracle::None, Variant::Learned) if !(arms.len() == 1 && self.cfg.singleton_skip) => {
                let k = self.cfg.suffdata_k(arms.len(), width);
                return self.state.arm_sampling(id, k);
            }
            (Oracle::None, _) => (singletons(), singletons()),
        };
        self.state.apply_subpartition(id, &left, &right, t)?;
        Ok(())
    }

    fn split_learned(&mut self, id: BallId, t: u64) -> Result<()> {
        let ball = self.state.ball(id).expect("flagged ball exists");
        let samples = ball
            .samples()
            .ok_or_else(|| Error::invariant(format!("flagged ball {id} has no sample store")))?;
        let k = ball.suffdata_k().expect("sampling balls carry k");
        let src = DistanceSource::Learned {
            samples,
            k,
            noise_var: self.cfg.noise_var,
        };
        let arms = visit_order(self.cfg.visit_order, &mut self.rng, ball.arms());
        let c = subpartition(&arms, ball.c0(), ball.c1(), self.cfg.lipschitz, &src)?;
        self.state.apply_subpartition(id, &c.left_sets(), &c.right_sets(), t)?;
        Ok(())
    }

    fn with_snapshot(&self, e: Error) -> Error {
        match e {
            Error::InvariantViolation {
                message,
                snapshot: None,
            } => Error::InvariantViolation {
                message: format!("trial {}: {message}", self.t + 1),
                snapshot: Some(self.state.to_snapshot()),
            },
            other => other,
        }
    }
}

/// Run a full horizon, handing each record to `sink` as it is produced.
pub fn run_with<F>(env: &mut Environment, cfg: &PolicyConfig, mut sink: F) -> Result<ApproxZooming>
where
    F: FnMut(&TrialRecord) -> Result<()>,
{
    let mut policy = ApproxZooming::new(cfg.clone(), env)?;
    for _ in 0..cfg.horizon {
        let rec = policy.step(env)?;
        sink(&rec)?;
    }
    Ok(policy)
}

/// Run a full horizon and collect the trajectory.
pub fn run(env: &mut Environment, cfg: &PolicyConfig) -> Result<TrajectoryLog> {
    let mut records = Vec::with_capacity(cfg.horizon as usize);
    run_with(env, cfg, |r| {
        records.push(*r);
        Ok(())
    })?;
    Ok(TrajectoryLog { records })
}
