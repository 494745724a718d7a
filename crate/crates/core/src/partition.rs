//! Balls and the active/flagged partition of the context-arm space.
//!
//! Every ball is a dyadic context interval times a set of arms. Live balls
//! (active or flagged) always partition `[0, 1] × [K]`: each `(x, a)` lies in
//! exactly one of them. Membership uses half-open intervals `[c0, c1)`, with
//! the interval ending at 1 closed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::SampleSet;

pub type BallId = usize;

/// Deepest supported dyadic level; widths down to `2^-52` stay exact in f64.
pub const MAX_DEPTH: u8 = 52;

/// The context interval `[index · 2^-depth, (index + 1) · 2^-depth]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DyadicInterval {
    depth: u8,
    index: u64,
}

impl DyadicInterval {
    pub const UNIT: Self = Self { depth: 0, index: 0 };

    pub fn new(depth: u8, index: u64) -> Result<Self> {
        if depth > MAX_DEPTH || index >= 1u64 << depth {
            return Err(Error::invalid(format!("no dyadic interval ({depth}, {index})")));
        }
        Ok(Self { depth, index })
    }

    /// The interval at `depth` whose membership test accepts `x`.
    pub fn containing(depth: u8, x: f64) -> Self {
        let cells = 1u64 << depth;
        let index = ((x * cells as f64).floor().max(0.0) as u64).min(cells - 1);
        Self { depth, index }
    }

    /// Recover an interval from exact dyadic endpoints.
    pub fn from_endpoints(c0: f64, c1: f64) -> Result<Self> {
        let width = c1 - c0;
        if !(width > 0.0) {
            return Err(Error::invalid(format!("empty interval [{c0}, {c1}]")));
        }
        let depth = (-width.log2()).round();
        if !(0.0..=MAX_DEPTH as f64).contains(&depth) {
            return Err(Error::invalid(format!("width {width} is not dyadic")));
        }
        let cand = Self::containing(depth as u8, c0);
        if cand.start() != c0 || cand.end() != c1 {
            return Err(Error::invalid(format!("[{c0}, {c1}] is not a dyadic interval")));
        }
        Ok(cand)
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn width(&self) -> f64 {
        (-(self.depth as f64)).exp2()
    }

    pub fn start(&self) -> f64 {
        self.index as f64 * self.width()
    }

    pub fn end(&self) -> f64 {
        (self.index + 1) as f64 * self.width()
    }

    pub fn midpoint(&self) -> f64 {
        (self.index as f64 + 0.5) * self.width()
    }

    pub fn contains(&self, x: f64) -> bool {
        let (c0, c1) = (self.start(), self.end());
        c0 <= x && (x < c1 || (c1 == 1.0 && x <= 1.0))
    }

    pub fn halves(&self) -> Result<(Self, Self)> {
        if self.depth >= MAX_DEPTH {
            return Err(Error::invalid("cannot split below the maximum depth"));
        }
        let depth = self.depth + 1;
        Ok((
            Self {
                depth,
                index: 2 * self.index,
            },
            Self {
                depth,
                index: 2 * self.index + 1,
            },
        ))
    }

    pub fn parent(&self) -> Option<Self> {
        (self.depth > 0).then(|| Self {
            depth: self.depth - 1,
            index: self.index / 2,
        })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.depth >= other.depth && self.index >> (self.depth - other.depth) == other.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BallState {
    Active,
    Flagged,
    Retired,
}

impl fmt::Display for BallState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BallState::Active => "active",
            BallState::Flagged => "flagged",
            BallState::Retired => "retired",
        })
    }
}

impl FromStr for BallState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(BallState::Active),
            "flagged" => Ok(BallState::Flagged),
            "retired" => Ok(BallState::Retired),
            other => Err(Error::invalid(format!("unknown ball state {other:?}"))),
        }
    }
}

/// Which branch of the selection rule chose a ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    FlaggedPhase,
    UcbPhase,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::FlaggedPhase => "flagged",
            Phase::UcbPhase => "ucb",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flagged" => Ok(Phase::FlaggedPhase),
            "ucb" => Ok(Phase::UcbPhase),
            other => Err(Error::invalid(format!("unknown phase {other:?}"))),
        }
    }
}

/// Constants shared by the confidence bound and the flagging rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub lipschitz: f64,
    pub noise_var: f64,
    pub ln_horizon: f64,
    /// Numerator constant of the confidence radius (6 by default).
    pub ucb_constant: f64,
}

impl ConfidenceParams {
    pub fn new(lipschitz: f64, noise_var: f64, ln_horizon: f64) -> Self {
        Self {
            lipschitz,
            noise_var,
            ln_horizon,
            ucb_constant: 6.0,
        }
    }
}

/// Threshold form of the flagging rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagMode {
    /// Flag once `n > c σ² ln T / (L² Δ²)` (`c` = the UCB constant).
    Theory,
    /// Flag once `n ≥ 4 ln T / Δ²`.
    Simulation,
}

/// The play-count threshold `c_f / Δ²` of the flagging rule.
pub fn flag_threshold(mode: FlagMode, params: &ConfidenceParams, width: f64) -> f64 {
    let c_f = match mode {
        FlagMode::Theory => params.ucb_constant * params.noise_var * params.ln_horizon / params.lipschitz.powi(2),
        FlagMode::Simulation => 4.0 * params.ln_horizon,
    };
    c_f / (width * width)
}

#[derive(Debug, Clone)]
pub struct Ball {
    pub(crate) id: BallId,
    pub(crate) parent: Option<BallId>,
    pub(crate) interval: DyadicInterval,
    pub(crate) arms: Vec<usize>,
    pub(crate) state: BallState,
    pub(crate) n: u64,
    pub(crate) payoff_sum: f64,
    pub(crate) ucb_plays: u64,
    pub(crate) flagged_plays: u64,
    pub(crate) rr_cursor: usize,
    pub(crate) flag_time: Option<u64>,
    pub(crate) split_time: Option<u64>,
    pub(crate) k: Option<usize>,
    pub(crate) samples: Option<SampleSet>,
}

impl Ball {
    fn new(id: BallId, parent: Option<BallId>, interval: DyadicInterval, arms: Vec<usize>, state: BallState) -> Self {
        Self {
            id,
            parent,
            interval,
            arms,
            state,
            n: 0,
            payoff_sum: 0.0,
            ucb_plays: 0,
            flagged_plays: 0,
            rr_cursor: 0,
            flag_time: None,
            split_time: None,
            k: None,
            samples: None,
        }
    }

    pub fn id(&self) -> BallId {
        self.id
    }

    pub fn parent(&self) -> Option<BallId> {
        self.parent
    }

    pub fn interval(&self) -> DyadicInterval {
        self.interval
    }

    pub fn c0(&self) -> f64 {
        self.interval.start()
    }

    pub fn c1(&self) -> f64 {
        self.interval.end()
    }

    pub fn width(&self) -> f64 {
        self.interval.width()
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    pub fn state(&self) -> BallState {
        self.state
    }

    pub fn is_live(&self) -> bool {
        self.state != BallState::Retired
    }

    /// Total plays of this ball in either phase.
    pub fn plays(&self) -> u64 {
        self.n
    }

    pub fn ucb_plays(&self) -> u64 {
        self.ucb_plays
    }

    pub fn flagged_plays(&self) -> u64 {
        self.flagged_plays
    }

    pub fn flag_time(&self) -> Option<u64> {
        self.flag_time
    }

    pub fn split_time(&self) -> Option<u64> {
        self.split_time
    }

    /// Per-bucket sample requirement fixed when the ball was flagged.
    pub fn suffdata_k(&self) -> Option<usize> {
        self.k
    }

    pub fn samples(&self) -> Option<&SampleSet> {
        self.samples.as_ref()
    }

    pub fn contains(&self, x: f64, arm: usize) -> bool {
        self.interval.contains(x) && self.arms.binary_search(&arm).is_ok()
    }

    /// Empirical mean payoff, `None` before the first play.
    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.payoff_sum / self.n as f64)
    }

    /// `μ + 2LΔ + sqrt(c σ² ln T / n)`, or `+∞` for an unplayed ball.
    pub fn ucb(&self, params: &ConfidenceParams) -> f64 {
        match self.mean() {
            None => f64::INFINITY,
            Some(mu) => {
                mu + 2.0 * params.lipschitz * self.width()
                    + (params.ucb_constant * params.noise_var * params.ln_horizon / self.n as f64).sqrt()
            }
        }
    }

    pub fn should_flag(&self, mode: FlagMode, params: &ConfidenceParams) -> bool {
        let threshold = flag_threshold(mode, params, self.width());
        let n = self.n as f64;
        match mode {
            FlagMode::Theory => n > threshold,
            FlagMode::Simulation => n >= threshold,
        }
    }

    /// Arm `arms[rr_cursor]` for the UCB branch, advancing the cursor.
    pub fn next_round_robin(&mut self) -> usize {
        let arm = self.arms[self.rr_cursor];
        self.rr_cursor = (self.rr_cursor + 1) % self.arms.len();
        arm
    }

    /// Lowest arm whose sufficient-data predicate is unmet.
    pub fn next_unsatisfied(&self) -> Option<usize> {
        let k = self.k?;
        self.samples.as_ref()?.first_unsatisfied(k)
    }

    pub fn suffdata_complete(&self) -> bool {
        match (&self.samples, self.k) {
            (Some(s), Some(k)) => s.all_suff_data(k),
            _ => false,
        }
    }
}

/// Active set `P`, flagged set `P*` and the registry of all balls ever made.
#[derive(Debug, Clone)]
pub struct PartitionState {
    num_arms: usize,
    balls: Vec<Ball>,
    active: BTreeSet<BallId>,
    flagged: BTreeSet<BallId>,
    by_interval: HashMap<DyadicInterval, Vec<BallId>>,
    live_per_depth: Vec<u32>,
    trial: u64,
}

impl PartitionState {
    fn empty(num_arms: usize) -> Result<Self> {
        if num_arms == 0 {
            return Err(Error::invalid("need at least one arm"));
        }
        Ok(Self {
            num_arms,
            balls: Vec::new(),
            active: BTreeSet::new(),
            flagged: BTreeSet::new(),
            by_interval: HashMap::new(),
            live_per_depth: vec![0; MAX_DEPTH as usize + 1],
            trial: 0,
        })
    }

    /// One flagged root ball `[0, 1] × [K]`.
    pub fn new(num_arms: usize) -> Result<Self> {
        let mut s = Self::empty(num_arms)?;
        s.push(None, DyadicInterval::UNIT, (0..num_arms).collect(), BallState::Flagged);
        s.balls[0].flag_time = Some(0);
        Ok(s)
    }

    /// `K` active singleton balls of width 1.
    pub fn singletons(num_arms: usize) -> Result<Self> {
        let mut s = Self::empty(num_arms)?;
        for a in 0..num_arms {
            s.push(None, DyadicInterval::UNIT, vec![a], BallState::Active);
        }
        Ok(s)
    }

    fn push(&mut self, parent: Option<BallId>, interval: DyadicInterval, arms: Vec<usize>, state: BallState) -> BallId {
        let id = self.balls.len();
        self.balls.push(Ball::new(id, parent, interval, arms, state));
        match state {
            BallState::Active => self.active.insert(id),
            BallState::Flagged => self.flagged.insert(id),
            BallState::Retired => unreachable!("balls are created live"),
        };
        self.by_interval.entry(interval).or_default().push(id);
        self.live_per_depth[interval.depth() as usize] += 1;
        id
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn trial(&self) -> u64 {
        self.trial
    }

    pub fn set_trial(&mut self, t: u64) {
        self.trial = t;
    }

    pub fn ball(&self, id: BallId) -> Option<&Ball> {
        self.balls.get(id)
    }

    pub fn ball_mut(&mut self, id: BallId) -> Option<&mut Ball> {
        self.balls.get_mut(id)
    }

    fn live_ball(&self, id: BallId) -> Result<&Ball> {
        match self.balls.get(id) {
            Some(b) if b.is_live() => Ok(b),
            Some(_) => Err(Error::invariant(format!("ball {id} is retired"))),
            None => Err(Error::invalid(format!("no ball {id}"))),
        }
    }

    /// All balls ever created, in id order.
    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn active(&self) -> &BTreeSet<BallId> {
        &self.active
    }

    pub fn flagged(&self) -> &BTreeSet<BallId> {
        &self.flagged
    }

    pub fn live_balls(&self) -> impl Iterator<Item = &Ball> {
        self.balls.iter().filter(|b| b.is_live())
    }

    /// Live balls whose context interval contains `x`, shallowest first.
    pub fn balls_containing(&self, x: f64) -> impl Iterator<Item = &Ball> + '_ {
        (0..=MAX_DEPTH)
            .filter(|&d| self.live_per_depth[d as usize] > 0)
            .flat_map(move |d| {
                self.by_interval
                    .get(&DyadicInterval::containing(d, x))
                    .map(|ids| ids.as_slice())
                    .unwrap_or(&[])
            })
            .map(|&id| &self.balls[id])
    }

    /// Flagged balls win over active ones, preferring the widest; otherwise the
    /// active ball with the largest UCB. Ties go to the smaller id.
    pub fn select_ball(&self, x: f64, params: &ConfidenceParams) -> Result<(BallId, Phase)> {
        let mut best_flagged: Option<&Ball> = None;
        let mut best_active: Option<(f64, BallId)> = None;
        for b in self.balls_containing(x) {
            match b.state {
                BallState::Flagged => {
                    let better = match best_flagged {
                        None => true,
                        Some(cur) => b.width() > cur.width() || (b.width() == cur.width() && b.id < cur.id),
                    };
                    if better {
                        best_flagged = Some(b);
                    }
                }
                BallState::Active => {
                    let u = b.ucb(params);
                    let better = match best_active {
                        None => true,
                        Some((cu, cid)) => u > cu || (u == cu && b.id < cid),
                    };
                    if better {
                        best_active = Some((u, b.id));
                    }
                }
                BallState::Retired => {}
            }
        }
        if let Some(b) = best_flagged {
            return Ok((b.id, Phase::FlaggedPhase));
        }
        best_active
            .map(|(_, id)| (id, Phase::UcbPhase))
            .ok_or_else(|| Error::invariant(format!("no live ball covers context {x}")))
    }

    /// The arm to play in `ball` for the given phase.
    pub fn select_arm(&mut self, id: BallId, phase: Phase) -> Result<usize> {
        self.live_ball(id)?;
        let ball = &mut self.balls[id];
        match phase {
            Phase::UcbPhase => Ok(ball.next_round_robin()),
            Phase::FlaggedPhase => ball.next_unsatisfied().ok_or_else(|| {
                Error::invariant(format!(
                    "flagged ball {id} has no arm short of data; it should be split"
                ))
            }),
        }
    }

    pub fn record_play(&mut self, id: BallId, arm: usize, x: f64, payoff: f64) -> Result<()> {
        let ball = self.live_ball(id)?;
        if !ball.contains(x, arm) {
            return Err(Error::invariant(format!(
                "({x}, {arm}) lies outside ball {id} [{}, {}]",
                ball.c0(),
                ball.c1()
            )));
        }
        let ball = &mut self.balls[id];
        ball.n += 1;
        ball.payoff_sum += payoff;
        match ball.state {
            BallState::Active => ball.ucb_plays += 1,
            BallState::Flagged => {
                ball.flagged_plays += 1;
                if let Some(samples) = ball.samples.as_mut() {
                    samples.insert(arm, x, payoff)?;
                }
            }
            BallState::Retired => unreachable!(),
        }
        Ok(())
    }

    /// Move an active ball to the flagged set. `k` (when given) arms the
    /// sufficient-data sample store with that per-bucket requirement.
    pub fn flag(&mut self, id: BallId, t: u64, k: Option<usize>) -> Result<()> {
        let ball = self.live_ball(id)?;
        if ball.state != BallState::Active {
            return Err(Error::invariant(format!("ball {id} is not active")));
        }
        let interval = ball.interval;
        let clash = self.by_interval[&interval]
            .iter()
            .any(|&o| o != id && self.balls[o].state == BallState::Flagged);
        if clash {
            return Err(Error::invariant(format!(
                "a flagged ball already owns interval [{}, {}]",
                interval.start(),
                interval.end()
            )));
        }
        let ball = &mut self.balls[id];
        ball.state = BallState::Flagged;
        ball.flag_time = Some(t);
        if let Some(k) = k {
            if k == 0 {
                return Err(Error::invalid("k must be positive"));
            }
            ball.k = Some(k);
            ball.samples = Some(SampleSet::new(interval.start(), interval.end(), &ball.arms)?);
        }
        self.active.remove(&id);
        self.flagged.insert(id);
        Ok(())
    }

    /// Arm the sample store of an already flagged ball (the root at start).
    pub fn arm_sampling(&mut self, id: BallId, k: usize) -> Result<()> {
        let ball = self.live_ball(id)?;
        if ball.state != BallState::Flagged || k == 0 {
            return Err(Error::invalid(format!("ball {id} must be flagged and k positive")));
        }
        let set = SampleSet::new(ball.c0(), ball.c1(), &ball.arms)?;
        let ball = &mut self.balls[id];
        ball.k = Some(k);
        ball.samples = Some(set);
        Ok(())
    }

    /// Retire a flagged ball, replacing it with one active child per cluster
    /// on each half of its context interval. Returns the new ids.
    pub fn apply_subpartition(
        &mut self,
        id: BallId,
        clusters_left: &[Vec<usize>],
        clusters_right: &[Vec<usize>],
        t: u64,
    ) -> Result<Vec<BallId>> {
        let ball = self.live_ball(id)?;
        if ball.state != BallState::Flagged {
            return Err(Error::invalid(format!("ball {id} is not flagged")));
        }
        for clusters in [clusters_left, clusters_right] {
            check_arm_partition(&ball.arms, clusters)?;
        }
        let (left, right) = ball.interval.halves()?;
        let interval = ball.interval;

        let ball = &mut self.balls[id];
        ball.state = BallState::Retired;
        ball.split_time = Some(t);
        self.flagged.remove(&id);
        self.live_per_depth[interval.depth() as usize] -= 1;
        let ids = self.by_interval.get_mut(&interval).expect("live ball is indexed");
        ids.retain(|&b| b != id);
        if ids.is_empty() {
            self.by_interval.remove(&interval);
        }

        let mut children = Vec::new();
        for (half, clusters) in [(left, clusters_left), (right, clusters_right)] {
            for cluster in clusters {
                let mut arms = cluster.clone();
                arms.sort_unstable();
                children.push(self.push(Some(id), half, arms, BallState::Active));
            }
        }
        Ok(children)
    }

    /// Structural audit of every partition invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invariant(msg));
        let mut per_arm: Vec<Vec<DyadicInterval>> = vec![Vec::new(); self.num_arms];
        let mut flagged_intervals = BTreeSet::new();
        for b in self.live_balls() {
            if b.arms.is_empty() || b.rr_cursor >= b.arms.len() {
                return fail(format!("ball {} has bad arm list or cursor", b.id));
            }
            if b.arms.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("ball {} arms not strictly ascending", b.id));
            }
            if b.state == BallState::Flagged && !flagged_intervals.insert(b.interval) {
                return fail(format!("two flagged balls share the interval of ball {}", b.id));
            }
            if b.state == BallState::Active && b.samples.is_some() {
                return fail(format!("active ball {} holds flagged samples", b.id));
            }
            let in_set = match b.state {
                BallState::Active => self.active.contains(&b.id),
                BallState::Flagged => self.flagged.contains(&b.id),
                BallState::Retired => false,
            };
            if !in_set {
                return fail(format!("ball {} missing from its state set", b.id));
            }
            if let Some(p) = b.parent {
                let parent = &self.balls[p];
                if parent.interval.depth() + 1 != b.interval.depth() || !b.interval.is_subset_of(&parent.interval) {
                    return fail(format!("ball {} is not a half of its parent {p}", b.id));
                }
            }
            for &a in &b.arms {
                if a >= self.num_arms {
                    return fail(format!("ball {} has out-of-range arm {a}", b.id));
                }
                per_arm[a].push(b.interval);
            }
        }
        if self.active.len() + self.flagged.len() != self.live_balls().count() {
            return fail("state sets disagree with the registry".into());
        }
        // For each arm, the live intervals must tile [0, 1] without overlap.
        for (a, intervals) in per_arm.iter_mut().enumerate() {
            intervals.sort_by(|p, q| p.start().total_cmp(&q.start()));
            let mut cursor = 0.0;
            for iv in intervals.iter() {
                if iv.start() != cursor {
                    return fail(format!("arm {a}: coverage gap or overlap at {cursor}"));
                }
                cursor = iv.end();
            }
            if cursor != 1.0 {
                return fail(format!("arm {a}: coverage stops at {cursor}"));
            }
        }
        Ok(())
    }

    /// Number of live balls containing `(x, arm)`; 1 when the partition holds.
    pub fn coverage_count(&self, x: f64, arm: usize) -> usize {
        self.balls_containing(x).filter(|b| b.contains(x, arm)).count()
    }

    /// Line-oriented dump: `id parent c0 c1 state n mean arms`.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("# id parent c0 c1 state n mean arms\n");
        for b in &self.balls {
            let parent = b.parent.map_or("-".to_string(), |p| p.to_string());
            let mean = b.mean().map_or("-".to_string(), |m| format!("{m:.17e}"));
            let arms = b.arms.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",");
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                b.id,
                parent,
                b.c0(),
                b.c1(),
                b.state,
                b.n,
                mean,
                arms
            ));
        }
        out
    }
}

/// One parsed line of a partition snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BallRecord {
    pub id: BallId,
    pub parent: Option<BallId>,
    pub c0: f64,
    pub c1: f64,
    pub state: BallState,
    pub n: u64,
    pub mean: Option<f64>,
    pub arms: Vec<usize>,
}

pub fn parse_snapshot(text: &str) -> Result<Vec<BallRecord>> {
    let bad = |line: &str| Error::invalid(format!("malformed snapshot line {line:?}"));
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(line));
            Ok(BallRecord {
                id: int(f[0])? as BallId,
                parent: if f[1] == "-" { None } else { Some(int(f[1])? as BallId) },
                c0: num(f[2])?,
                c1: num(f[3])?,
                state: f[4].parse()?,
                n: int(f[5])?,
                mean: if f[6] == "-" { None } else { Some(num(f[6])?) },
                arms: f[7]
                    .split(',')
                    .map(|a| a.parse::<usize>().map_err(|_| bad(line)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

fn check_arm_partition(arms: &[usize], clusters: &[Vec<usize>]) -> Result<()> {
    let mut seen: Vec<usize> = clusters.iter().flatten().copied().collect();
    seen.sort_unstable();
    if clusters.iter().any(Vec::is_empty) || seen != arms {
        return Err(Error::invalid(format!(
            "clusters {clusters:?} do not partition arms {arms:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l: f64, var: f64, ln_t: f64) -> ConfidenceParams {
        ConfidenceParams::new(l, var, ln_t)
    }

    #[test]
    fn dyadic_membership() {
        let (l, r) = DyadicInterval::UNIT.halves().unwrap();
        assert!(l.contains(0.0) && l.contains(0.4999) && !l.contains(0.5));
        assert!(r.contains(0.5) && r.contains(1.0));
        assert_eq!(DyadicInterval::containing(3, 1.0).index(), 7);
        assert_eq!(
            DyadicInterval::from_endpoints(0.25, 0.5).unwrap(),
            DyadicInterval::new(2, 1).unwrap()
        );
        assert!(DyadicInterval::from_endpoints(0.1, 0.35).is_err());
        assert!(r.is_subset_of(&DyadicInterval::UNIT));
        assert!(!r.is_subset_of(&l));
    }

    #[test]
    fn init_root() {
        let s = PartitionState::new(3).unwrap();
        let root = s.ball(0).unwrap();
        assert_eq!((root.c0(), root.c1()), (0.0, 1.0));
        assert_eq!(root.arms(), &[0, 1, 2]);
        assert_eq!(root.state(), BallState::Flagged);
        assert!(s.active().is_empty());
        s.check_invariants().unwrap();
        assert_eq!(PartitionState::new(1).unwrap().ball(0).unwrap().arms(), &[0]);
        assert!(PartitionState::new(0).is_err());
        for i in 0..100 {
            assert_eq!(s.coverage_count(i as f64 / 99.0, i % 3), 1);
        }
    }

    #[test]
    fn ucb_formula() {
        let mut b = Ball::new(0, None, DyadicInterval::new(2, 0).unwrap(), vec![0], BallState::Active);
        assert_eq!(b.ucb(&params(1.0, 1.0, 6.0)), f64::INFINITY);
        b.n = 36;
        b.payoff_sum = 18.0;
        assert!((b.ucb(&params(1.0, 1.0, 6.0)) - 2.0).abs() < 1e-12);
        assert_eq!(b.ucb(&params(1.0, 0.0, 6.0)), 0.5 + 0.5);
    }

    #[test]
    fn flag_rule_thresholds() {
        let mut b = Ball::new(0, None, DyadicInterval::new(1, 0).unwrap(), vec![0], BallState::Active);
        let p = params(1.0, 1.0, 6.0);
        assert_eq!(flag_threshold(FlagMode::Theory, &p, 0.5), 144.0);
        b.n = 144;
        assert!(!b.should_flag(FlagMode::Theory, &p));
        b.n = 145;
        assert!(b.should_flag(FlagMode::Theory, &p));

        let sim = params(1.0, 1e-4, (100_000f64).ln());
        let mut root = Ball::new(0, None, DyadicInterval::UNIT, vec![0], BallState::Active);
        assert!((flag_threshold(FlagMode::Simulation, &sim, 1.0) - 46.0517).abs() < 1e-3);
        root.n = 46;
        assert!(!root.should_flag(FlagMode::Simulation, &sim));
        root.n = 47;
        assert!(root.should_flag(FlagMode::Simulation, &sim));

        let mut tiny = Ball::new(0, None, DyadicInterval::new(40, 0).unwrap(), vec![0], BallState::Active);
        tiny.n = 1_000_000;
        assert!(!tiny.should_flag(FlagMode::Theory, &p));
    }

    #[test]
    fn selection_prefers_flagged_then_ucb() {
        let p = params(1.0, 0.01, 5.0);
        let mut s = PartitionState::new(2).unwrap();
        let kids = s.apply_subpartition(0, &[vec![0], vec![1]], &[vec![0, 1]], 1).unwrap();
        assert_eq!(kids.len(), 3);
        // all children unplayed: UCB = inf for all, tie -> smallest id
        assert_eq!(s.select_ball(0.2, &p).unwrap(), (kids[0], Phase::UcbPhase));
        // give ball kids[0] a finite UCB
        s.record_play(kids[0], 0, 0.2, 0.5).unwrap();
        assert_eq!(s.select_ball(0.2, &p).unwrap(), (kids[1], Phase::UcbPhase));
        s.record_play(kids[1], 1, 0.2, 0.1).unwrap();
        // UCBs: 0.5 + 1 + r vs 0.1 + 1 + r
        assert_eq!(s.select_ball(0.2, &p).unwrap(), (kids[0], Phase::UcbPhase));

        s.flag(kids[1], 3, Some(1)).unwrap();
        assert_eq!(s.select_ball(0.2, &p).unwrap(), (kids[1], Phase::FlaggedPhase));
        assert_eq!(s.select_ball(0.7, &p).unwrap().1, Phase::UcbPhase);
        s.check_invariants().unwrap();
    }

    #[test]
    fn nested_flagged_prefers_wider() {
        let p = params(1.0, 0.01, 5.0);
        let mut s = PartitionState::new(2).unwrap();
        let kids = s.apply_subpartition(0, &[vec![0], vec![1]], &[vec![0, 1]], 1).unwrap();
        s.flag(kids[0], 2, Some(1)).unwrap();
        let grandkids = s.apply_subpartition(kids[0], &[vec![0]], &[vec![0]], 3).unwrap();
        s.flag(grandkids[0], 4, Some(1)).unwrap(); // width 1/4 on [0, 1/4)
        s.flag(kids[1], 5, Some(1)).unwrap(); // width 1/2 on [0, 1/2) for arm 1
        assert_eq!(s.select_ball(0.1, &p).unwrap(), (kids[1], Phase::FlaggedPhase));
        s.check_invariants().unwrap();
    }

    #[test]
    fn second_flag_on_same_interval_is_rejected() {
        let mut s = PartitionState::new(2).unwrap();
        let kids = s.apply_subpartition(0, &[vec![0], vec![1]], &[vec![0, 1]], 1).unwrap();
        s.flag(kids[0], 2, None).unwrap();
        assert!(s.flag(kids[1], 2, None).unwrap_err().is_invariant_violation());
    }

    #[test]
    fn round_robin_and_min_unsatisfied() {
        let mut s = PartitionState::new(10).unwrap();
        let arms = vec![2, 5, 9];
        let rest: Vec<usize> = (0..10).filter(|a| !arms.contains(a)).collect();
        let kids = s
            .apply_subpartition(0, &[arms.clone(), rest.clone()], &[(0..10).collect()], 1)
            .unwrap();
        let id = kids[0];
        let picks: Vec<usize> = (0..4).map(|_| s.select_arm(id, Phase::UcbPhase).unwrap()).collect();
        assert_eq!(picks, vec![2, 5, 9, 2]);

        s.flag(id, 2, Some(1)).unwrap();
        assert_eq!(s.select_arm(id, Phase::FlaggedPhase).unwrap(), 2);
        for b in 0..64 {
            s.record_play(id, 2, (b as f64 + 0.5) / 128.0, 0.0).unwrap();
        }
        assert_eq!(s.select_arm(id, Phase::FlaggedPhase).unwrap(), 5);
    }

    #[test]
    fn record_play_bookkeeping() {
        let mut s = PartitionState::singletons(2).unwrap();
        s.record_play(0, 0, 0.3, 0.6).unwrap();
        assert_eq!(s.ball(0).unwrap().mean(), Some(0.6));
        s.record_play(0, 0, 0.9, 0.8).unwrap();
        assert!((s.ball(0).unwrap().mean().unwrap() - 0.7).abs() < 1e-15);
        assert!(s.ball(0).unwrap().samples().is_none());
        assert!(s.record_play(0, 1, 0.3, 0.1).unwrap_err().is_invariant_violation());

        s.flag(1, 3, Some(2)).unwrap();
        s.record_play(1, 1, 0.5, 0.2).unwrap();
        assert_eq!(s.ball(1).unwrap().samples().unwrap().len(), 1);
        assert_eq!(s.ball(1).unwrap().flagged_plays(), 1);
    }

    #[test]
    fn subpartition_construction() {
        let mut s = PartitionState::new(3).unwrap();
        let kids = s
            .apply_subpartition(0, &[vec![0, 1], vec![2]], &[vec![0, 1, 2]], 7)
            .unwrap();
        assert_eq!(kids.len(), 3);
        for &k in &kids {
            let b = s.ball(k).unwrap();
            assert_eq!(b.width(), 0.5);
            assert_eq!(b.state(), BallState::Active);
            assert_eq!(b.plays(), 0);
            assert_eq!(b.parent(), Some(0));
        }
        assert_eq!(s.ball(0).unwrap().state(), BallState::Retired);
        assert_eq!(s.ball(0).unwrap().split_time(), Some(7));
        s.check_invariants().unwrap();

        let mut s = PartitionState::new(4).unwrap();
        let single: Vec<Vec<usize>> = (0..4).map(|a| vec![a]).collect();
        assert_eq!(s.apply_subpartition(0, &single, &single, 1).unwrap().len(), 8);

        let mut s = PartitionState::new(3).unwrap();
        assert!(s.apply_subpartition(0, &[vec![0, 1]], &[vec![0, 1, 2]], 1).is_err());
        assert!(s
            .apply_subpartition(0, &[vec![0, 1], vec![1, 2]], &[vec![0, 1, 2]], 1)
            .is_err());
        s.check_invariants().unwrap();
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = PartitionState::new(3).unwrap();
        let kids = s
            .apply_subpartition(0, &[vec![0, 1], vec![2]], &[vec![0, 1, 2]], 1)
            .unwrap();
        s.record_play(kids[2], 1, 0.75, 0.123456789).unwrap();
        let text = s.to_snapshot();
        let recs = parse_snapshot(&text).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].state, BallState::Retired);
        assert_eq!(recs[3].c0, 0.5);
        assert_eq!(recs[3].mean, Some(0.123456789));
        assert_eq!(recs[1].arms, vec![0, 1]);
        assert_eq!(recs[1].parent, Some(0));
        assert!(parse_snapshot("1 2 3").is_err());
    }
}
