//! Experiment orchestration: config files, seeded paired replications,
//! CSV artifacts and the run manifest.
//!
//! Within a replication every variant sees the same context and noise
//! streams, so trajectory files of one replication share their `x` column.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{subpartition, DistanceSource};
use crate::env::{Environment, RewardModel};
use crate::error::{Error, Result};
use crate::metrics::{self, ArmFrequency, RegretAccumulator, Resolutions};
use crate::partition::{DyadicInterval, FlagMode, Phase};
use crate::policy::{run_with, KMode, PolicyConfig, TrajectoryLog, TrialRecord, Variant, VisitOrder};

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "x", "ball_id", "phase", "arm", "payoff", "f_star", "f_arm"];
pub const SUMMARY_HEADER: [&str; 3] = ["t", "cum_regret", "avg_cum_reward"];
pub const FREQUENCY_HEADER: [&str; 6] = ["variant", "replication", "quarter", "arm", "bin", "count"];
pub const DIAGNOSTICS_HEADER: [&str; 5] = ["bin", "x", "f_star", "argmax", "kappa"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FREQUENCY_FILE: &str = "arm_frequency.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

/// Trajectories are written by default up to this horizon.
pub const DEFAULT_TRAJECTORY_LIMIT: u64 = 100_000;

/// Shortest decimal form is not needed; 17 significant digits round-trip every `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Zigzag {
        num_arms: usize,
        #[serde(default = "one")]
        lipschitz: f64,
        /// Relabel arms with a seeded random permutation.
        #[serde(default)]
        permutation_seed: Option<u64>,
    },
    FiniteTypes {
        num_arms: usize,
        num_types: usize,
        #[serde(default = "one")]
        lipschitz: f64,
    },
    LatentRidge {
        num_arms: usize,
        #[serde(default = "one")]
        lipschitz: f64,
    },
    RandomLatent {
        num_arms: usize,
        #[serde(default = "one")]
        lipschitz: f64,
        seed: u64,
    },
    Custom {
        model: RewardModel,
    },
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn build(&self) -> Result<RewardModel> {
        match self {
            ModelSpec::Zigzag {
                num_arms,
                lipschitz,
                permutation_seed,
            } => {
                let model = RewardModel::zigzag(*num_arms, *lipschitz)?;
                match permutation_seed {
                    Some(seed) => model.permuted(&random_permutation(*num_arms, *seed)),
                    None => Ok(model),
                }
            }
            ModelSpec::FiniteTypes {
                num_arms,
                num_types,
                lipschitz,
            } => RewardModel::finite_types(*num_arms, *num_types, *lipschitz),
            ModelSpec::LatentRidge { num_arms, lipschitz } => RewardModel::latent_ridge(*num_arms, *lipschitz),
            ModelSpec::RandomLatent {
                num_arms,
                lipschitz,
                seed,
            } => RewardModel::random_latent(*num_arms, *lipschitz, &mut ChaCha8Rng::seed_from_u64(*seed)),
            ModelSpec::Custom { model } => {
                model.validate()?;
                Ok(model.clone())
            }
        }
    }
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub model: ModelSpec,
    pub noise_std: f64,
    pub horizon: u64,
    #[serde(default)]
    pub base_seed: u64,
}

/// Policy settings shared by every variant unless a variant overrides them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDefaults {
    pub lipschitz: Option<f64>,
    pub noise_var: Option<f64>,
    pub ucb_constant: Option<f64>,
    pub flag_mode: Option<FlagMode>,
    pub k_mode: Option<KMode>,
    pub delta_min: Option<f64>,
    pub singleton_skip: Option<bool>,
    pub visit_order: Option<VisitOrder>,
    pub check_invariants: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub variant: Variant,
    #[serde(default)]
    pub label: Option<String>,
    pub lipschitz: Option<f64>,
    pub noise_var: Option<f64>,
    pub ucb_constant: Option<f64>,
    pub flag_mode: Option<FlagMode>,
    pub k_mode: Option<KMode>,
    pub delta_min: Option<f64>,
    pub singleton_skip: Option<bool>,
    pub visit_order: Option<VisitOrder>,
    pub check_invariants: Option<bool>,
}

impl VariantSpec {
    pub fn plain(variant: Variant) -> Self {
        Self {
            variant,
            label: None,
            lipschitz: None,
            noise_var: None,
            ucb_constant: None,
            flag_mode: None,
            k_mode: None,
            delta_min: None,
            singleton_skip: None,
            visit_order: None,
            check_invariants: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.variant.label().to_string())
    }

    /// Resolve against the environment and shared defaults. Lipschitz falls
    /// back to the model's constant, noise variance to `σ²`.
    pub fn resolve(&self, defaults: &PolicyDefaults, env: &EnvSpec, model: &RewardModel) -> PolicyConfig {
        let mut cfg = PolicyConfig::new(
            self.variant,
            self.lipschitz
                .or(defaults.lipschitz)
                .unwrap_or_else(|| model.lipschitz()),
            self.noise_var
                .or(defaults.noise_var)
                .unwrap_or(env.noise_std * env.noise_std),
            env.horizon,
        );
        if let Some(v) = self.ucb_constant.or(defaults.ucb_constant) {
            cfg.ucb_constant = v;
        }
        if let Some(v) = self.flag_mode.or(defaults.flag_mode) {
            cfg.flag_mode = v;
        }
        if let Some(v) = self.k_mode.or(defaults.k_mode) {
            cfg.k_mode = v;
        }
        if let Some(v) = self.delta_min.or(defaults.delta_min) {
            cfg.delta_min = v;
        }
        if let Some(v) = self.singleton_skip.or(defaults.singleton_skip) {
            cfg.singleton_skip = v;
        }
        if let Some(v) = self.visit_order.or(defaults.visit_order) {
            cfg.visit_order = v;
        }
        if let Some(v) = self.check_invariants.or(defaults.check_invariants) {
            cfg.check_invariants = v;
        }
        cfg
    }
}

fn default_variants() -> Vec<VariantSpec> {
    Variant::ALL.iter().map(|&v| VariantSpec::plain(v)).collect()
}

fn default_name() -> String {
    "experiment".into()
}

fn default_replications() -> usize {
    1
}

fn default_bins() -> usize {
    50
}

fn default_checkpoints() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub environment: EnvSpec,
    #[serde(default)]
    pub defaults: PolicyDefaults,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantSpec>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub resolutions: Resolutions,
    /// Context bins of the arm-frequency matrices and the diagnostics table.
    #[serde(default = "default_bins")]
    pub frequency_bins: usize,
    /// Rows in each summary file.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Defaults to on for horizons up to [`DEFAULT_TRAJECTORY_LIMIT`].
    #[serde(default)]
    pub write_trajectories: Option<bool>,
}

impl ExperimentConfig {
    pub fn new(environment: EnvSpec) -> Self {
        Self {
            name: default_name(),
            environment,
            defaults: PolicyDefaults::default(),
            variants: default_variants(),
            replications: 1,
            output_dir: None,
            resolutions: Resolutions::default(),
            frequency_bins: default_bins(),
            checkpoints: default_checkpoints(),
            write_trajectories: None,
        }
    }

    /// Zigzag with 200 arms, σ = 0.01, T = 100,000, k = 26 and the
    /// simulation flagging rule.
    pub fn full_scale_preset() -> Self {
        let mut cfg = Self::new(EnvSpec {
            model: ModelSpec::Zigzag {
                num_arms: 200,
                lipschitz: 1.0,
                permutation_seed: None,
            },
            noise_std: 1e-2,
            horizon: 100_000,
            base_seed: 0,
        });
        cfg.name = "zigzag-200".into();
        cfg.defaults.k_mode = Some(KMode::Fixed(26));
        cfg.defaults.flag_mode = Some(FlagMode::Simulation);
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut labels: Vec<String> = self.variants.iter().map(VariantSpec::label).collect();
        for l in &labels {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("variant label {l:?} must be [A-Za-z0-9_-]+")));
            }
        }
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate variant label {:?}", w[0])));
        }
        if self.frequency_bins == 0 || self.checkpoints == 0 {
            return Err(Error::Config("frequency_bins and checkpoints must be >= 1".into()));
        }
        let env = &self.environment;
        if !(env.noise_std.is_finite() && env.noise_std >= 0.0) || env.horizon == 0 {
            return Err(Error::Config("noise_std must be >= 0 and horizon >= 1".into()));
        }
        let model = self.environment.model.build().map_err(as_config)?;
        for v in &self.variants {
            v.resolve(&self.defaults, env, &model).validate()?;
        }
        Ok(())
    }

    pub fn writes_trajectories(&self) -> bool {
        self.write_trajectories
            .unwrap_or(self.environment.horizon <= DEFAULT_TRAJECTORY_LIMIT)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationSeeds {
    pub context: u64,
    pub noise: u64,
    pub policy: u64,
}

/// Seeds of replication `r`, shared by all variants.
pub fn replication_seeds(base_seed: u64, replication: usize) -> ReplicationSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replication as u64);
    ReplicationSeeds {
        context: rng.next_u64(),
        noise: rng.next_u64(),
        policy: rng.next_u64(),
    }
}

/// Trial indices `⌈jT/n⌉` for `j = 1..=n`, deduplicated.
pub fn checkpoints(horizon: u64, n: usize) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=n as u64)
        .map(|j| (j as u128 * horizon as u128).div_ceil(n as u128) as u64)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub t: u64,
    pub cum_regret: f64,
    pub avg_cum_reward: f64,
}

/// Streams trajectory rows to any writer.
pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(TRAJECTORY_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &TrialRecord) -> Result<()> {
        self.inner.write_record([
            r.t.to_string(),
            format_float(r.x),
            r.ball.to_string(),
            r.phase.as_str().to_string(),
            r.arm.to_string(),
            format_float(r.payoff),
            format_float(r.f_star),
            format_float(r.f_arm),
        ])?;
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn write_trajectory_csv(log: &TrajectoryLog, path: &Path) -> Result<()> {
    let mut w = TrajectoryWriter::new(BufWriter::new(File::create(path)?))?;
    for r in &log.records {
        w.write(r)?;
    }
    w.finish()?.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("line {line}: bad {} field", TRAJECTORY_HEADER[i])))
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryLog> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(TRAJECTORY_HEADER) {
        return Err(Error::invalid(format!(
            "{}: unexpected trajectory header",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i as u64 + 2;
        let phase: Phase = row
            .get(3)
            .ok_or_else(|| Error::invalid(format!("line {line}: missing phase")))?
            .parse()?;
        records.push(TrialRecord {
            t: parse_field(&row, 0, line)?,
            x: parse_field(&row, 1, line)?,
            ball: parse_field(&row, 2, line)?,
            phase,
            arm: parse_field(&row, 4, line)?,
            payoff: parse_field(&row, 5, line)?,
            f_star: parse_field(&row, 6, line)?,
            f_arm: parse_field(&row, 7, line)?,
        });
    }
    Ok(TrajectoryLog { records })
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            format_float(r.cum_regret),
            format_float(r.avg_cum_reward),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(Error::invalid(format!("{}: unexpected summary header", path.display())));
    }
    rdr.records()
        .map(|row| {
            let row = row?;
            let f = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("bad summary row {row:?}")))
            };
            Ok(SummaryRow {
                t: f(0)? as u64,
                cum_regret: f(1)?,
                avg_cum_reward: f(2)?,
            })
        })
        .collect()
}

/// Per-bin model table: bin centre, best value, lowest optimal arm, κ.
pub fn write_diagnostics_csv(model: &RewardModel, bins: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DIAGNOSTICS_HEADER)?;
    for b in 0..bins {
        let x = (b as f64 + 0.5) / bins as f64;
        let opt = model.optimal_reward(x);
        w.write_record([
            b.to_string(),
            format_float(x),
            format_float(opt.value),
            opt.argmax[0].to_string(),
            format_float(metrics::kappa(model, x)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One (variant, replication) job as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub variant: Variant,
    pub replication: usize,
    pub seeds: ReplicationSeeds,
    pub trajectory: Option<String>,
    pub summary: String,
    pub trials: u64,
    pub final_cum_regret: f64,
    pub final_avg_cum_reward: f64,
    /// Regret over the first half of the horizon.
    pub first_half_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// `complete` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub num_arms: usize,
    pub horizon: u64,
    pub runs: Vec<RunRecord>,
    pub arm_frequency: Option<String>,
    pub diagnostics: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn runs_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }
}

struct Job {
    spec: VariantSpec,
    replication: usize,
}

struct JobOutput {
    record: RunRecord,
    freq: ArmFrequency,
}

fn run_job(cfg: &ExperimentConfig, model: &RewardModel, dir: &Path, job: &Job) -> Result<JobOutput> {
    let env_spec = &cfg.environment;
    let label = job.spec.label();
    let seeds = replication_seeds(env_spec.base_seed, job.replication);
    let mut policy_cfg = job.spec.resolve(&cfg.defaults, env_spec, model);
    policy_cfg.seed = seeds.policy;
    let mut env = Environment::with_streams(
        model.clone(),
        env_spec.noise_std,
        env_spec.horizon,
        seeds.context,
        seeds.noise,
    )?;

    let stem = format!("{label}_r{:03}", job.replication);
    let traj_name = format!("{stem}_trajectory.csv");
    let summary_name = format!("{stem}_summary.csv");
    let mut traj = if cfg.writes_trajectories() {
        Some(TrajectoryWriter::new(BufWriter::new(File::create(
            dir.join(&traj_name),
        )?))?)
    } else {
        None
    };

    let marks = checkpoints(env_spec.horizon, cfg.checkpoints);
    let mut next_mark = 0;
    let half = env_spec.horizon / 2;
    let mut first_half_regret = 0.0;
    let mut rows = Vec::with_capacity(marks.len());
    let mut acc = RegretAccumulator::default();
    let mut freq = ArmFrequency::new(4, model.num_arms(), cfg.frequency_bins, env_spec.horizon);

    run_with(&mut env, &policy_cfg, |r| {
        acc.push(r);
        freq.record(r.t, r.x, r.arm);
        if r.t == half {
            first_half_regret = acc.cum_regret;
        }
        if next_mark < marks.len() && r.t == marks[next_mark] {
            rows.push(SummaryRow {
                t: r.t,
                cum_regret: acc.cum_regret,
                avg_cum_reward: acc.avg_cum_reward(),
            });
            next_mark += 1;
        }
        if let Some(w) = traj.as_mut() {
            w.write(r)?;
        }
        Ok(())
    })?;

    if let Some(w) = traj {
        w.finish()?.flush()?;
    }
    write_summary_csv(&rows, &dir.join(&summary_name))?;

    Ok(JobOutput {
        record: RunRecord {
            label,
            variant: job.spec.variant,
            replication: job.replication,
            seeds,
            trajectory: cfg.writes_trajectories().then_some(traj_name),
            summary: summary_name,
            trials: acc.trials,
            final_cum_regret: acc.cum_regret,
            final_avg_cum_reward: acc.avg_cum_reward(),
            first_half_regret,
        },
        freq,
    })
}

fn write_frequency_csv(outputs: &[JobOutput], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(FREQUENCY_HEADER)?;
    for out in outputs {
        let (label, rep) = (&out.record.label, out.record.replication.to_string());
        for (q, a, b, c) in out.freq.rows().filter(|row| row.3 > 0) {
            w.write_record([
                label,
                &rep,
                &q.to_string(),
                &a.to_string(),
                &b.to_string(),
                &c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

/// Run every (variant, replication) pair and write the artifacts into the
/// configured output directory. The manifest is written last, also when a
/// job fails, and then lists only the runs that completed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    fs::create_dir_all(&dir)?;
    let model = cfg.environment.model.build().map_err(as_config)?;

    let jobs: Vec<Job> = (0..cfg.replications)
        .flat_map(|replication| {
            cfg.variants.iter().map(move |spec| Job {
                spec: spec.clone(),
                replication,
            })
        })
        .collect();

    #[cfg(feature = "parallel")]
    let results: Vec<Result<JobOutput>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|j| run_job(cfg, &model, &dir, j)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<JobOutput>> = jobs.iter().map(|j| run_job(cfg, &model, &dir, j)).collect();

    let mut outputs = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }

    let mut manifest = Manifest {
        name: cfg.name.clone(),
        status: "complete".into(),
        error: None,
        config: cfg.clone(),
        num_arms: model.num_arms(),
        horizon: cfg.environment.horizon,
        runs: outputs.iter().map(|o| o.record.clone()).collect(),
        arm_frequency: None,
        diagnostics: None,
    };
    let extras = write_frequency_csv(&outputs, &dir.join(FREQUENCY_FILE))
        .and_then(|_| write_diagnostics_csv(&model, cfg.frequency_bins, &dir.join(DIAGNOSTICS_FILE)));
    match extras {
        Ok(()) => {
            manifest.arm_frequency = Some(FREQUENCY_FILE.into());
            manifest.diagnostics = Some(DIAGNOSTICS_FILE.into());
        }
        Err(e) if first_error.is_none() => first_error = Some(e),
        Err(_) => {}
    }
    if let Some(e) = &first_error {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
    }
    write_manifest(&manifest, &dir)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Model-only diagnostics for the `diagnose` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub num_arms: usize,
    pub lipschitz: f64,
    /// `(i, M_i)` for each scale.
    pub m_i: Vec<(u32, u64)>,
    /// `(z, μ_κ(z))`.
    pub mu_kappa: Vec<(f64, f64)>,
    pub balls: Vec<BallDiagnostic>,
}

/// One oracle-clustered child ball at a fixed depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallDiagnostic {
    pub c0: f64,
    pub c1: f64,
    pub center: usize,
    pub num_arms: usize,
    pub gap: f64,
    pub diam: f64,
    /// `2 L Δ`.
    pub diam_bound: f64,
}

/// Compute `M_i` for `scales`, `μ_κ` at `zs`, and gap/diam of the balls
/// produced by oracle clustering of every dyadic interval at `depth`.
pub fn diagnose(
    model: &RewardModel,
    lipschitz: f64,
    scales: &[u32],
    zs: &[f64],
    depth: u8,
    res: &Resolutions,
) -> Result<DiagnosticsReport> {
    let profile = metrics::kappa_profile(model, res.mu_kappa_grid);
    let arms: Vec<usize> = (0..model.num_arms()).collect();
    let mut balls = Vec::new();
    for index in 0..(1u64 << depth) {
        let iv = DyadicInterval::new(depth, index)?;
        let c = subpartition(
            &arms,
            iv.start(),
            iv.end(),
            lipschitz,
            &DistanceSource::OracleTrue(model),
        )?;
        let mid = iv.midpoint();
        for (c0, c1, clusters) in [(iv.start(), mid, &c.left), (mid, iv.end(), &c.right)] {
            for cl in clusters {
                balls.push(BallDiagnostic {
                    c0,
                    c1,
                    center: cl.center,
                    num_arms: cl.members.len(),
                    gap: metrics::gap(model, c0, c1, &cl.members, res.ball_grid),
                    diam: metrics::diam(model, c0, c1, &cl.members, res.ball_grid),
                    diam_bound: 2.0 * lipschitz * (c1 - c0),
                });
            }
        }
    }
    Ok(DiagnosticsReport {
        num_arms: model.num_arms(),
        lipschitz,
        m_i: scales
            .iter()
            .map(|&i| (i, metrics::m_i(model, i, lipschitz, res.m_i_grid)))
            .collect(),
        mu_kappa: zs
            .iter()
            .map(|&z| (z, metrics::mu_kappa_from_profile(&profile, z)))
            .collect(),
        balls,
    })
}

/// Write `scales.csv`, `mu_kappa.csv`, `balls.csv` and the per-bin table into `dir`.
pub fn write_diagnostics_report(
    report: &DiagnosticsReport,
    model: &RewardModel,
    bins: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("scales.csv"))?;
    w.write_record(["i", "m_i", "per_arm"])?;
    for &(i, m) in &report.m_i {
        w.write_record([
            i.to_string(),
            m.to_string(),
            format_float(m as f64 / report.num_arms as f64),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("mu_kappa.csv"))?;
    w.write_record(["z", "mu_kappa"])?;
    for &(z, mu) in &report.mu_kappa {
        w.write_record([format_float(z), format_float(mu)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("balls.csv"))?;
    w.write_record(["c0", "c1", "center", "num_arms", "gap", "diam", "diam_bound"])?;
    for b in &report.balls {
        w.write_record([
            format_float(b.c0),
            format_float(b.c1),
            b.center.to_string(),
            b.num_arms.to_string(),
            format_float(b.gap),
            format_float(b.diam),
            format_float(b.diam_bound),
        ])?;
    }
    w.flush()?;
    write_diagnostics_csv(model, bins, &dir.join(DIAGNOSTICS_FILE))
}
