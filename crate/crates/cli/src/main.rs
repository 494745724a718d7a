use std::path::PathBuf;
use std::process::ExitCode;

use approx_zooming::harness::{self, EnvSpec, ExperimentConfig, ModelSpec};
use approx_zooming::metrics::Resolutions;
use approx_zooming::policy::{ApproxZooming, KMode, PolicyConfig, Variant};
use approx_zooming::{Environment, Error, FlagMode};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "azoom", version, about = "Contextual bandits with learned arm similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long, env = "AZOOM_OUT_DIR")]
        out: Option<PathBuf>,
        /// Override the replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Model-only diagnostics: M_i per scale, μ_κ, gap/diam of oracle-clustered balls.
    Diagnose {
        #[arg(long, value_enum, default_value_t = Preset::Zigzag)]
        preset: Preset,
        #[arg(long, default_value_t = 50)]
        arms: usize,
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        /// Number of types for the finite-types preset.
        #[arg(long, default_value_t = 4)]
        types: usize,
        /// Largest scale index for M_i.
        #[arg(long, default_value_t = 12)]
        max_scale: u32,
        /// Dyadic depth of the clustered intervals in the ball table.
        #[arg(long, default_value_t = 2)]
        depth: u8,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Write CSV tables here instead of printing a summary only.
        #[arg(long, env = "AZOOM_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Run every variant with the partition audit switched on after each trial.
    Verify {
        #[arg(long, default_value_t = 12)]
        arms: usize,
        #[arg(long, default_value_t = 5000)]
        horizon: u64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0.01)]
        noise_std: f64,
    },
    /// Print a ready-to-edit config file.
    Preset {
        #[arg(value_enum, default_value_t = ConfigPreset::Full)]
        which: ConfigPreset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Zigzag,
    Ridge,
    FiniteTypes,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigPreset {
    /// 200 arms, T = 100,000, σ = 0.01.
    Full,
    /// 50 arms, T = 20,000, σ = 0.01, 10 replications.
    Small,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_invariant_violation() {
        2
    } else {
        1
    }
}

fn report(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    if let Error::InvariantViolation { snapshot: Some(s), .. } = &e {
        eprintln!("partition at failure:\n{s}");
    }
    ExitCode::from(exit_code(&e))
}

fn small_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EnvSpec {
        model: ModelSpec::Zigzag {
            num_arms: 50,
            lipschitz: 1.0,
            permutation_seed: None,
        },
        noise_std: 1e-2,
        horizon: 20_000,
        base_seed: 0,
    });
    cfg.name = "zigzag-50".into();
    cfg.replications = 10;
    cfg.defaults.flag_mode = Some(FlagMode::Simulation);
    cfg.defaults.k_mode = Some(KMode::Fixed(1));
    cfg
}

fn run(config: PathBuf, out: Option<PathBuf>, replications: Option<usize>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    if cfg.output_dir.is_none() {
        return Err(Error::Config(
            "no output directory: pass --out or set AZOOM_OUT_DIR".into(),
        ));
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if let Some(s) = seed {
        cfg.environment.base_seed = s;
    }
    let manifest = harness::run_experiment(&cfg)?;
    println!(
        "{:<16} {:>6} {:>14} {:>14}",
        "variant", "runs", "avg_reward", "cum_regret"
    );
    for spec in &cfg.variants {
        let label = spec.label();
        let runs: Vec<_> = manifest.runs_for(&label).collect();
        let n = runs.len().max(1) as f64;
        let reward = runs.iter().map(|r| r.final_avg_cum_reward).sum::<f64>() / n;
        let regret = runs.iter().map(|r| r.final_cum_regret).sum::<f64>() / n;
        println!("{label:<16} {:>6} {reward:>14.6} {regret:>14.3}", runs.len());
    }
    println!(
        "wrote {}",
        cfg.output_dir.unwrap().join(harness::MANIFEST_FILE).display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn diagnose(
    preset: Preset,
    arms: usize,
    lipschitz: f64,
    types: usize,
    max_scale: u32,
    depth: u8,
    bins: usize,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let spec = match preset {
        Preset::Zigzag => ModelSpec::Zigzag {
            num_arms: arms,
            lipschitz,
            permutation_seed: None,
        },
        Preset::Ridge => ModelSpec::LatentRidge {
            num_arms: arms,
            lipschitz,
        },
        Preset::FiniteTypes => ModelSpec::FiniteTypes {
            num_arms: arms,
            num_types: types,
            lipschitz,
        },
    };
    let model = spec.build().map_err(|e| Error::Config(e.to_string()))?;
    let scales: Vec<u32> = (1..=max_scale).collect();
    let zs: Vec<f64> = (0..=20).map(|j| j as f64 / 20.0).collect();
    let report = harness::diagnose(&model, lipschitz, &scales, &zs, depth, &Resolutions::default())?;

    println!("{:>4} {:>10} {:>10}", "i", "M_i", "M_i/K");
    for &(i, m) in &report.m_i {
        println!("{i:>4} {m:>10} {:>10.2}", m as f64 / arms as f64);
    }
    let worst = report.balls.iter().map(|b| b.diam / b.diam_bound).fold(0.0, f64::max);
    println!(
        "{} oracle balls at depth {depth}, largest diam / 2LΔ = {worst:.4}",
        report.balls.len()
    );
    if let Some(dir) = out {
        harness::write_diagnostics_report(&report, &model, bins, &dir)?;
        println!("wrote tables to {}", dir.display());
    }
    Ok(())
}

fn verify(arms: usize, horizon: u64, seeds: u64, noise_std: f64) -> Result<(), Error> {
    let presets = [
        ModelSpec::Zigzag {
            num_arms: arms,
            lipschitz: 1.0,
            permutation_seed: None,
        },
        ModelSpec::LatentRidge {
            num_arms: arms,
            lipschitz: 1.0,
        },
        ModelSpec::FiniteTypes {
            num_arms: arms,
            num_types: 3,
            lipschitz: 1.0,
        },
    ];
    let mut checked = 0;
    for spec in &presets {
        let model = spec.build()?;
        for seed in 0..seeds {
            for variant in Variant::ALL {
                // Finite-types models carry no latent parameters for the metric oracle.
                if variant == Variant::OracleMetric && model.arm_params().is_none() {
                    continue;
                }
                let mut cfg = PolicyConfig::new(variant, 1.0, noise_std * noise_std, horizon);
                cfg.check_invariants = true;
                cfg.flag_mode = FlagMode::Simulation;
                cfg.k_mode = KMode::Fixed(1);
                let mut env = Environment::new(model.clone(), noise_std, horizon, seed)?;
                let mut policy = ApproxZooming::new(cfg, &env)?;
                for _ in 0..horizon {
                    policy.step(&mut env)?;
                }
                checked += 1;
            }
        }
    }
    println!(
        "{checked} runs, {} audited trials, all invariants held",
        checked as u64 * horizon
    );
    Ok(())
}

fn main() -> ExitCode {
    // Exit code 2 is reserved for invariant violations, so usage errors map to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            replications,
            seed,
        } => run(config, out, replications, seed),
        Command::Diagnose {
            preset,
            arms,
            lipschitz,
            types,
            max_scale,
            depth,
            bins,
            out,
        } => diagnose(preset, arms, lipschitz, types, max_scale, depth, bins, out),
        Command::Verify {
            arms,
            horizon,
            seeds,
            noise_std,
        } => verify(arms, horizon, seeds, noise_std),
        Command::Preset { which } => {
            let cfg = match which {
                ConfigPreset::Full => ExperimentConfig::full_scale_preset(),
                ConfigPreset::Small => small_preset(),
            };
            cfg.to_toml_string().map(|s| print!("{s}"))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}
