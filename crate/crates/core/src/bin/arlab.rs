use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use arlab_core::arl_lin::ScheduleVariant;
use arlab_core::diagnostics::{eluder_dimension, estimate_rho_min, Boundary, FunctionClassSample, ValueClassSampler};
use arlab_core::families::verify_separation;
use arlab_core::harness::{
    algorithm_rng, compare_to_oracle, generate_instance, run_experiment, run_seed, ExperimentConfig, Instance, RunSummary,
};
use arlab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "arlab", version, about = "Adaptive model-selection RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config and write its tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the global seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        schedule_variant: Option<ScheduleVariant>,
    },
    /// Generate one instance of a config and report assumption diagnostics.
    Check {
        #[arg(long)]
        config: PathBuf,
        /// Seed index of the instance to inspect.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Value functions sampled for the minimum-eigenvalue estimate.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Brute-force eluder dimension of a function class given as JSON
    /// (`{"n_inputs": .., "functions": [[..], ..], "epsilon": ..}`).
    Eluder {
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare an adaptive run summary with an oracle run summary.
    Compare { adaptive: PathBuf, oracle: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse(_) | Error::SizeLimit(_) | Error::MismatchedSeeds(_) | Error::InfeasibleProfile(_) => 2,
        Error::GenerationFailure { .. } => 3,
        _ => 1,
    }
}

fn print(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            episodes,
            out,
            schedule_variant,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.global_seed = s;
            }
            if let Some(k) = episodes {
                cfg.episodes = k;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            if let Some(v) = schedule_variant {
                cfg.algorithm.schedule_variant = v;
            }
            let summary = run_experiment(&cfg)?;
            print(&json!({
                "name": summary.name,
                "kind": summary.kind,
                "seeds": summary.seeds.len(),
                "episodes": summary.episodes,
                "aggregate": summary.aggregate,
                "digest": summary.digest,
                "output_dir": cfg.output_dir,
            }))
        }
        Command::Check { config, seed, samples } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = run_seed(cfg.global_seed, &cfg.scenario_id, seed);
            match generate_instance(&cfg, run)? {
                Instance::Finite { mdp, families } => {
                    let probes = families.probe_values().to_vec();
                    let report = verify_separation(&families, &mdp.kernel, &probes);
                    print(&json!({
                        "instance": "finite",
                        "seed_index": seed,
                        "family_sizes": families.sizes(),
                        "m_star": families.realizable_index(),
                        "target_delta": families.separation(),
                        "realized_delta": report.realized_delta,
                        "max_row_sum_error": mdp.kernel.max_row_sum_error(),
                    }))
                }
                Instance::Linear(mdp) => {
                    let sampler = ValueClassSampler {
                        theta_norm: mdp.norm_bound,
                        eta_max: 1.0,
                    };
                    let rho = estimate_rho_min(&mdp, &sampler, samples.max(1), None, &mut algorithm_rng(run));
                    print(&json!({
                        "instance": "linear",
                        "seed_index": seed,
                        "d": mdp.d,
                        "support": mdp.support(),
                        "theta_star": mdp.theta_star,
                        "gamma_min": mdp.gamma_min_coord(),
                        "feature_norm_bound": mdp.feature_norm_bound(),
                        "rho_min_estimate": rho.rho_min,
                        "moment_spread": rho.moment_spread,
                        "max_row_sum_error": mdp.base.kernel.max_row_sum_error(),
                    }))
                }
            }
        }
        Command::Eluder { input } => {
            let text = std::fs::read_to_string(&input)?;
            let raw: FunctionClassSample = serde_json::from_str(&text)?;
            let class = FunctionClassSample::new(raw.functions, raw.epsilon)?;
            print(&json!({
                "n_inputs": class.n_inputs,
                "n_functions": class.functions.len(),
                "epsilon": class.epsilon,
                "as_written": eluder_dimension(&class, Boundary::AsWritten)?,
                "swapped": eluder_dimension(&class, Boundary::Swapped)?,
            }))
        }
        Command::Compare { adaptive, oracle } => {
            let a = RunSummary::load(&adaptive)?;
            let o = RunSummary::load(&oracle)?;
            print(&serde_json::to_value(compare_to_oracle(&a, &o)?)?)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
