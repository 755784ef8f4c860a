//! Experiment driver: `simulate`, `sweep`, and `inspect` subcommands.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 runtime and I/O
//! failures. Given identical inputs and seed, every command writes
//! byte-identical outputs.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{
    bucket_by_hour, compare_populations, hourly_csv, inspect_weights, layout_of_schema,
    WeightReport, THRESHOLD_TABLE_HEADER,
};
use crate::checkpoint::{checkpoint_to_string, parse_stats, stats_to_string, CheckpointData};
use crate::config::ExperimentConfig;
use crate::datagen::build_fleet;
use crate::error::{FedSimError, Result};
use crate::rng::SeedSpace;
use crate::sim::run_simulation;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "fedsim",
    about = "Deterministic federated-averaging fleet simulator",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the end-to-end training and evaluation pipeline.
    Simulate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Threshold sweep over the training-eligible and deployment
    /// populations for a trained checkpoint.
    Sweep {
        /// Model checkpoint written by `simulate`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Examine checkpoint weights: monotone progressions, zero-weight
    /// spans, magnitude-frequency correlation.
    Inspect {
        /// Model checkpoint written by `simulate`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature occurrence stats written by `simulate`.
        #[arg(long)]
        stats: PathBuf,
        /// Optional config; pins the exact group layout instead of
        /// recovering it from checkpoint feature names.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional output directory for the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &FedSimError) -> u8 {
    match err {
        FedSimError::Io(_) => EXIT_RUNTIME,
        FedSimError::InvalidConfig(_)
        | FedSimError::InvalidSchema(_)
        | FedSimError::SchemaMismatch(_)
        | FedSimError::MalformedCheckpoint(_)
        | FedSimError::MalformedStats(_)
        | FedSimError::UnknownPopulation(_)
        | FedSimError::EmptyPopulation(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Simulate { config, seed, out } => cmd_simulate(&config, seed, &out),
        Command::Sweep {
            checkpoint,
            config,
            seed,
            out,
        } => cmd_sweep(&checkpoint, &config, seed, &out),
        Command::Inspect {
            checkpoint,
            stats,
            config,
            out,
        } => cmd_inspect(&checkpoint, &stats, config.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Runs one experiment and writes the standard outputs: round log,
/// hourly metric tables, final checkpoint, and feature stats.
pub fn simulate_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<crate::sim::SimOutcome> {
    let schema = cfg.build_schema()?;
    let outcome = run_simulation(cfg)?;

    write_file(out, "rounds.csv", &outcome.round_log_csv())?;
    let tz = cfg.analysis.display_tz_offset_hours;
    write_file(
        out,
        "hourly_eval_loss.csv",
        &hourly_csv(&bucket_by_hour(&outcome.eval_loss_records, tz)),
    )?;
    write_file(
        out,
        "hourly_train_examples.csv",
        &hourly_csv(&bucket_by_hour(&outcome.train_example_records, tz)),
    )?;
    write_file(
        out,
        "checkpoint.txt",
        &checkpoint_to_string(&outcome.final_params, &schema)?,
    )?;
    write_file(
        out,
        "feature_stats.csv",
        &stats_to_string(&schema, &outcome.feature_stats)?,
    )?;
    Ok(outcome)
}

pub fn cmd_simulate(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config_path, seed)?;
    let outcome = simulate_to_dir(&cfg, out)?;

    let committed_train = outcome.committed(crate::server::RoundKind::Train);
    let committed_eval = outcome.committed(crate::server::RoundKind::Eval);
    let abandoned = outcome.abandoned(crate::server::RoundKind::Train)
        + outcome.abandoned(crate::server::RoundKind::Eval);
    println!(
        "simulated {} day(s): {} train + {} eval rounds committed, {} abandoned",
        cfg.horizon_days, committed_train, committed_eval, abandoned
    );
    println!(
        "generated {} impressions ({} clicks), model version {}",
        outcome.generated_impressions,
        outcome.generated_clicks,
        outcome.final_params.round_version()
    );
    println!(
        "stragglers {} duplicates {} overlap_rate {:.6} baseline_range_clamped {}",
        outcome.counters.straggler_reports,
        outcome.counters.duplicate_reports,
        outcome.counters.overlap_rate(),
        outcome.baseline_range_clamped
    );
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn cmd_sweep(
    checkpoint_path: &Path,
    config_path: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config_path, seed)?;
    let schema = cfg.build_schema()?;
    let text = std::fs::read_to_string(checkpoint_path)?;
    let params = CheckpointData::parse(&text)?.into_params(&schema)?;

    let space = SeedSpace::new(cfg.master_seed);
    let fleet = build_fleet(&cfg.fleet.subpopulations, cfg.category_count(), &space);
    let ground_truth = cfg.build_ground_truth(&schema);

    let report = compare_populations(
        &params,
        &fleet,
        &cfg.policy.training.to_policy(),
        &cfg.policy.deployment.to_policy(),
        &ground_truth,
        &schema,
        &cfg.to_generator(),
        &cfg.analysis.taus,
        &space,
        cfg.analysis.skew_days.max(1),
    )?;

    let mut training = String::from(THRESHOLD_TABLE_HEADER);
    training.push('\n');
    for row in &report.training {
        training.push_str(&row.csv_row());
        training.push('\n');
    }
    let mut deployment = String::from(THRESHOLD_TABLE_HEADER);
    deployment.push('\n');
    for row in &report.deployment {
        deployment.push_str(&row.csv_row());
        deployment.push('\n');
    }
    write_file(out, "threshold_training.csv", &training)?;
    write_file(out, "threshold_deployment.csv", &deployment)?;
    write_file(out, "skew.csv", &report.csv())?;

    println!("tau,delta_ctr_training,delta_ctr_deployment,gap");
    for ((tau, t), d) in report
        .taus
        .iter()
        .zip(report.training.iter())
        .zip(report.deployment.iter())
    {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        let gap = match (t.delta_ctr, d.delta_ctr) {
            (Some(a), Some(b)) => format!("{:.4}", b - a),
            _ => "n/a".into(),
        };
        println!("{tau:.4},{},{},{gap}", fmt(t.delta_ctr), fmt(d.delta_ctr));
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn print_weight_report(report: &WeightReport) {
    println!("group                     width  monotonicity     zero-span  fraction");
    for g in &report.groups {
        println!(
            "{:<25} {:>5}  {:<15} {:>9}  {:>8.3}",
            g.name,
            g.width,
            g.monotonicity.map(|m| m.as_str()).unwrap_or("-"),
            g.max_zero_span,
            g.zero_span_fraction
        );
    }
    match report.magnitude_frequency_spearman {
        Some(rho) => println!("|weight| vs frequency spearman: {rho:.4}"),
        None => println!("|weight| vs frequency spearman: undefined"),
    }
}

pub fn cmd_inspect(
    checkpoint_path: &Path,
    stats_path: &Path,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(checkpoint_path)?;
    let ckpt = CheckpointData::parse(&text)?;
    let stats_text = std::fs::read_to_string(stats_path)?;
    let counts = parse_stats(&stats_text, &ckpt)?;

    let layout = match config_path {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let schema = cfg.build_schema()?;
            // make sure the checkpoint actually matches the schema
            let _ = ckpt.clone().into_params(&schema)?;
            layout_of_schema(&schema)
        }
        None => ckpt.recover_layout(),
    };
    let weights = ckpt.weights();
    let report = inspect_weights(&layout, &weights, &counts)?;
    print_weight_report(&report);
    if let Some(dir) = out {
        write_file(dir, "weight_report.csv", &report.csv())?;
        println!(
            "report written to {}",
            dir.join("weight_report.csv").display()
        );
    }
    Ok(())
}
