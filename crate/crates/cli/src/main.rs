use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::Value;

use survprep::artifacts::outputs::stats_file;
use survprep::artifacts::{validate_outputs, OutputManifest, ValidationReport};
use survprep::synthgen::{generate, load_spec};
use survprep::{load_config, run_pipeline, RunOptions, StageError};

#[derive(Parser)]
#[command(name = "survprep", version, about = "EHR to survival-tensor preprocessing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage on a raw export and write the output tree.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Rows buffered per chunk while streaming measurement files.
        #[arg(long)]
        chunk_rows: Option<usize>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a synthetic raw export from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the data-quality checks on an output tree.
    Validate {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print the label statistics of an output tree.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Failure that already printed its own diagnostics.
#[derive(Debug)]
struct ValidationFailed;

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for ValidationFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<ValidationFailed>().is_some() {
                eprintln!("error[ValidationFailed]: {e}");
                return ExitCode::from(3);
            }
            let kind = e
                .downcast_ref::<StageError>()
                .map(|s| s.source.kind())
                .or_else(|| e.downcast_ref::<survprep::Error>().map(|s| s.kind()))
                .unwrap_or("Error");
            eprintln!("error[{kind}]: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess {
            config,
            chunk_rows,
            out,
            seed,
            workers,
        } => preprocess(&config, chunk_rows, out, seed, workers),
        Command::Synth { spec, out } => {
            let spec = load_spec(&spec)?;
            let truth = generate(&spec, &out)?;
            println!(
                "wrote {} stays, {} measurements for {} to {}",
                truth.stays.len(),
                truth.num_measurements(),
                truth.dataset,
                out.display()
            );
            Ok(())
        }
        Command::Validate { dir } => {
            let report = validate_outputs(&dir);
            print_report(&report)?;
            if !report.passed {
                return Err(ValidationFailed.into());
            }
            Ok(())
        }
        Command::Stats { dir } => stats(&dir),
    }
}

fn preprocess(
    config: &Path,
    chunk_rows: Option<usize>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    workers: usize,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.defaulted.remove("seed");
    }
    if chunk_rows == Some(0) {
        bail!(survprep::Error::ConfigInvalid("--chunk-rows must be positive".into()));
    }
    if workers == 0 {
        bail!(survprep::Error::ConfigInvalid("--workers must be positive".into()));
    }
    for line in cfg.describe().lines() {
        log::info!("config {line}");
    }
    let opts = RunOptions {
        chunk_rows: chunk_rows.unwrap_or(RunOptions::default().chunk_rows),
        workers,
    };
    let summary = run_pipeline(&cfg, opts)?;
    let m = &summary.manifest;
    for (split, c) in &m.split_counts {
        log::info!("split={split} patients={} stays={}", c.patients, c.stays);
    }
    log::info!(
        "run_id={} features={} windows={} files={}",
        m.run_id,
        m.num_features,
        m.windows,
        m.files.len() + 1
    );
    if !summary.report.passed {
        print_report(&summary.report)?;
        return Err(ValidationFailed.into());
    }
    println!("{}", cfg.output_dir.display());
    Ok(())
}

fn print_report(report: &ValidationReport) -> anyhow::Result<()> {
    for c in &report.checks {
        println!("{:<16} {}", c.name, if c.passed { "ok" } else { "FAILED" });
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        println!("{}: {}", c.name, serde_json::to_string(&c.details)?);
    }
    println!("overall          {}", if report.passed { "ok" } else { "FAILED" });
    Ok(())
}

fn fmt_opt(v: &Value) -> String {
    v.as_f64().map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn stats(dir: &Path) -> anyhow::Result<()> {
    let manifest = OutputManifest::load(dir)?;
    let path = dir.join(stats_file(manifest.dataset));
    let text = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let stats: Value = serde_json::from_slice(&text)?;
    let cohort = &stats["cohort"];
    println!(
        "dataset {}  stays {}  patients {}  horizon {} h",
        manifest.dataset, cohort["stays"], cohort["patients"], manifest.horizon_hours
    );
    println!(
        "{:<6} {:>7} {:>10} {:>10} {:>9} {:>9} {:>12} {:>13}",
        "split", "n", "event_rate", "censored", "mean_T", "median_T", "median_T_evt", "median_T_cens"
    );
    let table = &stats["labels"]["statistics"];
    for split in ["all", "train", "val", "test"] {
        let s = &table[split];
        if s.is_null() {
            continue;
        }
        println!(
            "{:<6} {:>7} {:>10.4} {:>10.4} {:>9} {:>9} {:>12} {:>13}",
            split,
            s["n"].to_string(),
            s["event_rate"].as_f64().unwrap_or(f64::NAN),
            s["censor_rate"].as_f64().unwrap_or(f64::NAN),
            fmt_opt(&s["mean_duration"]),
            fmt_opt(&s["median_duration"]),
            fmt_opt(&s["median_duration_event"]),
            fmt_opt(&s["median_duration_censored"]),
        );
    }
    if manifest.num_risks > 1 {
        println!("event rate by code (all):");
        if let Some(codes) = table["all"]["event_rate_by_code"].as_object() {
            for (code, rate) in codes {
                println!("  {code}: {:.4}", rate.as_f64().unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}
