//! Command line interface: simulate scenarios, run trackers, evaluate OSPA,
//! and orchestrate Monte Carlo studies.
//!
//! Exit codes: 0 on success, 2 on configuration or input errors, 3 on
//! numeric failures during a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use flowmot::harness::{
    evaluate_run, monte_carlo, read_tracks_csv, run_tracker, write_ospa_csv, write_tracks_csv,
    TrackerConfig,
};
use flowmot::scenario::{
    build_sensor_suite, generate_measurements, generate_truth, read_json, write_json,
    GroundTruth, MeasurementData, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "flowmot", version, about = "Multisensor multiobject tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and measurements for a scenario.
    Simulate {
        /// Scenario config JSON path, or "preset:paper-default".
        #[arg(long)]
        scenario: String,
        /// Override the scenario's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for truth.json and meas.json (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a tracker over a measurement file.
    Track {
        /// Tracker config JSON path.
        #[arg(long)]
        tracker: PathBuf,
        /// Measurement file from `simulate`.
        #[arg(long)]
        meas: PathBuf,
        /// Output tracks CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-step OSPA of a tracks file against ground truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// OSPA cutoff (m).
        #[arg(long, default_value_t = 50.0)]
        cutoff: f64,
        /// OSPA order.
        #[arg(long, default_value_t = 1.0)]
        order: f64,
        /// Output OSPA CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo study: repeated simulate + track + evaluate.
    Mc {
        /// Scenario config JSON path, or "preset:paper-default".
        #[arg(long)]
        scenario: String,
        /// Tracker config JSON path.
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long)]
        runs: usize,
        /// Master seed; every run derives its own streams from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 50.0)]
        cutoff: f64,
        #[arg(long, default_value_t = 1.0)]
        order: f64,
        /// Directory for ospa.csv and tracks.csv (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Error carrying the intended process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<flowmot::Error> for CliError {
    fn from(e: flowmot::Error) -> Self {
        match e {
            flowmot::Error::InvalidArgument(_) => CliError::config(e.to_string()),
            _ => CliError::numeric(e.to_string()),
        }
    }
}

fn io_config(e: std::io::Error) -> CliError {
    CliError::config(e.to_string())
}

fn load_scenario(spec: &str) -> Result<ScenarioConfig, CliError> {
    if let Some(preset) = spec.strip_prefix("preset:") {
        return match preset {
            "paper-default" => Ok(ScenarioConfig::paper_default()),
            other => Err(CliError::config(format!("unknown preset '{other}'"))),
        };
    }
    let cfg: ScenarioConfig = read_json(Path::new(spec)).map_err(io_config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_tracker(path: &Path) -> Result<TrackerConfig, CliError> {
    let cfg: TrackerConfig = read_json(path).map_err(io_config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out_dir,
        } => {
            let mut cfg = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            std::fs::create_dir_all(&out_dir).map_err(io_config)?;
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let truth = generate_truth(&cfg, &mut rng)?;
            let sensors = build_sensor_suite(&cfg)?;
            let meas = generate_measurements(&cfg, &truth, &sensors, &mut rng)?;
            write_json(&out_dir.join("truth.json"), &truth).map_err(io_config)?;
            write_json(&out_dir.join("meas.json"), &meas).map_err(io_config)?;
            eprintln!(
                "simulated {} steps, {} sensors -> {}",
                cfg.n_steps,
                sensors.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Track { tracker, meas, out } => {
            let cfg = load_tracker(&tracker)?;
            let data: MeasurementData = read_json(&meas).map_err(io_config)?;
            let estimates =
                run_tracker(&data, &cfg, cfg.seed).map_err(CliError::from)?;
            write_tracks_csv(&out, &[(0, &estimates)]).map_err(io_config)?;
            eprintln!("tracked {} steps -> {}", estimates.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            truth,
            tracks,
            cutoff,
            order,
            out,
        } => {
            let truth_data: GroundTruth = read_json(&truth).map_err(io_config)?;
            let runs = read_tracks_csv(&tracks, truth_data.n_steps).map_err(io_config)?;
            if runs.is_empty() {
                return Err(CliError::config("tracks file contains no runs"));
            }
            let mut per_run = Vec::with_capacity(runs.len());
            for estimates in &runs {
                per_run.push(
                    evaluate_run(&truth_data, estimates, cutoff, order)
                        .map_err(CliError::from)?,
                );
            }
            let n_steps = truth_data.n_steps;
            let mut mean = vec![0.0; n_steps];
            let mut stderr = vec![0.0; n_steps];
            for k in 0..n_steps {
                let vals: Vec<f64> = per_run.iter().map(|r| r[k]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                mean[k] = m;
                if vals.len() > 1 {
                    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / (vals.len() - 1) as f64;
                    stderr[k] = (var / vals.len() as f64).sqrt();
                }
            }
            write_ospa_csv(&out, &mean, &stderr).map_err(io_config)?;
            eprintln!("evaluated {} runs -> {}", runs.len(), out.display());
            Ok(())
        }
        Command::Mc {
            scenario,
            tracker,
            runs,
            seed,
            jobs,
            cutoff,
            order,
            out_dir,
        } => {
            let scenario_cfg = load_scenario(&scenario)?;
            let tracker_cfg = load_tracker(&tracker)?;
            if runs == 0 {
                return Err(CliError::config("--runs must be >= 1"));
            }
            std::fs::create_dir_all(&out_dir).map_err(io_config)?;
            let compute = || {
                monte_carlo(&scenario_cfg, &tracker_cfg, runs, seed, cutoff, order)
            };
            let result = match jobs {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::config(e.to_string()))?
                    .install(compute),
                None => compute(),
            }
            .map_err(CliError::from)?;
            let track_rows: Vec<(usize, &flowmot::harness::RunEstimates)> = result
                .runs
                .iter()
                .map(|r| (r.run, &r.estimates))
                .collect();
            write_tracks_csv(&out_dir.join("tracks.csv"), &track_rows).map_err(io_config)?;
            write_ospa_csv(
                &out_dir.join("ospa.csv"),
                &result.mean_ospa,
                &result.stderr_ospa,
            )
            .map_err(io_config)?;
            eprintln!(
                "{} runs, time-averaged mean OSPA {:.3} -> {}",
                runs,
                result.mean_ospa.iter().sum::<f64>() / result.mean_ospa.len() as f64,
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
