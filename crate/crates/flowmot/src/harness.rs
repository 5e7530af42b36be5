//! Evaluation harness: serialized tracker configuration, single tracking
//! runs, per-step OSPA evaluation, Monte Carlo orchestration, and the CSV
//! formats shared with the command line interface.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::LambdaSchedule;
use crate::metrics::ospa;
use crate::model::Estimate;
use crate::proposal::{ProposalMethod, UtParams};
use crate::scenario::{
    build_sensor_suite, generate_measurements, generate_truth, GroundTruth, MeasurementData,
    ScenarioConfig,
};
use crate::tracker::{
    extract_estimates, multisensor_step, BirthModel, MethodProposals, MotionModel,
    TrackerSettings, TrackerState,
};

/// Tracker variant: which proposal drives new-object and legacy updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMethod {
    /// Invertible particle flow everywhere.
    Pf,
    /// Plain prior (bootstrap) proposal everywhere.
    Pm,
    /// Unscented Gaussian proposal everywhere.
    Ut,
    /// Flow for new objects, prior proposal for legacy objects.
    PfHyb,
}

impl TrackerMethod {
    pub fn proposals(self) -> MethodProposals {
        match self {
            TrackerMethod::Pf => MethodProposals {
                new_objects: ProposalMethod::Flow,
                legacy: ProposalMethod::Flow,
            },
            TrackerMethod::Pm => MethodProposals {
                new_objects: ProposalMethod::Prior,
                legacy: ProposalMethod::Prior,
            },
            TrackerMethod::Ut => MethodProposals {
                new_objects: ProposalMethod::Unscented,
                legacy: ProposalMethod::Unscented,
            },
            TrackerMethod::PfHyb => MethodProposals {
                new_objects: ProposalMethod::Flow,
                legacy: ProposalMethod::Prior,
            },
        }
    }

    /// Default per-kernel particle budget for new objects. The bootstrap
    /// proposal needs far more particles to cover a measurement region.
    pub fn default_particles_new(self) -> usize {
        match self {
            TrackerMethod::Pm => 10_000,
            _ => 500,
        }
    }

    /// Default per-kernel particle budget for legacy objects.
    pub fn default_particles_legacy(self) -> usize {
        match self {
            TrackerMethod::Pm | TrackerMethod::PfHyb => 600,
            _ => 30,
        }
    }
}

/// Serialized tracker configuration. Unknown keys are rejected; omitted keys
/// take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub method: TrackerMethod,
    /// Kernels per mixture belief.
    pub n_kernels: usize,
    /// Particles per kernel for new objects (default depends on method).
    pub n_particles_new: Option<usize>,
    /// Particles per kernel for legacy objects (default depends on method).
    pub n_particles_legacy: Option<usize>,
    /// Flow pseudo-time steps.
    pub n_lambda: usize,
    /// Geometric growth ratio of the pseudo-time steps.
    pub lambda_ratio: f64,
    /// Existence threshold for declaring estimates.
    pub detection_threshold: f64,
    /// Existence threshold for pruning potential objects.
    pub pruning_threshold: f64,
    /// Rectangular gate factor; omit to disable gating.
    pub gate_factor: Option<f64>,
    pub ut: UtParams,
    /// Include association corrections in the final particle weights.
    pub weight_with_kappa: bool,
    pub spa_tolerance: f64,
    pub spa_max_iters: usize,
    /// Multiplier on the birth kernel covariance.
    pub birth_cov_scale: f64,
    /// Base seed for the tracker's own randomness.
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            method: TrackerMethod::Pf,
            n_kernels: 100,
            n_particles_new: None,
            n_particles_legacy: None,
            n_lambda: 20,
            lambda_ratio: 1.2,
            detection_threshold: 0.5,
            pruning_threshold: 1e-4,
            gate_factor: None,
            ut: UtParams::default(),
            weight_with_kappa: true,
            spa_tolerance: crate::assoc::SPA_TOLERANCE,
            spa_max_iters: crate::assoc::SPA_MAX_ITERS,
            birth_cov_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kernels == 0 || self.n_lambda == 0 {
            return Err(Error::InvalidArgument(
                "n_kernels and n_lambda must be >= 1".into(),
            ));
        }
        if !(self.detection_threshold >= 0.0 && self.detection_threshold <= 1.0) {
            return Err(Error::InvalidArgument(
                "detection_threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Resolve into runtime settings given the model parameters carried by a
    /// measurement file.
    pub fn settings(&self, p_d: f64, mu_fp: f64) -> Result<TrackerSettings> {
        self.validate()?;
        Ok(TrackerSettings {
            proposals: self.method.proposals(),
            n_kernels: self.n_kernels,
            n_particles_new: self
                .n_particles_new
                .unwrap_or_else(|| self.method.default_particles_new()),
            n_particles_legacy: self
                .n_particles_legacy
                .unwrap_or_else(|| self.method.default_particles_legacy()),
            schedule: LambdaSchedule::geometric(self.n_lambda, self.lambda_ratio)?,
            ut: self.ut,
            gate: self.gate_factor,
            detection_threshold: self.detection_threshold,
            pruning_threshold: self.pruning_threshold,
            weight_with_kappa: self.weight_with_kappa,
            spa_tolerance: self.spa_tolerance,
            spa_max_iters: self.spa_max_iters,
            p_d,
            mu_fp,
        })
    }
}

/// Derive an independent stream seed from a master seed (splitmix64 over the
/// master and stream index), so parallel runs are decorrelated but fully
/// reproducible.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Estimates per step for one tracking run.
pub type RunEstimates = Vec<Vec<Estimate>>;

/// Run one tracker over a measurement record.
pub fn run_tracker(meas: &MeasurementData, cfg: &TrackerConfig, seed: u64) -> Result<RunEstimates> {
    let settings = cfg.settings(meas.model.p_d, meas.model.mu_fp)?;
    let motion = MotionModel::constant_velocity(
        meas.model.sigma_w,
        meas.model.sampling_period,
        meas.model.p_survival,
    );
    let birth = BirthModel {
        roi_min: Vector3::from(meas.model.roi_min),
        roi_max: Vector3::from(meas.model.roi_max),
        mean_births: meas.model.mu_b,
        velocity_std: meas.model.velocity_birth_std,
        cov_scale: cfg.birth_cov_scale,
    };
    let sensors = meas.sensors.clone();
    let fp_densities: Vec<f64> = sensors.iter().map(|s| s.fp_density()).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = TrackerState::new();
    let mut out = Vec::with_capacity(meas.steps.len());
    for (k, step_scans) in meas.steps.iter().enumerate() {
        let scans: Vec<Vec<f64>> = step_scans.iter().map(|s| s.values.clone()).collect();
        multisensor_step(
            &mut state,
            &scans,
            &sensors,
            &fp_densities,
            &motion,
            &birth,
            &settings,
            k + 1,
            &mut rng,
        )?;
        out.push(extract_estimates(&state, settings.detection_threshold)?);
    }
    Ok(out)
}

/// Per-step OSPA of one run's estimates against the truth.
pub fn evaluate_run(
    truth: &GroundTruth,
    estimates: &RunEstimates,
    cutoff: f64,
    order: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(estimates.len());
    for (k, ests) in estimates.iter().enumerate() {
        let step = k + 1;
        let truth_pos: Vec<Vector3<f64>> = truth
            .objects
            .iter()
            .filter_map(|o| o.position_at(step))
            .collect();
        let est_pos: Vec<Vector3<f64>> = ests.iter().map(|e| e.position()).collect();
        out.push(ospa(&truth_pos, &est_pos, cutoff, order)?);
    }
    Ok(out)
}

/// One Monte Carlo run's artifacts.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: usize,
    pub ospa: Vec<f64>,
    pub estimates: RunEstimates,
}

/// Aggregated Monte Carlo output.
#[derive(Debug, Clone)]
pub struct McResult {
    pub runs: Vec<RunResult>,
    pub mean_ospa: Vec<f64>,
    pub stderr_ospa: Vec<f64>,
}

impl McResult {
    /// Mean of `mean_ospa` over a 1-based inclusive step window.
    pub fn time_average(&self, from_step: usize, to_step: usize) -> f64 {
        let slice = &self.mean_ospa[from_step - 1..to_step];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Run `n_runs` independent simulate-track-evaluate cycles. Run `i` draws
/// its scenario and tracker seeds from `derive_seed(seed, ...)`, so results
/// are reproducible for a fixed seed regardless of thread count.
pub fn monte_carlo(
    scenario: &ScenarioConfig,
    tracker: &TrackerConfig,
    n_runs: usize,
    seed: u64,
    cutoff: f64,
    order: f64,
) -> Result<McResult> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    scenario.validate()?;
    tracker.validate()?;

    let runs: Vec<RunResult> = (0..n_runs)
        .into_par_iter()
        .map(|i| -> Result<RunResult> {
            let sim_seed = derive_seed(seed, 2 * i as u64);
            let trk_seed = derive_seed(seed, 2 * i as u64 + 1);
            let mut rng = ChaCha12Rng::seed_from_u64(sim_seed);
            let truth = generate_truth(scenario, &mut rng)?;
            let sensors = build_sensor_suite(scenario)?;
            let meas = generate_measurements(scenario, &truth, &sensors, &mut rng)?;
            let estimates = run_tracker(&meas, tracker, trk_seed)?;
            let ospa = evaluate_run(&truth, &estimates, cutoff, order)?;
            Ok(RunResult {
                run: i,
                ospa,
                estimates,
            })
        })
        .collect::<Result<_>>()?;

    let n_steps = runs[0].ospa.len();
    let mut mean = vec![0.0; n_steps];
    let mut stderr = vec![0.0; n_steps];
    for k in 0..n_steps {
        let vals: Vec<f64> = runs.iter().map(|r| r.ospa[k]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[k] = m;
        if vals.len() > 1 {
            let var =
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            stderr[k] = (var / vals.len() as f64).sqrt();
        }
    }
    Ok(McResult {
        runs,
        mean_ospa: mean,
        stderr_ospa: stderr,
    })
}

/// Write `tracks.csv`: one row per run, step, and declared estimate.
/// Columns: `run,step,label,x,y,z,vx,vy,vz,existence`. Floats are printed
/// with Rust's shortest round-trip formatting, so identical runs produce
/// byte-identical files.
pub fn write_tracks_csv(path: &Path, runs: &[(usize, &RunEstimates)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "run,step,label,x,y,z,vx,vy,vz,existence")?;
    for (run, estimates) in runs {
        for (k, ests) in estimates.iter().enumerate() {
            for e in ests {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{},{},{}",
                    run,
                    k + 1,
                    e.label,
                    e.state[0],
                    e.state[1],
                    e.state[2],
                    e.state[3],
                    e.state[4],
                    e.state[5],
                    e.existence
                )?;
            }
        }
    }
    f.flush()
}

/// Write `ospa.csv`: `step,mean_ospa,stderr`.
pub fn write_ospa_csv(path: &Path, mean: &[f64], stderr: &[f64]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,mean_ospa,stderr")?;
    for (k, (m, s)) in mean.iter().zip(stderr).enumerate() {
        writeln!(f, "{},{},{}", k + 1, m, s)?;
    }
    f.flush()
}

/// Read a `tracks.csv` file back into per-run, per-step estimates.
pub fn read_tracks_csv(path: &Path, n_steps: usize) -> std::io::Result<Vec<RunEstimates>> {
    let text = std::fs::read_to_string(path)?;
    let mut runs: Vec<RunEstimates> = Vec::new();
    let bad = |line: usize, why: &str| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}:{line}: {why}", path.display()),
        )
    };
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != "run,step,label,x,y,z,vx,vy,vz,existence" {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(bad(idx + 1, "expected 10 columns"));
        }
        let run: usize = fields[0].parse().map_err(|_| bad(idx + 1, "bad run"))?;
        let step: usize = fields[1].parse().map_err(|_| bad(idx + 1, "bad step"))?;
        let label: u64 = fields[2].parse().map_err(|_| bad(idx + 1, "bad label"))?;
        let mut state = [0.0; 6];
        for (i, s) in state.iter_mut().enumerate() {
            *s = fields[3 + i]
                .parse()
                .map_err(|_| bad(idx + 1, "bad state value"))?;
        }
        let existence: f64 = fields[9].parse().map_err(|_| bad(idx + 1, "bad existence"))?;
        if step == 0 || step > n_steps {
            return Err(bad(idx + 1, "step out of range"));
        }
        while runs.len() <= run {
            runs.push(vec![Vec::new(); n_steps]);
        }
        runs[run][step - 1].push(Estimate {
            label,
            state,
            existence,
        });
    }
    Ok(runs)
}
