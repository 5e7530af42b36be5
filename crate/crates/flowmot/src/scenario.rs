//! Passive-acoustic simulation scenario: deep-water region of interest,
//! two small receiver arrays on the sea floor, descending sources, TDOA
//! measurements with uniform clutter.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{MeasurementModel, Sensor};
use crate::model::StateVector;
use crate::tracker::MotionModel;

pub const FORMAT_VERSION: u32 = 1;

/// Birth/death schedule of one simulated object (steps are 1-based and
/// inclusive).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSchedule {
    pub birth: usize,
    pub death: usize,
}

/// Full scenario description. Defaults reproduce the deep-water reference
/// scenario; JSON configs may override any subset but unknown keys are
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Region of interest, axis-aligned box (m).
    pub roi_min: [f64; 3],
    pub roi_max: [f64; 3],
    /// Centers of the receiver arrays (m).
    pub array_centers: Vec<[f64; 3]>,
    /// Receiver positions of one array, as offsets from its center (m).
    /// Every pair of receivers within an array forms one TDOA sensor.
    pub receiver_offsets: Vec<[f64; 3]>,
    /// Number of time steps.
    pub n_steps: usize,
    /// Objects with their lifetimes.
    pub objects: Vec<ObjectSchedule>,
    /// Objects are born uniformly on a circle of this radius (m) ...
    pub circle_radius: f64,
    /// ... at this depth (m, negative down) ...
    pub start_depth: f64,
    /// ... sinking at this vertical speed (m/s, negative down) ...
    pub vertical_speed: f64,
    /// ... while moving horizontally toward the circle center (m/s).
    pub horizontal_speed: f64,
    /// Sound speed (m/s).
    pub sound_speed: f64,
    /// Motion model acceleration noise (m/s^2).
    pub sigma_w: f64,
    /// TDOA measurement noise standard deviation (s).
    pub sigma_v: f64,
    /// Detection probability per object and sensor.
    pub p_d: f64,
    /// Mean false positives per sensor scan.
    pub mu_fp: f64,
    /// Mean new objects per scan assumed by the tracker's birth model.
    pub mu_b: f64,
    /// Survival probability per step.
    pub p_survival: f64,
    /// Time between steps (s).
    pub sampling_period: f64,
    /// Birth-prior velocity standard deviation (m/s) per component.
    pub velocity_birth_std: f64,
    /// Base random seed for truth and measurement generation.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::paper_default()
    }
}

impl ScenarioConfig {
    /// The reference scenario: 2000 m x 2000 m x 1500 m deep region, two
    /// four-receiver arrays (six TDOA pairs each, twelve sensors total),
    /// eight objects appearing every ten steps and disappearing between
    /// steps 130 and 200.
    pub fn paper_default() -> Self {
        let births = [1usize, 10, 20, 30, 40, 50, 60, 70];
        let deaths = [130usize, 140, 150, 160, 170, 180, 190, 200];
        Self {
            roi_min: [-1000.0, -1000.0, -1500.0],
            roi_max: [1000.0, 1000.0, 0.0],
            array_centers: vec![[519.0, 137.0, -1300.0], [-519.0, -137.0, -1300.0]],
            receiver_offsets: tetrahedron_offsets(1.0),
            n_steps: 200,
            objects: births
                .iter()
                .zip(&deaths)
                .map(|(&birth, &death)| ObjectSchedule { birth, death })
                .collect(),
            circle_radius: 300.0,
            start_depth: -50.0,
            vertical_speed: -4.0,
            horizontal_speed: 1.0,
            sound_speed: 1500.0,
            sigma_w: 0.1,
            sigma_v: 1e-6,
            p_d: 0.85,
            mu_fp: 10.0,
            mu_b: 0.05,
            p_survival: 0.95,
            sampling_period: 1.0,
            velocity_birth_std: 5.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.roi_min[axis] < self.roi_max[axis]) {
                return Err(Error::InvalidArgument("roi_min must be below roi_max".into()));
            }
        }
        if self.receiver_offsets.len() < 2 {
            return Err(Error::InvalidArgument(
                "each array needs at least two receivers".into(),
            ));
        }
        if self.array_centers.is_empty() || self.n_steps == 0 {
            return Err(Error::InvalidArgument(
                "need at least one array and one step".into(),
            ));
        }
        for obj in &self.objects {
            if obj.birth == 0 || obj.birth > obj.death || obj.death > self.n_steps {
                return Err(Error::InvalidArgument(
                    "object lifetimes must satisfy 1 <= birth <= death <= n_steps".into(),
                ));
            }
        }
        if !(self.p_d > 0.0 && self.p_d <= 1.0) || !(self.p_survival > 0.0 && self.p_survival <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "p_d and p_survival must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn motion_model(&self) -> MotionModel {
        MotionModel::constant_velocity(self.sigma_w, self.sampling_period, self.p_survival)
    }
}

/// Vertices of a regular tetrahedron with the given edge length, centered at
/// the origin.
pub fn tetrahedron_offsets(edge: f64) -> Vec<[f64; 3]> {
    let s = edge / (2.0 * 2.0f64.sqrt());
    vec![
        [s, s, s],
        [s, -s, -s],
        [-s, s, -s],
        [-s, -s, s],
    ]
}

/// Build all TDOA sensors: for each array, every unordered receiver pair in
/// lexicographic order, arrays in input order.
pub fn build_sensor_suite(cfg: &ScenarioConfig) -> Result<Vec<Sensor>> {
    cfg.validate()?;
    let mut sensors = Vec::new();
    for center in &cfg.array_centers {
        let c = Vector3::from(*center);
        let receivers: Vec<Vector3<f64>> = cfg
            .receiver_offsets
            .iter()
            .map(|o| c + Vector3::from(*o))
            .collect();
        for i in 0..receivers.len() {
            for j in (i + 1)..receivers.len() {
                sensors.push(Sensor::new(
                    receivers[i].into(),
                    receivers[j].into(),
                    cfg.sound_speed,
                    cfg.sigma_v,
                )?);
            }
        }
    }
    Ok(sensors)
}

/// One simulated object's trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthObject {
    pub label: u64,
    pub birth: usize,
    pub death: usize,
    /// States at steps `birth ..= death`, in order.
    pub states: Vec<[f64; 6]>,
}

impl TruthObject {
    /// State at 1-based step `k`, if alive.
    pub fn state_at(&self, k: usize) -> Option<StateVector> {
        if k < self.birth || k > self.death {
            return None;
        }
        Some(StateVector::from_column_slice(&self.states[k - self.birth]))
    }

    pub fn position_at(&self, k: usize) -> Option<Vector3<f64>> {
        self.state_at(k).map(|x| Vector3::new(x[0], x[1], x[2]))
    }
}

/// Ground truth for one simulated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub format_version: u32,
    pub n_steps: usize,
    pub objects: Vec<TruthObject>,
}

/// Where a measurement came from (kept for diagnostics; the tracker never
/// sees it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Object(u64),
    FalsePositive,
}

/// One sensor's scan at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorScan {
    pub values: Vec<f64>,
    pub origins: Vec<Origin>,
}

/// Model parameters the tracker needs, embedded in the measurement file so a
/// tracking run is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub p_d: f64,
    pub mu_fp: f64,
    pub mu_b: f64,
    pub sigma_w: f64,
    pub p_survival: f64,
    pub sampling_period: f64,
    pub roi_min: [f64; 3],
    pub roi_max: [f64; 3],
    pub velocity_birth_std: f64,
}

/// All measurements of one run plus sensors and model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementData {
    pub format_version: u32,
    pub sensors: Vec<Sensor>,
    pub model: ModelParams,
    /// `steps[k][s]` is sensor `s`'s scan at step `k + 1`.
    pub steps: Vec<Vec<SensorScan>>,
}

/// Simulate object trajectories. Objects are born on the start circle with
/// deterministic initial speeds and random bearing, then follow the noisy
/// constant-velocity model. Leaving the region of interest is reported on
/// stderr but does not stop the simulation.
pub fn generate_truth<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<GroundTruth> {
    cfg.validate()?;
    let motion = cfg.motion_model();
    let q_chol = crate::model::spd_regularize(&motion.q, crate::model::default_jitter(&motion.q))?
        .cholesky()
        .ok_or(Error::StillSingular)?;
    let q_l = q_chol.l();

    let mut objects = Vec::with_capacity(cfg.objects.len());
    for (label, sched) in cfg.objects.iter().enumerate() {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = angle.sin_cos();
        let mut x = StateVector::new(
            cfg.circle_radius * cos,
            cfg.circle_radius * sin,
            cfg.start_depth,
            -cfg.horizontal_speed * cos,
            -cfg.horizontal_speed * sin,
            cfg.vertical_speed,
        );
        let mut states = Vec::with_capacity(sched.death - sched.birth + 1);
        for k in sched.birth..=sched.death {
            if k > sched.birth {
                let mut noise = StateVector::zeros();
                for i in 0..6 {
                    noise[i] = rng.sample(StandardNormal);
                }
                x = motion.g * x + q_l * noise;
            }
            for axis in 0..3 {
                if x[axis] < cfg.roi_min[axis] || x[axis] > cfg.roi_max[axis] {
                    eprintln!(
                        "warning: object {label} left the region of interest at step {k} (axis {axis})"
                    );
                    break;
                }
            }
            states.push([x[0], x[1], x[2], x[3], x[4], x[5]]);
        }
        objects.push(TruthObject {
            label: label as u64,
            birth: sched.birth,
            death: sched.death,
            states,
        });
    }
    Ok(GroundTruth {
        format_version: FORMAT_VERSION,
        n_steps: cfg.n_steps,
        objects,
    })
}

/// Simulate the measurement record for a given truth: per step and sensor,
/// each alive object is detected with probability `p_d` and contributes a
/// noisy TDOA; a Poisson number of clutter values is drawn uniformly on the
/// feasible interval; the scan order is shuffled.
pub fn generate_measurements<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    truth: &GroundTruth,
    sensors: &[Sensor],
    rng: &mut R,
) -> Result<MeasurementData> {
    let mut steps = Vec::with_capacity(cfg.n_steps);
    for k in 1..=cfg.n_steps {
        let mut scans = Vec::with_capacity(sensors.len());
        for sensor in sensors {
            let half_width = sensor.support_half_width();
            let mut entries: Vec<(f64, Origin)> = Vec::new();
            for obj in &truth.objects {
                let Some(state) = obj.state_at(k) else { continue };
                if rng.gen_range(0.0..1.0) < cfg.p_d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let z = sensor.predict(&state)?[0] + noise * cfg.sigma_v;
                    entries.push((z.clamp(-half_width, half_width), Origin::Object(obj.label)));
                }
            }
            let poisson = Poisson::new(cfg.mu_fp)
                .map_err(|_| Error::InvalidArgument("mu_fp must be positive".into()))?;
            let n_fp = rng.sample(poisson) as usize;
            for _ in 0..n_fp {
                entries.push((
                    rng.gen_range(-half_width..half_width),
                    Origin::FalsePositive,
                ));
            }
            entries.shuffle(rng);
            let (values, origins) = entries.into_iter().unzip();
            scans.push(SensorScan { values, origins });
        }
        steps.push(scans);
    }
    Ok(MeasurementData {
        format_version: FORMAT_VERSION,
        sensors: sensors.to_vec(),
        model: ModelParams {
            p_d: cfg.p_d,
            mu_fp: cfg.mu_fp,
            mu_b: cfg.mu_b,
            sigma_w: cfg.sigma_w,
            p_survival: cfg.p_survival,
            sampling_period: cfg.sampling_period,
            roi_min: cfg.roi_min,
            roi_max: cfg.roi_max,
            velocity_birth_std: cfg.velocity_birth_std,
        },
        steps,
    })
}

/// Write a JSON value to disk (pretty-printed for inspectability).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text)
}

/// Read and deserialize a JSON file, rejecting unknown fields.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {e}", path.display()),
        )
    })
}
