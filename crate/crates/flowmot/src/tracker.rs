//! The multisensor multiobject tracking filter.
//!
//! Per time step: one constant-velocity prediction, then for each sensor in
//! a fixed order a full measurement update — seed new potential objects from
//! the scan, evaluate legacy objects, pass association messages, update
//! existences and beliefs, and prune.

use std::sync::Arc;

use nalgebra::{Matrix6, Vector3};
use rand::Rng;

use crate::assoc::{evaluate_legacy, spa_da, update_legacy, AssocParams, EvaluationBlocks, ScalarLik};
use crate::error::{Error, Result};
use crate::flow::{gaussian_representation_pooled, LambdaSchedule};
use crate::gmm::{resample_kernels, KernelGroup, WeightedKernelSet};
use crate::measurement::MeasurementModel;
use crate::model::{
    gmm_point_estimate, Covariance, Estimate, GaussianKernel, GmmBelief, KernelChol,
    PotentialObject, StateVector,
};
use crate::proposal::{propose, ProposalMethod, UtParams};

/// Linear-Gaussian motion model `x' = G x + w`, `w ~ N(0, Q)`, with a
/// survival probability applied to existence at prediction time.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub g: Matrix6<f64>,
    pub q: Covariance,
    pub p_survival: f64,
}

impl MotionModel {
    /// Nearly constant-velocity model: per axis,
    /// `G = [[1, T], [0, 1]]`, `Q = sigma_w^2 [[T^3/3, T^2/2], [T^2/2, T]]`.
    pub fn constant_velocity(sigma_w: f64, dt: f64, p_survival: f64) -> Self {
        let mut g = Matrix6::identity();
        let mut q = Covariance::zeros();
        let s2 = sigma_w * sigma_w;
        for axis in 0..3 {
            let (pi, vi) = (axis, axis + 3);
            g[(pi, vi)] = dt;
            q[(pi, pi)] = s2 * dt.powi(3) / 3.0;
            q[(pi, vi)] = s2 * dt * dt / 2.0;
            q[(vi, pi)] = s2 * dt * dt / 2.0;
            q[(vi, vi)] = s2 * dt;
        }
        Self { g, q, p_survival }
    }
}

/// Birth prior: position uniform over a box region of interest, velocity
/// zero-mean Gaussian. New-object kernels are centered at draws from this
/// prior and carry its moment-matched covariance.
#[derive(Debug, Clone)]
pub struct BirthModel {
    pub roi_min: Vector3<f64>,
    pub roi_max: Vector3<f64>,
    /// Mean number of new objects per sensor scan (`mu_b`).
    pub mean_births: f64,
    /// Standard deviation of each birth velocity component.
    pub velocity_std: f64,
    /// Multiplier on the birth kernel covariance (1 = moment matched).
    pub cov_scale: f64,
}

impl BirthModel {
    /// Moment-matched kernel covariance: `range^2 / 12` per position axis
    /// (the variance of the uniform), `velocity_std^2` per velocity axis.
    pub fn kernel_cov(&self) -> Covariance {
        let mut cov = Covariance::zeros();
        for axis in 0..3 {
            let range = self.roi_max[axis] - self.roi_min[axis];
            cov[(axis, axis)] = range * range / 12.0 * self.cov_scale;
            cov[(axis + 3, axis + 3)] = self.velocity_std * self.velocity_std * self.cov_scale;
        }
        cov
    }

    /// Draw one kernel mean from the birth prior.
    pub fn sample_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        use rand_distr::StandardNormal;
        let mut x = StateVector::zeros();
        for axis in 0..3 {
            x[axis] = rng.gen_range(self.roi_min[axis]..self.roi_max[axis]);
            let n: f64 = rng.sample(StandardNormal);
            x[axis + 3] = n * self.velocity_std;
        }
        x
    }
}

/// Which proposal each stage of a tracker variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodProposals {
    pub new_objects: ProposalMethod,
    pub legacy: ProposalMethod,
}

/// Resolved tracker settings (see the harness for the serialized config).
#[derive(Debug, Clone)]
pub struct TrackerSettings {
    pub proposals: MethodProposals,
    pub n_kernels: usize,
    pub n_particles_new: usize,
    pub n_particles_legacy: usize,
    pub schedule: LambdaSchedule,
    pub ut: UtParams,
    pub gate: Option<f64>,
    /// Declare-estimate threshold on existence (`P_th`).
    pub detection_threshold: f64,
    /// Pruning threshold on existence (`P_pr`).
    pub pruning_threshold: f64,
    pub weight_with_kappa: bool,
    pub spa_tolerance: f64,
    pub spa_max_iters: usize,
    pub p_d: f64,
    pub mu_fp: f64,
}

/// Mutable tracker state across steps.
#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    pub objects: Vec<PotentialObject>,
    next_label: u64,
}

impl TrackerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn fresh_label(&mut self) -> u64 {
        let label = self.next_label;
        self.next_label += 1;
        label
    }
}

/// Propagate every potential object one step through the motion model and
/// decay existence by the survival probability.
pub fn predict(state: &mut TrackerState, motion: &MotionModel) {
    for obj in &mut state.objects {
        for kernel in &mut obj.belief.kernels {
            kernel.mean = motion.g * kernel.mean;
            kernel.cov = motion.g * kernel.cov * motion.g.transpose() + motion.q;
        }
        obj.existence *= motion.p_survival;
    }
}

/// A freshly seeded potential object before association: its belief and the
/// measurement evidence `xi >= 1` (1 means "surely clutter").
#[derive(Debug)]
pub struct NewObjectSeed {
    pub belief: GmmBelief,
    pub xi: f64,
}

/// Seed one new potential object per measurement.
///
/// Kernels are drawn once from the birth prior and shared across the scan's
/// measurements. Per measurement, each kernel's particles are proposed
/// toward it; the pooled unnormalized weights give the evidence
/// `xi = 1 + mu_b / (N_k N_p mu_fp f_fp) * sum w`. If every proposal for a
/// measurement fails, that seed keeps the prior kernels with `xi = 1`.
pub fn new_objects<M: MeasurementModel<1>, R: Rng + ?Sized>(
    zs: &[f64],
    model: &M,
    fp_density: f64,
    birth: &BirthModel,
    settings: &TrackerSettings,
    rng: &mut R,
) -> Result<Vec<NewObjectSeed>> {
    let n_k = settings.n_kernels;
    let n_p = settings.n_particles_new;
    let cov = birth.kernel_cov();
    let birth_kernels: Vec<GaussianKernel> = (0..n_k)
        .map(|_| GaussianKernel {
            mean: birth.sample_mean(rng),
            cov,
        })
        .collect();
    let chols: Vec<KernelChol> = birth_kernels
        .iter()
        .map(KernelChol::new)
        .collect::<Result<_>>()?;
    // Particles too are drawn once per kernel and reused for every
    // measurement; proposals that leave them unmoved also reuse the cached
    // predicted measurements.
    let x0: Vec<Arc<Vec<StateVector>>> = chols
        .iter()
        .map(|c| Arc::new((0..n_p).map(|_| c.sample(rng)).collect()))
        .collect();
    let x0_preds: Vec<Arc<Vec<f64>>> = x0
        .iter()
        .map(|particles| {
            Ok(Arc::new(
                particles
                    .iter()
                    .map(|x| Ok(model.predict(x)?[0]))
                    .collect::<Result<Vec<f64>>>()?,
            ))
        })
        .collect::<Result<_>>()?;
    let lik = ScalarLik::new(model);

    let mut seeds = Vec::with_capacity(zs.len());
    for &z in zs {
        let zv = nalgebra::SVector::<f64, 1>::new(z);
        let mut reps = Vec::with_capacity(n_k);
        let mut groups = Vec::with_capacity(n_k);
        let mut weight_sum = 0.0;
        for (h, (kernel, chol)) in birth_kernels.iter().zip(&chols).enumerate() {
            let hyp = propose(
                kernel,
                chol,
                &x0[h],
                &zv,
                model,
                &settings.schedule,
                settings.proposals.new_objects,
                &settings.ut,
                rng,
            )?;
            let preds = if Arc::ptr_eq(&hyp.particles, &x0[h]) {
                Arc::clone(&x0_preds[h])
            } else {
                Arc::new(
                    hyp.particles
                        .iter()
                        .map(|x| Ok(model.predict(x)?[0]))
                        .collect::<Result<Vec<f64>>>()?,
                )
            };
            let mut w = Vec::with_capacity(n_p);
            let mut total = 0.0;
            for (pred, ratio) in preds.iter().zip(&hyp.prior_ratio) {
                let wi = ratio * lik.eval(z - pred);
                total += wi;
                w.push(wi);
            }
            if total > 0.0 && total.is_finite() {
                weight_sum += total;
                reps.push(gaussian_representation_pooled(&[(
                    hyp.particles.as_slice(),
                    w.as_slice(),
                )])?);
                groups.push(KernelGroup {
                    kernel: h,
                    particles: hyp.particles,
                    weights: w,
                });
            } else {
                reps.push(kernel.clone());
                groups.push(KernelGroup {
                    kernel: h,
                    particles: Arc::new(vec![kernel.mean]),
                    weights: vec![0.0],
                });
            }
        }

        let xi = 1.0
            + birth.mean_births / (n_k as f64 * n_p as f64 * settings.mu_fp * fp_density)
                * weight_sum;
        let belief = if weight_sum > 0.0 && weight_sum.is_finite() {
            resample_kernels(&WeightedKernelSet { kernels: reps, groups }, n_k, rng)?
        } else {
            GmmBelief {
                kernels: birth_kernels.clone(),
            }
        };
        seeds.push(NewObjectSeed {
            belief,
            xi: if xi.is_finite() { xi } else { 1.0 },
        });
    }
    Ok(seeds)
}

/// Remove potential objects whose existence fell below the pruning
/// threshold.
pub fn prune(state: &mut TrackerState, threshold: f64) {
    state.objects.retain(|o| o.existence >= threshold);
}

/// One full measurement update for one sensor: seed new objects, evaluate
/// legacy objects, run association message passing, update, append, prune.
pub fn single_sensor_update<M: MeasurementModel<1>, R: Rng + ?Sized>(
    state: &mut TrackerState,
    zs: &[f64],
    model: &M,
    fp_density: f64,
    birth: &BirthModel,
    settings: &TrackerSettings,
    step: usize,
    sensor_idx: usize,
    rng: &mut R,
) -> Result<()> {
    let seeds = new_objects(zs, model, fp_density, birth, settings, rng)?;

    let assoc_params = AssocParams {
        p_d: settings.p_d,
        mu_fp: settings.mu_fp,
        fp_density,
        n_particles: settings.n_particles_legacy,
        schedule: &settings.schedule,
        method: settings.proposals.legacy,
        ut: settings.ut,
        gate: settings.gate,
        weight_with_kappa: settings.weight_with_kappa,
    };

    let mut evals: Vec<EvaluationBlocks> = Vec::with_capacity(state.objects.len());
    for obj in &state.objects {
        evals.push(evaluate_legacy(
            &obj.belief,
            obj.existence,
            zs,
            model,
            &assoc_params,
            rng,
        )?);
    }

    let betas: Vec<Vec<f64>> = evals.iter().map(|e| e.beta.clone()).collect();
    let xis: Vec<f64> = seeds.iter().map(|s| s.xi).collect();
    let messages = spa_da(&betas, &xis, settings.spa_tolerance, settings.spa_max_iters);

    for (j, eval) in evals.iter().enumerate() {
        let obj = &mut state.objects[j];
        let (belief, existence) = update_legacy(
            eval,
            &messages.kappa[j],
            zs,
            model,
            &assoc_params,
            &obj.belief,
            settings.n_kernels,
            rng,
        )?;
        obj.belief = belief;
        obj.existence = existence;
    }

    for (seed, &iota) in seeds.into_iter().zip(&messages.iota) {
        let detected_mass = (seed.xi - 1.0) * iota;
        let existence = detected_mass / (detected_mass + 1.0);
        let label = state.fresh_label();
        state.objects.push(PotentialObject {
            label,
            belief: seed.belief,
            existence,
            birth_time: step,
            birth_sensor: sensor_idx,
        });
    }

    prune(state, settings.pruning_threshold);
    Ok(())
}

/// One full time step: predict once, then apply every sensor's scan in
/// order. `scans[s]` holds sensor `s`'s measurements for this step.
#[allow(clippy::too_many_arguments)]
pub fn multisensor_step<M: MeasurementModel<1>, R: Rng + ?Sized>(
    state: &mut TrackerState,
    scans: &[Vec<f64>],
    models: &[M],
    fp_densities: &[f64],
    motion: &MotionModel,
    birth: &BirthModel,
    settings: &TrackerSettings,
    step: usize,
    rng: &mut R,
) -> Result<()> {
    if scans.len() != models.len() || scans.len() != fp_densities.len() {
        return Err(Error::InvalidArgument(
            "scans, models, and fp densities must align".into(),
        ));
    }
    predict(state, motion);
    for (s, scan) in scans.iter().enumerate() {
        single_sensor_update(
            state,
            scan,
            &models[s],
            fp_densities[s],
            birth,
            settings,
            step,
            s,
            rng,
        )?;
    }
    Ok(())
}

/// Declared estimates: every potential object whose existence exceeds the
/// detection threshold, at its mixture point estimate.
pub fn extract_estimates(state: &TrackerState, threshold: f64) -> Result<Vec<Estimate>> {
    let mut out = Vec::new();
    for obj in &state.objects {
        if obj.existence > threshold {
            let x = gmm_point_estimate(&obj.belief)?;
            out.push(Estimate {
                label: obj.label,
                state: [x[0], x[1], x[2], x[3], x[4], x[5]],
                existence: obj.existence,
            });
        }
    }
    Ok(out)
}
