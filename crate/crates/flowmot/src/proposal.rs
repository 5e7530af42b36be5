//! Proposal strategies for measurement-conditioned particle sets.
//!
//! Every tracker variant reduces to the same importance-sampling skeleton:
//! per (kernel, measurement) hypothesis, produce particles `x_i` from some
//! proposal `q` together with the ratio `prior(x_i) / q(x_i)`. The particle
//! flow, the plain prior proposal, and the unscented Gaussian proposal are
//! interchangeable behind that interface.

use std::sync::Arc;

use nalgebra::SVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{migrate_particles, LambdaSchedule};
use crate::measurement::MeasurementModel;
use crate::model::{
    default_jitter, spd_regularize, GaussianKernel, KernelChol, StateVector, STATE_DIM,
};

/// How measurement-conditioned particles are proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMethod {
    /// Invertible particle flow toward the measurement.
    Flow,
    /// Leave the prior particles unmoved (bootstrap proposal).
    Prior,
    /// Sample from an unscented-update Gaussian approximation of the
    /// single-measurement posterior.
    Unscented,
}

/// Unscented transform parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Unscented measurement update of a Gaussian kernel: sigma points through
/// `h`, then the standard Kalman correction built from unscented moments.
/// Exact for linear models.
pub fn ut_update<const D: usize, M: MeasurementModel<D>>(
    kernel: &GaussianKernel,
    z: &SVector<f64, D>,
    model: &M,
    params: &UtParams,
) -> Result<GaussianKernel> {
    let n = STATE_DIM as f64;
    let lambda = params.alpha * params.alpha * (n + params.kappa) - n;
    let scale = (n + lambda).sqrt();
    if !(scale.is_finite()) || n + lambda <= 0.0 {
        return Err(Error::InvalidArgument("invalid unscented parameters".into()));
    }
    let cov = spd_regularize(&kernel.cov, default_jitter(&kernel.cov))?;
    let l = cov.cholesky().ok_or(Error::StillSingular)?.l();

    let mut sigma = Vec::with_capacity(2 * STATE_DIM + 1);
    sigma.push(kernel.mean);
    for i in 0..STATE_DIM {
        let col: StateVector = l.column(i).into_owned() * scale;
        sigma.push(kernel.mean + col);
        sigma.push(kernel.mean - col);
    }
    let w_mean_0 = lambda / (n + lambda);
    let w_cov_0 = w_mean_0 + 1.0 - params.alpha * params.alpha + params.beta;
    let w_i = 0.5 / (n + lambda);

    let preds: Vec<SVector<f64, D>> = sigma
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<_>>()?;
    let mut z_bar = preds[0] * w_mean_0;
    for p in preds.iter().skip(1) {
        z_bar += p * w_i;
    }
    let mut s = model.noise_cov();
    let mut p_xz = nalgebra::SMatrix::<f64, STATE_DIM, D>::zeros();
    for (idx, (x, p)) in sigma.iter().zip(&preds).enumerate() {
        let w = if idx == 0 { w_cov_0 } else { w_i };
        let dz = p - z_bar;
        let dx = x - kernel.mean;
        s += dz * dz.transpose() * w;
        p_xz += dx * dz.transpose() * w;
    }
    let s_inv = s
        .try_inverse()
        .ok_or(Error::SingularInnovation { lambda: 1.0 })?;
    let gain = p_xz * s_inv;
    let mean = kernel.mean + gain * (z - z_bar);
    let cov = kernel.cov - gain * s * gain.transpose();
    let cov = spd_regularize(&cov, default_jitter(&cov))?;
    Ok(GaussianKernel { mean, cov })
}

/// Particles proposed for one (kernel, measurement) hypothesis plus the
/// per-particle ratio `prior(x) / q(x)` (with the flow's mapping factor
/// folded in for the flow proposal).
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    /// Shared so the prior proposal can hand the same unmoved set to every
    /// hypothesis without copying.
    pub particles: Arc<Vec<StateVector>>,
    pub prior_ratio: Vec<f64>,
    /// True when the requested proposal failed numerically and the unmoved
    /// prior particles were used instead.
    pub fell_back: bool,
}

/// Build the proposal for one hypothesis. `x0` are particles already drawn
/// from `kernel`; `chol` is its cached factor. Flow and unscented failures
/// fall back to the unmoved prior particles (ratio 1), which is always a
/// valid, if uninformative, proposal.
pub fn propose<const D: usize, M: MeasurementModel<D>, R: Rng + ?Sized>(
    kernel: &GaussianKernel,
    chol: &KernelChol,
    x0: &Arc<Vec<StateVector>>,
    z: &SVector<f64, D>,
    model: &M,
    schedule: &LambdaSchedule,
    method: ProposalMethod,
    ut: &UtParams,
    rng: &mut R,
) -> Result<HypothesisSet> {
    let prior_fallback = || HypothesisSet {
        particles: Arc::clone(x0),
        prior_ratio: vec![1.0; x0.len()],
        fell_back: true,
    };
    match method {
        ProposalMethod::Prior => Ok(HypothesisSet {
            particles: Arc::clone(x0),
            prior_ratio: vec![1.0; x0.len()],
            fell_back: false,
        }),
        ProposalMethod::Flow => match migrate_particles(x0, kernel, chol, z, model, schedule) {
            Ok(out) => Ok(HypothesisSet {
                particles: Arc::new(out.particles),
                prior_ratio: out.prior_ratio,
                fell_back: false,
            }),
            Err(
                Error::SingularInnovation { .. }
                | Error::NonInvertibleStep { .. }
                | Error::NonFiniteParticle
                | Error::DegenerateGeometry { .. },
            ) => Ok(prior_fallback()),
            Err(e) => Err(e),
        },
        ProposalMethod::Unscented => {
            let proposal = match ut_update(kernel, z, model, ut) {
                Ok(p) => p,
                Err(
                    Error::SingularInnovation { .. }
                    | Error::StillSingular
                    | Error::DegenerateGeometry { .. },
                ) => return Ok(prior_fallback()),
                Err(e) => return Err(e),
            };
            let q_chol = KernelChol::new(&proposal)?;
            let mut particles = Vec::with_capacity(x0.len());
            let mut prior_ratio = Vec::with_capacity(x0.len());
            for _ in 0..x0.len() {
                let x = q_chol.sample(rng);
                let ratio = (chol.log_pdf(&x) - q_chol.log_pdf(&x)).exp();
                particles.push(x);
                prior_ratio.push(ratio);
            }
            Ok(HypothesisSet {
                particles: Arc::new(particles),
                prior_ratio,
                fell_back: false,
            })
        }
    }
}
