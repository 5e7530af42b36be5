//! Gaussian-mixture particle flow: run the invertible flow once per mixture
//! kernel, moment-match each migrated set back to a Gaussian, and resample
//! kernels from the pooled particle weights so the mixture re-concentrates
//! where the posterior mass is.

use std::sync::Arc;

use nalgebra::SVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{gaussian_representation, invertible_flow, LambdaSchedule, WeightedParticleSet};
use crate::measurement::MeasurementModel;
use crate::model::{
    default_jitter, spd_regularize, Covariance, GaussianKernel, GmmBelief, StateVector,
};

/// One weighted particle group feeding kernel resampling, tagged with the
/// kernel whose Gaussian representation its particles inherit.
#[derive(Debug, Clone)]
pub struct KernelGroup {
    pub kernel: usize,
    pub particles: Arc<Vec<StateVector>>,
    pub weights: Vec<f64>,
}

/// Flow results awaiting kernel resampling: the Gaussian representation of
/// each kernel plus the weighted particle groups the resampler draws from.
/// A kernel may own several groups (one per association hypothesis).
#[derive(Debug, Clone)]
pub struct WeightedKernelSet {
    pub kernels: Vec<GaussianKernel>,
    pub groups: Vec<KernelGroup>,
}

/// Systematic resampling: `n_out` indices into `weights` (not necessarily
/// normalized) using a single uniform offset, so the draw is low-variance and
/// cheap to make deterministic.
pub fn systematic_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let offset: f64 = rng.gen_range(0.0..1.0);
    let mut indices = Vec::with_capacity(n_out);
    let mut cum = 0.0;
    let mut i = 0usize;
    for k in 0..n_out {
        let target = (k as f64 + offset) / n_out as f64 * total;
        while cum + weights[i] < target && i + 1 < weights.len() {
            cum += weights[i];
            i += 1;
        }
        indices.push(i);
    }
    Ok(indices)
}

/// Resample a mixture back to `n_out` kernels. Each draw picks one particle
/// from the pooled, globally normalized weights; the new kernel is centered
/// at that particle and inherits the covariance of the kernel the particle
/// came from.
pub fn resample_kernels<R: Rng + ?Sized>(
    set: &WeightedKernelSet,
    n_out: usize,
    rng: &mut R,
) -> Result<GmmBelief> {
    if set.kernels.is_empty() || set.groups.is_empty() {
        return Err(Error::InvalidArgument(
            "kernel set needs kernels and particle groups".into(),
        ));
    }
    for g in &set.groups {
        if g.kernel >= set.kernels.len() || g.particles.len() != g.weights.len() {
            return Err(Error::InvalidArgument(
                "kernel group indices and lengths must be consistent".into(),
            ));
        }
    }
    // Flatten (group, particle) pairs preserving order.
    let mut flat_weights = Vec::new();
    let mut owner = Vec::new();
    for (g_idx, g) in set.groups.iter().enumerate() {
        for (i, w) in g.weights.iter().enumerate() {
            flat_weights.push(*w);
            owner.push((g_idx, i));
        }
    }
    let picks = systematic_indices(&flat_weights, n_out, rng)?;
    let kernels = picks
        .into_iter()
        .map(|flat| {
            let (g_idx, i) = owner[flat];
            let g = &set.groups[g_idx];
            GaussianKernel {
                mean: g.particles[i],
                cov: set.kernels[g.kernel].cov,
            }
        })
        .collect();
    Ok(GmmBelief { kernels })
}

/// Linearized (extended Kalman) posterior covariance
/// `P - P H' (H P H' + R)^-1 H P` with `H` evaluated at `lin_point`. Used in
/// place of a sample covariance when a kernel carries a single particle.
pub fn ekf_posterior_cov<const D: usize, M: MeasurementModel<D>>(
    prior_cov: &Covariance,
    lin_point: &StateVector,
    model: &M,
) -> Result<Covariance> {
    let h = model.jacobian(lin_point)?;
    let ph_t = prior_cov * h.transpose();
    let s = h * ph_t + model.noise_cov();
    let s_inv = s
        .try_inverse()
        .ok_or(Error::SingularInnovation { lambda: 1.0 })?;
    let post = prior_cov - ph_t * s_inv * ph_t.transpose();
    spd_regularize(&post, default_jitter(&post))
}

/// Single-measurement Gaussian-mixture flow update: flow every kernel toward
/// `z`, represent each migrated set as a Gaussian, then resample back to the
/// input number of kernels from the pooled weights.
pub fn invertible_flow_gmm<const D: usize, M: MeasurementModel<D>, R: Rng + ?Sized>(
    belief: &GmmBelief,
    z: &SVector<f64, D>,
    model: &M,
    n_particles: usize,
    schedule: &LambdaSchedule,
    rng: &mut R,
) -> Result<GmmBelief> {
    if belief.kernels.is_empty() {
        return Err(Error::InvalidArgument("belief has no kernels".into()));
    }
    let mut kernels = Vec::with_capacity(belief.kernels.len());
    let mut groups = Vec::with_capacity(belief.kernels.len());
    for (h, kernel) in belief.kernels.iter().enumerate() {
        let set = invertible_flow(kernel, z, model, n_particles, schedule, rng)?;
        let rep = if n_particles == 1 {
            // One particle has no sample covariance; carry the prior
            // covariance through a linearized measurement update instead.
            GaussianKernel {
                mean: set.particles[0],
                cov: ekf_posterior_cov(&kernel.cov, &set.particles[0], model)?,
            }
        } else {
            gaussian_representation(&set)?
        };
        kernels.push(rep);
        let WeightedParticleSet {
            particles: p,
            weights: w,
        } = set;
        groups.push(KernelGroup {
            kernel: h,
            particles: Arc::new(p),
            weights: w,
        });
    }
    resample_kernels(
        &WeightedKernelSet { kernels, groups },
        belief.kernels.len(),
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::LinearModel;
    use crate::model::gmm_point_estimate;
    use nalgebra::SMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar_model() -> LinearModel<1> {
        LinearModel {
            h: SMatrix::<f64, 1, 6>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            r: SMatrix::<f64, 1, 1>::new(1.0),
        }
    }

    #[test]
    fn systematic_resampling_is_proportional() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let idx = systematic_indices(&weights, 1000, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for i in idx {
            counts[i] += 1;
        }
        // Systematic resampling pins counts to within one of n * w.
        assert!((counts[0] as i64 - 100).abs() <= 1);
        assert!((counts[3] as i64 - 400).abs() <= 1);
    }

    #[test]
    fn resample_preserves_kernel_count_request() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let kernel = GaussianKernel {
            mean: StateVector::zeros(),
            cov: Covariance::identity(),
        };
        let set = WeightedKernelSet {
            kernels: vec![kernel.clone(), kernel],
            groups: vec![
                KernelGroup {
                    kernel: 0,
                    particles: Arc::new(vec![StateVector::repeat(1.0)]),
                    weights: vec![0.0],
                },
                KernelGroup {
                    kernel: 1,
                    particles: Arc::new(vec![StateVector::repeat(2.0)]),
                    weights: vec![1.0],
                },
            ],
        };
        let out = resample_kernels(&set, 5, &mut rng).unwrap();
        assert_eq!(out.kernels.len(), 5);
        // All mass on the second kernel's particle.
        for k in &out.kernels {
            assert_eq!(k.mean, StateVector::repeat(2.0));
        }
    }

    #[test]
    fn gmm_flow_concentrates_on_posterior() {
        // Two kernels at -2 and +2 in the measured coordinate; z = 2 with a
        // tight likelihood should collapse the mixture near +2's posterior.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = LinearModel {
            h: SMatrix::<f64, 1, 6>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            r: SMatrix::<f64, 1, 1>::new(0.25),
        };
        let mut mean_a = StateVector::zeros();
        mean_a[0] = -2.0;
        let mut mean_b = StateVector::zeros();
        mean_b[0] = 2.0;
        let belief = GmmBelief {
            kernels: vec![
                GaussianKernel {
                    mean: mean_a,
                    cov: Covariance::identity(),
                },
                GaussianKernel {
                    mean: mean_b,
                    cov: Covariance::identity(),
                },
            ],
        };
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let z = SVector::<f64, 1>::new(2.0);
        let post = invertible_flow_gmm(&belief, &z, &model, 200, &schedule, &mut rng).unwrap();
        assert_eq!(post.kernels.len(), 2);
        let est = gmm_point_estimate(&post).unwrap();
        // Kalman posterior mean for the +2 kernel is 2; the resampled kernel
        // means are posterior draws, so allow a few posterior standard
        // deviations around it.
        assert!((est[0] - 2.0).abs() < 1.2, "estimate {est}");
    }

    #[test]
    fn ekf_cov_matches_kalman_for_linear_model() {
        let model = scalar_model();
        let post = ekf_posterior_cov(&Covariance::identity(), &StateVector::zeros(), &model)
            .unwrap();
        // Scalar Kalman: P - P^2/(P+R) = 1 - 0.5 = 0.5 in the measured
        // coordinate, untouched elsewhere.
        assert!((post[(0, 0)] - 0.5).abs() < 1e-9);
        assert!((post[(1, 1)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_particle_kernels_use_ekf_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let belief = GmmBelief {
            kernels: vec![GaussianKernel {
                mean: StateVector::zeros(),
                cov: Covariance::identity(),
            }],
        };
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let z = SVector::<f64, 1>::new(0.5);
        let post =
            invertible_flow_gmm(&belief, &z, &scalar_model(), 1, &schedule, &mut rng).unwrap();
        assert!((post.kernels[0].cov[(0, 0)] - 0.5).abs() < 1e-6);
    }
}
