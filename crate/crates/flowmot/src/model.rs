//! Core state types: 6-D object states, Gaussian kernels and Gaussian-mixture
//! beliefs, potential objects, and the small linear-algebra helpers
//! (regularization, Gaussian densities) everything else builds on.
//!
//! An object state is `[p1, p2, p3, v1, v2, v3]`: position followed by
//! velocity, in meters and meters per second.

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object kinematic state: position stacked over velocity.
pub type StateVector = Vector6<f64>;

/// 6x6 state covariance.
pub type Covariance = Matrix6<f64>;

pub const STATE_DIM: usize = 6;

const LOG_TWO_PI: f64 = 1.837877066409345483560659472811;

/// One Gaussian kernel of a mixture belief. Mixture weights are uniform and
/// implicit: a belief with `n` kernels weights each by `1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub mean: StateVector,
    pub cov: Covariance,
}

/// Equally weighted Gaussian-mixture belief over an object state.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBelief {
    pub kernels: Vec<GaussianKernel>,
}

/// A potential object: a labelled Bernoulli component with existence
/// probability and a mixture belief over its state conditioned on existence.
#[derive(Debug, Clone)]
pub struct PotentialObject {
    pub label: u64,
    pub belief: GmmBelief,
    pub existence: f64,
    /// Time step (1-based) at which this potential object was introduced.
    pub birth_time: usize,
    /// Index of the sensor whose update introduced it.
    pub birth_sensor: usize,
}

/// A declared object estimate extracted from a potential object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub label: u64,
    pub state: [f64; 6],
    pub existence: f64,
}

impl Estimate {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.state[0], self.state[1], self.state[2])
    }
}

/// Default diagonal jitter for a covariance: `1e-9 * mean diagonal`, floored
/// at `1e-12` so that a rank-deficient (or single-particle) covariance still
/// regularizes to something positive definite.
pub fn default_jitter(cov: &Covariance) -> f64 {
    (1e-9 * cov.trace() / STATE_DIM as f64).max(1e-12)
}

/// Symmetrize `cov` and add `jitter` to the diagonal. Fails with
/// [`Error::StillSingular`] if the result is still not positive definite.
pub fn spd_regularize(cov: &Covariance, jitter: f64) -> Result<Covariance> {
    let mut sym = 0.5 * (cov + cov.transpose());
    for i in 0..STATE_DIM {
        sym[(i, i)] += jitter;
    }
    // A Cholesky factorization is the positive-definiteness check.
    if sym.cholesky().is_none() {
        return Err(Error::StillSingular);
    }
    Ok(sym)
}

/// Cached Cholesky factor of a kernel, for repeated density evaluation and
/// sampling. `log_norm` is `-(d/2) log(2 pi) - log det L`.
#[derive(Debug, Clone)]
pub struct KernelChol {
    pub mean: StateVector,
    lower: Matrix6<f64>,
    log_norm: f64,
}

impl KernelChol {
    pub fn new(kernel: &GaussianKernel) -> Result<Self> {
        let cov = spd_regularize(&kernel.cov, default_jitter(&kernel.cov))?;
        let chol = cov.cholesky().ok_or(Error::StillSingular)?;
        let lower = chol.l();
        let mut log_det_l = 0.0;
        for i in 0..STATE_DIM {
            log_det_l += lower[(i, i)].ln();
        }
        Ok(Self {
            mean: kernel.mean,
            lower,
            log_norm: -0.5 * STATE_DIM as f64 * LOG_TWO_PI - log_det_l,
        })
    }

    /// Log density of `N(x; mean, cov)`.
    pub fn log_pdf(&self, x: &StateVector) -> f64 {
        let diff = x - self.mean;
        let y = self
            .lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }

    /// Draw one sample `mean + L * eps` with `eps` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        let mut eps = StateVector::zeros();
        for i in 0..STATE_DIM {
            eps[i] = rng.sample(StandardNormal);
        }
        self.mean + self.lower * eps
    }
}

/// Log density of a Gaussian kernel at `x`. For repeated evaluation against
/// the same kernel, factor once with [`KernelChol`] instead.
pub fn gaussian_logpdf(kernel: &GaussianKernel, x: &StateVector) -> Result<f64> {
    Ok(KernelChol::new(kernel)?.log_pdf(x))
}

/// Point estimate of a mixture belief: the unweighted mean of kernel means
/// (kernel weights are uniform).
pub fn gmm_point_estimate(belief: &GmmBelief) -> Result<StateVector> {
    if belief.kernels.is_empty() {
        return Err(Error::InvalidArgument("belief has no kernels".into()));
    }
    let mut mean = StateVector::zeros();
    for k in &belief.kernels {
        mean += k.mean;
    }
    Ok(mean / belief.kernels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn standard_normal_logpdf_at_origin() {
        let kernel = GaussianKernel {
            mean: StateVector::zeros(),
            cov: Covariance::identity(),
        };
        let lp = gaussian_logpdf(&kernel, &StateVector::zeros()).unwrap();
        // The density includes the regularization jitter, so the tolerance
        // sits above the 1e-9 diagonal floor.
        assert_relative_eq!(lp, -0.5 * 6.0 * LOG_TWO_PI, epsilon = 1e-7);
    }

    #[test]
    fn logpdf_translation_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cov = random_spd(&mut rng);
        for _ in 0..20 {
            let mean = random_state(&mut rng);
            let x = random_state(&mut rng);
            let shift = random_state(&mut rng);
            let k0 = GaussianKernel { mean, cov };
            let k1 = GaussianKernel {
                mean: mean + shift,
                cov,
            };
            let a = gaussian_logpdf(&k0, &x).unwrap();
            let b = gaussian_logpdf(&k1, &(x + shift)).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn spd_regularize_repairs_rank_deficiency() {
        let v = StateVector::new(1.0, 2.0, -1.0, 0.5, 0.0, 3.0);
        let rank_one = v * v.transpose();
        let fixed = spd_regularize(&rank_one, default_jitter(&rank_one)).unwrap();
        assert!(fixed.cholesky().is_some());
        // Symmetry of the output.
        assert_relative_eq!(fixed, fixed.transpose(), epsilon = 0.0);
    }

    #[test]
    fn spd_regularize_identity_plus_jitter() {
        let eye = Covariance::identity();
        let out = spd_regularize(&eye, 1e-6).unwrap();
        for i in 0..STATE_DIM {
            assert_relative_eq!(out[(i, i)], 1.0 + 1e-6, epsilon = 1e-15);
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mean = StateVector::new(1.0, -2.0, 0.5, 0.0, 4.0, -1.0);
        let mut cov = Covariance::identity() * 2.0;
        cov[(0, 1)] = 0.7;
        cov[(1, 0)] = 0.7;
        let chol = KernelChol::new(&GaussianKernel { mean, cov }).unwrap();
        let n = 200_000;
        let mut acc = StateVector::zeros();
        let mut acc01 = 0.0;
        for _ in 0..n {
            let x = chol.sample(&mut rng);
            acc += x;
            acc01 += (x[0] - mean[0]) * (x[1] - mean[1]);
        }
        let emp_mean = acc / n as f64;
        assert!((emp_mean - mean).norm() < 0.02);
        assert!((acc01 / n as f64 - 0.7).abs() < 0.03);
    }

    #[test]
    fn point_estimate_averages_kernel_means() {
        let belief = GmmBelief {
            kernels: vec![
                GaussianKernel {
                    mean: StateVector::repeat(1.0),
                    cov: Covariance::identity(),
                },
                GaussianKernel {
                    mean: StateVector::repeat(3.0),
                    cov: Covariance::identity(),
                },
            ],
        };
        let m = gmm_point_estimate(&belief).unwrap();
        assert_relative_eq!(m, StateVector::repeat(2.0), epsilon = 1e-14);
    }

    fn random_state(rng: &mut ChaCha12Rng) -> StateVector {
        StateVector::from_fn(|_, _| rng.gen_range(-3.0..3.0))
    }

    fn random_spd(rng: &mut ChaCha12Rng) -> Covariance {
        let a = Covariance::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        a * a.transpose() + Covariance::identity()
    }
}
