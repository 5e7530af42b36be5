//! Invertible particle flow.
//!
//! Particles drawn from a Gaussian prior are migrated in pseudo-time
//! `lambda in [0, 1]` by an affine drift `zeta(x, lambda) = A(lambda) x +
//! b(lambda)` whose parameters come from a linearized Gaussian update, using
//! an Euler discretization over a geometric step schedule. Because every
//! Euler step is an invertible affine map, the flow has a tractable Jacobian
//! determinant (the mapping factor), which turns the migrated particles into
//! a proper importance sample of the posterior.

use nalgebra::{Matrix6, SMatrix, SVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::measurement::MeasurementModel;
use crate::model::{
    default_jitter, spd_regularize, Covariance, GaussianKernel, KernelChol, StateVector,
};

/// Any Euler step whose migration matrix has |det| below this is treated as
/// numerically non-invertible.
pub const INVERTIBILITY_THRESHOLD: f64 = 1e-12;

/// Pseudo-time discretization of `[0, 1]`: `n_steps` strictly increasing
/// interior points ending exactly at 1.
#[derive(Debug, Clone)]
pub struct LambdaSchedule {
    /// `n_steps + 1` knots, starting at 0.0 and ending at 1.0.
    times: Vec<f64>,
}

impl LambdaSchedule {
    /// Geometric schedule: step lengths grow by `ratio`, so early steps (where
    /// the drift changes fastest) are short. `delta_1 = (r - 1) / (r^n - 1)`.
    pub fn geometric(n_steps: usize, ratio: f64) -> Result<Self> {
        if n_steps == 0 || !(ratio > 0.0) {
            return Err(Error::InvalidArgument(
                "schedule needs n_steps >= 1 and ratio > 0".into(),
            ));
        }
        let delta_1 = if (ratio - 1.0).abs() < 1e-12 {
            1.0 / n_steps as f64
        } else {
            (ratio - 1.0) / (ratio.powi(n_steps as i32) - 1.0)
        };
        let mut times = Vec::with_capacity(n_steps + 1);
        times.push(0.0);
        let mut acc = 0.0;
        let mut delta = delta_1;
        for _ in 0..n_steps {
            acc += delta;
            times.push(acc);
            delta *= ratio;
        }
        // Close the schedule at exactly 1 despite accumulation error.
        *times.last_mut().unwrap() = 1.0;
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Iterate over `(lambda_prev, lambda)` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Drift parameters of one flow step: `zeta(x) = A x + b`. `core` is the
/// measurement-space matrix `H P H' S^-1`; because `A = -1/2 P H' S^-1 H`
/// has rank at most `D`, `det(I + delta A) = det(I_D - delta/2 core)`, which
/// lets the step determinant be computed in measurement dimension.
#[derive(Debug, Clone)]
pub struct FlowParams<const D: usize> {
    pub a: Matrix6<f64>,
    pub b: StateVector,
    pub core: SMatrix<f64, D, D>,
}

/// Record of an executed flow, sufficient to compute the mapping factor and
/// to invert the flow exactly. `step_dets` caches `det(I + delta_l A_l)`
/// computed in measurement space during the flow; when absent the mapping
/// factor falls back to full state-space determinants.
#[derive(Debug, Clone, Default)]
pub struct FlowTrace {
    pub deltas: Vec<f64>,
    pub a_list: Vec<Matrix6<f64>>,
    pub b_list: Vec<StateVector>,
    pub step_dets: Vec<f64>,
}

/// Compute the drift parameters at pseudo-time `lambda`.
///
/// The measurement model is linearized at `lin_point` (the propagated prior
/// mean): `H = dh/dx(lin_point)`, `e = h(lin_point) - H lin_point`. Then
/// `A = -1/2 P H' (lambda H P H' + R)^-1 H` and
/// `b = (I + 2 lambda A) ((I + lambda A) P H' R^-1 (z - e) + A prior_mean)`.
pub fn flow_step_params<const D: usize, M: MeasurementModel<D>>(
    lin_point: &StateVector,
    prior_mean: &StateVector,
    prior_cov: &Covariance,
    z: &SVector<f64, D>,
    model: &M,
    lambda: f64,
) -> Result<FlowParams<D>> {
    let h = model.jacobian(lin_point)?;
    let e = model.predict(lin_point)? - h * lin_point;
    let r = model.noise_cov();

    let ph_t = prior_cov * h.transpose(); // 6 x D
    let s: SMatrix<f64, D, D> = h * ph_t * lambda + r;
    let s_inv = s
        .try_inverse()
        .ok_or(Error::SingularInnovation { lambda })?;
    let r_inv = r
        .try_inverse()
        .ok_or(Error::SingularInnovation { lambda })?;

    let a = -0.5 * ph_t * s_inv * h;
    let eye = Matrix6::identity();
    let inner = (eye + lambda * a) * (ph_t * (r_inv * (z - e))) + a * prior_mean;
    let b = (eye + 2.0 * lambda * a) * inner;
    let core = h * ph_t * s_inv;
    Ok(FlowParams { a, b, core })
}

/// Determinant of a small square matrix without trait-bound gymnastics on
/// the const dimension. Closed forms up to 3x3, LU via a dynamic matrix
/// beyond that.
fn det_small<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => nalgebra::DMatrix::from_iterator(D, D, m.iter().copied()).determinant(),
    }
}

/// Migrate `particles` from the prior to the posterior.
///
/// The linearization point starts at the prior mean and is migrated through
/// the same affine steps as the particles, so the model is always linearized
/// where the bulk of the ensemble currently sits. Returns the migrated
/// particles, the trace (for the mapping factor and inversion), and the
/// migrated linearization mean.
pub fn particle_flow<const D: usize, M: MeasurementModel<D>>(
    particles: &[StateVector],
    prior: &GaussianKernel,
    z: &SVector<f64, D>,
    model: &M,
    schedule: &LambdaSchedule,
) -> Result<(Vec<StateVector>, FlowTrace, StateVector)> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    let mut xs = particles.to_vec();
    let mut lin = prior.mean;
    let mut trace = FlowTrace::default();
    for (lambda_prev, lambda) in schedule.steps() {
        let delta = lambda - lambda_prev;
        let params = flow_step_params(&lin, &prior.mean, &prior.cov, z, model, lambda)?;
        for x in xs.iter_mut() {
            *x += (params.a * *x + params.b) * delta;
        }
        lin += (params.a * lin + params.b) * delta;
        trace.deltas.push(delta);
        trace
            .step_dets
            .push(det_small(
                &(SMatrix::<f64, D, D>::identity() - params.core * (0.5 * delta)),
            ));
        trace.a_list.push(params.a);
        trace.b_list.push(params.b);
    }
    for x in &xs {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteParticle);
        }
    }
    Ok((xs, trace, lin))
}

/// Absolute Jacobian determinant of the whole flow:
/// `theta = prod_l |det(I + delta_l A_l)|`.
///
/// Fails with [`Error::NonInvertibleStep`] if any single step's determinant
/// magnitude falls below [`INVERTIBILITY_THRESHOLD`].
pub fn mapping_factor(trace: &FlowTrace) -> Result<f64> {
    let mut theta = 1.0;
    if trace.step_dets.len() == trace.deltas.len() {
        for &det in &trace.step_dets {
            let det_abs = det.abs();
            if det_abs < INVERTIBILITY_THRESHOLD {
                return Err(Error::NonInvertibleStep { det_abs });
            }
            theta *= det_abs;
        }
        return Ok(theta);
    }
    for (a, &delta) in trace.a_list.iter().zip(&trace.deltas) {
        let det_abs = (Matrix6::identity() + *a * delta).determinant().abs();
        if det_abs < INVERTIBILITY_THRESHOLD {
            return Err(Error::NonInvertibleStep { det_abs });
        }
        theta *= det_abs;
    }
    Ok(theta)
}

/// Invert a flow exactly: map endpoint particles back to their starting
/// points by unwinding each affine step, `x_prev = (I + delta A)^-1 (x -
/// delta b)`.
pub fn reverse_flow(endpoints: &[StateVector], trace: &FlowTrace) -> Result<Vec<StateVector>> {
    let mut xs = endpoints.to_vec();
    for ((a, b), &delta) in trace
        .a_list
        .iter()
        .zip(&trace.b_list)
        .zip(&trace.deltas)
        .rev()
    {
        let step = Matrix6::identity() + *a * delta;
        let inv = step.try_inverse().ok_or(Error::NonInvertibleStep {
            det_abs: step.determinant().abs(),
        })?;
        for x in xs.iter_mut() {
            *x = inv * (*x - *b * delta);
        }
    }
    Ok(xs)
}

/// Particles with unnormalized importance weights.
#[derive(Debug, Clone)]
pub struct WeightedParticleSet {
    pub particles: Vec<StateVector>,
    pub weights: Vec<f64>,
}

/// Result of migrating an existing particle set through one flow: endpoint
/// particles plus the per-particle prior-over-proposal ratio
/// `N(x_1; prior) * theta / N(x_0; prior)` shared by every importance weight
/// built on this flow.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub particles: Vec<StateVector>,
    pub prior_ratio: Vec<f64>,
    pub theta: f64,
    pub end_mean: StateVector,
}

/// Run the flow on particles already drawn from `prior` (whose Cholesky
/// factor `chol` the caller has cached) and compute the prior-over-proposal
/// density ratios.
pub fn migrate_particles<const D: usize, M: MeasurementModel<D>>(
    x0: &[StateVector],
    prior: &GaussianKernel,
    chol: &KernelChol,
    z: &SVector<f64, D>,
    model: &M,
    schedule: &LambdaSchedule,
) -> Result<FlowOutput> {
    let (x1, trace, end_mean) = particle_flow(x0, prior, z, model, schedule)?;
    let theta = mapping_factor(&trace)?;
    let log_theta = theta.ln();
    let mut prior_ratio = Vec::with_capacity(x0.len());
    for (a, b) in x0.iter().zip(&x1) {
        let lw = chol.log_pdf(b) + log_theta - chol.log_pdf(a);
        prior_ratio.push(lw.exp());
    }
    Ok(FlowOutput {
        particles: x1,
        prior_ratio,
        theta,
        end_mean,
    })
}

/// Draw `n_particles` from the prior kernel, flow them toward `z`, and weight
/// them as a posterior importance sample:
/// `w_i = theta * f(z | x_1) * N(x_1; prior) / N(x_0; prior)`.
///
/// The mean of the unnormalized weights is an estimate of the evidence
/// `f(z)`; the normalized set represents the single-measurement posterior.
pub fn invertible_flow<const D: usize, M: MeasurementModel<D>, R: Rng + ?Sized>(
    prior: &GaussianKernel,
    z: &SVector<f64, D>,
    model: &M,
    n_particles: usize,
    schedule: &LambdaSchedule,
    rng: &mut R,
) -> Result<WeightedParticleSet> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("n_particles must be >= 1".into()));
    }
    let chol = KernelChol::new(prior)?;
    let x0: Vec<StateVector> = (0..n_particles).map(|_| chol.sample(rng)).collect();
    let out = migrate_particles(&x0, prior, &chol, z, model, schedule)?;
    let mut weights = Vec::with_capacity(n_particles);
    for (x, ratio) in out.particles.iter().zip(&out.prior_ratio) {
        weights.push(ratio * model.likelihood(z, x)?);
    }
    if !weights.iter().any(|w| *w > 0.0) || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok(WeightedParticleSet {
        particles: out.particles,
        weights,
    })
}

/// Moment-match a weighted particle set to a single Gaussian kernel: the
/// normalized weighted mean and covariance. A covariance that is rank
/// deficient (for example from a single particle) is regularized to a small
/// positive definite matrix.
pub fn gaussian_representation(set: &WeightedParticleSet) -> Result<GaussianKernel> {
    gaussian_representation_pooled(&[(&set.particles, &set.weights)])
}

/// [`gaussian_representation`] over several particle/weight groups pooled
/// into one set, without concatenating them.
pub fn gaussian_representation_pooled(
    groups: &[(&[StateVector], &[f64])],
) -> Result<GaussianKernel> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (particles, weights) in groups {
        if particles.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "particle/weight lengths must match and be nonzero".into(),
            ));
        }
        n += particles.len();
        total += weights.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "particle/weight lengths must match and be nonzero".into(),
        ));
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    // Zero-weight particles contribute nothing; skipping them keeps the
    // loops proportional to the surviving support.
    let mut mean = StateVector::zeros();
    for (particles, weights) in groups {
        for (x, w) in particles.iter().zip(*weights) {
            if *w != 0.0 {
                mean += *x * (*w / total);
            }
        }
    }
    let mut cov = Covariance::zeros();
    for (particles, weights) in groups {
        for (x, w) in particles.iter().zip(*weights) {
            if *w != 0.0 {
                let d = x - mean;
                cov += (d * d.transpose()) * (*w / total);
            }
        }
    }
    let cov = spd_regularize(&cov, default_jitter(&cov))?;
    Ok(GaussianKernel { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::LinearModel;
    use approx::assert_relative_eq;
    use nalgebra::SMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar_model(r: f64) -> LinearModel<1> {
        LinearModel {
            h: SMatrix::<f64, 1, 6>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            r: SMatrix::<f64, 1, 1>::new(r),
        }
    }

    fn unit_prior() -> GaussianKernel {
        GaussianKernel {
            mean: StateVector::zeros(),
            cov: Covariance::identity(),
        }
    }

    #[test]
    fn geometric_schedule_shape() {
        let s = LambdaSchedule::geometric(20, 1.2).unwrap();
        assert_eq!(s.n_steps(), 20);
        let (first_prev, first) = s.steps().next().unwrap();
        assert_eq!(first_prev, 0.0);
        // delta_1 = (r - 1) / (r^20 - 1)
        assert_relative_eq!(first, 0.2 / (1.2f64.powi(20) - 1.0), epsilon = 1e-12);
        let last = s.steps().last().unwrap().1;
        assert_eq!(last, 1.0);
        // Strictly increasing, each step r times the previous.
        let deltas: Vec<f64> = s.steps().map(|(a, b)| b - a).collect();
        for w in deltas.windows(2) {
            assert_relative_eq!(w[1] / w[0], 1.2, epsilon = 1e-6);
        }
    }

    #[test]
    fn uniform_schedule_when_ratio_one() {
        let s = LambdaSchedule::geometric(4, 1.0).unwrap();
        let deltas: Vec<f64> = s.steps().map(|(a, b)| b - a).collect();
        for d in deltas {
            assert_relative_eq!(d, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_step_params_reference_values() {
        // Scalar linear model H = 1, P = 1, R = 1, z = 1, prior mean 0.
        let model = scalar_model(1.0);
        let prior = unit_prior();
        let z = SVector::<f64, 1>::new(1.0);

        // lambda -> 0+: A = -1/2, b = 1.
        let p0 =
            flow_step_params(&prior.mean, &prior.mean, &prior.cov, &z, &model, 1e-12).unwrap();
        assert_relative_eq!(p0.a[(0, 0)], -0.5, epsilon = 1e-9);
        assert_relative_eq!(p0.b[0], 1.0, epsilon = 1e-9);

        // lambda = 1: A = -1/4, b = 3/8.
        let p1 = flow_step_params(&prior.mean, &prior.mean, &prior.cov, &z, &model, 1.0).unwrap();
        assert_relative_eq!(p1.a[(0, 0)], -0.25, epsilon = 1e-12);
        assert_relative_eq!(p1.b[0], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn scalar_flow_reaches_kalman_posterior() {
        // Posterior for H = P = R = 1, z = 1 is N(0.5, 0.5). A fine schedule
        // keeps the Euler discretization error small.
        let model = scalar_model(1.0);
        let prior = unit_prior();
        let z = SVector::<f64, 1>::new(1.0);
        let schedule = LambdaSchedule::geometric(400, 1.01).unwrap();
        let x0 = vec![StateVector::zeros()];
        let (_, _, end_mean) = particle_flow(&x0, &prior, &z, &model, &schedule).unwrap();
        assert!((end_mean[0] - 0.5).abs() < 5e-3);
    }

    #[test]
    fn mapping_factor_scalar_linear() {
        // For the scalar unit example theta converges to
        // sqrt(P_post / P_prior) = 1/sqrt(2).
        let model = scalar_model(1.0);
        let prior = unit_prior();
        let z = SVector::<f64, 1>::new(1.0);
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let x0 = vec![StateVector::zeros()];
        let (_, trace, _) = particle_flow(&x0, &prior, &z, &model, &schedule).unwrap();
        let theta = mapping_factor(&trace).unwrap();
        assert!((theta - 0.5f64.sqrt()).abs() / 0.5f64.sqrt() < 0.02);
    }

    #[test]
    fn flow_is_reversible() {
        let model = scalar_model(0.5);
        let prior = unit_prior();
        let z = SVector::<f64, 1>::new(0.7);
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let chol = KernelChol::new(&prior).unwrap();
        let x0: Vec<StateVector> = (0..50).map(|_| chol.sample(&mut rng)).collect();
        let (x1, trace, _) = particle_flow(&x0, &prior, &z, &model, &schedule).unwrap();
        let back = reverse_flow(&x1, &trace).unwrap();
        for (orig, rec) in x0.iter().zip(&back) {
            assert!((orig - rec).norm() / orig.norm().max(1.0) < 1e-9);
        }
    }

    #[test]
    fn weights_estimate_evidence() {
        // Mean unnormalized weight estimates N(z; H mean, H P H' + R).
        let model = scalar_model(1.0);
        let prior = unit_prior();
        let z = SVector::<f64, 1>::new(1.0);
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let set = invertible_flow(&prior, &z, &model, 4000, &schedule, &mut rng).unwrap();
        let est: f64 = set.weights.iter().sum::<f64>() / set.weights.len() as f64;
        let exact = (-0.25f64).exp() / (4.0 * std::f64::consts::PI).sqrt();
        assert!((est - exact).abs() / exact < 0.08);
    }

    #[test]
    fn gaussian_representation_matches_hand_computation() {
        let p = |a: f64| {
            let mut x = StateVector::zeros();
            x[0] = a;
            x
        };
        let set = WeightedParticleSet {
            particles: vec![p(0.0), p(2.0)],
            weights: vec![1.0, 3.0],
        };
        let k = gaussian_representation(&set).unwrap();
        assert_relative_eq!(k.mean[0], 1.5, epsilon = 1e-12);
        // cov = 0.25 * (0 - 1.5)^2 + 0.75 * (2 - 1.5)^2 = 0.75
        assert_relative_eq!(k.cov[(0, 0)], 0.75, epsilon = 1e-9);
    }

    #[test]
    fn gaussian_representation_single_particle() {
        let set = WeightedParticleSet {
            particles: vec![StateVector::repeat(2.0)],
            weights: vec![1.0],
        };
        let k = gaussian_representation(&set).unwrap();
        assert_relative_eq!(k.mean, StateVector::repeat(2.0), epsilon = 1e-14);
        assert!(k.cov.cholesky().is_some());
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let set = WeightedParticleSet {
            particles: vec![StateVector::zeros()],
            weights: vec![0.0],
        };
        assert!(matches!(
            gaussian_representation(&set),
            Err(Error::DegenerateWeights)
        ));
    }
}
