//! Measurement models: the generic model contract used by the particle flow,
//! a synthetic linear-Gaussian model for tests, and the passive-acoustic
//! time-difference-of-arrival (TDOA) sensor.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateVector;

const LOG_TWO_PI: f64 = 1.837877066409345483560659472811;

/// A differentiable measurement model with additive Gaussian noise,
/// `z = h(x) + v`, `v ~ N(0, R)`, producing `D`-dimensional measurements.
///
/// The tracker only uses scalar models (`D = 1`), but the flow machinery is
/// written against the general contract so linear multi-dimensional models
/// can exercise it in oracle tests.
pub trait MeasurementModel<const D: usize> {
    /// Noise-free measurement `h(x)`.
    fn predict(&self, x: &StateVector) -> Result<SVector<f64, D>>;

    /// Jacobian `dh/dx` evaluated at `x`, shape `D x 6`.
    fn jacobian(&self, x: &StateVector) -> Result<SMatrix<f64, D, 6>>;

    /// Measurement noise covariance `R`.
    fn noise_cov(&self) -> SMatrix<f64, D, D>;

    /// Log likelihood `log N(z; h(x), R)`.
    fn log_likelihood(&self, z: &SVector<f64, D>, x: &StateVector) -> Result<f64> {
        let diff = z - self.predict(x)?;
        let r = self.noise_cov();
        let chol = r
            .cholesky()
            .ok_or(Error::InvalidArgument("noise covariance not SPD".into()))?;
        let l = chol.l();
        let y = l
            .solve_lower_triangular(&diff)
            .ok_or(Error::InvalidArgument("noise covariance not SPD".into()))?;
        let mut log_det_l = 0.0;
        for i in 0..D {
            log_det_l += l[(i, i)].ln();
        }
        Ok(-0.5 * D as f64 * LOG_TWO_PI - log_det_l - 0.5 * y.norm_squared())
    }

    /// Likelihood `N(z; h(x), R)`.
    fn likelihood(&self, z: &SVector<f64, D>, x: &StateVector) -> Result<f64> {
        Ok(self.log_likelihood(z, x)?.exp())
    }
}

/// Linear-Gaussian model `z = H x + v`. Used by unit and oracle tests; its
/// flow has a closed-form (Kalman) posterior.
#[derive(Debug, Clone)]
pub struct LinearModel<const D: usize> {
    pub h: SMatrix<f64, D, 6>,
    pub r: SMatrix<f64, D, D>,
}

impl<const D: usize> MeasurementModel<D> for LinearModel<D> {
    fn predict(&self, x: &StateVector) -> Result<SVector<f64, D>> {
        Ok(self.h * x)
    }

    fn jacobian(&self, _x: &StateVector) -> Result<SMatrix<f64, D, 6>> {
        Ok(self.h)
    }

    fn noise_cov(&self) -> SMatrix<f64, D, D> {
        self.r
    }
}

/// States closer than this to a receiver make the TDOA Jacobian degenerate.
pub const MIN_RECEIVER_DISTANCE: f64 = 1e-6;

/// One TDOA sensor: a pair of receivers belonging to the same array. The
/// measurement is the difference of propagation delays from the source
/// position to the two receivers,
/// `z = (|p - a| - |p - b|) / c + v`, `v ~ N(0, sigma_v^2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    /// First receiver position (m).
    pub receiver_a: [f64; 3],
    /// Second receiver position (m).
    pub receiver_b: [f64; 3],
    /// Propagation (sound) speed (m/s).
    pub sound_speed: f64,
    /// Measurement noise standard deviation (s).
    pub noise_std: f64,
}

impl Sensor {
    pub fn new(
        receiver_a: [f64; 3],
        receiver_b: [f64; 3],
        sound_speed: f64,
        noise_std: f64,
    ) -> Result<Self> {
        if !(sound_speed > 0.0) || !(noise_std > 0.0) {
            return Err(Error::InvalidArgument(
                "sound_speed and noise_std must be positive".into(),
            ));
        }
        let baseline = (Vector3::from(receiver_a) - Vector3::from(receiver_b)).norm();
        if baseline < MIN_RECEIVER_DISTANCE {
            return Err(Error::InvalidArgument(
                "receivers of a TDOA pair must be distinct".into(),
            ));
        }
        Ok(Self {
            receiver_a,
            receiver_b,
            sound_speed,
            noise_std,
        })
    }

    pub fn baseline(&self) -> f64 {
        (Vector3::from(self.receiver_a) - Vector3::from(self.receiver_b)).norm()
    }

    /// Half-width of the physically feasible TDOA interval,
    /// `|a - b| / c` seconds. Noise-free TDOAs always lie inside
    /// `[-half, half]` by the triangle inequality.
    pub fn support_half_width(&self) -> f64 {
        self.baseline() / self.sound_speed
    }

    /// Density of the uniform false-positive distribution on the feasible
    /// interval: `c / (2 |a - b|)`.
    pub fn fp_density(&self) -> f64 {
        self.sound_speed / (2.0 * self.baseline())
    }

    fn position(x: &StateVector) -> Vector3<f64> {
        Vector3::new(x[0], x[1], x[2])
    }
}

impl MeasurementModel<1> for Sensor {
    fn predict(&self, x: &StateVector) -> Result<SVector<f64, 1>> {
        let p = Self::position(x);
        let da = (p - Vector3::from(self.receiver_a)).norm();
        let db = (p - Vector3::from(self.receiver_b)).norm();
        Ok(SVector::<f64, 1>::new((da - db) / self.sound_speed))
    }

    fn jacobian(&self, x: &StateVector) -> Result<SMatrix<f64, 1, 6>> {
        let p = Self::position(x);
        let ra = p - Vector3::from(self.receiver_a);
        let rb = p - Vector3::from(self.receiver_b);
        let da = ra.norm();
        let db = rb.norm();
        let dist = da.min(db);
        if dist < MIN_RECEIVER_DISTANCE {
            return Err(Error::DegenerateGeometry { dist });
        }
        let grad = (ra / da - rb / db) / self.sound_speed;
        let mut jac = SMatrix::<f64, 1, 6>::zeros();
        // Velocity components do not affect the TDOA.
        for i in 0..3 {
            jac[(0, i)] = grad[i];
        }
        Ok(jac)
    }

    fn noise_cov(&self) -> SMatrix<f64, 1, 1> {
        SMatrix::<f64, 1, 1>::new(self.noise_std * self.noise_std)
    }
}
