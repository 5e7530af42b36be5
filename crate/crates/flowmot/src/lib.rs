//! Multisensor multiobject tracking with Gaussian-mixture beliefs and
//! invertible particle flow.
//!
//! The library tracks an unknown, time-varying number of objects in a 3-D
//! volume from many low-dimensional (here: scalar time-difference-of-arrival)
//! sensors. Its layers, bottom up:
//!
//! * [`model`] — 6-D object states, Gaussian kernels, mixture beliefs.
//! * [`measurement`] — the measurement-model contract and the TDOA sensor.
//! * [`flow`] — the invertible particle flow and its mapping factor.
//! * [`gmm`] — per-kernel flows with kernel resampling.
//! * [`proposal`] — interchangeable proposals (flow, prior, unscented).
//! * [`assoc`] — association evidence, sum-product message passing, and the
//!   measurement update of a potential object.
//! * [`tracker`] — prediction, object birth, the per-sensor update loop.
//! * [`scenario`] — the simulated deep-water acoustic scenario.
//! * [`metrics`] — OSPA with an exact assignment solver.
//! * [`harness`] — configs, Monte Carlo runs, CSV output.
//!
//! A minimal end-to-end flow update of a single Gaussian against one scalar
//! measurement:
//!
//! ```
//! use flowmot::flow::{invertible_flow, gaussian_representation, LambdaSchedule};
//! use flowmot::measurement::LinearModel;
//! use flowmot::model::{Covariance, GaussianKernel, StateVector};
//! use nalgebra::{SMatrix, SVector};
//! use rand::SeedableRng;
//!
//! let prior = GaussianKernel {
//!     mean: StateVector::zeros(),
//!     cov: Covariance::identity(),
//! };
//! let model = LinearModel::<1> {
//!     h: SMatrix::<f64, 1, 6>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
//!     r: SMatrix::<f64, 1, 1>::new(1.0),
//! };
//! let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
//! let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
//! let z = SVector::<f64, 1>::new(1.0);
//!
//! let set = invertible_flow(&prior, &z, &model, 2000, &schedule, &mut rng).unwrap();
//! let posterior = gaussian_representation(&set).unwrap();
//! // Kalman posterior is N(0.5, 0.5) in the measured coordinate.
//! assert!((posterior.mean[0] - 0.5).abs() < 0.1);
//! assert!((posterior.cov[(0, 0)] - 0.5).abs() < 0.1);
//! ```

pub mod assoc;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod harness;
pub mod measurement;
pub mod metrics;
pub mod model;
pub mod proposal;
pub mod scenario;
pub mod tracker;

pub use error::{Error, Result};

/// The book's chapters, included here so `cargo test` compiles and runs
/// every code snippet in `book/src`; the guide cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/particle-flow.md")]
    mod particle_flow {}
    #[doc = include_str!("../../../book/src/mixtures.md")]
    mod mixtures {}
    #[doc = include_str!("../../../book/src/data-association.md")]
    mod data_association {}
    #[doc = include_str!("../../../book/src/tracker-loop.md")]
    mod tracker_loop {}
    #[doc = include_str!("../../../book/src/scenario-and-cli.md")]
    mod scenario_and_cli {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
