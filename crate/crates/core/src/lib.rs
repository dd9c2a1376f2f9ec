//! Controlled quantum filtering toolkit.
//!
//! * [`matcore`]: small dense complex matrices and density matrices.
//! * [`model`]: controlled coefficient maps, costs, run configuration and control strategies.
//! * [`sme`]: normalized filters (diffusive and counting), trajectory generation, innovations.
//! * [`zakai`]: unnormalized linear filter and the normalization cross-check.
//! * [`oracle`]: repeated-interaction ancilla model with explicit Bayes conditioning.
//! * [`lindblad`]: RK4 master-equation integrator.
//! * [`bellman`]: backward dynamic programming on the Bloch ball.
//! * [`mc`]: Monte Carlo cost evaluation and strategy comparison.

pub mod bellman;
pub mod error;
pub mod lindblad;
pub mod matcore;
pub mod mc;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sme;
pub mod zakai;

pub use error::{Error, Result};
pub use matcore::{ComplexMatrix, DensityMatrix, C64};
pub use model::{
    builtin_model, load_config, validate, AdmissibleRange, CoefficientMap, Coefficients,
    ControlStrategy, CostSpec, ObservationMode, SystemModel,
};
pub use sme::{Scheme, TrajectoryParams, TrajectoryRecord};
