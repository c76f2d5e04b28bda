//! Path-integral nonlinear filtering.
//!
//! For the signal/observation model
//!
//! ```text
//! dx = f(x) dt + dv,   E[dv dvᵀ] = ħν I dt
//! dy = h(x) dt + dw,   E[dw dwᵀ] = ħμ I dt
//! ```
//!
//! the unnormalized conditional density is propagated between observation
//! times by the Dirac–Feynman short-time kernel of the Yau equation
//! ([`kernel`]), and corrected at each observation by a pointwise exponential
//! of the measurement increment. Finite-difference solvers ([`pde`]), a
//! Kalman filter and closed-form densities ([`baselines`]), and the
//! Euclidean quantum mechanics views of the same object ([`equivalence`])
//! serve as independent oracles.
//!
//! Data-parallel loops go through [`exec::Execution`]; building without the
//! default `parallel` feature runs everything sequentially with identical
//! results.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod baselines;
pub mod equivalence;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod models;
pub mod pde;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::{DensityField, Estimate, Grid};
pub use kernel::{build_kernel, estimate, measurement_update, propagate, run_filter, MeasurementForm, ShortTimeKernel};
pub use models::{BuiltinModel, FilterModel, YauFilterSpec};
pub use simulate::{MeasurementSeries, Trajectory};
