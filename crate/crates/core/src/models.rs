//! Filtering problem instances: signal drift `f`, measurement map `h` and the
//! noise intensities `ħν`, `ħμ` of the additive-noise model
//!
//! ```text
//! dx = f(x) dt + dv,   E[dv dvᵀ] = ħν I dt
//! dy = h(x) dt + dw,   E[dw dwᵀ] = ħμ I dt,   y(0) = 0
//! ```
//!
//! plus the Yau-filter drift family `f(x) = Lx + l + ∇φ(x)` with antisymmetric `L`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::LinearModel;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Vector field `ℝⁿ → ℝᵏ`, written into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Scalar field `ℝⁿ → ℝ`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Default central-difference step for derivative fallbacks.
pub const DEFAULT_FD_SPACING: f64 = 1e-4;

/// An immutable filtering model. Cloning is cheap (callbacks are shared).
#[derive(Clone)]
pub struct FilterModel {
    name: String,
    state_dim: usize,
    meas_dim: usize,
    drift: VectorFn,
    drift_divergence: Option<ScalarFn>,
    measurement: VectorFn,
    hbar_nu: f64,
    hbar_mu: f64,
}

impl std::fmt::Debug for FilterModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("meas_dim", &self.meas_dim)
            .field("hbar_nu", &self.hbar_nu)
            .field("hbar_mu", &self.hbar_mu)
            .field("analytic_divergence", &self.drift_divergence.is_some())
            .finish()
    }
}

impl FilterModel {
    /// Build a model from callbacks.
    ///
    /// Noise intensities must be finite and non-negative. Zero is accepted so
    /// that noiseless trajectories can be simulated; every filtering operation
    /// checks for strictly positive intensities itself.
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        meas_dim: usize,
        drift: VectorFn,
        measurement: VectorFn,
        hbar_nu: f64,
        hbar_mu: f64,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "state_dim",
                reason: "must be positive".into(),
            });
        }
        if meas_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "meas_dim",
                reason: "must be positive".into(),
            });
        }
        for (name, v) in [("hbar_nu", hbar_nu), ("hbar_mu", hbar_mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            meas_dim,
            drift,
            drift_divergence: None,
            measurement,
            hbar_nu,
            hbar_mu,
        })
    }

    /// Attach an analytic divergence `∇·f`; it takes precedence over differencing.
    pub fn with_divergence(mut self, div: ScalarFn) -> Self {
        self.drift_divergence = Some(div);
        self
    }

    pub fn with_noise(mut self, hbar_nu: f64, hbar_mu: f64) -> Result<Self> {
        let m = Self::new(
            self.name.clone(),
            self.state_dim,
            self.meas_dim,
            self.drift.clone(),
            self.measurement.clone(),
            hbar_nu,
            hbar_mu,
        )?;
        self.hbar_nu = m.hbar_nu;
        self.hbar_mu = m.hbar_mu;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn meas_dim(&self) -> usize {
        self.meas_dim
    }
    pub fn hbar_nu(&self) -> f64 {
        self.hbar_nu
    }
    pub fn hbar_mu(&self) -> f64 {
        self.hbar_mu
    }
    pub fn has_analytic_divergence(&self) -> bool {
        self.drift_divergence.is_some()
    }

    /// Error unless both noise intensities are strictly positive.
    pub fn require_positive_noise(&self) -> Result<()> {
        if self.hbar_nu <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "hbar_nu",
                reason: "filtering requires hbar_nu > 0".into(),
            });
        }
        if self.hbar_mu <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "hbar_mu",
                reason: "filtering requires hbar_mu > 0".into(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    #[inline]
    pub fn measurement_into(&self, x: &[f64], out: &mut [f64]) {
        (self.measurement)(x, out)
    }

    /// `f(x)`, failing with the offending coordinate when non-finite.
    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.state_dim];
        self.drift_into(x, &mut out);
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel {
                what: "drift",
                coordinate: i,
            });
        }
        Ok(out)
    }

    /// `h(x)`, failing with the offending coordinate when non-finite.
    pub fn eval_measurement(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.meas_dim];
        self.measurement_into(x, &mut out);
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel {
                what: "measurement",
                coordinate: i,
            });
        }
        Ok(out)
    }

    /// `Σ_k h_k(x)²`.
    pub fn measurement_sq_norm(&self, x: &[f64]) -> f64 {
        let mut h = vec![0.0; self.meas_dim];
        self.measurement_into(x, &mut h);
        h.iter().map(|v| v * v).sum()
    }

    /// `∇·f(x)`: the analytic callback if present, else central differences.
    pub fn divergence(&self, x: &[f64], spacing: f64) -> f64 {
        if let Some(div) = &self.drift_divergence {
            return div(x);
        }
        self.fd_divergence(x, spacing)
    }

    /// Central-difference divergence, ignoring any analytic callback.
    pub fn fd_divergence(&self, x: &[f64], spacing: f64) -> f64 {
        let n = self.state_dim;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            xp[i] = x[i] + spacing;
            self.drift_into(&xp, &mut fp);
            xp[i] = x[i] - spacing;
            self.drift_into(&xp, &mut fm);
            xp[i] = x[i];
            sum += (fp[i] - fm[i]) / (2.0 * spacing);
        }
        sum
    }

    /// Drift Jacobian `∂fᵢ/∂xⱼ` by central differences, row-major `n × n`.
    pub fn drift_jacobian(&self, x: &[f64], spacing: f64) -> Vec<f64> {
        jacobian(&*self.drift, self.state_dim, self.state_dim, x, spacing)
    }

    /// Measurement Jacobian `∂hₖ/∂xⱼ` by central differences, row-major `m × n`.
    pub fn measurement_jacobian(&self, x: &[f64], spacing: f64) -> Vec<f64> {
        jacobian(&*self.measurement, self.meas_dim, self.state_dim, x, spacing)
    }

    /// Laplacians `Δhₖ` by second differences.
    pub fn measurement_laplacian(&self, x: &[f64], spacing: f64) -> Vec<f64> {
        let (n, m) = (self.state_dim, self.meas_dim);
        let mut h0 = vec![0.0; m];
        let mut hp = vec![0.0; m];
        let mut hm = vec![0.0; m];
        self.measurement_into(x, &mut h0);
        let mut xs = x.to_vec();
        let mut lap = vec![0.0; m];
        for j in 0..n {
            xs[j] = x[j] + spacing;
            self.measurement_into(&xs, &mut hp);
            xs[j] = x[j] - spacing;
            self.measurement_into(&xs, &mut hm);
            xs[j] = x[j];
            for k in 0..m {
                lap[k] += (hp[k] - 2.0 * h0[k] + hm[k]) / (spacing * spacing);
            }
        }
        lap
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

fn jacobian(
    field: &(dyn Fn(&[f64], &mut [f64]) + Send + Sync),
    rows: usize,
    n: usize,
    x: &[f64],
    spacing: f64,
) -> Vec<f64> {
    let mut jac = vec![0.0; rows * n];
    let mut xs = x.to_vec();
    let mut fp = vec![0.0; rows];
    let mut fm = vec![0.0; rows];
    for j in 0..n {
        xs[j] = x[j] + spacing;
        field(&xs, &mut fp);
        xs[j] = x[j] - spacing;
        field(&xs, &mut fm);
        xs[j] = x[j];
        for i in 0..rows {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * spacing);
        }
    }
    jac
}

/// `f(x)` for a model.
pub fn eval_drift(model: &FilterModel, x: &[f64]) -> Result<Vec<f64>> {
    model.eval_drift(x)
}

/// `∇·f(x)`: analytic when supplied, else `Σᵢ [fᵢ(x+δeᵢ) − fᵢ(x−δeᵢ)]/(2δ)`.
pub fn divergence(model: &FilterModel, x: &[f64], spacing: f64) -> f64 {
    model.divergence(x, spacing)
}

/// Whether the drift is (numerically) a gradient field over the grid interior.
///
/// Always true in one dimension. Otherwise every pairwise curl component
/// `∂fᵢ/∂xⱼ − ∂fⱼ/∂xᵢ` must stay below `tol` at every interior node.
pub fn is_gradient_drift(model: &FilterModel, grid: &Grid, tol: f64) -> bool {
    let n = model.state_dim();
    if n == 1 {
        return true;
    }
    let spacing = grid.fd_spacing();
    let mut x = vec![0.0; n];
    for idx in 0..grid.len() {
        if grid.is_boundary(idx) {
            continue;
        }
        grid.coords_into(idx, &mut x);
        let jac = model.drift_jacobian(&x, spacing);
        for i in 0..n {
            for j in (i + 1)..n {
                let curl = jac[i * n + j] - jac[j * n + i];
                if !(curl.abs() < tol) {
                    return false;
                }
            }
        }
    }
    true
}

/// Scale-free curl tolerance: `1e-8 × max|f|` over the grid nodes.
pub fn default_curl_tolerance(model: &FilterModel, grid: &Grid) -> f64 {
    let n = model.state_dim();
    let mut x = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut max = 0.0f64;
    for idx in 0..grid.len() {
        grid.coords_into(idx, &mut x);
        model.drift_into(&x, &mut f);
        max = f.iter().fold(max, |m, v| m.max(v.abs()));
    }
    1e-8 * max.max(f64::MIN_POSITIVE)
}

/// `φ(x) = ∫_{x0}^{x} f(s) ds` by the composite trapezoid rule, so `φ(x0) = 0`.
pub fn potential_from_drift_1d(model: &FilterModel, x0: f64, x: f64, steps: usize) -> Result<f64> {
    if model.state_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: model.state_dim(),
        });
    }
    if steps < 2 {
        return Err(Error::InvalidParameter {
            name: "steps",
            reason: "need at least 2 trapezoid steps".into(),
        });
    }
    let h = (x - x0) / steps as f64;
    let mut f = [0.0];
    let mut eval = |s: f64| {
        model.drift_into(&[s], &mut f);
        f[0]
    };
    let mut sum = 0.5 * (eval(x0) + eval(x));
    for k in 1..steps {
        sum += eval(x0 + k as f64 * h);
    }
    Ok(sum * h)
}

/// Drift family `f(x) = Lx + l + ∇φ(x)` with antisymmetric `L`.
#[derive(Clone)]
pub struct YauFilterSpec {
    l_matrix: DMatrix<f64>,
    l_vector: DVector<f64>,
    phi: ScalarFn,
    phi_gradient: VectorFn,
    phi_laplacian: ScalarFn,
}

impl std::fmt::Debug for YauFilterSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("YauFilterSpec")
            .field("l_matrix", &self.l_matrix)
            .field("l_vector", &self.l_vector)
            .finish_non_exhaustive()
    }
}

impl YauFilterSpec {
    pub const ANTISYMMETRY_TOL: f64 = 1e-12;

    pub fn new(
        l_matrix: DMatrix<f64>,
        l_vector: DVector<f64>,
        phi: ScalarFn,
        phi_gradient: VectorFn,
        phi_laplacian: ScalarFn,
    ) -> Result<Self> {
        let n = l_matrix.nrows();
        if !l_matrix.is_square() || n == 0 {
            return Err(Error::InvalidParameter {
                name: "l_matrix",
                reason: "must be a non-empty square matrix".into(),
            });
        }
        if l_vector.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: l_vector.len(),
            });
        }
        let max_violation = (&l_matrix + l_matrix.transpose())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max_violation > Self::ANTISYMMETRY_TOL {
            return Err(Error::AsymmetricL { max_violation });
        }
        Ok(Self {
            l_matrix,
            l_vector,
            phi,
            phi_gradient,
            phi_laplacian,
        })
    }

    /// Polynomial potential `φ(x) = a |x|²/2 + b Σ xᵢ⁴/4`.
    pub fn with_polynomial_potential(
        l_matrix: DMatrix<f64>,
        l_vector: DVector<f64>,
        quadratic: f64,
        quartic: f64,
    ) -> Result<Self> {
        let phi: ScalarFn = Arc::new(move |x: &[f64]| {
            x.iter()
                .map(|v| 0.5 * quadratic * v * v + 0.25 * quartic * v.powi(4))
                .sum()
        });
        let grad: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = quadratic * v + quartic * v.powi(3);
            }
        });
        let lap: ScalarFn = Arc::new(move |x: &[f64]| x.iter().map(|v| quadratic + 3.0 * quartic * v * v).sum::<f64>());
        Self::new(l_matrix, l_vector, phi, grad, lap)
    }

    pub fn dim(&self) -> usize {
        self.l_matrix.nrows()
    }
    pub fn l_matrix(&self) -> &DMatrix<f64> {
        &self.l_matrix
    }
    pub fn l_vector(&self) -> &DVector<f64> {
        &self.l_vector
    }
    pub fn phi(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }
    pub fn phi_gradient_into(&self, x: &[f64], out: &mut [f64]) {
        (self.phi_gradient)(x, out)
    }
    pub fn phi_laplacian(&self, x: &[f64]) -> f64 {
        (self.phi_laplacian)(x)
    }
    pub fn phi_fn(&self) -> ScalarFn {
        self.phi.clone()
    }

    /// `Lx + l` (the non-gradient part of the drift).
    pub fn linear_part_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.l_vector[i];
            for j in 0..n {
                s += self.l_matrix[(i, j)] * x[j];
            }
            out[i] = s;
        }
    }

    /// `Lx + l + ∇φ(x)`.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut g = vec![0.0; n];
        self.phi_gradient_into(x, &mut g);
        self.linear_part_into(x, out);
        for i in 0..n {
            out[i] += g[i];
        }
    }

    /// `∇·f = tr L + ∇²φ`.
    pub fn divergence(&self, x: &[f64]) -> f64 {
        self.l_matrix.trace() + self.phi_laplacian(x)
    }

    /// Maximum relative deviation of the gradient and Laplacian callbacks from
    /// central differences of `φ` at `spacing`, over `probes` random points in
    /// `[-radius, radius]ⁿ`. Returns `(gradient_dev, laplacian_dev)`.
    pub fn derivative_deviation(&self, probes: usize, radius: f64, spacing: f64, seed: u64) -> (f64, f64) {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; n];
        let mut g = vec![0.0; n];
        let (mut gdev, mut ldev) = (0.0f64, 0.0f64);
        for _ in 0..probes {
            for v in x.iter_mut() {
                *v = rng.random_range(-radius..radius);
            }
            self.phi_gradient_into(&x, &mut g);
            let p0 = self.phi(&x);
            let mut lap = 0.0;
            let mut xs = x.clone();
            for i in 0..n {
                xs[i] = x[i] + spacing;
                let pp = self.phi(&xs);
                xs[i] = x[i] - spacing;
                let pm = self.phi(&xs);
                xs[i] = x[i];
                let fd = (pp - pm) / (2.0 * spacing);
                gdev = gdev.max((fd - g[i]).abs() / g[i].abs().max(1.0));
                lap += (pp - 2.0 * p0 + pm) / (spacing * spacing);
            }
            let exact = self.phi_laplacian(&x);
            ldev = ldev.max((lap - exact).abs() / exact.abs().max(1.0));
        }
        (gdev, ldev)
    }

    /// Check the derivative callbacks against `φ` (relative tolerance 1e-4 at spacing 1e-3).
    pub fn validate_derivatives(&self) -> Result<()> {
        let (g, l) = self.derivative_deviation(32, 2.0, 1e-3, 0x5eed);
        if g > 1e-4 {
            return Err(Error::InvalidParameter {
                name: "phi_gradient",
                reason: format!("disagrees with differenced phi by {g:e}"),
            });
        }
        if l > 1e-4 {
            return Err(Error::InvalidParameter {
                name: "phi_laplacian",
                reason: format!("disagrees with differenced phi by {l:e}"),
            });
        }
        Ok(())
    }

    /// Adapter into a [`FilterModel`] with analytic divergence `tr L + ∇²φ`.
    pub fn to_model(
        &self,
        name: impl Into<String>,
        meas_dim: usize,
        measurement: VectorFn,
        hbar_nu: f64,
        hbar_mu: f64,
    ) -> Result<FilterModel> {
        let spec = self.clone();
        let drift: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| spec.drift_into(x, out));
        let spec = self.clone();
        let div: ScalarFn = Arc::new(move |x: &[f64]| spec.divergence(x));
        Ok(FilterModel::new(name, self.dim(), meas_dim, drift, measurement, hbar_nu, hbar_mu)?.with_divergence(div))
    }
}

/// `Lx + l + ∇φ(x)`.
pub fn yau_drift(spec: &YauFilterSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; spec.dim()];
    spec.drift_into(x, &mut out);
    Ok(out)
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

/// Named model families loadable from JSON configs.
///
/// Componentwise families (`zero`, `ou`, `cubic`, `atan`) act independently
/// in each of `dim` coordinates and observe every coordinate (`m = n`).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum BuiltinModel {
    /// `f ≡ 0`, `h(x) = gain·x`.
    Zero {
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default)]
        meas_gain: f64,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
    /// `f(x) = −rate·x`, `h(x) = gain·x`.
    Ou {
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default = "one")]
        rate: f64,
        #[serde(default = "one")]
        meas_gain: f64,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
    /// `f(x) = Ax + a`, `h(x) = Cx + c`.
    Linear {
        a_matrix: Vec<Vec<f64>>,
        #[serde(default)]
        a_offset: Option<Vec<f64>>,
        c_matrix: Vec<Vec<f64>>,
        #[serde(default)]
        c_offset: Option<Vec<f64>>,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
    /// `f(x) = Lx + l + ∇φ`, `φ = a|x|²/2 + bΣxᵢ⁴/4`, `h(x) = Cx + c`.
    Yau {
        l_matrix: Vec<Vec<f64>>,
        #[serde(default)]
        l_vector: Option<Vec<f64>>,
        #[serde(default)]
        phi_quadratic: f64,
        #[serde(default)]
        phi_quartic: f64,
        c_matrix: Vec<Vec<f64>>,
        #[serde(default)]
        c_offset: Option<Vec<f64>>,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
    /// `f(x) = αx − βx³`, `h(x) = gain·x`.
    Cubic {
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        meas_gain: f64,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
    /// `f(x) = −rate·atan(x)`, `h(x) = gain·atan(x)`.
    Atan {
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default = "one")]
        rate: f64,
        #[serde(default = "one")]
        meas_gain: f64,
        #[serde(default = "one")]
        hbar_nu: f64,
        #[serde(default = "one")]
        hbar_mu: f64,
    },
}

fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidParameter {
            name,
            reason: "must be a non-empty rectangular matrix".into(),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name,
            reason: "entries must be finite".into(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector_or_zero(v: &Option<Vec<f64>>, len: usize) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::DimensionMismatch {
            expected: len,
            got: v.len(),
        }),
    }
}

fn affine_fn(mat: DMatrix<f64>, off: DVector<f64>) -> VectorFn {
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        for i in 0..mat.nrows() {
            let mut s = off[i];
            for j in 0..mat.ncols() {
                s += mat[(i, j)] * x[j];
            }
            out[i] = s;
        }
    })
}

fn componentwise(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> VectorFn {
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(x) {
            *o = g(*v);
        }
    })
}

impl BuiltinModel {
    pub fn family(&self) -> &'static str {
        match self {
            BuiltinModel::Zero { .. } => "zero",
            BuiltinModel::Ou { .. } => "ou",
            BuiltinModel::Linear { .. } => "linear",
            BuiltinModel::Yau { .. } => "yau",
            BuiltinModel::Cubic { .. } => "cubic",
            BuiltinModel::Atan { .. } => "atan",
        }
    }

    /// Instantiate the callbacks.
    pub fn build(&self) -> Result<FilterModel> {
        let name = self.family();
        match self {
            BuiltinModel::Zero {
                dim,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => {
                let (n, g) = (*dim, *meas_gain);
                let div: ScalarFn = Arc::new(|_| 0.0);
                Ok(FilterModel::new(
                    name,
                    n,
                    n,
                    componentwise(|_| 0.0),
                    componentwise(move |v| g * v),
                    *hbar_nu,
                    *hbar_mu,
                )?
                .with_divergence(div))
            }
            BuiltinModel::Ou {
                dim,
                rate,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => {
                let (n, a, g) = (*dim, *rate, *meas_gain);
                let div: ScalarFn = Arc::new(move |_| -a * n as f64);
                Ok(FilterModel::new(
                    name,
                    n,
                    n,
                    componentwise(move |v| -a * v),
                    componentwise(move |v| g * v),
                    *hbar_nu,
                    *hbar_mu,
                )?
                .with_divergence(div))
            }
            BuiltinModel::Cubic {
                dim,
                alpha,
                beta,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => {
                let (n, a, b, g) = (*dim, *alpha, *beta, *meas_gain);
                let div: ScalarFn = Arc::new(move |x: &[f64]| x.iter().map(|v| a - 3.0 * b * v * v).sum());
                Ok(FilterModel::new(
                    name,
                    n,
                    n,
                    componentwise(move |v| a * v - b * v * v * v),
                    componentwise(move |v| g * v),
                    *hbar_nu,
                    *hbar_mu,
                )?
                .with_divergence(div))
            }
            BuiltinModel::Atan {
                dim,
                rate,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => {
                let (n, a, g) = (*dim, *rate, *meas_gain);
                let div: ScalarFn = Arc::new(move |x: &[f64]| x.iter().map(|v| -a / (1.0 + v * v)).sum());
                Ok(FilterModel::new(
                    name,
                    n,
                    n,
                    componentwise(move |v| -a * v.atan()),
                    componentwise(move |v| g * v.atan()),
                    *hbar_nu,
                    *hbar_mu,
                )?
                .with_divergence(div))
            }
            BuiltinModel::Linear { .. } => {
                let lin = self.linear_model().expect("linear family")?;
                lin.to_filter_model()
            }
            BuiltinModel::Yau {
                c_matrix,
                c_offset,
                hbar_nu,
                hbar_mu,
                ..
            } => {
                let spec = self.yau_spec().expect("yau family")?;
                let c = matrix_from_rows("c_matrix", c_matrix)?;
                if c.ncols() != spec.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: spec.dim(),
                        got: c.ncols(),
                    });
                }
                let m = c.nrows();
                let off = vector_or_zero(c_offset, m)?;
                spec.to_model(name, m, affine_fn(c, off), *hbar_nu, *hbar_mu)
            }
        }
    }

    /// Linear-Gaussian view of the model when it has one (for the Kalman oracle).
    pub fn linear_model(&self) -> Option<Result<LinearModel>> {
        let diag = |n: usize, v: f64| DMatrix::from_diagonal_element(n, n, v);
        match self {
            BuiltinModel::Zero {
                dim,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => Some(LinearModel::new(
                diag(*dim, 0.0),
                DVector::zeros(*dim),
                diag(*dim, *meas_gain),
                DVector::zeros(*dim),
                *hbar_nu,
                *hbar_mu,
            )),
            BuiltinModel::Ou {
                dim,
                rate,
                meas_gain,
                hbar_nu,
                hbar_mu,
            } => Some(LinearModel::new(
                diag(*dim, -rate),
                DVector::zeros(*dim),
                diag(*dim, *meas_gain),
                DVector::zeros(*dim),
                *hbar_nu,
                *hbar_mu,
            )),
            BuiltinModel::Linear {
                a_matrix,
                a_offset,
                c_matrix,
                c_offset,
                hbar_nu,
                hbar_mu,
            } => Some((|| {
                let a = matrix_from_rows("a_matrix", a_matrix)?;
                let c = matrix_from_rows("c_matrix", c_matrix)?;
                let av = vector_or_zero(a_offset, a.nrows())?;
                let cv = vector_or_zero(c_offset, c.nrows())?;
                LinearModel::new(a, av, c, cv, *hbar_nu, *hbar_mu)
            })()),
            BuiltinModel::Yau {
                l_matrix,
                l_vector,
                phi_quadratic,
                phi_quartic,
                c_matrix,
                c_offset,
                hbar_nu,
                hbar_mu,
            } if *phi_quartic == 0.0 => Some((|| {
                let l = matrix_from_rows("l_matrix", l_matrix)?;
                let n = l.nrows();
                let a = &l + diag(n, *phi_quadratic);
                let lv = vector_or_zero(l_vector, n)?;
                let c = matrix_from_rows("c_matrix", c_matrix)?;
                let cv = vector_or_zero(c_offset, c.nrows())?;
                LinearModel::new(a, lv, c, cv, *hbar_nu, *hbar_mu)
            })()),
            _ => None,
        }
    }

    /// Yau-filter drift decomposition when the family has one.
    pub fn yau_spec(&self) -> Option<Result<YauFilterSpec>> {
        match self {
            BuiltinModel::Yau {
                l_matrix,
                l_vector,
                phi_quadratic,
                phi_quartic,
                ..
            } => Some((|| {
                let l = matrix_from_rows("l_matrix", l_matrix)?;
                let lv = vector_or_zero(l_vector, l.nrows())?;
                YauFilterSpec::with_polynomial_potential(l, lv, *phi_quadratic, *phi_quartic)
            })()),
            _ => None,
        }
    }
}
