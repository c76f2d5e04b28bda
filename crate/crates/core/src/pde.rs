//! Finite-difference reference solvers.
//!
//! Every operator is stored as one three-point stencil per coordinate
//! direction, `(Lu)_i = Σ_d lo_d[i] u[i−s_d] + di_d[i] u[i] + up_d[i] u[i+s_d]`,
//! with the reaction term split evenly across directions. This serves the
//! explicit scheme in any dimension, Crank–Nicolson in 1D (one tridiagonal
//! solve) and Peaceman–Rachford ADI in 2D. Boundary nodes are held at zero.

use serde::{Deserialize, Serialize};

use crate::equivalence::ReductionData;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{DensityField, Grid};
use crate::models::FilterModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Yye,
    RobustDmzFrozen,
    Fpkfe,
    Schrodinger,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    /// Crank–Nicolson in 1D, Peaceman–Rachford ADI in 2D.
    #[default]
    CrankNicolson,
}

/// Banded linear operator on the interior nodes of a grid.
#[derive(Clone, Debug)]
pub struct StencilOperator {
    grid: Grid,
    diffusion: f64,
    lower: Vec<Vec<f64>>,
    diag: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
    reaction: Vec<f64>,
    interior: Vec<bool>,
}

impl StencilOperator {
    fn empty(grid: &Grid, diffusion: f64) -> Self {
        let (n, len) = (grid.dim(), grid.len());
        let mut lower = vec![vec![0.0; len]; n];
        let mut diag = vec![vec![0.0; len]; n];
        let mut upper = vec![vec![0.0; len]; n];
        let interior: Vec<bool> = (0..len).map(|i| !grid.is_boundary(i)).collect();
        for d in 0..n {
            let h2 = grid.spacing()[d].powi(2);
            for i in 0..len {
                if interior[i] {
                    lower[d][i] = diffusion / h2;
                    upper[d][i] = diffusion / h2;
                    diag[d][i] = -2.0 * diffusion / h2;
                }
            }
        }
        Self {
            grid: grid.clone(),
            diffusion,
            lower,
            diag,
            upper,
            reaction: vec![0.0; len],
            interior,
        }
    }

    /// `D Δu − ∇·(b u) + c u`, `b` stored node-major (`len × n`).
    pub fn divergence_form(grid: &Grid, diffusion: f64, b: &[f64], c: &[f64]) -> Result<Self> {
        let (n, len) = (grid.dim(), grid.len());
        check_len(b.len(), len * n)?;
        check_len(c.len(), len)?;
        let mut op = Self::empty(grid, diffusion);
        for d in 0..n {
            let (s, h) = (grid.strides()[d], grid.spacing()[d]);
            for i in 0..len {
                if op.interior[i] {
                    op.lower[d][i] += b[(i - s) * n + d] / (2.0 * h);
                    op.upper[d][i] -= b[(i + s) * n + d] / (2.0 * h);
                }
            }
        }
        op.set_reaction(c)?;
        Ok(op)
    }

    /// `D Δu + a·∇u + c u`, `a` stored node-major (`len × n`).
    pub fn advective_form(grid: &Grid, diffusion: f64, a: &[f64], c: &[f64]) -> Result<Self> {
        let (n, len) = (grid.dim(), grid.len());
        check_len(a.len(), len * n)?;
        check_len(c.len(), len)?;
        let mut op = Self::empty(grid, diffusion);
        for d in 0..n {
            let h = grid.spacing()[d];
            for i in 0..len {
                if op.interior[i] {
                    op.lower[d][i] -= a[i * n + d] / (2.0 * h);
                    op.upper[d][i] += a[i * n + d] / (2.0 * h);
                }
            }
        }
        op.set_reaction(c)?;
        Ok(op)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }
    pub fn reaction(&self) -> &[f64] {
        &self.reaction
    }

    pub fn set_reaction(&mut self, c: &[f64]) -> Result<()> {
        check_len(c.len(), self.grid.len())?;
        for (r, (v, inside)) in self.reaction.iter_mut().zip(c.iter().zip(&self.interior)) {
            *r = if *inside { *v } else { 0.0 };
        }
        Ok(())
    }

    /// Stencil coefficients `(lower, diag, upper)` of direction `d` at node `i`,
    /// reaction share included.
    pub fn coefficients(&self, d: usize, i: usize) -> (f64, f64, f64) {
        let share = self.reaction[i] / self.grid.dim() as f64;
        (self.lower[d][i], self.diag[d][i] + share, self.upper[d][i])
    }

    /// Largest explicit time step allowed by the diffusion term.
    pub fn explicit_bound(&self) -> f64 {
        let h2 = self.grid.spacing().iter().map(|h| h * h).fold(f64::INFINITY, f64::min);
        h2 / (2.0 * self.diffusion * self.grid.dim() as f64)
    }

    fn apply_dim_into(&self, d: usize, u: &[f64], out: &mut [f64], scale: f64, execution: Execution) {
        let s = self.grid.strides()[d];
        execution.fill(out, |i| {
            if !self.interior[i] {
                return 0.0;
            }
            let (lo, di, up) = self.coefficients(d, i);
            u[i] + scale * (lo * u[i - s] + di * u[i] + up * u[i + s])
        });
    }

    /// `L u`, zero on the boundary.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        let n = self.grid.dim();
        let strides = self.grid.strides().to_vec();
        Execution::default().fill(&mut out, |i| {
            if !self.interior[i] {
                return 0.0;
            }
            let mut acc = 0.0;
            for (d, s) in strides.iter().enumerate().take(n) {
                let (lo, di, up) = self.coefficients(d, i);
                acc += lo * u[i - s] + di * u[i] + up * u[i + s];
            }
            acc
        });
        out
    }

    /// Solve `(I − scale·L_d) x = rhs` along every grid line in direction `d`.
    fn solve_dim(&self, d: usize, rhs: &[f64], scale: f64, execution: Execution) -> Vec<f64> {
        let grid = &self.grid;
        let (s, m) = (grid.strides()[d], grid.points()[d]);
        let starts: Vec<usize> = (0..grid.len()).filter(|&i| (i / s) % m == 0).collect();
        let lines: Vec<Vec<f64>> = execution.map(starts.len(), |k| {
            let start = starts[k];
            let mut a = vec![0.0; m];
            let mut b = vec![1.0; m];
            let mut c = vec![0.0; m];
            let mut r = vec![0.0; m];
            for j in 0..m {
                let i = start + j * s;
                if self.interior[i] {
                    let (lo, di, up) = self.coefficients(d, i);
                    a[j] = -scale * lo;
                    b[j] = 1.0 - scale * di;
                    c[j] = -scale * up;
                    r[j] = rhs[i];
                }
            }
            thomas(&a, &b, &c, &mut r);
            r
        });
        let mut out = vec![0.0; grid.len()];
        for (start, line) in starts.iter().zip(lines) {
            for (j, v) in line.into_iter().enumerate() {
                out[start + j * s] = v;
            }
        }
        out
    }

    /// One explicit Euler step `u + dt L u`.
    pub fn explicit_step(&self, u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let bound = self.explicit_bound();
        if dt > bound * (1.0 + 1e-12) {
            return Err(Error::StabilityViolation { dt, bound });
        }
        let lu = self.apply(u);
        Ok(u.iter()
            .zip(lu)
            .zip(&self.interior)
            .map(|((v, l), inside)| if *inside { v + dt * l } else { 0.0 })
            .collect())
    }

    /// One Crank–Nicolson (1D) or Peaceman–Rachford (2D) step.
    pub fn implicit_step(&self, u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let ex = Execution::default();
        match self.grid.dim() {
            1 => {
                let mut rhs = vec![0.0; u.len()];
                self.apply_dim_into(0, u, &mut rhs, 0.5 * dt, ex);
                Ok(self.solve_dim(0, &rhs, 0.5 * dt, ex))
            }
            2 => {
                let mut rhs = vec![0.0; u.len()];
                self.apply_dim_into(1, u, &mut rhs, 0.5 * dt, ex);
                let half = self.solve_dim(0, &rhs, 0.5 * dt, ex);
                self.apply_dim_into(0, &half, &mut rhs, 0.5 * dt, ex);
                Ok(self.solve_dim(1, &rhs, 0.5 * dt, ex))
            }
            n => Err(Error::UnsupportedScheme(format!(
                "implicit stepping is limited to 1D and 2D, grid has {n} dimensions"
            ))),
        }
    }

    pub fn step(&self, u: &[f64], dt: f64, scheme: Scheme) -> Result<Vec<f64>> {
        match scheme {
            Scheme::Explicit => self.explicit_step(u, dt),
            Scheme::CrankNicolson => self.implicit_step(u, dt),
        }
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Tridiagonal solve in place; `a` is the sub-diagonal, `c` the super-diagonal.
fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &mut [f64]) {
    let m = b.len();
    let mut cp = vec![0.0; m];
    let mut beta = b[0];
    r[0] /= beta;
    for j in 1..m {
        cp[j - 1] = c[j - 1] / beta;
        beta = b[j] - a[j] * cp[j - 1];
        r[j] = (r[j] - a[j] * r[j - 1]) / beta;
    }
    for j in (0..m - 1).rev() {
        r[j] -= cp[j] * r[j + 1];
    }
}

/// Drift-type and reaction coefficients in advective form `a·∇u + c u`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvectiveCoefficients {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl AdvectiveCoefficients {
    pub fn operator(&self, grid: &Grid, diffusion: f64) -> Result<StencilOperator> {
        StencilOperator::advective_form(grid, diffusion, &self.a, &self.c)
    }
}

/// YYe in divergence form: `b = f`, `c = −|h|²/2ħμ`.
pub fn yye_divergence_coefficients(model: &FilterModel, grid: &Grid, with_measurement: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, len) = (grid.dim(), grid.len());
    let mut b = vec![0.0; len * n];
    let mut c = vec![0.0; len];
    let mut x = vec![0.0; n];
    for i in 0..len {
        grid.coords_into(i, &mut x);
        model.drift_into(&x, &mut b[i * n..(i + 1) * n]);
        if with_measurement {
            c[i] = -model.measurement_sq_norm(&x) / (2.0 * model.hbar_mu());
        }
    }
    (b, c)
}

/// YYe in advective form: `a = −f`, `c = −∇·f − |h|²/2ħμ`.
pub fn yye_advective_coefficients(model: &FilterModel, grid: &Grid) -> AdvectiveCoefficients {
    dmz_frozen_coefficients(model, grid, &vec![0.0; model.meas_dim()])
}

/// Frozen robust DMZ coefficients at one point:
/// `a = −f + (ħν/ħμ) Σ_j y_j ∇h_j`,
/// `c = −[∇·f + |h|²/2ħμ − (ħν/2ħμ) Σ y_i Δh_i + (1/ħμ) Σ y_i f·∇h_i − (ħν/2ħμ²) |Σ y_i ∇h_i|²]`.
pub fn dmz_coefficients_at(model: &FilterModel, x: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    let (n, m) = (model.state_dim(), model.meas_dim());
    let (hnu, hmu) = (model.hbar_nu(), model.hbar_mu());
    let spacing = crate::models::DEFAULT_FD_SPACING;
    let mut f = vec![0.0; n];
    model.drift_into(x, &mut f);
    let div = model.divergence(x, spacing);
    let h2 = model.measurement_sq_norm(x);
    let mut a: Vec<f64> = f.iter().map(|v| -v).collect();
    let mut bracket = div + h2 / (2.0 * hmu);
    if y.iter().any(|v| *v != 0.0) {
        let jac = model.measurement_jacobian(x, spacing);
        let lap = model.measurement_laplacian(x, 1e-3);
        let mut grad = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                grad[j] += y[i] * jac[i * n + j];
            }
        }
        for j in 0..n {
            a[j] += hnu / hmu * grad[j];
        }
        let y_lap: f64 = (0..m).map(|i| y[i] * lap[i]).sum();
        let f_grad: f64 = (0..n).map(|j| f[j] * grad[j]).sum();
        let grad2: f64 = grad.iter().map(|g| g * g).sum();
        bracket += -hnu / (2.0 * hmu) * y_lap + f_grad / hmu - hnu / (2.0 * hmu * hmu) * grad2;
    }
    (a, -bracket)
}

pub fn dmz_frozen_coefficients(model: &FilterModel, grid: &Grid, y: &[f64]) -> AdvectiveCoefficients {
    let (n, len) = (grid.dim(), grid.len());
    let rows: Vec<(Vec<f64>, f64)> = Execution::default().map(len, |i| dmz_coefficients_at(model, &grid.coords(i), y));
    let mut a = Vec::with_capacity(len * n);
    let mut c = Vec::with_capacity(len);
    for (ai, ci) in rows {
        a.extend(ai);
        c.push(ci);
    }
    AdvectiveCoefficients { a, c }
}

/// A reference PDE with its operator prebuilt.
#[derive(Clone)]
pub struct PdeProblem {
    pub kind: PdeKind,
    pub grid: Grid,
    pub dt: f64,
    pub scheme: Scheme,
    frozen_y: Option<Vec<f64>>,
    schrodinger: Option<ReductionData>,
    operator: StencilOperator,
}

impl PdeProblem {
    fn check(model: &FilterModel, grid: &Grid, dt: f64, scheme: Scheme) -> Result<()> {
        model.require_positive_noise()?;
        if model.state_dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: model.state_dim(),
            });
        }
        check_dt(dt)?;
        if scheme == Scheme::CrankNicolson && grid.dim() > 2 {
            return Err(Error::UnsupportedScheme(
                "Crank-Nicolson requires a 1D or 2D grid".into(),
            ));
        }
        Ok(())
    }

    fn finish(self) -> Result<Self> {
        if self.scheme == Scheme::Explicit {
            let bound = self.operator.explicit_bound();
            if self.dt > bound * (1.0 + 1e-12) {
                return Err(Error::StabilityViolation { dt: self.dt, bound });
            }
        }
        Ok(self)
    }

    pub fn yye(model: &FilterModel, grid: &Grid, dt: f64, scheme: Scheme) -> Result<Self> {
        Self::check(model, grid, dt, scheme)?;
        let (b, c) = yye_divergence_coefficients(model, grid, true);
        let operator = StencilOperator::divergence_form(grid, 0.5 * model.hbar_nu(), &b, &c)?;
        Self {
            kind: PdeKind::Yye,
            grid: grid.clone(),
            dt,
            scheme,
            frozen_y: None,
            schrodinger: None,
            operator,
        }
        .finish()
    }

    pub fn fpkfe(model: &FilterModel, grid: &Grid, dt: f64, scheme: Scheme) -> Result<Self> {
        Self::check(model, grid, dt, scheme)?;
        let (b, c) = yye_divergence_coefficients(model, grid, false);
        let operator = StencilOperator::divergence_form(grid, 0.5 * model.hbar_nu(), &b, &c)?;
        Self {
            kind: PdeKind::Fpkfe,
            grid: grid.clone(),
            dt,
            scheme,
            frozen_y: None,
            schrodinger: None,
            operator,
        }
        .finish()
    }

    pub fn robust_dmz_frozen(model: &FilterModel, grid: &Grid, y: &[f64], dt: f64, scheme: Scheme) -> Result<Self> {
        Self::check(model, grid, dt, scheme)?;
        check_len(y.len(), model.meas_dim())?;
        let operator = dmz_frozen_coefficients(model, grid, y).operator(grid, 0.5 * model.hbar_nu())?;
        Self {
            kind: PdeKind::RobustDmzFrozen,
            grid: grid.clone(),
            dt,
            scheme,
            frozen_y: Some(y.to_vec()),
            schrodinger: None,
            operator,
        }
        .finish()
    }

    /// Schrödinger problem `∂ν = (ħν/2)Δν − ½ q(B⁻¹(t)(x̃ − b(t))) ν` for a reduction.
    pub fn schrodinger(reduction: &ReductionData, grid: &Grid, dt: f64, scheme: Scheme) -> Result<Self> {
        check_dt(dt)?;
        if reduction.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: reduction.dim(),
            });
        }
        if scheme == Scheme::CrankNicolson && grid.dim() > 2 {
            return Err(Error::UnsupportedScheme(
                "Crank-Nicolson requires a 1D or 2D grid".into(),
            ));
        }
        let zeros = vec![0.0; grid.len()];
        let mut operator = StencilOperator::advective_form(
            grid,
            0.5 * reduction.hbar_nu(),
            &vec![0.0; grid.len() * grid.dim()],
            &zeros,
        )?;
        operator.set_reaction(&schrodinger_reaction(reduction, grid, 0.0))?;
        Self {
            kind: PdeKind::Schrodinger,
            grid: grid.clone(),
            dt,
            scheme,
            frozen_y: None,
            schrodinger: Some(reduction.clone()),
            operator,
        }
        .finish()
    }

    pub fn frozen_y(&self) -> Option<&[f64]> {
        self.frozen_y.as_deref()
    }

    pub fn operator(&self) -> &StencilOperator {
        &self.operator
    }

    fn advance(&self, field: &DensityField, kind: PdeKind) -> Result<DensityField> {
        if self.kind != kind {
            return Err(Error::InvalidParameter {
                name: "problem",
                reason: format!("expected a {kind:?} problem, got {:?}", self.kind),
            });
        }
        if field.grid != self.grid {
            return Err(Error::GridMismatch);
        }
        let values = self.operator.step(&field.values, self.dt, self.scheme)?;
        Ok(DensityField {
            grid: self.grid.clone(),
            time: field.time + self.dt,
            values,
        })
    }

    /// Advance `steps` steps of whatever equation this problem holds.
    pub fn evolve(&self, field: &DensityField, steps: usize) -> Result<DensityField> {
        let mut u = field.clone();
        if self.kind == PdeKind::Schrodinger {
            let mut problem = self.clone();
            for _ in 0..steps {
                let t = u.time;
                u = step_schrodinger(&mut problem, &u, t)?;
            }
            return Ok(u);
        }
        for _ in 0..steps {
            u = self.advance(&u, self.kind)?;
        }
        Ok(u)
    }

    /// Advance to `t_end`, which must be an integer number of steps away.
    pub fn evolve_to(&self, field: &DensityField, t_end: f64) -> Result<DensityField> {
        let steps = step_count(t_end - field.time, self.dt)?;
        let mut out = self.evolve(field, steps)?;
        out.time = t_end;
        Ok(out)
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    Ok(())
}

pub(crate) fn step_count(span: f64, dt: f64) -> Result<usize> {
    let ratio = span / dt;
    let steps = ratio.round();
    if steps < 0.0 || (ratio - steps).abs() > 1e-6 * ratio.abs().max(1.0) {
        return Err(Error::TimeMismatch(format!(
            "span {span} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

fn schrodinger_reaction(reduction: &ReductionData, grid: &Grid, t: f64) -> Vec<f64> {
    let b = reduction.b_matrix(t);
    let bt = b.transpose();
    let shift = reduction.b_vector(t);
    let mut out = vec![0.0; grid.len()];
    Execution::default().fill(&mut out, |i| {
        let xt = nalgebra::DVector::from_vec(grid.coords(i));
        let x = &bt * (xt - &shift);
        -0.5 * reduction.q(x.as_slice())
    });
    out
}

pub fn step_yye(problem: &PdeProblem, field: &DensityField) -> Result<DensityField> {
    problem.advance(field, PdeKind::Yye)
}

pub fn step_fpkfe(problem: &PdeProblem, field: &DensityField) -> Result<DensityField> {
    problem.advance(field, PdeKind::Fpkfe)
}

pub fn step_robust_dmz_frozen(problem: &PdeProblem, field: &DensityField) -> Result<DensityField> {
    problem.advance(field, PdeKind::RobustDmzFrozen)
}

/// One Schrödinger step from time `t`, with the potential frozen at `t + dt/2`
/// (Crank–Nicolson) or `t` (explicit).
pub fn step_schrodinger(problem: &mut PdeProblem, field: &DensityField, t: f64) -> Result<DensityField> {
    let reduction = problem.schrodinger.as_ref().ok_or_else(|| Error::InvalidParameter {
        name: "problem",
        reason: "expected a Schrodinger problem".into(),
    })?;
    let frozen = match problem.scheme {
        Scheme::Explicit => t,
        Scheme::CrankNicolson => t + 0.5 * problem.dt,
    };
    let c = schrodinger_reaction(reduction, &problem.grid, frozen);
    problem.operator.set_reaction(&c)?;
    let mut out = problem.advance(field, PdeKind::Schrodinger)?;
    out.time = t + problem.dt;
    Ok(out)
}
