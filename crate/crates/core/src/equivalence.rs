//! Path-integral equivalences.
//!
//! The fundamental solution of the Yau equation is the matrix element of the
//! drift line-integral operator `exp((1/ħν)∫ f·dx)` in a Euclidean quantum
//! system with Lagrangian `ℒ = T − V`,
//!
//! ```text
//! T = ½|ẋ|²,   −V = ½ Σ [fᵢ² + ħν ∂ᵢfᵢ] + (ħν / 2ħμ) Σ h_k².
//! ```
//!
//! When `f = ∇φ` the line integral is path independent and factors out as the
//! gauge `exp((φ(x) − φ(x₀))/ħν)`. For drifts `Lx + l + ∇φ` with antisymmetric
//! `L` the problem reduces further to a Schrödinger equation with potential
//! `q` in rotated, translated coordinates `x̃ = B(t)x + b(t)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{DensityField, Grid};
use crate::linalg::{condition_number, expm, integrated_exp_times};
use crate::models::{yau_drift, FilterModel, YauFilterSpec, DEFAULT_FD_SPACING};
use crate::pde::{step_count, PdeProblem, Scheme, StencilOperator};

/// The Euclidean quantum system attached to a filter model.
#[derive(Clone)]
pub struct EuclideanSystem {
    model: FilterModel,
}

pub fn euclidean_potential(model: &FilterModel) -> EuclideanSystem {
    EuclideanSystem { model: model.clone() }
}

impl EuclideanSystem {
    pub fn source(&self) -> &FilterModel {
        &self.model
    }

    pub fn hbar_nu(&self) -> f64 {
        self.model.hbar_nu()
    }

    /// `−V(x)`.
    pub fn neg_potential(&self, x: &[f64]) -> f64 {
        let m = &self.model;
        let f2: f64 = m
            .eval_drift(x)
            .map(|f| f.iter().map(|v| v * v).sum())
            .unwrap_or(f64::NAN);
        let div = m.divergence(x, DEFAULT_FD_SPACING);
        0.5 * (f2 + m.hbar_nu() * div) + m.hbar_nu() / (2.0 * m.hbar_mu()) * m.measurement_sq_norm(x)
    }

    /// `V(x)`.
    pub fn potential(&self, x: &[f64]) -> f64 {
        -self.neg_potential(x)
    }

    /// `ℒ = ½|v|² − V(x)`.
    pub fn lagrangian(&self, x: &[f64], velocity: &[f64]) -> f64 {
        0.5 * velocity.iter().map(|v| v * v).sum::<f64>() - self.potential(x)
    }

    /// `ℋ = ½|p|² + V(x)`.
    pub fn hamiltonian(&self, x: &[f64], momentum: &[f64]) -> f64 {
        0.5 * momentum.iter().map(|p| p * p).sum::<f64>() + self.potential(x)
    }

    /// Largest deviation of `−V` from a finite-difference re-evaluation of the
    /// defining expression at random probes in `[−radius, radius]ⁿ`.
    pub fn invariant_violation(&self, probes: usize, radius: f64, seed: u64) -> f64 {
        let m = &self.model;
        let n = m.state_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut f = vec![0.0; n];
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..radius)).collect();
            m.drift_into(&x, &mut f);
            let f2: f64 = f.iter().map(|v| v * v).sum();
            let want = 0.5 * (f2 + m.hbar_nu() * m.fd_divergence(&x, 1e-5))
                + m.hbar_nu() / (2.0 * m.hbar_mu()) * m.measurement_sq_norm(&x);
            worst = worst.max((self.neg_potential(&x) - want).abs() / want.abs().max(1.0));
        }
        worst
    }

    /// Grid operator of `∂ψ = (ħν/2)Δψ + (V/ħν)ψ`.
    pub fn operator(&self, grid: &Grid) -> Result<StencilOperator> {
        let hnu = self.hbar_nu();
        let c: Vec<f64> = (0..grid.len()).map(|i| self.potential(&grid.coords(i)) / hnu).collect();
        StencilOperator::advective_form(grid, 0.5 * hnu, &vec![0.0; grid.len() * grid.dim()], &c)
    }

    /// Evolve `ψ` on a grid for `steps` steps of size `dt`.
    pub fn evolve(&self, psi: &DensityField, steps: usize, dt: f64, scheme: Scheme) -> Result<DensityField> {
        self.model.require_positive_noise()?;
        let op = self.operator(&psi.grid)?;
        let mut values = psi.values.clone();
        for _ in 0..steps {
            values = op.step(&values, dt, scheme)?;
        }
        Ok(DensityField {
            grid: psi.grid.clone(),
            time: psi.time + steps as f64 * dt,
            values,
        })
    }
}

/// `Σ f(midpoint)·Δx` along a polygonal path.
pub fn line_integral(model: &FilterModel, path: &[Vec<f64>]) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "path",
            reason: "needs at least two points".into(),
        });
    }
    let n = model.state_dim();
    let mut mid = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut sum = 0.0;
    for w in path.windows(2) {
        if w[0].len() != n || w[1].len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w[0].len().min(w[1].len()),
            });
        }
        for d in 0..n {
            mid[d] = 0.5 * (w[0][d] + w[1][d]);
        }
        model.drift_into(&mid, &mut f);
        sum += (0..n).map(|d| f[d] * (w[1][d] - w[0][d])).sum::<f64>();
    }
    Ok(sum)
}

/// `exp((φ(x) − φ(x₀))/ħν)`.
pub fn gauge_factor(phi: impl Fn(&[f64]) -> f64, x: &[f64], x0: &[f64], hbar_nu: f64) -> f64 {
    ((phi(x) - phi(x0)) / hbar_nu).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

const MC_CHUNK: usize = 1024;

/// Monte Carlo estimate of `P̃(t, x | 0, x₀)` by Brownian bridges.
pub fn mc_matrix_element(
    model: &FilterModel,
    x0: &[f64],
    x: &[f64],
    t: f64,
    slices: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    mc_matrix_element_with(model, x0, x, t, slices, samples, seed, Execution::default())
}

#[allow(clippy::too_many_arguments)]
pub fn mc_matrix_element_with(
    model: &FilterModel,
    x0: &[f64],
    x: &[f64],
    t: f64,
    slices: usize,
    samples: usize,
    seed: u64,
    execution: Execution,
) -> Result<McEstimate> {
    if !(t > 0.0) {
        return Err(Error::DegenerateBridge(t));
    }
    if slices < 2 {
        return Err(Error::InvalidParameter {
            name: "slices",
            reason: format!("need at least 2, got {slices}"),
        });
    }
    if samples < 1 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "need at least 1".into(),
        });
    }
    let n = model.state_dim();
    for p in [x0, x] {
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
    }
    model.require_positive_noise()?;
    let system = euclidean_potential(model);
    let hnu = model.hbar_nu();
    let dt = t / slices as f64;

    let mut log_w = vec![0.0; samples];
    execution.for_chunks(&mut log_w, MC_CHUNK, |chunk, out| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        let mut cur = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut mid = vec![0.0; n];
        let mut f = vec![0.0; n];
        for lw in out.iter_mut() {
            cur.copy_from_slice(x0);
            let mut acc = 0.0;
            for k in 0..slices {
                let remaining = t - k as f64 * dt;
                if k + 1 == slices {
                    next.copy_from_slice(x);
                } else {
                    let pull = dt / remaining;
                    let sd = (hnu * dt * (remaining - dt) / remaining).sqrt();
                    for d in 0..n {
                        let z: f64 = rng.sample(StandardNormal);
                        next[d] = cur[d] + pull * (x[d] - cur[d]) + sd * z;
                    }
                }
                for d in 0..n {
                    mid[d] = 0.5 * (cur[d] + next[d]);
                }
                model.drift_into(&mid, &mut f);
                let work: f64 = (0..n).map(|d| f[d] * (next[d] - cur[d])).sum();
                acc += work / hnu - dt * system.neg_potential(&mid) / hnu;
                std::mem::swap(&mut cur, &mut next);
            }
            *lw = acc;
        }
    });

    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::InvalidModel {
            what: "path weight",
            coordinate: 0,
        });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let count = samples as f64;
    let mean = w.iter().sum::<f64>() / count;
    let var = if samples > 1 {
        w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let free = crate::baselines::heat_kernel(hnu, t, x0, x);
    let scale = free * top.exp();
    Ok(McEstimate {
        value: scale * mean,
        stderr: scale * (var / count).sqrt(),
    })
}

/// Data of the Yau reduction: potential `q`, rotation `B(t) = e^{−Lt}` and
/// shift `b(t) = −∫₀ᵗ e^{−Ls} l ds`.
#[derive(Clone)]
pub struct ReductionData {
    spec: YauFilterSpec,
    model: FilterModel,
    invertible: bool,
}

impl ReductionData {
    pub fn spec(&self) -> &YauFilterSpec {
        &self.spec
    }
    pub fn model(&self) -> &FilterModel {
        &self.model
    }
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }
    pub fn hbar_nu(&self) -> f64 {
        self.model.hbar_nu()
    }

    /// `q(x) = ∇²φ + (|∇φ|² + 2(Lx + l)·∇φ)/ħν + |h|²/ħμ + tr L`.
    pub fn q(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut g = vec![0.0; n];
        let mut lin = vec![0.0; n];
        self.spec.phi_gradient_into(x, &mut g);
        self.spec.linear_part_into(x, &mut lin);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let cross: f64 = g.iter().zip(&lin).map(|(a, b)| a * b).sum();
        let (hnu, hmu) = (self.model.hbar_nu(), self.model.hbar_mu());
        self.spec.phi_laplacian(x)
            + (g2 + 2.0 * cross) / hnu
            + self.model.measurement_sq_norm(x) / hmu
            + self.spec.l_matrix().trace()
    }

    pub fn b_matrix(&self, t: f64) -> DMatrix<f64> {
        expm(&(self.spec.l_matrix() * -t))
    }

    pub fn b_vector(&self, t: f64) -> DVector<f64> {
        let l = self.spec.l_matrix();
        let v = self.spec.l_vector();
        if self.invertible {
            let n = self.dim();
            let inv = l.clone().try_inverse().expect("invertibility checked at construction");
            -(inv * (DMatrix::identity(n, n) - self.b_matrix(t)) * v)
        } else {
            -integrated_exp_times(&(-l), v, t)
        }
    }

    /// `x̃ = B(t)x + b(t)`.
    pub fn to_reduced(&self, t: f64, x: &[f64]) -> DVector<f64> {
        self.b_matrix(t) * DVector::from_column_slice(x) + self.b_vector(t)
    }

    /// `x = B(t)ᵀ(x̃ − b(t))`.
    pub fn from_reduced(&self, t: f64, xt: &[f64]) -> DVector<f64> {
        self.b_matrix(t).transpose() * (DVector::from_column_slice(xt) - self.b_vector(t))
    }
}

/// Check that `model` has the drift of `spec` and assemble the reduction.
pub fn build_reduction(spec: &YauFilterSpec, model: &FilterModel) -> Result<ReductionData> {
    let n = spec.dim();
    if model.state_dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: model.state_dim(),
        });
    }
    model.require_positive_noise()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut deviation = 0.0f64;
    for _ in 0..64 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let want = yau_drift(spec, &x)?;
        let got = model.eval_drift(&x)?;
        for (a, b) in want.iter().zip(&got) {
            deviation = deviation.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    if deviation > 1e-8 {
        return Err(Error::SpecMismatch { deviation });
    }
    Ok(ReductionData {
        spec: spec.clone(),
        model: model.clone(),
        invertible: condition_number(spec.l_matrix()) < 1e12,
    })
}

/// Ratio above which Schrödinger mass on the boundary ring counts as escaped.
pub const SUPPORT_ESCAPE_RATIO: f64 = 1e-5;

fn check_support(field: &DensityField) -> Result<()> {
    let top = field.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(());
    }
    let edge = field
        .values
        .iter()
        .enumerate()
        .filter(|(i, _)| field.grid.is_boundary(*i) || field.grid.cells_to_boundary(*i) < 2)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let ratio = edge / top;
    if ratio > SUPPORT_ESCAPE_RATIO {
        return Err(Error::SupportEscape { ratio });
    }
    Ok(())
}

/// Evolve the YYe prior by the Schrödinger route: strip the gauge, solve in
/// reduced coordinates, map back and reapply the gauge.
pub fn reduce_and_solve(
    spec: &YauFilterSpec,
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    t1: f64,
    dt: f64,
) -> Result<DensityField> {
    reduce_and_solve_with(spec, model, grid, prior, t1, dt, Scheme::CrankNicolson)
}

pub fn reduce_and_solve_with(
    spec: &YauFilterSpec,
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    t1: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<DensityField> {
    if prior.grid != *grid {
        return Err(Error::GridMismatch);
    }
    let reduction = build_reduction(spec, model)?;
    let hnu = model.hbar_nu();
    let span = t1 - prior.time;
    let steps = step_count(span, dt)?;

    let start = DensityField::from_fn(grid.clone(), 0.0, |x| (-spec.phi(x) / hnu).exp());
    let mut nu = DensityField {
        grid: grid.clone(),
        time: 0.0,
        values: start.values.iter().zip(&prior.values).map(|(g, s)| g * s).collect(),
    };
    check_support(&nu)?;
    let mut problem = PdeProblem::schrodinger(&reduction, grid, dt, scheme)?;
    let check_every = (steps / 10).max(1);
    for k in 0..steps {
        let t = nu.time;
        nu = crate::pde::step_schrodinger(&mut problem, &nu, t)?;
        if (k + 1) % check_every == 0 {
            check_support(&nu)?;
        }
    }
    let tau = steps as f64 * dt;
    let b = reduction.b_matrix(tau);
    let shift = reduction.b_vector(tau);
    let values = Execution::default().map(grid.len(), |i| {
        let x = grid.coords(i);
        let xt = &b * DVector::from_column_slice(&x) + &shift;
        (spec.phi(&x) / hnu).exp() * nu.interpolate(xt.as_slice())
    });
    Ok(DensityField {
        grid: grid.clone(),
        time: t1,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BuiltinModel;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn build(b: BuiltinModel) -> FilterModel {
        b.build().unwrap()
    }

    fn ou(gain: f64) -> FilterModel {
        build(BuiltinModel::Ou {
            dim: 1,
            rate: 1.0,
            meas_gain: gain,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        })
    }

    #[test]
    fn potential_examples() {
        let free = euclidean_potential(&build(BuiltinModel::Zero {
            dim: 1,
            meas_gain: 0.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        }));
        assert_eq!(free.potential(&[0.7]), 0.0);
        let sys = euclidean_potential(&ou(0.0));
        for x in [-1.5, 0.0, 0.4, 2.0] {
            assert_relative_eq!(sys.potential(&[x]), 0.5 * (1.0 - x * x), epsilon = 1e-12);
        }
        let meas = euclidean_potential(&build(BuiltinModel::Zero {
            dim: 1,
            meas_gain: 1.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        }));
        assert_relative_eq!(meas.potential(&[1.2]), -0.72, epsilon = 1e-12);
        assert!(sys.invariant_violation(32, 3.0, 1) < 1e-6);
    }

    #[test]
    fn lagrangian_and_hamiltonian() {
        let sys = euclidean_potential(&ou(0.0));
        let v = sys.potential(&[0.5]);
        assert_relative_eq!(sys.lagrangian(&[0.5], &[2.0]), 2.0 - v);
        assert_relative_eq!(sys.hamiltonian(&[0.5], &[2.0]), 2.0 + v);
    }

    fn circle(segments: usize) -> Vec<Vec<f64>> {
        (0..=segments)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / segments as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    }

    #[test]
    fn line_integral_of_rotation_field() {
        let m = FilterModel::new(
            "rot",
            2,
            1,
            Arc::new(|x: &[f64], o: &mut [f64]| {
                o[0] = x[1];
                o[1] = -x[0];
            }),
            Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0),
            1.0,
            1.0,
        )
        .unwrap();
        let v = line_integral(&m, &circle(10_000)).unwrap();
        assert!((v + 2.0 * std::f64::consts::PI).abs() < 1e-3, "{v}");
    }

    #[test]
    fn gradient_line_integrals() {
        let spec =
            YauFilterSpec::with_polynomial_potential(DMatrix::zeros(2, 2), DVector::zeros(2), -1.0, 0.3).unwrap();
        let m = spec
            .to_model("grad", 1, Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), 1.0, 1.0)
            .unwrap();
        let loop_value = line_integral(&m, &circle(2000)).unwrap();
        assert!(loop_value.abs() < 1e-6);
        let path: Vec<Vec<f64>> = (0..=2000)
            .map(|k| {
                let s = k as f64 / 2000.0;
                vec![0.2 + s, -0.5 + 1.3 * s * s]
            })
            .collect();
        let last = path.last().unwrap().clone();
        let want = spec.phi(&last) - spec.phi(&path[0]);
        assert!((line_integral(&m, &path).unwrap() - want).abs() < 1e-5);
        assert!(line_integral(&m, &path[..1]).is_err());
    }

    #[test]
    fn gauge_factor_examples() {
        let phi = |x: &[f64]| -x[0] * x[0] / 2.0;
        assert_eq!(gauge_factor(phi, &[0.3], &[0.3], 1.0), 1.0);
        assert_relative_eq!(gauge_factor(phi, &[1.0], &[0.0], 1.0), 0.60653, epsilon = 1e-5);
        let p = gauge_factor(phi, &[1.2], &[-0.4], 0.7) * gauge_factor(phi, &[-0.4], &[1.2], 0.7);
        assert_relative_eq!(p, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn free_bridge_is_exact() {
        let m = build(BuiltinModel::Zero {
            dim: 1,
            meas_gain: 0.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        });
        let e = mc_matrix_element(&m, &[0.2], &[0.2], 1.0, 16, 100, 3).unwrap();
        assert_relative_eq!(e.value, 0.39894, epsilon = 1e-5);
        assert_eq!(e.stderr, 0.0);
        assert!(matches!(
            mc_matrix_element(&m, &[0.0], &[0.0], 0.0, 16, 10, 1),
            Err(Error::DegenerateBridge(_))
        ));
    }

    #[test]
    fn mc_matches_ou_density() {
        let m = ou(0.0);
        let x = (-1.0f64).exp();
        let e = mc_matrix_element(&m, &[1.0], &[x], 1.0, 64, 20_000, 11).unwrap();
        let want = crate::baselines::ou_transition_density(1.0, 1.0, 1.0, 1.0, x);
        assert!(
            (e.value - want).abs() < 3.0 * e.stderr + 2e-3,
            "{} ± {} vs {want}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn mc_is_thread_independent() {
        let m = ou(1.0);
        let a = mc_matrix_element_with(&m, &[0.5], &[0.0], 1.0, 32, 5000, 9, Execution::Sequential).unwrap();
        let b = mc_matrix_element_with(&m, &[0.5], &[0.0], 1.0, 32, 5000, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    fn rotation_spec(l: [f64; 2], a: f64) -> YauFilterSpec {
        let lm = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        YauFilterSpec::with_polynomial_potential(lm, DVector::from_row_slice(&l), a, 0.0).unwrap()
    }

    #[test]
    fn trivial_reduction() {
        let spec = YauFilterSpec::with_polynomial_potential(DMatrix::zeros(1, 1), DVector::zeros(1), 0.0, 0.0).unwrap();
        let m = spec
            .to_model("free", 1, Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0), 1.0, 1.0)
            .unwrap();
        let r = build_reduction(&spec, &m).unwrap();
        assert_eq!(r.q(&[0.7]), 0.0);
        assert_eq!(r.b_matrix(0.8), DMatrix::identity(1, 1));
        assert_eq!(r.b_vector(0.8)[0], 0.0);
    }

    #[test]
    fn rotation_reduction() {
        let spec = rotation_spec([1.0, 0.0], 0.0);
        let m = spec
            .to_model("rot", 1, Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), 1.0, 1.0)
            .unwrap();
        let r = build_reduction(&spec, &m).unwrap();
        for t in [0.0, 0.3, 1.7] {
            let b = r.b_matrix(t);
            let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
            assert!((&b - want).abs().max() < 1e-12);
            assert!((b.transpose() * &b - DMatrix::identity(2, 2)).abs().max() < 1e-10);
            let h = 1e-5;
            let db = (r.b_matrix(t + h) - r.b_matrix(t - h)) / (2.0 * h);
            assert!((db + &b * spec.l_matrix()).abs().max() < 1e-6);
            let dbv = (r.b_vector(t + h) - r.b_vector(t - h)) / (2.0 * h);
            assert!((dbv + &b * spec.l_vector()).abs().max() < 1e-6);
        }
        assert_eq!(r.b_vector(0.0).norm(), 0.0);
        let x = [0.3, -0.8];
        let back = r.from_reduced(0.9, r.to_reduced(0.9, &x).as_slice());
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn q_example_with_translation() {
        let spec =
            YauFilterSpec::with_polynomial_potential(DMatrix::zeros(1, 1), DVector::from_element(1, 1.0), -1.0, 0.0)
                .unwrap();
        let m = spec
            .to_model("y", 1, Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), 1.0, 1.0)
            .unwrap();
        let r = build_reduction(&spec, &m).unwrap();
        for x in [-1.0, 0.0, 0.5, 2.0] {
            assert_relative_eq!(r.q(&[x]), 2.0 * x * x - 2.0 * x - 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(r.b_vector(0.6)[0], -0.6, epsilon = 1e-12);
    }

    #[test]
    fn singular_l_uses_series_shift() {
        let spec = YauFilterSpec::with_polynomial_potential(
            DMatrix::zeros(2, 2),
            DVector::from_row_slice(&[1.0, -2.0]),
            0.0,
            0.0,
        )
        .unwrap();
        let m = spec
            .to_model("s", 1, Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), 1.0, 1.0)
            .unwrap();
        let r = build_reduction(&spec, &m).unwrap();
        let b = r.b_vector(0.5);
        assert_relative_eq!(b[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(b[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_spec_rejected() {
        let spec = rotation_spec([0.0, 0.0], -1.0);
        let other = rotation_spec([1.0, 0.0], -1.0);
        let m = other
            .to_model("w", 1, Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), 1.0, 1.0)
            .unwrap();
        assert!(matches!(build_reduction(&spec, &m), Err(Error::SpecMismatch { .. })));
    }

    #[test]
    fn harmonic_ground_state_is_stationary() {
        let spec =
            YauFilterSpec::with_polynomial_potential(DMatrix::zeros(1, 1), DVector::zeros(1), -1.0, 0.0).unwrap();
        let m = spec
            .to_model("h", 1, Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0), 1.0, 1.0)
            .unwrap();
        let r = build_reduction(&spec, &m).unwrap();
        for x in [-1.0, 0.0, 1.5] {
            assert_relative_eq!(r.q(&[x]), x * x - 1.0, epsilon = 1e-12);
        }
        let grid = Grid::cube(1, -8.0, 8.0, 321).unwrap();
        let mut p = PdeProblem::schrodinger(&r, &grid, 1e-3, Scheme::CrankNicolson).unwrap();
        let g = DensityField::from_fn(grid.clone(), 0.0, |x| (-x[0] * x[0] / 2.0).exp());
        let mut u = g.clone();
        for _ in 0..500 {
            let t = u.time;
            u = crate::pde::step_schrodinger(&mut p, &u, t).unwrap();
        }
        assert!(u.relative_l2_error(&g).unwrap() < 1e-3);
    }

    #[test]
    fn static_reduction_matches_direct_yye() {
        let spec =
            YauFilterSpec::with_polynomial_potential(DMatrix::zeros(1, 1), DVector::zeros(1), -1.0, 0.0).unwrap();
        let m = spec
            .to_model("g", 1, Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0), 1.0, 1.0)
            .unwrap();
        let grid = Grid::cube(1, -6.0, 6.0, 481).unwrap();
        let prior = DensityField::gaussian(
            grid.clone(),
            0.0,
            &DVector::from_element(1, 0.5),
            &DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let dt = 1e-4;
        let reduced = reduce_and_solve(&spec, &m, &grid, &prior, 0.5, dt).unwrap();
        let direct = PdeProblem::yye(&m, &grid, dt, Scheme::CrankNicolson)
            .unwrap()
            .evolve_to(&prior, 0.5)
            .unwrap();
        assert!(reduced.relative_l2_error(&direct).unwrap() < 1e-3);
    }

    #[test]
    fn resampling_preserves_mass() {
        let grid = Grid::cube(2, -5.0, 5.0, 101).unwrap();
        let u = DensityField::gaussian(
            grid.clone(),
            0.0,
            &DVector::from_row_slice(&[0.5, -0.2]),
            &DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        let b = expm(&(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]) * -0.7));
        let shift = DVector::from_row_slice(&[0.3, 0.1]);
        let moved = DensityField::from_fn(grid, 0.0, |x| {
            let xt = &b * DVector::from_column_slice(x) + &shift;
            u.interpolate(xt.as_slice())
        });
        assert!((moved.mass() - u.mass()).abs() / u.mass() < 1e-4);
    }
}
