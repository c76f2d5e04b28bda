//! Uniform rectangular grids over a truncated state-space box, and density
//! samples on them.
//!
//! Node storage is row-major: the last coordinate varies fastest.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.lower == other.lower && self.upper == other.upper && self.points == other.points
    }
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        let n = lower.len();
        if n == 0 || upper.len() != n || points.len() != n {
            return Err(Error::InvalidGrid(format!(
                "bounds and point counts must share a positive dimension (got {}, {}, {})",
                lower.len(),
                upper.len(),
                points.len()
            )));
        }
        for d in 0..n {
            if !(lower[d].is_finite() && upper[d].is_finite() && upper[d] > lower[d]) {
                return Err(Error::InvalidGrid(format!(
                    "dimension {d}: need finite lower < upper, got [{}, {}]",
                    lower[d], upper[d]
                )));
            }
            if points[d] < 3 {
                return Err(Error::InvalidGrid(format!(
                    "dimension {d}: need at least 3 points, got {}",
                    points[d]
                )));
            }
        }
        let spacing = (0..n).map(|d| (upper[d] - lower[d]) / (points[d] - 1) as f64).collect();
        let mut strides = vec![1; n];
        for d in (0..n - 1).rev() {
            strides[d] = strides[d + 1] * points[d + 1];
        }
        Ok(Self {
            lower,
            upper,
            points,
            spacing,
            strides,
        })
    }

    /// Same `points` in every dimension of the cube `[lower, upper]ⁿ`.
    pub fn cube(dim: usize, lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], vec![points; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn points(&self) -> &[usize] {
        &self.points
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Differencing step for derivative fallbacks: `1e-4 ×` the narrowest box width.
    pub fn fd_spacing(&self) -> f64 {
        1e-4 * (0..self.dim())
            .map(|d| self.upper[d] - self.lower[d])
            .fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn coord(&self, dim: usize, i: usize) -> f64 {
        self.lower[dim] + i as f64 * self.spacing[dim]
    }

    #[inline]
    pub fn multi_index_into(&self, flat: usize, out: &mut [usize]) {
        let mut rest = flat;
        for d in 0..self.dim() {
            out[d] = rest / self.strides[d];
            rest %= self.strides[d];
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    #[inline]
    pub fn coords_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for d in 0..self.dim() {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            out[d] = self.coord(d, i);
        }
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coords_into(flat, &mut x);
        x
    }

    /// Whether the node lies on the box boundary in any dimension.
    pub fn is_boundary(&self, flat: usize) -> bool {
        let mut rest = flat;
        for d in 0..self.dim() {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            if i == 0 || i + 1 == self.points[d] {
                return true;
            }
        }
        false
    }

    /// Minimum distance (in cells, over dimensions) from the node to the boundary.
    pub fn cells_to_boundary(&self, flat: usize) -> usize {
        let mut rest = flat;
        let mut best = usize::MAX;
        for d in 0..self.dim() {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            best = best.min(i).min(self.points[d] - 1 - i);
        }
        best
    }

    /// Nearest node to `x` (clamped into the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for d in 0..self.dim() {
            let r = ((x[d] - self.lower[d]) / self.spacing[d]).round();
            let i = r.clamp(0.0, (self.points[d] - 1) as f64) as usize;
            flat += i * self.strides[d];
        }
        flat
    }

    /// Composite trapezoid quadrature weight of a node.
    #[inline]
    pub fn trapezoid_weight(&self, flat: usize) -> f64 {
        let mut rest = flat;
        let mut w = self.cell_volume();
        for d in 0..self.dim() {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            if i == 0 || i + 1 == self.points[d] {
                w *= 0.5;
            }
        }
        w
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|d| x[d] >= self.lower[d] && x[d] <= self.upper[d])
    }
}

/// Conditional mean, covariance and pre-normalization mass of a density.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub mass: f64,
}

/// Below this total mass a field is treated as numerically zero.
pub const MASS_FLOOR: f64 = 1e-300;

/// Grid samples of an unnormalized density at one time.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub grid: Grid,
    pub time: f64,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, time, values })
    }

    pub fn zeros(grid: Grid, time: f64) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, time, values }
    }

    pub fn from_fn(grid: Grid, time: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.coords_into(i, &mut x);
                f(&x)
            })
            .collect();
        Self { grid, time, values }
    }

    /// Discrete delta: a single node at the nearest grid point carrying unit mass.
    pub fn delta(grid: Grid, time: f64, at: &[f64]) -> Self {
        let mut field = Self::zeros(grid, time);
        let idx = field.grid.nearest_node(at);
        field.values[idx] = 1.0 / field.grid.cell_volume();
        field
    }

    /// Gaussian density `N(mean, cov)` sampled at the nodes.
    pub fn gaussian(grid: Grid, time: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = grid.dim();
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: mean.len(),
            });
        }
        let chol = cov.clone().cholesky().ok_or(Error::InvalidParameter {
            name: "covariance",
            reason: "must be symmetric positive definite".into(),
        })?;
        let inv = chol.inverse();
        let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
        let norm = ((2.0 * std::f64::consts::PI).powi(n as i32) * det).sqrt();
        Ok(Self::from_fn(grid, time, |x| {
            let d = DVector::from_fn(n, |i, _| x[i] - mean[i]);
            (-0.5 * (d.transpose() * &inv * &d)[(0, 0)]).exp() / norm
        }))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total mass by trapezoid quadrature.
    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.grid.trapezoid_weight(i))
            .sum()
    }

    /// `(Σ v² ΔV)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// `‖self − other‖₂ / ‖other‖₂`.
    pub fn relative_l2_error(&self, reference: &DensityField) -> Result<f64> {
        if self.grid != reference.grid {
            return Err(Error::GridMismatch);
        }
        let num: f64 = self
            .values
            .iter()
            .zip(&reference.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = reference.values.iter().map(|b| b * b).sum();
        Ok((num / den).sqrt())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Copy rescaled to unit trapezoid mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > MASS_FLOOR) {
            return Err(Error::ZeroMass { mass: m });
        }
        Ok(self.scaled(1.0 / m))
    }

    /// Fraction of the mass carried by nodes within `cells` of the boundary.
    pub fn boundary_mass_fraction(&self, cells: usize) -> f64 {
        let total: f64 = self.values.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.cells_to_boundary(*i) < cells)
            .map(|(_, v)| v.abs())
            .sum();
        edge / total
    }

    /// Multilinear interpolation; zero outside the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let n = self.grid.dim();
        if !self.grid.contains(x) {
            return 0.0;
        }
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for d in 0..n {
            let s = (x[d] - self.grid.lower[d]) / self.grid.spacing[d];
            let i = (s.floor() as usize).min(self.grid.points[d] - 2);
            base[d] = i;
            frac[d] = s - i as f64;
        }
        let mut acc = 0.0;
        let mut corner = vec![0usize; n];
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            for d in 0..n {
                let up = (mask >> d) & 1;
                corner[d] = base[d] + up;
                w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            if w != 0.0 {
                acc += w * self.values[self.grid.flat_index(&corner)];
            }
        }
        acc
    }

    /// Normalize on the grid and return conditional mean, covariance and the
    /// pre-normalization mass (trapezoid quadrature).
    pub fn estimate(&self) -> Result<Estimate> {
        let n = self.grid.dim();
        let mass = self.mass();
        if !(mass > MASS_FLOOR) || !mass.is_finite() {
            return Err(Error::ZeroMass { mass });
        }
        let mut x = vec![0.0; n];
        let mut mean = DVector::zeros(n);
        for (i, v) in self.values.iter().enumerate() {
            let w = v * self.grid.trapezoid_weight(i);
            self.grid.coords_into(i, &mut x);
            for d in 0..n {
                mean[d] += w * x[d];
            }
        }
        mean /= mass;
        let mut cov = DMatrix::zeros(n, n);
        for (i, v) in self.values.iter().enumerate() {
            let w = v * self.grid.trapezoid_weight(i);
            self.grid.coords_into(i, &mut x);
            for a in 0..n {
                for b in 0..n {
                    cov[(a, b)] += w * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        cov /= mass;
        Ok(Estimate {
            mean,
            covariance: cov,
            mass,
        })
    }

    /// CSV with header `x_1,..,x_n,value`, one row per node in storage order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.grid.dim();
        let header: Vec<String> = (1..=n).map(|d| format!("x_{d}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut x = vec![0.0; n];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.coords_into(i, &mut x);
            for c in &x {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Compact binary dump. Header: dimension count, lower bounds, upper
    /// bounds, point counts (all little-endian 64-bit); payload: the values
    /// as little-endian `f64` in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.grid;
        w.write_all(&(g.dim() as u64).to_le_bytes())?;
        for v in g.lower.iter().chain(&g.upper) {
            w.write_all(&v.to_le_bytes())?;
        }
        for &p in &g.points {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`DensityField::write_binary`]; the time is not stored and set to `time`.
    pub fn read_binary<R: Read>(mut r: R, time: f64) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        if n == 0 || n > 16 {
            return Err(Error::InvalidGrid(format!("implausible dimension count {n}")));
        }
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            lower.push(f64::from_le_bytes(next(&mut r)?));
        }
        for _ in 0..n {
            upper.push(f64::from_le_bytes(next(&mut r)?));
        }
        for _ in 0..n {
            points.push(u64::from_le_bytes(next(&mut r)?) as usize);
        }
        let grid = Grid::new(lower, upper, points)?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            values.push(f64::from_le_bytes(next(&mut r)?));
        }
        Self::new(grid, time, values)
    }
}
