//! The path-integral filter.
//!
//! The fundamental solution of the measurement-independent Yau equation is
//! approximated over a short time `ε` by the Dirac–Feynman kernel
//!
//! ```text
//! K(x, x') = A exp( −|x − x' − ε f(x̄)|² / (2ħν ε) − (ε/2) ∇·f(x̄) − (ε / 2ħμ) |h(x̄)|² ),
//! x̄ = (x + x') / 2
//! ```
//!
//! and longer times are reached by Chapman–Kolmogorov composition on the grid,
//! `ũ(t+ε, x) = Σ_{x'} K(x, x') ũ(t, x') ΔV`. Observations enter only through
//! the pointwise factor `exp(Σ_k h_k(x) Δy_k / ħμ)` applied once per interval,
//! so the kernel is built once and reused for the whole record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{DensityField, Estimate, Grid};
use crate::models::FilterModel;
use crate::simulate::MeasurementSeries;

/// Where the drift, divergence and measurement terms are evaluated inside a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// `x̄ = (x + x')/2`.
    #[default]
    Midpoint,
    /// `x̄ = x'` (start of the step). The Gaussian is then already consistent
    /// with the forward equation, so the `−(ε/2)∇·f` factor is dropped.
    PrePoint,
}

/// Placement of the measurement factor relative to an interval's propagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementForm {
    /// Apply the factor for `[τ_{l−1}, τ_l]`, then propagate.
    Pre,
    /// Propagate over `[τ_{l−1}, τ_l]`, then apply the factor.
    #[default]
    Post,
}

#[derive(Clone, Copy, Debug)]
pub struct KernelOptions {
    pub convention: Convention,
    /// Band half-width in standard deviations `√(ħν ε)`, on top of the drift displacement.
    pub band_sigmas: f64,
    pub execution: Execution,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            convention: Convention::Midpoint,
            band_sigmas: 6.0,
            execution: Execution::default(),
        }
    }
}

/// Banded short-time kernel on a fixed grid, stored row-wise: row `i` holds
/// `K(x_i, x')` for every source node `x'` inside the band.
#[derive(Clone, Debug)]
pub struct ShortTimeKernel {
    grid: Grid,
    epsilon: f64,
    band_radius: Vec<usize>,
    normalization: f64,
    convention: Convention,
    row_start: Vec<usize>,
    sources: Vec<u32>,
    weights: Vec<f64>,
    execution: Execution,
}

impl ShortTimeKernel {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn band_radius(&self) -> &[usize] {
        &self.band_radius
    }
    /// The constant `A` that makes the free Gaussian sum to one over the band.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }
    pub fn convention(&self) -> Convention {
        self.convention
    }
    pub fn execution(&self) -> Execution {
        self.execution
    }
    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// Number of stored weights.
    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// `(source node, K(x_row, x_source))` pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_start[i]..self.row_start[i + 1];
        self.sources[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(s, w)| (*s as usize, *w))
    }

    /// Kernel density `K(x_i, x_j)`, zero outside the band.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(s, _)| *s == j).map_or(0.0, |(_, w)| w)
    }

    /// One Chapman–Kolmogorov step with an explicit execution policy.
    pub fn apply_with(&self, values: &[f64], execution: Execution) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        let mut out = vec![0.0; values.len()];
        execution.fill(&mut out, |i| {
            let r = self.row_start[i]..self.row_start[i + 1];
            let mut acc = 0.0;
            for (s, w) in self.sources[r.clone()].iter().zip(&self.weights[r]) {
                acc += w * values[*s as usize];
            }
            acc * vol
        });
        out
    }
}

/// Build the short-time kernel of the Yau equation for step `epsilon`.
pub fn build_kernel(model: &FilterModel, grid: &Grid, epsilon: f64) -> Result<ShortTimeKernel> {
    build_kernel_with(model, grid, epsilon, KernelOptions::default())
}

pub fn build_kernel_with(
    model: &FilterModel,
    grid: &Grid,
    epsilon: f64,
    opts: KernelOptions,
) -> Result<ShortTimeKernel> {
    model.require_positive_noise()?;
    let n = grid.dim();
    if model.state_dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: model.state_dim(),
        });
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("must be positive, got {epsilon}"),
        });
    }
    if grid.len() > u32::MAX as usize {
        return Err(Error::InvalidGrid("too many nodes for a banded kernel".into()));
    }
    let hbar_nu = model.hbar_nu();
    let hbar_mu = model.hbar_mu();
    let sigma = (hbar_nu * epsilon).sqrt();
    let spacing = grid.spacing().to_vec();

    let max_drift = {
        let mut x = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut max = vec![0.0f64; n];
        for idx in 0..grid.len() {
            grid.coords_into(idx, &mut x);
            model.drift_into(&x, &mut f);
            for d in 0..n {
                if !f[d].is_finite() {
                    return Err(Error::InvalidModel {
                        what: "drift",
                        coordinate: d,
                    });
                }
                max[d] = max[d].max(f[d].abs());
            }
        }
        max
    };

    let mut band_radius = Vec::with_capacity(n);
    for d in 0..n {
        if sigma < spacing[d] {
            return Err(Error::EpsilonTooSmall {
                epsilon,
                width: sigma,
                spacing: spacing[d],
                dim: d,
            });
        }
        let displacement = epsilon * max_drift[d];
        let radius = ((opts.band_sigmas * sigma + displacement) / spacing[d]).ceil() as usize;
        let half_band = spacing[d] * radius as f64 / 2.0;
        if displacement > half_band {
            return Err(Error::EpsilonTooLarge {
                epsilon,
                displacement,
                half_band,
                dim: d,
            });
        }
        if 2 * radius + 1 > grid.points()[d] {
            return Err(Error::BandExceedsGrid {
                radius,
                points: grid.points()[d],
                dim: d,
            });
        }
        band_radius.push(radius);
    }

    // Band offsets in row-major order; fixed order keeps the convolution reproducible.
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for &r in &band_radius {
        let r = r as isize;
        offsets = offsets
            .into_iter()
            .flat_map(|o| {
                (-r..=r).map(move |k| {
                    let mut o = o.clone();
                    o.push(k);
                    o
                })
            })
            .collect();
    }

    let vol = grid.cell_volume();
    let free_sum: f64 = offsets
        .iter()
        .map(|o| {
            let d2: f64 = o.iter().zip(&spacing).map(|(k, h)| (*k as f64 * h).powi(2)).sum();
            (-d2 / (2.0 * hbar_nu * epsilon)).exp()
        })
        .sum();
    let normalization = 1.0 / (free_sum * vol);
    let fd = grid.fd_spacing();

    let rows: Vec<(Vec<u32>, Vec<f64>)> = opts.execution.map(grid.len(), |i| {
        let mut mi = vec![0usize; n];
        grid.multi_index_into(i, &mut mi);
        let mut x = vec![0.0; n];
        grid.coords_into(i, &mut x);
        let mut src_mi = vec![0usize; n];
        let mut xs = vec![0.0; n];
        let mut xbar = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut h = vec![0.0; model.meas_dim()];
        let mut srcs = Vec::with_capacity(offsets.len());
        let mut ws = Vec::with_capacity(offsets.len());
        'offsets: for o in &offsets {
            for d in 0..n {
                let s = mi[d] as isize - o[d];
                if s < 0 || s >= grid.points()[d] as isize {
                    continue 'offsets;
                }
                src_mi[d] = s as usize;
                xs[d] = grid.coord(d, s as usize);
            }
            for d in 0..n {
                xbar[d] = match opts.convention {
                    Convention::Midpoint => 0.5 * (x[d] + xs[d]),
                    Convention::PrePoint => xs[d],
                };
            }
            model.drift_into(&xbar, &mut f);
            model.measurement_into(&xbar, &mut h);
            let mut quad = 0.0;
            for d in 0..n {
                let r = x[d] - xs[d] - epsilon * f[d];
                quad += r * r;
            }
            let h2: f64 = h.iter().map(|v| v * v).sum();
            let div = match opts.convention {
                Convention::Midpoint => model.divergence(&xbar, fd),
                Convention::PrePoint => 0.0,
            };
            let exponent = -quad / (2.0 * hbar_nu * epsilon) - 0.5 * epsilon * div - epsilon * h2 / (2.0 * hbar_mu);
            srcs.push(grid.flat_index(&src_mi) as u32);
            ws.push(normalization * exponent.exp());
        }
        (srcs, ws)
    });

    let mut row_start = Vec::with_capacity(grid.len() + 1);
    let total: usize = rows.iter().map(|(s, _)| s.len()).sum();
    let mut sources = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    row_start.push(0);
    for (s, w) in rows {
        sources.extend(s);
        weights.extend(w);
        row_start.push(sources.len());
    }
    if let Some(bad) = weights.iter().position(|w| !w.is_finite()) {
        let _ = bad;
        return Err(Error::InvalidModel {
            what: "kernel weight",
            coordinate: 0,
        });
    }

    Ok(ShortTimeKernel {
        grid: grid.clone(),
        epsilon,
        band_radius,
        normalization,
        convention: opts.convention,
        row_start,
        sources,
        weights,
        execution: opts.execution,
    })
}

/// Apply the kernel `steps` times; mass leaving the box is absorbed.
pub fn propagate(kernel: &ShortTimeKernel, field: &DensityField, steps: usize) -> Result<DensityField> {
    if field.grid != kernel.grid {
        return Err(Error::GridMismatch);
    }
    let mut values = field.values.clone();
    for _ in 0..steps {
        values = kernel.apply_with(&values, kernel.execution);
    }
    Ok(DensityField {
        grid: field.grid.clone(),
        time: field.time + steps as f64 * kernel.epsilon,
        values,
    })
}

/// Multiply the field by `exp(Σ_k h_k(x) [y_curr − y_prev]_k / ħμ)`.
///
/// When the largest exponent exceeds 300 the product is formed in log space
/// and the result is rescaled so that its largest value is one.
pub fn measurement_update(
    field: &DensityField,
    model: &FilterModel,
    y_prev: &[f64],
    y_curr: &[f64],
) -> Result<DensityField> {
    let m = model.meas_dim();
    for y in [y_prev, y_curr] {
        if y.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: y.len(),
            });
        }
    }
    model.require_positive_noise()?;
    if field.grid.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.state_dim(),
            got: field.grid.dim(),
        });
    }
    let dy: Vec<f64> = y_curr.iter().zip(y_prev).map(|(c, p)| c - p).collect();
    if dy.iter().all(|v| *v == 0.0) {
        return Ok(field.clone());
    }
    let grid = &field.grid;
    let inv_mu = 1.0 / model.hbar_mu();
    let mut exponents = vec![0.0; field.len()];
    Execution::default().fill(&mut exponents, |i| {
        let x = grid.coords(i);
        let mut h = vec![0.0; m];
        model.measurement_into(&x, &mut h);
        h.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>() * inv_mu
    });
    let max_exp = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max_exp > 300.0 {
        let logs: Vec<f64> = field
            .values
            .iter()
            .zip(&exponents)
            .map(|(v, e)| if *v > 0.0 { v.ln() + e } else { f64::NEG_INFINITY })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logs.iter()
            .zip(&field.values)
            .map(|(l, v)| if *v > 0.0 { (l - top).exp() } else { 0.0 })
            .collect()
    } else {
        field.values.iter().zip(&exponents).map(|(v, e)| v * e.exp()).collect()
    };
    Ok(DensityField {
        grid: grid.clone(),
        time: field.time,
        values,
    })
}

/// Kernel steps per observation interval, checking that `ε` divides it.
pub fn steps_per_interval(dtau: f64, epsilon: f64) -> Result<usize> {
    let ratio = dtau / epsilon;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::TimeMismatch(format!(
            "observation interval {dtau} is not an integer multiple of epsilon {epsilon}"
        )));
    }
    Ok(steps as usize)
}

/// Run the filter over a measurement record, building the kernel once.
/// Emits the unnormalized field after each interval.
pub fn run_filter(
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    meas: &MeasurementSeries,
    epsilon: f64,
    form: MeasurementForm,
) -> Result<Vec<DensityField>> {
    let kernel = build_kernel(model, grid, epsilon)?;
    run_filter_with_kernel(&kernel, model, prior, meas, form)
}

/// [`run_filter`] with a prebuilt (possibly cached) kernel.
pub fn run_filter_with_kernel(
    kernel: &ShortTimeKernel,
    model: &FilterModel,
    prior: &DensityField,
    meas: &MeasurementSeries,
    form: MeasurementForm,
) -> Result<Vec<DensityField>> {
    if prior.grid != kernel.grid {
        return Err(Error::GridMismatch);
    }
    if meas.meas_dim() != model.meas_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.meas_dim(),
            got: meas.meas_dim(),
        });
    }
    let mut field = prior.clone();
    field.time = meas.times[0];
    let mut out = Vec::with_capacity(meas.intervals());
    for l in 1..=meas.intervals() {
        let steps = steps_per_interval(meas.times[l] - meas.times[l - 1], kernel.epsilon)?;
        let (prev, curr) = (&meas.values[l - 1], &meas.values[l]);
        field = match form {
            MeasurementForm::Post => {
                let p = propagate(kernel, &field, steps)?;
                measurement_update(&p, model, prev, curr)?
            }
            MeasurementForm::Pre => {
                let u = measurement_update(&field, model, prev, curr)?;
                propagate(kernel, &u, steps)?
            }
        };
        field.time = meas.times[l];
        let mass = field.mass();
        if mass > 0.0 && !(1e-200..=1e200).contains(&mass) {
            field = field.scaled(1.0 / mass);
        }
        out.push(field.clone());
    }
    Ok(out)
}

/// Conditional mean, covariance and mass of a field.
pub fn estimate(field: &DensityField) -> Result<Estimate> {
    field.estimate()
}
