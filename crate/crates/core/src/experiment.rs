//! Experiment harness: configuration, oracle wiring, report tables and
//! convergence studies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::kalman_filter;
use crate::equivalence::{mc_matrix_element, reduce_and_solve_with};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};
use crate::kernel::{
    build_kernel_with, measurement_update, propagate, run_filter_with_kernel, steps_per_interval, Convention,
    KernelOptions, MeasurementForm, ShortTimeKernel,
};
use crate::models::{BuiltinModel, FilterModel};
use crate::pde::{PdeProblem, Scheme};
use crate::simulate::{observation_times, simulate_measurements, simulate_state, MeasurementSeries, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: BuiltinModel,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub prior: PriorConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    pub epsilon: f64,
    pub obs_spacing: f64,
    /// Euler–Maruyama step for the truth; defaults to `epsilon`.
    #[serde(default)]
    pub sim_dt: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Initial true state; defaults to the prior mean.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleToggles {
    #[serde(default)]
    pub yye: bool,
    #[serde(default)]
    pub dmz_frozen: bool,
    #[serde(default)]
    pub kalman: bool,
    #[serde(default)]
    pub mc: bool,
    #[serde(default)]
    pub schrodinger: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub form: MeasurementForm,
    #[serde(default)]
    pub convention: Convention,
    #[serde(default)]
    pub oracles: OracleToggles,
    /// PDE oracle step; defaults to `epsilon`.
    #[serde(default)]
    pub pde_dt: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub x0: Vec<f64>,
    pub probes: Vec<Vec<f64>>,
    pub t: f64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_slices() -> usize {
    128
}
fn default_samples() -> usize {
    100_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub epsilons: Vec<f64>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| config_error(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(
            self.grid.lower.clone(),
            self.grid.upper.clone(),
            self.grid.points.clone(),
        )
        .map_err(|e| config_error(e.to_string()))
    }

    pub fn prior_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.prior.mean.len();
        let mean = DVector::from_column_slice(&self.prior.mean);
        let cov = DMatrix::from_fn(n, n, |i, j| self.prior.cov[i][j]);
        (mean, cov)
    }

    pub fn pde_dt(&self) -> f64 {
        self.filter.pde_dt.unwrap_or(self.time.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let grid = self.grid()?;
        let model = self.model.build().map_err(|e| config_error(e.to_string()))?;
        let n = grid.dim();
        if model.state_dim() != n {
            return Err(config_error(format!(
                "model has state dimension {} but grid has {n}",
                model.state_dim()
            )));
        }
        if self.prior.mean.len() != n || self.prior.cov.len() != n || self.prior.cov.iter().any(|r| r.len() != n) {
            return Err(config_error("prior mean/cov do not match the grid dimension"));
        }
        if let Some(x0) = &self.prior.x0 {
            if x0.len() != n {
                return Err(config_error("prior.x0 does not match the grid dimension"));
            }
        }
        let t = &self.time;
        if !(t.t1 > t.t0) {
            return Err(config_error("time.t1 must exceed time.t0"));
        }
        for (name, v) in [("epsilon", t.epsilon), ("obs_spacing", t.obs_spacing)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_error(format!("time.{name} must be positive")));
            }
        }
        steps_per_interval(t.obs_spacing, t.epsilon).map_err(|e| config_error(e.to_string()))?;
        observation_times(t.t0, t.t1, t.obs_spacing).map_err(|e| config_error(e.to_string()))?;
        if let Some(dt) = t.sim_dt {
            if !(dt > 0.0) {
                return Err(config_error("time.sim_dt must be positive"));
            }
            steps_per_interval(t.obs_spacing, dt).map_err(|e| config_error(e.to_string()))?;
        }
        if let Some(dt) = self.filter.pde_dt {
            if !(dt > 0.0) {
                return Err(config_error("filter.pde_dt must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds must not be empty"));
        }
        if let Some(mc) = &self.mc {
            if mc.x0.len() != n || mc.probes.iter().any(|p| p.len() != n) {
                return Err(config_error("mc points do not match the grid dimension"));
            }
            if mc.probes.is_empty() {
                return Err(config_error("mc.probes must not be empty"));
            }
        } else if self.filter.oracles.mc {
            return Err(config_error("oracles.mc requires an mc block"));
        }
        if let Some(study) = &self.study {
            for &e in &study.epsilons {
                if !(e > 0.0) {
                    return Err(config_error("study epsilons must be positive"));
                }
                steps_per_interval(t.obs_spacing, e).map_err(|e| config_error(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Kernels keyed by (model, grid, ε), with a count of actual constructions.
#[derive(Default)]
pub struct KernelCache {
    builds: usize,
    entries: Vec<(String, Grid, f64, Convention, Arc<ShortTimeKernel>)>,
}

impl KernelCache {
    pub fn builds(&self) -> usize {
        self.builds
    }

    pub fn get(
        &mut self,
        spec: &BuiltinModel,
        model: &FilterModel,
        grid: &Grid,
        epsilon: f64,
        convention: Convention,
    ) -> Result<Arc<ShortTimeKernel>> {
        let key = serde_json::to_string(spec)?;
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.0 == key && e.1 == *grid && e.2 == epsilon && e.3 == convention)
        {
            return Ok(e.4.clone());
        }
        let opts = KernelOptions {
            convention,
            ..KernelOptions::default()
        };
        let kernel = Arc::new(build_kernel_with(model, grid, epsilon, opts)?);
        self.builds += 1;
        self.entries
            .push((key, grid.clone(), epsilon, convention, kernel.clone()));
        Ok(kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PathIntegral,
    Yye,
    DmzFrozen,
    Kalman,
    Schrodinger,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PathIntegral => "path_integral",
            Method::Yye => "yye",
            Method::DmzFrozen => "dmz_frozen",
            Method::Kalman => "kalman",
            Method::Schrodinger => "schrodinger",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: Method,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntervalRow {
    pub tau: f64,
    pub truth: Vec<f64>,
    pub estimates: Vec<MethodEstimate>,
}

impl IntervalRow {
    pub fn estimate(&self, method: Method) -> Option<&MethodEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub intervals: Vec<IntervalRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmseRow {
    pub seed: u64,
    pub method: Method,
    pub rmse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffRow {
    pub seed: u64,
    pub a: Method,
    pub b: Method,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McRow {
    pub x0: Vec<f64>,
    pub x: Vec<f64>,
    pub t: f64,
    pub slices: usize,
    pub samples: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub grid_reference: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub kernel_builds: usize,
    pub pure_prediction: bool,
    pub warnings: Vec<String>,
    pub runs: Vec<SeedRun>,
    pub mc: Vec<McRow>,
    pub failure: Option<String>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl ExperimentReport {
    pub fn rmse(&self) -> Vec<RmseRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            let mut acc: BTreeMap<Method, (f64, usize)> = BTreeMap::new();
            for row in &run.intervals {
                for e in &row.estimates {
                    let s = acc.entry(e.method).or_default();
                    s.0 += euclid(&e.mean, &row.truth).powi(2);
                    s.1 += 1;
                }
            }
            for (method, (sq, count)) in acc {
                rows.push(RmseRow {
                    seed: run.seed,
                    method,
                    rmse: (sq / count as f64).sqrt(),
                });
            }
        }
        rows
    }

    pub fn differences(&self) -> Vec<DiffRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            let methods: Vec<Method> = run
                .intervals
                .first()
                .map(|r| r.estimates.iter().map(|e| e.method).collect())
                .unwrap_or_default();
            for (i, &a) in methods.iter().enumerate() {
                for &b in &methods[i + 1..] {
                    let diffs: Vec<f64> = run
                        .intervals
                        .iter()
                        .filter_map(|r| Some(euclid(&r.estimate(a)?.mean, &r.estimate(b)?.mean)))
                        .collect();
                    if diffs.is_empty() {
                        continue;
                    }
                    rows.push(DiffRow {
                        seed: run.seed,
                        a,
                        b,
                        mean_abs: diffs.iter().sum::<f64>() / diffs.len() as f64,
                        max_abs: diffs.iter().cloned().fold(0.0, f64::max),
                    });
                }
            }
        }
        rows
    }
}

/// Reference field and estimate from a density, normalized for comparison.
fn method_estimate(method: Method, field: &DensityField) -> Result<MethodEstimate> {
    let e = field.estimate()?;
    Ok(MethodEstimate {
        method,
        mean: e.mean.iter().cloned().collect(),
        cov: e.covariance.iter().cloned().collect(),
    })
}

fn oracle_scheme(config: &ExperimentConfig, grid: &Grid) -> Scheme {
    if grid.dim() > 2 {
        Scheme::Explicit
    } else {
        config.filter.scheme
    }
}

fn renormalize(field: DensityField) -> DensityField {
    let mass = field.mass();
    if mass > 0.0 && mass.is_finite() {
        field.scaled(1.0 / mass)
    } else {
        field
    }
}

/// Filter the record with the YYe finite-difference oracle.
pub fn yye_oracle(
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    meas: &MeasurementSeries,
    form: MeasurementForm,
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<DensityField>> {
    let problem = PdeProblem::yye(model, grid, dt, scheme)?;
    let mut field = prior.clone();
    field.time = meas.times[0];
    let mut out = Vec::with_capacity(meas.intervals());
    for l in 1..=meas.intervals() {
        let (prev, curr) = (&meas.values[l - 1], &meas.values[l]);
        let t = meas.times[l];
        field = match form {
            MeasurementForm::Post => measurement_update(&problem.evolve_to(&field, t)?, model, prev, curr)?,
            MeasurementForm::Pre => problem.evolve_to(&measurement_update(&field, model, prev, curr)?, t)?,
        };
        field = renormalize(field);
        out.push(field.clone());
    }
    Ok(out)
}

fn gauge(field: &DensityField, model: &FilterModel, y: &[f64], sign: f64) -> DensityField {
    let m = model.meas_dim();
    let hmu = model.hbar_mu();
    let grid = &field.grid;
    let values = field
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut h = vec![0.0; m];
            model.measurement_into(&grid.coords(i), &mut h);
            let g: f64 = h.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / hmu;
            v * (sign * g).exp()
        })
        .collect();
    DensityField {
        grid: grid.clone(),
        time: field.time,
        values,
    }
}

/// Filter the record with the frozen robust-DMZ oracle. Over interval `l` the
/// coefficients are frozen at `y(τ_l)` for the pre form and at `y(τ_{l−1})` for
/// the post form, which are the two placements the gauge maps onto.
pub fn dmz_oracle(
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    meas: &MeasurementSeries,
    form: MeasurementForm,
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<DensityField>> {
    let mut sigma = prior.clone();
    sigma.time = meas.times[0];
    let mut out = Vec::with_capacity(meas.intervals());
    for l in 1..=meas.intervals() {
        let (prev, curr) = (&meas.values[l - 1], &meas.values[l]);
        let frozen = match form {
            MeasurementForm::Pre => curr,
            MeasurementForm::Post => prev,
        };
        let problem = PdeProblem::robust_dmz_frozen(model, grid, frozen, dt, scheme)?;
        let u = gauge(&sigma, model, prev, -1.0);
        let u = problem.evolve_to(&u, meas.times[l])?;
        sigma = renormalize(gauge(&u, model, curr, 1.0));
        out.push(sigma.clone());
    }
    Ok(out)
}

/// Filter the record with the Schrödinger reduction for each interval.
pub fn schrodinger_oracle(
    spec: &crate::models::YauFilterSpec,
    model: &FilterModel,
    grid: &Grid,
    prior: &DensityField,
    meas: &MeasurementSeries,
    form: MeasurementForm,
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<DensityField>> {
    let mut field = prior.clone();
    field.time = meas.times[0];
    let mut out = Vec::with_capacity(meas.intervals());
    for l in 1..=meas.intervals() {
        let (prev, curr) = (&meas.values[l - 1], &meas.values[l]);
        let t = meas.times[l];
        field = match form {
            MeasurementForm::Post => {
                let p = reduce_and_solve_with(spec, model, grid, &field, t, dt, scheme)?;
                measurement_update(&p, model, prev, curr)?
            }
            MeasurementForm::Pre => {
                let u = measurement_update(&field, model, prev, curr)?;
                reduce_and_solve_with(spec, model, grid, &u, t, dt, scheme)?
            }
        };
        field = renormalize(field);
        out.push(field.clone());
    }
    Ok(out)
}

/// Truth trajectory and measurement record for one seed.
pub fn simulate_record(config: &ExperimentConfig, seed: u64) -> Result<(Trajectory, MeasurementSeries)> {
    let model = config.model.build()?;
    let t = &config.time;
    let x0 = config.prior.x0.clone().unwrap_or_else(|| config.prior.mean.clone());
    let traj = simulate_state(&model, &x0, t.t0, t.t1, t.sim_dt.unwrap_or(t.epsilon), seed)?;
    let times = observation_times(t.t0, t.t1, t.obs_spacing)?;
    let meas = simulate_measurements(&model, &traj, &times, seed)?;
    Ok((traj, meas))
}

fn is_pure_prediction(model: &FilterModel, grid: &Grid) -> bool {
    (0..grid.len()).all(|i| model.measurement_sq_norm(&grid.coords(i)) == 0.0)
}

/// Approximation of `P̃(t, · | 0, x₀)` on the grid from the kernel.
pub fn grid_kernel_reference(kernel: &ShortTimeKernel, x0: &[f64], t: f64) -> Result<DensityField> {
    let steps = steps_per_interval(t, kernel.epsilon())?;
    let delta = DensityField::delta(kernel.grid().clone(), 0.0, x0);
    propagate(kernel, &delta, steps)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Run only the path-integral filter, ignoring the oracle toggles.
    pub filter_only: bool,
}

/// Run every seed of a configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    run_experiment_into(config, RunOptions::default(), &mut report)?;
    Ok(report)
}

/// Like [`run_experiment`] but accumulating into `report`, so callers can
/// flush whatever finished before a failure.
pub fn run_experiment_into(config: &ExperimentConfig, opts: RunOptions, report: &mut ExperimentReport) -> Result<()> {
    config.validate()?;
    report.config_hash = config.hash();
    let grid = config.grid()?;
    let model = config.model.build()?;
    let mut cache = KernelCache::default();
    let form = config.filter.form;
    let toggles = if opts.filter_only {
        OracleToggles::default()
    } else {
        config.filter.oracles.clone()
    };
    report.pure_prediction = is_pure_prediction(&model, &grid);
    if report.pure_prediction {
        report
            .warnings
            .push("pure prediction: h is identically zero on the grid".into());
    }
    let (prior_mean, prior_cov) = config.prior_moments();
    let prior = DensityField::gaussian(grid.clone(), config.time.t0, &prior_mean, &prior_cov)?;
    let kernel = cache.get(
        &config.model,
        &model,
        &grid,
        config.time.epsilon,
        config.filter.convention,
    )?;
    let linear = match config.model.linear_model() {
        Some(l) if toggles.kalman => Some(l?),
        _ => None,
    };
    let yau = match config.model.yau_spec() {
        Some(s) if toggles.schrodinger => Some(s?),
        _ => None,
    };
    let scheme = oracle_scheme(config, &grid);
    let dt = config.pde_dt();

    for &seed in &config.seeds {
        let (traj, meas) = simulate_record(config, seed)?;
        if traj.states.iter().any(|x| !grid.contains(x)) {
            report
                .warnings
                .push(format!("seed {seed}: true trajectory leaves the grid box"));
        }
        let pi = run_filter_with_kernel(&kernel, &model, &prior, &meas, form)?;
        let mut rows = Vec::with_capacity(pi.len());
        let mut worst_edge = 0.0f64;
        for (l, field) in pi.iter().enumerate() {
            let tau = meas.times[l + 1];
            let truth = traj
                .index_of(tau)
                .map(|k| traj.states[k].clone())
                .ok_or_else(|| Error::TimeMismatch(format!("no true state at {tau}")))?;
            worst_edge = worst_edge.max(field.boundary_mass_fraction(3));
            rows.push(IntervalRow {
                tau,
                truth,
                estimates: vec![method_estimate(Method::PathIntegral, field)?],
            });
        }
        report.runs.push(SeedRun { seed, intervals: rows });
        if worst_edge > 1e-6 {
            report.warnings.push(format!(
                "seed {seed}: boundary mass fraction {worst_edge:.3e} exceeds 1e-6"
            ));
        }
        let mut attach = |method: Method, fields: Vec<DensityField>| -> Result<()> {
            let run = report.runs.last_mut().expect("run pushed above");
            for (row, f) in run.intervals.iter_mut().zip(&fields) {
                row.estimates.push(method_estimate(method, f)?);
            }
            Ok(())
        };
        if toggles.yye {
            attach(Method::Yye, yye_oracle(&model, &grid, &prior, &meas, form, dt, scheme)?)?;
        }
        if toggles.dmz_frozen {
            attach(
                Method::DmzFrozen,
                dmz_oracle(&model, &grid, &prior, &meas, form, dt, scheme)?,
            )?;
        }
        if let Some(spec) = &yau {
            attach(
                Method::Schrodinger,
                schrodinger_oracle(spec, &model, &grid, &prior, &meas, form, dt, scheme)?,
            )?;
        }
        if let Some(lm) = &linear {
            let steps = kalman_filter(lm, &prior_mean, &prior_cov, &meas)?;
            let run = report.runs.last_mut().expect("run pushed above");
            for (row, s) in run.intervals.iter_mut().zip(&steps) {
                row.estimates.push(MethodEstimate {
                    method: Method::Kalman,
                    mean: s.mean.iter().cloned().collect(),
                    cov: s.cov.iter().cloned().collect(),
                });
            }
        }
    }
    if toggles.mc {
        report.mc = mc_rows(config, &mut cache, &model, &grid)?;
    }
    report.kernel_builds = cache.builds();
    Ok(())
}

fn mc_rows(config: &ExperimentConfig, cache: &mut KernelCache, model: &FilterModel, grid: &Grid) -> Result<Vec<McRow>> {
    let mc = config.mc.as_ref().ok_or_else(|| config_error("mc block missing"))?;
    let kernel = cache.get(
        &config.model,
        model,
        grid,
        config.time.epsilon,
        config.filter.convention,
    )?;
    let reference = grid_kernel_reference(&kernel, &mc.x0, mc.t)?;
    let seed = config.seeds[0];
    mc.probes
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let e = mc_matrix_element(
                model,
                &mc.x0,
                x,
                mc.t,
                mc.slices,
                mc.samples,
                seed.wrapping_add(k as u64),
            )?;
            Ok(McRow {
                x0: mc.x0.clone(),
                x: x.clone(),
                t: mc.t,
                slices: mc.slices,
                samples: mc.samples,
                estimate: e.value,
                stderr: e.stderr,
                grid_reference: reference.interpolate(x),
            })
        })
        .collect()
}

/// Only the Monte Carlo matrix-element table.
pub fn run_mc(config: &ExperimentConfig) -> Result<Vec<McRow>> {
    config.validate()?;
    let grid = config.grid()?;
    let model = config.model.build()?;
    let mut cache = KernelCache::default();
    mc_rows(config, &mut cache, &model, &grid)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyRow {
    pub epsilon: f64,
    pub error: f64,
    pub order: Option<f64>,
}

/// Filter the first seed's record at each `ε` and compare the final field
/// with a fine YYe Crank–Nicolson oracle (step `min ε / 4`).
pub fn convergence_study(config: &ExperimentConfig, epsilons: &[f64]) -> Result<Vec<StudyRow>> {
    config.validate()?;
    if epsilons.is_empty() {
        return Ok(Vec::new());
    }
    for &e in epsilons {
        steps_per_interval(config.time.obs_spacing, e)?;
    }
    let grid = config.grid()?;
    let model = config.model.build()?;
    let (mean, cov) = config.prior_moments();
    let prior = DensityField::gaussian(grid.clone(), config.time.t0, &mean, &cov)?;
    let (_, meas) = simulate_record(config, config.seeds[0])?;
    let form = config.filter.form;
    let fine = epsilons.iter().cloned().fold(f64::INFINITY, f64::min) / 4.0;
    let fine = config.filter.pde_dt.map_or(fine, |d| d.min(fine));
    let reference = yye_oracle(&model, &grid, &prior, &meas, form, fine, oracle_scheme(config, &grid))?
        .pop()
        .expect("at least one interval");
    let reference = reference.normalized()?;
    let mut cache = KernelCache::default();
    let mut rows: Vec<StudyRow> = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let kernel = cache.get(&config.model, &model, &grid, eps, config.filter.convention)?;
        let last = run_filter_with_kernel(&kernel, &model, &prior, &meas, form)?
            .pop()
            .expect("at least one interval");
        let error = last.normalized()?.relative_l2_error(&reference)?;
        let order = rows.last().map(|p| (p.error / error).ln() / (p.epsilon / eps).ln());
        rows.push(StudyRow {
            epsilon: eps,
            error,
            order,
        });
    }
    Ok(rows)
}

fn header(hash: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# config_hash={hash}\n# seed={s}\n"),
        None => format!("# config_hash={hash}\n"),
    }
}

fn seeds_header(hash: &str, seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    format!("# config_hash={hash}\n# seeds={}\n", list.join(" "))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn failure_row(report: &ExperimentReport) -> String {
    match &report.failure {
        Some(msg) => format!("# FAILED: {}\n", msg.replace('\n', " ")),
        None => String::new(),
    }
}

/// Write `estimates.csv`, `rmse.csv`, `differences.csv`, `mc.csv` (when
/// present) and `summary.json` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path, n: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let seeds: Vec<u64> = report.runs.iter().map(|r| r.seed).collect();
    let hdr = seeds_header(&report.config_hash, &seeds);

    let mut est = hdr.clone();
    let names = |p: &str, k: usize| (1..=k).map(|i| format!("{p}_{i}")).collect::<Vec<_>>().join(",");
    let covs = (1..=n)
        .flat_map(|i| (1..=n).map(move |j| format!("cov_{i}{j}")))
        .collect::<Vec<_>>()
        .join(",");
    let _ = writeln!(
        est,
        "seed,tau,method,{},{},{}",
        names("truth", n),
        names("mean", n),
        covs
    );
    for run in &report.runs {
        for row in &run.intervals {
            for e in &row.estimates {
                let _ = writeln!(
                    est,
                    "{},{},{},{},{},{}",
                    run.seed,
                    row.tau,
                    e.method.name(),
                    join(&row.truth),
                    join(&e.mean),
                    join(&e.cov)
                );
            }
        }
    }
    est.push_str(&failure_row(report));
    fs::write(dir.join("estimates.csv"), est)?;

    let mut rmse = hdr.clone();
    rmse.push_str("seed,method,rmse\n");
    for r in report.rmse() {
        let _ = writeln!(rmse, "{},{},{}", r.seed, r.method.name(), r.rmse);
    }
    rmse.push_str(&failure_row(report));
    fs::write(dir.join("rmse.csv"), rmse)?;

    let mut diff = hdr.clone();
    diff.push_str("seed,method_a,method_b,mean_abs_diff,max_abs_diff\n");
    for r in report.differences() {
        let _ = writeln!(
            diff,
            "{},{},{},{},{}",
            r.seed,
            r.a.name(),
            r.b.name(),
            r.mean_abs,
            r.max_abs
        );
    }
    diff.push_str(&failure_row(report));
    fs::write(dir.join("differences.csv"), diff)?;

    if !report.mc.is_empty() {
        write_mc_csv(&report.mc, &report.config_hash, seeds.first().copied(), dir)?;
    }
    let mut summary = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary, report)?;
    summary.write_all(b"\n")?;
    Ok(())
}

pub fn write_mc_csv(rows: &[McRow], hash: &str, seed: Option<u64>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = header(hash, seed);
    out.push_str("x0,x,t,slices,samples,estimate,stderr,grid_reference\n");
    let point = |p: &[f64]| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            point(&r.x0),
            point(&r.x),
            r.t,
            r.slices,
            r.samples,
            r.estimate,
            r.stderr,
            r.grid_reference
        );
    }
    fs::write(dir.join("mc.csv"), out)?;
    Ok(())
}

pub fn write_study_csv(rows: &[StudyRow], hash: &str, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = header(hash, Some(seed));
    out.push_str("epsilon,l2_error,observed_order\n");
    for r in rows {
        let order = r.order.map(|o| o.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.epsilon, r.error, order);
    }
    fs::write(dir.join("study.csv"), out)?;
    Ok(())
}

/// Write `trajectory_<seed>.csv` and `measurements_<seed>.csv`.
pub fn write_record(traj: &Trajectory, meas: &MeasurementSeries, hash: &str, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = header(hash, Some(seed)).into_bytes();
    traj.write_csv(&mut buf)?;
    fs::write(dir.join(format!("trajectory_{seed}.csv")), buf)?;
    let mut buf = header(hash, Some(seed)).into_bytes();
    meas.write_csv(&mut buf)?;
    fs::write(dir.join(format!("measurements_{seed}.csv")), buf)?;
    Ok(())
}

/// Plain-text summary of a report read back from `summary.json`.
pub fn render_summary(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config {}", report.config_hash);
    let _ = writeln!(s, "kernel builds: {}", report.kernel_builds);
    if report.pure_prediction {
        let _ = writeln!(s, "pure prediction");
    }
    if let Some(f) = &report.failure {
        let _ = writeln!(s, "FAILED: {f}");
    }
    let _ = writeln!(s, "rmse vs truth:");
    for r in report.rmse() {
        let _ = writeln!(s, "  seed {:>4}  {:<14} {:.6}", r.seed, r.method.name(), r.rmse);
    }
    let diffs = report.differences();
    if !diffs.is_empty() {
        let _ = writeln!(s, "method differences (time-averaged |Δmean|):");
        for d in diffs {
            let _ = writeln!(
                s,
                "  seed {:>4}  {} vs {}: {:.6} (max {:.6})",
                d.seed,
                d.a.name(),
                d.b.name(),
                d.mean_abs,
                d.max_abs
            );
        }
    }
    for r in &report.mc {
        let _ = writeln!(
            s,
            "mc x={:?}: {:.6} ± {:.6} (grid {:.6})",
            r.x, r.estimate, r.stderr, r.grid_reference
        );
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "schema_version": 1,
                "model": {"name": "ou", "rate": 1.0, "meas_gain": 1.0},
                "grid": {"lower": [-5.0], "upper": [5.0], "points": [201]},
                "time": {"t1": 0.5, "epsilon": 0.0125, "obs_spacing": 0.05},
                "prior": {"mean": [0.0], "cov": [[1.0]]},
                "filter": {"oracles": {"kalman": true, "yye": true, "dmz_frozen": true}},
                "seeds": [1, 2]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        let base = serde_json::to_value(linear_config()).unwrap();
        let mut v = base.clone();
        v["schema_version"] = 7.into();
        assert!(ExperimentConfig::from_json(&v.to_string())
            .unwrap_err()
            .is_config_error());
        let mut v = base.clone();
        v["time"]["epsilon"] = 0.03.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = base.clone();
        v["bogus"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = base;
        v["prior"]["mean"] = serde_json::json!([0.0, 1.0]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let c = linear_config();
        assert_eq!(c.hash(), linear_config().hash());
        assert_eq!(c.hash().len(), 16);
        let mut d = c.clone();
        d.seeds = vec![3];
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn kernel_built_once_for_all_seeds() {
        let report = run_experiment(&linear_config()).unwrap();
        assert_eq!(report.kernel_builds, 1);
        assert_eq!(report.runs.len(), 2);
        assert!(!report.pure_prediction);
        let row = &report.runs[0].intervals[3];
        for m in [Method::PathIntegral, Method::Yye, Method::DmzFrozen, Method::Kalman] {
            assert!(row.estimate(m).is_some(), "{m:?}");
        }
        for d in report.differences() {
            assert!(d.mean_abs < 0.05, "{d:?}");
        }
    }

    #[test]
    fn pure_prediction_flagged() {
        let mut c = linear_config();
        c.model = BuiltinModel::Ou {
            dim: 1,
            rate: 1.0,
            meas_gain: 0.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        };
        let report = run_experiment(&c).unwrap();
        assert!(report.pure_prediction);
    }

    #[test]
    fn single_epsilon_study_has_no_order() {
        let rows = convergence_study(&linear_config(), &[0.0125]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].order.is_none());
    }

    #[test]
    fn outputs_are_byte_deterministic() {
        let c = linear_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_report(&run_experiment(&c).unwrap(), a.path(), 1).unwrap();
        write_report(&run_experiment(&c).unwrap(), b.path(), 1).unwrap();
        for f in ["estimates.csv", "rmse.csv", "differences.csv", "summary.json"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let text = fs::read_to_string(a.path().join("estimates.csv")).unwrap();
        assert!(text.starts_with("# config_hash="));
    }
}
