use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use pifilter::baselines::ou_transition_density;
use pifilter::equivalence::{mc_matrix_element, reduce_and_solve};
use pifilter::experiment::{convergence_study, grid_kernel_reference, run_experiment, ExperimentConfig, Method};
use pifilter::kernel::{
    build_kernel, build_kernel_with, propagate, run_filter, Convention, KernelOptions, MeasurementForm,
};
use pifilter::models::{BuiltinModel, FilterModel, YauFilterSpec};
use pifilter::pde::{PdeProblem, Scheme};
use pifilter::simulate::{observation_times, simulate_measurements, simulate_state};
use pifilter::{DensityField, Grid};

fn gaussian(grid: &Grid, mean: &[f64], var: f64) -> DensityField {
    let n = mean.len();
    DensityField::gaussian(
        grid.clone(),
        0.0,
        &DVector::from_column_slice(mean),
        &DMatrix::from_diagonal_element(n, n, var),
    )
    .unwrap()
}

fn builtin(name: &str) -> FilterModel {
    let m = match name {
        "zero" => BuiltinModel::Zero {
            dim: 1,
            meas_gain: 1.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        },
        "ou" => BuiltinModel::Ou {
            dim: 1,
            rate: 1.0,
            meas_gain: 1.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        },
        "cubic" => BuiltinModel::Cubic {
            dim: 1,
            alpha: 1.0,
            beta: 1.0,
            meas_gain: 1.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        },
        "atan" => BuiltinModel::Atan {
            dim: 1,
            rate: 1.0,
            meas_gain: 1.0,
            hbar_nu: 1.0,
            hbar_mu: 1.0,
        },
        _ => unreachable!(),
    };
    m.build().unwrap()
}

#[test]
fn ou_delta_moments() {
    let m = BuiltinModel::Ou {
        dim: 1,
        rate: 1.0,
        meas_gain: 0.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap();
    let grid = Grid::cube(1, -5.0, 5.0, 401).unwrap();
    let k = build_kernel(&m, &grid, 1.0 / 512.0).unwrap();
    let p = propagate(&k, &DensityField::delta(grid, 0.0, &[1.0]), 512).unwrap();
    let e = p.estimate().unwrap();
    assert!((e.mean[0] - 0.3679).abs() < 1e-2);
    assert!((e.covariance[(0, 0)] - 0.4323).abs() < 1e-2);
}

#[test]
fn measurement_damping_matches_yye_mass() {
    let m = BuiltinModel::Zero {
        dim: 1,
        meas_gain: 1.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap();
    let grid = Grid::cube(1, -6.0, 6.0, 481).unwrap();
    let start = DensityField::from_fn(grid.clone(), 0.0, |x| if x[0].abs() <= 0.5 { 1.0 } else { 0.0 });
    let eps = 1.0 / 256.0;
    let k = build_kernel(&m, &grid, eps).unwrap();
    let a = propagate(&k, &start, 128).unwrap();
    let b = PdeProblem::yye(&m, &grid, 1e-4, Scheme::CrankNicolson)
        .unwrap()
        .evolve_to(&start, 0.5)
        .unwrap();
    assert!(a.mass() < start.mass());
    assert!(
        (a.mass() - b.mass()).abs() / b.mass() < 1e-3,
        "{} vs {}",
        a.mass(),
        b.mass()
    );
}

fn kernel_vs_pde(m: &FilterModel, grid: &Grid, eps: f64, reference: &DensityField, start: &DensityField) -> f64 {
    let k = build_kernel(m, grid, eps).unwrap();
    let steps = (0.5 / eps).round() as usize;
    propagate(&k, start, steps)
        .unwrap()
        .relative_l2_error(reference)
        .unwrap()
}

#[test]
fn kernel_converges_to_pde_for_every_builtin() {
    let grid = Grid::cube(1, -3.0, 3.0, 301).unwrap();
    for name in ["zero", "ou", "cubic", "atan"] {
        let m = builtin(name);
        let start = gaussian(&grid, &[0.3], 0.2);
        let reference = PdeProblem::yye(&m, &grid, 1e-4, Scheme::CrankNicolson)
            .unwrap()
            .evolve_to(&start, 0.5)
            .unwrap();
        let errs: Vec<f64> = [1.0 / 128.0, 1.0 / 256.0, 1.0 / 512.0]
            .iter()
            .map(|&e| kernel_vs_pde(&m, &grid, e, &reference, &start))
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{name}: {errs:?}");
    }
}

#[test]
fn pre_point_convention_also_converges() {
    let m = builtin("cubic");
    let grid = Grid::cube(1, -3.0, 3.0, 301).unwrap();
    let start = gaussian(&grid, &[0.5], 0.1);
    let reference = PdeProblem::yye(&m, &grid, 1e-4, Scheme::CrankNicolson)
        .unwrap()
        .evolve_to(&start, 0.5)
        .unwrap();
    let err = |eps: f64, convention| {
        let opts = KernelOptions {
            convention,
            ..Default::default()
        };
        let k = build_kernel_with(&m, &grid, eps, opts).unwrap();
        propagate(&k, &start, (0.5 / eps).round() as usize)
            .unwrap()
            .relative_l2_error(&reference)
            .unwrap()
    };
    let (a, b) = (
        err(1.0 / 64.0, Convention::PrePoint),
        err(1.0 / 128.0, Convention::PrePoint),
    );
    assert!(b < a && b < 5e-2, "{a} {b}");
    assert!(err(1.0 / 128.0, Convention::Midpoint) < 5e-2);
}

#[test]
fn filter_without_observations_is_fpk_evolution() {
    let m = BuiltinModel::Cubic {
        dim: 1,
        alpha: 1.0,
        beta: 1.0,
        meas_gain: 0.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap();
    let grid = Grid::cube(1, -3.0, 3.0, 301).unwrap();
    let prior = gaussian(&grid, &[0.5], 0.2);
    let times = observation_times(0.0, 0.5, 0.05).unwrap();
    let traj = simulate_state(&m, &[0.5], 0.0, 0.5, 0.05 / 20.0, 4).unwrap();
    let meas = simulate_measurements(&m, &traj, &times, 4).unwrap();
    let out = run_filter(&m, &grid, &prior, &meas, 0.05 / 20.0, MeasurementForm::Post).unwrap();
    let fpk = PdeProblem::fpkfe(&m, &grid, 1e-4, Scheme::CrankNicolson)
        .unwrap()
        .evolve_to(&prior, 0.5)
        .unwrap();
    assert!(out.last().unwrap().relative_l2_error(&fpk).unwrap() < 1e-2);
}

#[test]
fn cubic_filter_tracks_yye_oracle() {
    let config = ExperimentConfig::from_json(
        r#"{
            "schema_version": 1,
            "model": {"name": "cubic", "alpha": 1.0, "beta": 1.0, "meas_gain": 1.0},
            "grid": {"lower": [-3.0], "upper": [3.0], "points": [301]},
            "time": {"t1": 0.5, "epsilon": 0.00625, "obs_spacing": 0.05},
            "prior": {"mean": [0.5], "cov": [[0.2]]},
            "seeds": [3]
        }"#,
    )
    .unwrap();
    let rows = convergence_study(&config, &[0.0125, 0.00625, 0.003125]).unwrap();
    assert!(rows[1].error < 1e-2, "{rows:?}");
    for r in &rows[1..] {
        let o = r.order.unwrap();
        assert!(o > 0.7 && o < 1.3, "{rows:?}");
    }
}

#[test]
fn heat_study_reports_orders() {
    let config = ExperimentConfig::from_json(
        r#"{
            "schema_version": 1,
            "model": {"name": "zero", "meas_gain": 0.0},
            "grid": {"lower": [-6.0], "upper": [6.0], "points": [241]},
            "time": {"t1": 0.2, "epsilon": 0.01, "obs_spacing": 0.1},
            "prior": {"mean": [0.0], "cov": [[0.3]]}
        }"#,
    )
    .unwrap();
    let rows = convergence_study(&config, &[0.05, 0.025]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].order.is_none() && rows[1].order.is_some());
    // The free kernel is exact, so only the oracle's own error remains.
    assert!(rows.iter().all(|r| r.error < 1e-3), "{rows:?}");
}

#[test]
fn pre_and_post_converge_together() {
    let m = builtin("ou");
    let grid = Grid::cube(1, -5.0, 5.0, 401).unwrap();
    let prior = gaussian(&grid, &[0.0], 1.0);
    let traj = simulate_state(&m, &[0.0], 0.0, 0.2, 1.0 / 1280.0, 8).unwrap();
    let diff = |dtau: f64| {
        let times = observation_times(0.0, 0.2, dtau).unwrap();
        let meas = simulate_measurements(&m, &traj, &times, 8).unwrap();
        let a = run_filter(&m, &grid, &prior, &meas, 1.0 / 1280.0, MeasurementForm::Pre).unwrap();
        let b = run_filter(&m, &grid, &prior, &meas, 1.0 / 1280.0, MeasurementForm::Post).unwrap();
        let (a, b) = (
            a.last().unwrap().normalized().unwrap(),
            b.last().unwrap().normalized().unwrap(),
        );
        a.relative_l2_error(&b).unwrap()
    };
    assert!(diff(0.025) < diff(0.1));
}

#[test]
fn mc_agrees_with_grid_kernel_on_atan() {
    let m = builtin("atan");
    let grid = Grid::cube(1, -5.0, 5.0, 401).unwrap();
    let k = build_kernel(&m, &grid, 1.0 / 64.0).unwrap();
    let reference = grid_kernel_reference(&k, &[0.0], 0.5).unwrap();
    let e = mc_matrix_element(&m, &[0.0], &[0.4], 0.5, 32, 20_000, 5).unwrap();
    let g = reference.interpolate(&[0.4]);
    assert!(
        (e.value - g).abs() < 3.5 * e.stderr,
        "{} ± {} vs {g}",
        e.value,
        e.stderr
    );
}

#[test]
fn mc_slice_refinement_approaches_continuum() {
    let m = BuiltinModel::Ou {
        dim: 1,
        rate: 1.0,
        meas_gain: 0.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap();
    let exact = ou_transition_density(1.0, 1.0, 1.0, 1.0, 0.2);
    let coarse = mc_matrix_element(&m, &[1.0], &[0.2], 1.0, 4, 40_000, 2).unwrap();
    let fine = mc_matrix_element(&m, &[1.0], &[0.2], 1.0, 64, 40_000, 2).unwrap();
    assert!((fine.value - exact).abs() < 3.0 * fine.stderr + 1e-3);
    assert!((fine.value - exact).abs() <= (coarse.value - exact).abs() + 3.0 * coarse.stderr);
}

#[test]
fn fpk_residual_of_ou_density() {
    let m = BuiltinModel::Ou {
        dim: 1,
        rate: 1.0,
        meas_gain: 0.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap();
    let residual = |points: usize, dt: f64| {
        let grid = Grid::cube(1, -5.0, 5.0, points).unwrap();
        let t = 0.5;
        let u = DensityField::from_fn(grid.clone(), t, |x| ou_transition_density(1.0, 1.0, t, 1.0, x[0]));
        let p = PdeProblem::fpkfe(&m, &grid, dt, Scheme::CrankNicolson).unwrap();
        let steps = (0.1 / dt).round() as usize;
        let got = p.evolve(&u, steps).unwrap();
        let want = DensityField::from_fn(grid, t + 0.1, |x| ou_transition_density(1.0, 1.0, t + 0.1, 1.0, x[0]));
        got.relative_l2_error(&want).unwrap()
    };
    let coarse = residual(101, 2e-3);
    let fine = residual(201, 1e-3);
    assert!(coarse / fine > 3.0, "{coarse} {fine}");
}

#[test]
fn reduction_of_harmonic_drift_matches_yye() {
    let spec = YauFilterSpec::with_polynomial_potential(DMatrix::zeros(1, 1), DVector::zeros(1), -1.0, 0.0).unwrap();
    let m = spec
        .to_model("osc", 1, Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0), 1.0, 1.0)
        .unwrap();
    let grid = Grid::cube(1, -6.0, 6.0, 481).unwrap();
    let prior = gaussian(&grid, &[1.0], 0.3);
    let reduced = reduce_and_solve(&spec, &m, &grid, &prior, 0.5, 1e-4).unwrap();
    let direct = PdeProblem::yye(&m, &grid, 1e-4, Scheme::CrankNicolson)
        .unwrap()
        .evolve_to(&prior, 0.5)
        .unwrap();
    assert!(reduced.relative_l2_error(&direct).unwrap() < 1e-3);
}

#[test]
fn rotating_density_mean_follows_rotation() {
    let l = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let spec = YauFilterSpec::with_polynomial_potential(l, DVector::zeros(2), 0.0, 0.0).unwrap();
    let m = spec
        .to_model("rot", 1, Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0), 1.0, 1.0)
        .unwrap();
    let grid = Grid::cube(2, -6.0, 6.0, 145).unwrap();
    let prior = gaussian(&grid, &[1.5, 0.0], 0.2);
    let t = 0.5;
    let u = reduce_and_solve(&spec, &m, &grid, &prior, t, 5e-3).unwrap();
    let mean = u.estimate().unwrap().mean;
    // dx/dt = Lx turns (1.5, 0) to 1.5 (cos t, −sin t).
    let angle = mean[1].atan2(mean[0]);
    assert!((angle + t).abs() < 2e-2, "{angle}");
    assert!((mean.norm() - 1.5).abs() < 2e-2);
}

#[test]
fn linear_scalar_filter_matches_kalman() {
    let config = ExperimentConfig::from_json(
        r#"{
            "schema_version": 1,
            "model": {"name": "ou", "rate": 1.0, "meas_gain": 1.0},
            "grid": {"lower": [-5.0], "upper": [5.0], "points": [401]},
            "time": {"t1": 2.0, "epsilon": 0.0015625, "obs_spacing": 0.05},
            "prior": {"mean": [0.0], "cov": [[0.5]]},
            "filter": {"oracles": {"kalman": true}},
            "seeds": [0, 1]
        }"#,
    )
    .unwrap();
    let report = run_experiment(&config).unwrap();
    for run in &report.runs {
        let gaps: Vec<f64> = run
            .intervals
            .iter()
            .map(|r| {
                (r.estimate(Method::PathIntegral).unwrap().mean[0] - r.estimate(Method::Kalman).unwrap().mean[0]).abs()
            })
            .collect();
        let avg = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(avg < 0.02, "seed {}: {avg}", run.seed);
    }
}
