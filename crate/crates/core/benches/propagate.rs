use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};

use pifilter::equivalence::mc_matrix_element_with;
use pifilter::kernel::{build_kernel_with, KernelOptions};
use pifilter::models::BuiltinModel;
use pifilter::{DensityField, Execution, Grid};

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn cubic(dim: usize) -> pifilter::FilterModel {
    BuiltinModel::Cubic {
        dim,
        alpha: 1.0,
        beta: 1.0,
        meas_gain: 1.0,
        hbar_nu: 1.0,
        hbar_mu: 1.0,
    }
    .build()
    .unwrap()
}

fn prior(grid: &Grid) -> DensityField {
    let n = grid.dim();
    DensityField::gaussian(
        grid.clone(),
        0.0,
        &DVector::from_element(n, 0.2),
        &DMatrix::from_diagonal_element(n, n, 0.3),
    )
    .unwrap()
}

fn kernel_apply(c: &mut Criterion) {
    let cases = [
        ("1d-801", Grid::cube(1, -3.0, 3.0, 801).unwrap(), 1.0 / 400.0),
        ("2d-101", Grid::cube(2, -3.0, 3.0, 101).unwrap(), 1.0 / 100.0),
    ];
    let mut group = c.benchmark_group("kernel_apply");
    for (label, grid, eps) in &cases {
        let model = cubic(grid.dim());
        let kernel = build_kernel_with(&model, grid, *eps, KernelOptions::default()).unwrap();
        let u = prior(grid);
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, label), &u.values, |b, v| {
                b.iter(|| black_box(kernel.apply_with(v, exec)))
            });
        }
    }
    group.finish();
}

fn kernel_build(c: &mut Criterion) {
    let grid = Grid::cube(2, -3.0, 3.0, 101).unwrap();
    let model = cubic(2);
    let mut group = c.benchmark_group("kernel_build");
    group.sample_size(10);
    for (name, execution) in POLICIES {
        let opts = KernelOptions {
            execution,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| black_box(build_kernel_with(&model, &grid, 1.0 / 100.0, opts).unwrap()))
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let model = cubic(1);
    let mut group = c.benchmark_group("mc_matrix_element");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(mc_matrix_element_with(&model, &[0.0], &[0.5], 0.5, 64, 16_384, 1, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_apply, kernel_build, monte_carlo);
criterion_main!(benches);
