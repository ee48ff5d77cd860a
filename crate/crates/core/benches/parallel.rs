//! Sequential vs rayon execution for the two hot loops: the lattice solve and
//! Monte Carlo paths. Without the `parallel` feature both arms run
//! sequentially.

use contagion_core::pde::{solve_with, GridSpec};
use contagion_core::sim::{check_g_martingale, SimConfig, SolutionPolicy};
use contagion_core::{load_preset, DefaultState, Execution};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn solve(c: &mut Criterion) {
    let spec = load_preset("scott_example22").unwrap();
    let grid = GridSpec::new(-1.0, 1.0, 201, 200);
    let mut group = c.benchmark_group("solve_scott_201x200");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| solve_with(black_box(&spec), &grid, exec).unwrap())
        });
    }
    group.finish();
}

fn paths(c: &mut Criterion) {
    let spec = load_preset("scott_example22").unwrap();
    let sol = solve_with(&spec, &GridSpec::new(-1.0, 1.0, 101, 100), Execution::Parallel).unwrap();
    let z0 = DefaultState::all_alive(2).unwrap();
    let mut group = c.benchmark_group("g_martingale_4000_paths");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig::new(4_000, 100, 1).with_exec(exec);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| check_g_martingale(&sol, &SolutionPolicy::new(&sol), cfg, 0.0, z0, &[1.0]).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, solve, paths);
criterion_main!(benches);
