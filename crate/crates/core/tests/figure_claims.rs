//! Qualitative claims about the optimal fractions, checked on the benchmark
//! with a positive excess return (`mu_i = 0.3`, `r = 0.2`). With `mu = r` the
//! fractions vanish and every comparison is trivial.

use contagion_core::pde::{solve_with, GridSpec, SystemSolution};
use contagion_core::sim::{Controls, FeedbackPolicy, SolutionPolicy};
use contagion_core::{load_preset, DefaultState, Execution, ModelSpec};

fn variant() -> ModelSpec {
    let mut spec = load_preset("benchmark_s5").unwrap();
    spec.market.mu = vec![0.3, 0.3];
    spec
}

fn solve(spec: &ModelSpec) -> SystemSolution {
    solve_with(spec, &GridSpec::new(-1.0, 1.0, 101, 100), Execution::Parallel).unwrap()
}

/// `pi[state][y index][name]` at calendar time `t`.
fn table(sol: &SystemSolution, t: f64) -> Vec<Vec<Vec<f64>>> {
    let policy = SolutionPolicy::new(sol);
    let mut c = Controls::zeros(2);
    (0..4u32)
        .map(|b| {
            let z = DefaultState::new(b, 2).unwrap();
            sol.grid
                .y_nodes()
                .iter()
                .map(|&y| {
                    policy.controls(t, y, z, &mut c);
                    c.pi.clone()
                })
                .collect()
        })
        .collect()
}

const S00: usize = 0;
const S10: usize = 1;
const S01: usize = 2;

#[test]
fn fractions_fall_with_the_factor_and_favour_stock_two() {
    let sol = solve(&variant().with_p(0.8));
    for t in [0.0, 0.3, 0.6] {
        let pi = table(&sol, t);
        for (s, names) in [(S00, vec![0, 1]), (S10, vec![1]), (S01, vec![0])] {
            for i in names {
                for j in 1..pi[s].len() {
                    assert!(pi[s][j][i] < pi[s][j - 1][i], "state {s} name {i} t {t} node {j}");
                }
            }
        }
        for row in &pi[S00] {
            assert!(row[0] < row[1]);
            assert!(row[0] > 0.0);
        }
        // Survivor after one default holds less than before it.
        for j in 0..pi[S00].len() {
            assert!(pi[S10][j][1] < pi[S00][j][1]);
            assert!(pi[S01][j][0] < pi[S00][j][0]);
            assert_eq!(pi[S10][j][0], 0.0);
        }
    }
}

#[test]
fn less_risk_aversion_means_larger_fractions() {
    // Relative risk aversion is 1 - p.
    let tables: Vec<_> = [0.1, 0.5, 0.8].iter().map(|&p| table(&solve(&variant().with_p(p)), 0.6)).collect();
    for w in tables.windows(2) {
        for j in 0..w[0][S00].len() {
            for i in 0..2 {
                assert!(w[1][S00][j][i] > w[0][S00][j][i]);
            }
        }
    }
}

#[test]
fn higher_volatility_means_smaller_fractions() {
    let tables: Vec<_> = [1.0, 1.25, 1.5]
        .iter()
        .map(|&s| table(&solve(&variant().with_p(0.1).with_sigma_scale(s)), 0.0))
        .collect();
    for w in tables.windows(2) {
        for s in [S00, S10, S01] {
            for j in 0..w[0][s].len() {
                for i in 0..2 {
                    if w[0][s][j][i] != 0.0 {
                        assert!(w[1][s][j][i] < w[0][s][j][i]);
                    }
                }
            }
        }
    }
}
