//! Self-check oracles: finite-difference gradient verification, moment-matrix
//! PSD checks, and the delta-state objective oracle.
//!
//! Each check is independent of the code path it validates: gradients are
//! compared against central differences of the value path, moment matrices
//! against an eigenvalue decomposition, and the moment objective against
//! direct pointwise polynomial evaluation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bm::{DualState, LayoutParams, MomentState, Problem};
use crate::moments::{assemble_moment_matrix, delta_moments};
use crate::poly::{Basis, MultiIndex, SparseChebPoly};

/// Central finite-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut point = x.to_vec();
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point);
        point[i] = x[i] - h;
        let minus = f(&point);
        point[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Result of one check: worst observed discrepancy against its threshold.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.threshold
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: worst discrepancy {:.3e} (threshold {:.1e}) -> {}",
            self.name,
            self.worst,
            self.threshold,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Random sparse Chebyshev polynomial with coefficients in `[-1, 1]`.
pub fn random_poly(
    rng: &mut ChaCha8Rng,
    dims: usize,
    max_degree: u32,
    max_terms: usize,
) -> SparseChebPoly {
    let n_terms = rng.gen_range(1..=max_terms.max(1));
    let terms: Vec<(MultiIndex, f64)> = (0..n_terms)
        .map(|_| {
            let idx = MultiIndex((0..dims).map(|_| rng.gen_range(0..=max_degree)).collect());
            (idx, rng.gen_range(-1.0..1.0))
        })
        .collect();
    SparseChebPoly::from_terms(dims, Basis::Chebyshev, terms).expect("index lengths match")
}

/// Analytic Lagrangian gradient versus central differences (`h = 1e-6`) at
/// 20 random states of a 3-dimensional, degree-4, two-block instance.
/// Discrepancy is `|analytic - fd| / (1 + |analytic|)` per coordinate.
pub fn check_gradients(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poly = random_poly(&mut rng, 3, 4, 5);
    let problem = Problem::with_params(
        &poly,
        LayoutParams {
            num_measures: 2,
            dims: 3,
            degree: 4,
            rank: 5,
            num_support: 0,
            product_constraints: true,
        },
    )
    .expect("valid instance");
    let layout = problem.layout();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let state = MomentState::from_flat(
            layout,
            (0..layout.num_vars()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("layout-sized vector");
        let dual = DualState {
            lambda: (0..layout.num_constraints())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            gamma: 1.0,
        };
        let analytic = problem
            .lagrangian_gradient(&state, &dual)
            .expect("matching shapes");
        let fd = central_fd_gradient(
            |x| {
                let s = MomentState::from_flat(layout, x.to_vec()).expect("layout-sized vector");
                problem.lagrangian(&s, &dual).expect("matching shapes")
            },
            state.as_flat(),
            1e-6,
        );
        for (&a, &f) in analytic.iter().zip(&fd) {
            worst = worst.max((a - f).abs() / (1.0 + a.abs()));
        }
    }
    CheckReport {
        name: "gradients",
        worst,
        threshold: 1e-6,
    }
}

/// Moment matrices of point masses must be PSD: reports the most negative
/// eigenvalue magnitude over 50 random locations and orders up to 8.
pub fn check_moment_psd(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let order = rng.gen_range(1..=8usize);
        let mu = delta_moments(x, order).expect("in range");
        let matrix = assemble_moment_matrix(mu.values(), order).expect("length matches");
        worst = worst.max((-matrix.min_eigenvalue()).max(0.0));
    }
    CheckReport {
        name: "moments",
        worst,
        threshold: 1e-10,
    }
}

/// Moment objective on exact point-mass states versus direct polynomial
/// evaluation, over 25 random polynomials with up to 3 dimensions and
/// per-variable degree up to 4.
pub fn check_objective_oracle(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for round in 0..25 {
        let dims = 1 + round % 3;
        let poly = random_poly(&mut rng, dims, 4, 6);
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 2,
                dims,
                degree: 4,
                rank: 5,
                num_support: 0,
                product_constraints: true,
            },
        )
        .expect("valid instance");
        let x: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let idle: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = problem
            .delta_state(&[x.clone(), idle], &[1.0, 0.0])
            .expect("feasible masses");
        let objective = problem.objective(&state);
        let direct = poly.evaluate(&x).expect("matching dimension");
        worst = worst.max((objective - direct).abs() / (1.0 + direct.abs()));
    }
    CheckReport {
        name: "oracle",
        worst,
        threshold: 1e-10,
    }
}
