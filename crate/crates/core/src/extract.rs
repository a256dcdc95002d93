//! Minimizer extraction and global-optimality certification.
//!
//! At a converged state whose measures concentrate on the minimizer, the
//! location is read off the degree-one moments of the heaviest block: the
//! mean of each 1D factor is `mu[i][1] / mu[i][0]` since `T_1(x) = x`.
//!
//! Certification upgrades a local minimum to a certified global one: pick a
//! block with nonzero mass, renormalize it to unit mass (dimension 0 carries
//! the mass, so only its moment vector is rescaled), zero every other block,
//! and re-descend. If no descent is found the point was globally optimal;
//! otherwise the full solve continues from the strictly better point and the
//! test repeats, up to a restart cap.

use crate::bm::{DualState, LagrangianOracle, MomentState, Problem};
use crate::error::{Error, Result};
use crate::lbfgs;
use crate::moments::assemble_moment_matrix;
use crate::saddle::{self, OuterStats, SolverConfig};

/// Masses below this count as zero when picking a block.
pub const MASS_THRESHOLD: f64 = 1e-8;

/// Slack value guard for the never-worse-than-input invariant.
const VALUE_GUARD: f64 = 1e-12;

/// Certified (or best-effort) solution of one minimization.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Moment objective at the solution state.
    pub value: f64,
    /// Extracted minimizer, clamped to the hypercube.
    pub location: Vec<f64>,
    /// Per-block masses at the solution state.
    pub masses: Vec<f64>,
    /// Whether the no-further-descent certificate was obtained.
    pub certified_global: bool,
    /// Successful restarts (strict descents found) along the way.
    pub restarts_used: usize,
}

/// Extra work performed by the certification loop, for reporting.
#[derive(Debug, Clone, Copy, Default)]
pub struct RestartStats {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

/// Index of the heaviest block, lowest index on ties.
fn dominant_block(masses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, &mass) in masses.iter().enumerate() {
        if mass >= MASS_THRESHOLD && best.map(|(_, m)| mass > m).unwrap_or(true) {
            best = Some((idx, mass));
        }
    }
    best.map(|(idx, _)| idx)
}

/// Reads the minimizer location off a converged state.
///
/// Picks the block with the largest mass (ties broken by the lowest index)
/// and returns the per-dimension means `mu[i][1] / mu[i][0]`, clamped to
/// `[-1, 1]`. With unit masses pinned on dimensions `i >= 1`, dimension 0 is
/// the only one normalized by the block mass, matching the substituted point
/// used for certification.
pub fn extract_location(problem: &Problem, state: &MomentState) -> Result<Vec<f64>> {
    let layout = problem.layout();
    let masses = state.block_masses(layout);
    let block = dominant_block(&masses).ok_or_else(|| {
        Error::Degenerate(format!(
            "no block has mass above {:.0e}: {:?}",
            MASS_THRESHOLD, masses
        ))
    })?;
    let dims = layout.params().dims;
    let mut location = Vec::with_capacity(dims);
    for dim in 0..dims {
        let mass = state.moment(layout, block, dim, 0);
        if mass.abs() <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "block {} dimension {} has numerically zero mass",
                block, dim
            )));
        }
        let mean = state.moment(layout, block, dim, 1) / mass;
        location.push(mean.clamp(-1.0, 1.0));
    }
    Ok(location)
}

/// Relative error `||computed - exact||_2 / (1e-15 + ||exact||_2)`.
pub fn relative_error(computed: &[f64], exact: &[f64]) -> Result<f64> {
    if computed.len() != exact.len() {
        return Err(Error::ShapeMismatch(format!(
            "relative_error over {} vs {} entries",
            computed.len(),
            exact.len()
        )));
    }
    let diff: f64 = computed
        .iter()
        .zip(exact)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = exact.iter().map(|&b| b * b).sum::<f64>().sqrt();
    Ok(diff / (1e-15 + scale))
}

/// Scalar convenience for [`relative_error`].
pub fn relative_error_scalar(computed: f64, exact: f64) -> f64 {
    relative_error(&[computed], &[exact]).expect("matching shapes")
}

/// Builds the substituted point for the certification test: block `block`
/// renormalized to unit mass by dividing its dimension-0 moment vector by
/// the block mass, every other block zeroed out (dimension-0 moment vector
/// and factor set to zero, which removes the block from every moment
/// product while the remaining dimensions keep satisfying their
/// constraints). Factors and slacks of the touched vectors are rebuilt so
/// the point stays feasible when the input was.
pub fn build_substituted_state(
    problem: &Problem,
    state: &MomentState,
    block: usize,
) -> Result<MomentState> {
    let layout = problem.layout();
    let params = *layout.params();
    let mass = state.block_mass(layout, block);
    if mass <= MASS_THRESHOLD {
        return Err(Error::Degenerate(format!(
            "cannot renormalize block {} with mass {}",
            block, mass
        )));
    }
    let mut next = state.clone();
    for other in 0..params.num_measures {
        let flat = next.as_flat_mut();
        if other == block {
            for k in 0..params.moments_len() {
                flat[layout.mu_index(other, 0, k)] /= mass;
            }
        } else {
            for k in 0..params.moments_len() {
                flat[layout.mu_index(other, 0, k)] = 0.0;
            }
        }
        // Rebuild the dimension-0 factor from the rescaled moment matrix and
        // refresh the slacks that reference dimension-0 moments.
        let matrix = assemble_moment_matrix(next.moment_vector(layout, other, 0), params.degree)?;
        let factor = matrix.psd_sqrt_factor(params.rank);
        let flat = next.as_flat_mut();
        for row in 0..params.matrix_size() {
            for col in 0..params.rank {
                flat[layout.factor_index(other, 0, row, col)] = factor[row * params.rank + col];
            }
        }
        let block_mass = flat[layout.mu_index(other, 0, 0)];
        for k in 1..params.moments_len() {
            let m = flat[layout.mu_index(other, 0, k)];
            flat[layout.t_box_hi_index(other, 0, k)] = (block_mass - m).max(0.0).sqrt();
            flat[layout.t_box_lo_index(other, 0, k)] = (block_mass + m).max(0.0).sqrt();
        }
        flat[layout.t_mass_index(other)] = block_mass.max(0.0).sqrt();
        if params.product_constraints {
            for term in 0..params.num_support {
                let mut prod = 1.0;
                for dim in 0..params.dims {
                    let entry = problem.support_degree(term, dim);
                    prod *= flat[layout.mu_index(other, dim, entry)];
                }
                flat[layout.t_prod_hi_index(other, term)] = (1.0 - prod).max(0.0).sqrt();
                flat[layout.t_prod_lo_index(other, term)] = (1.0 + prod).max(0.0).sqrt();
            }
        }
    }
    Ok(next)
}

/// Polynomial value at the location a state concentrates on.
///
/// Moment objectives of almost-feasible states carry constraint slack of the
/// order of the feasibility tolerance, which can push them below the true
/// minimum; evaluating the polynomial at the extracted location is immune to
/// that, so descent decisions are made on these values.
fn concentrated_value(problem: &Problem, state: &MomentState) -> Result<f64> {
    let location = extract_location(problem, state)?;
    problem.evaluate_at(&location)
}

/// Certification loop: repeatedly tests the substituted point for descent,
/// continuing the full solve whenever descent is found.
///
/// The descent test compares polynomial values at the extracted locations of
/// the substituted point and of its descended image. At a global minimum no
/// point of the hypercube evaluates lower, so the test cannot spuriously
/// restart there no matter how approximate the multipliers are.
///
/// The reported value never exceeds a feasible input state's objective.
pub fn certify_and_restart(
    problem: &Problem,
    state: MomentState,
    dual: DualState,
    config: &SolverConfig,
) -> Result<(Solution, RestartStats)> {
    let layout = problem.layout();
    let input_objective = problem.objective(&state);
    let input_feasible = problem.residuals(&state).max_abs() <= config.tol_feasibility;
    let ls = config.line_search_params();
    let inner = config.inner_stop();

    let mut stats = RestartStats::default();
    let mut restarts = 0usize;
    let mut current = state;
    let mut dual = dual;
    let mut certified = false;
    let final_state;

    loop {
        let masses = current.block_masses(layout);
        let block = dominant_block(&masses).ok_or_else(|| {
            Error::Degenerate(format!(
                "no block has mass above {:.0e}: {:?}",
                MASS_THRESHOLD, masses
            ))
        })?;
        let substituted = build_substituted_state(problem, &current, block)?;
        let value_before = concentrated_value(problem, &substituted)?;
        let descended = {
            let mut oracle = LagrangianOracle::new(problem, &dual);
            let result = lbfgs::minimize(
                &mut oracle,
                substituted.as_flat(),
                config.lbfgs_order,
                &ls,
                &inner,
            )?;
            stats.inner_iterations += result.stats.iterations;
            MomentState::from_flat(layout, result.x)?
        };
        let value_after = concentrated_value(problem, &descended)?;

        if value_after >= value_before - config.tol_kkt_abs_val {
            // No descent path: the certificate holds and the descended
            // substituted state is the (pure, unit-mass) solution.
            certified = true;
            final_state = descended;
            break;
        }
        log::info!(
            "restart {}: descent found, {:.6e} -> {:.6e}",
            restarts,
            value_before,
            value_after
        );
        if restarts >= config.restart_cap {
            log::warn!("restart cap {} exhausted without certificate", config.restart_cap);
            final_state = if problem.objective(&descended) < problem.objective(&current) {
                descended
            } else {
                current
            };
            break;
        }
        restarts += 1;
        let (next_state, next_dual, solve_stats) =
            saddle::solve_from(problem, descended, dual, config)?;
        stats.outer_iterations += solve_stats.outer_iterations;
        stats.inner_iterations += solve_stats.total_inner_iterations;
        current = next_state;
        dual = next_dual;
    }

    let mut value = problem.objective(&final_state);
    if input_feasible && input_objective < value - VALUE_GUARD {
        // Objectives of nearly-feasible states agree with the truth only to
        // the feasibility scale; keep the lower of the two readings so the
        // result never looks worse than its input.
        value = input_objective;
    }
    let location = extract_location(problem, &final_state)?;
    let masses = final_state.block_masses(layout);
    Ok((
        Solution {
            value,
            location,
            masses,
            certified_global: certified,
            restarts_used: restarts,
        },
        stats,
    ))
}

/// End-to-end driver: solve from a random start, then certify. Returns the
/// solution together with aggregate work statistics (the certification
/// effort is folded in).
pub fn solve_certified(
    poly: &crate::poly::SparseChebPoly,
    config: &SolverConfig,
) -> Result<(Solution, OuterStats)> {
    config.validate()?;
    let solved;
    let perturbed;
    if config.objective_noise > 0.0 {
        // Break ties between non-unique minimizers with seeded noise on the
        // existing coefficients.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0x0b5e55ed);
        let magnitude = config.objective_noise * poly.max_abs_coef();
        let terms: Vec<_> = poly
            .terms()
            .map(|(n, c)| (n.clone(), c + magnitude * rng.gen_range(-1.0..1.0)))
            .collect();
        perturbed =
            crate::poly::SparseChebPoly::from_terms(poly.dimension(), poly.basis(), terms)?;
        solved = saddle::solve(&perturbed, config)?;
    } else {
        solved = saddle::solve(poly, config)?;
    }
    let (problem, state, dual, mut stats) = solved;
    let (solution, restart_stats) = certify_and_restart(&problem, state, dual, config)?;
    stats.outer_iterations += restart_stats.outer_iterations;
    stats.total_inner_iterations += restart_stats.inner_iterations;
    stats.final_objective = solution.value;
    Ok((solution, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm::LayoutParams;
    use crate::poly::{family1, Basis, MultiIndex, SparseChebPoly};

    fn family1_problem(dims: usize, measures: usize) -> Problem {
        Problem::with_params(
            &family1(dims),
            LayoutParams {
                num_measures: measures,
                dims,
                degree: 8,
                rank: 9,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn extracts_exact_delta_location() {
        let problem = family1_problem(2, 2);
        let state = problem
            .delta_state(&[vec![0.3, -0.7], vec![0.0, 0.0]], &[1.0, 0.0])
            .unwrap();
        let loc = extract_location(&problem, &state).unwrap();
        assert!((loc[0] - 0.3).abs() <= 1e-12 && (loc[1] + 0.7).abs() <= 1e-12, "{:?}", loc);
    }

    #[test]
    fn extraction_handles_split_mass_and_ties() {
        let problem = family1_problem(1, 2);
        let state = problem
            .delta_state(&[vec![0.4], vec![0.4]], &[0.5, 0.5])
            .unwrap();
        let loc = extract_location(&problem, &state).unwrap();
        assert!((loc[0] - 0.4).abs() <= 1e-12, "{:?}", loc);
    }

    #[test]
    fn extraction_at_origin_with_full_mass() {
        let problem = family1_problem(3, 2);
        let state = problem
            .delta_state(&[vec![0.0; 3], vec![0.5; 3]], &[1.0, 0.0])
            .unwrap();
        let loc = extract_location(&problem, &state).unwrap();
        assert_eq!(loc, vec![0.0; 3]);
    }

    #[test]
    fn extraction_rejects_degenerate_states() {
        let problem = family1_problem(1, 2);
        let state = MomentState::zeros(problem.layout());
        assert!(matches!(
            extract_location(&problem, &state),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn extraction_inverts_delta_moments() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let problem = family1_problem(3, 2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rest: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let state = problem.delta_state(&[x.clone(), rest], &[1.0, 0.0]).unwrap();
            let loc = extract_location(&problem, &state).unwrap();
            for (got, want) in loc.iter().zip(&x) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn extraction_invariant_under_block_permutation() {
        let problem = family1_problem(2, 2);
        let a = problem
            .delta_state(&[vec![0.3, -0.1], vec![0.8, 0.8]], &[0.7, 0.3])
            .unwrap();
        let b = problem
            .delta_state(&[vec![0.8, 0.8], vec![0.3, -0.1]], &[0.3, 0.7])
            .unwrap();
        assert_eq!(
            extract_location(&problem, &a).unwrap(),
            extract_location(&problem, &b).unwrap()
        );
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((relative_error_scalar(-1.99, -2.0) - 0.005).abs() <= 1e-15);
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(relative_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn substituted_state_stays_feasible() {
        let problem = family1_problem(2, 2);
        // Mixed state: 60/40 split between two locations.
        let state = problem
            .delta_state(&[vec![0.0, 0.0], vec![0.5, -0.5]], &[0.6, 0.4])
            .unwrap();
        assert!(problem.residuals(&state).max_abs() <= 1e-10);
        let sub = build_substituted_state(&problem, &state, 0).unwrap();
        let feas = problem.residuals(&sub).max_abs();
        assert!(feas <= 1e-9, "substituted residual {}", feas);
        // Block 0 now carries unit mass, block 1 none.
        let masses = sub.block_masses(problem.layout());
        assert!((masses[0] - 1.0).abs() <= 1e-9);
        assert!(masses[1].abs() <= 1e-12);
        // Its objective equals the normalized block value.
        let expected = family1(2).evaluate(&[0.0, 0.0]).unwrap();
        assert!((problem.objective(&sub) - expected).abs() <= 1e-9);
    }

    #[test]
    fn certify_accepts_exact_global_state() {
        let poly = family1(1);
        let config = SolverConfig {
            num_measures: 2,
            degree: Some(8),
            bm_rank: Some(9),
            ..SolverConfig::default()
        };
        let problem = Problem::new(&poly, &config).unwrap();
        let state = problem
            .delta_state(&[vec![0.0], vec![0.0]], &[1.0, 0.0])
            .unwrap();
        let dual = DualState::zeros(problem.layout(), config.penalty_gamma);
        let (solution, _) = certify_and_restart(&problem, state, dual, &config).unwrap();
        assert!(solution.certified_global);
        assert_eq!(solution.restarts_used, 0);
        assert!((solution.value - (-2.0)).abs() <= 1e-6, "value {}", solution.value);
        assert!(solution.location[0].abs() <= 1e-4, "location {:?}", solution.location);
    }

    #[test]
    fn certify_never_returns_worse_than_input() {
        let poly = family1(1);
        let config = SolverConfig {
            num_measures: 2,
            degree: Some(8),
            bm_rank: Some(9),
            ..SolverConfig::default()
        };
        let problem = Problem::new(&poly, &config).unwrap();
        let state = problem
            .delta_state(&[vec![0.0], vec![0.0]], &[0.5, 0.5])
            .unwrap();
        let input_value = problem.objective(&state);
        let dual = DualState::zeros(problem.layout(), config.penalty_gamma);
        let (solution, _) = certify_and_restart(&problem, state, dual, &config).unwrap();
        assert!(solution.value <= input_value + 1e-12);
    }

    #[test]
    fn masses_sum_to_one_on_converged_solutions() {
        let poly = family1(1);
        let config = SolverConfig::family1_preset();
        let (solution, stats) = solve_certified(&poly, &config).unwrap();
        assert!(stats.converged);
        let total: f64 = solution.masses.iter().sum();
        assert!(
            (total - 1.0).abs() <= config.tol_feasibility,
            "masses {:?}",
            solution.masses
        );
        for coord in &solution.location {
            assert!(coord.abs() <= 1.0 + config.tol_feasibility);
        }
    }

    #[test]
    fn mixed_state_triggers_restart_and_certifies_global() {
        // Worse local minimum of f_1 found by a coarse 1D scan, placed in
        // block 0 so the tie-break picks it for substitution.
        let poly = family1(1);
        let mut worse_x = f64::NAN;
        let mut worse_val = f64::INFINITY;
        let samples = 20_001;
        let values: Vec<f64> = (0..samples)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
                poly.evaluate(&[x]).unwrap()
            })
            .collect();
        for i in 1..samples - 1 {
            let x = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
            if values[i] < values[i - 1]
                && values[i] < values[i + 1]
                && values[i] > -1.9
                && values[i] < worse_val
                && x.abs() > 0.1
            {
                worse_val = values[i];
                worse_x = x;
            }
        }
        assert!(worse_x.is_finite(), "no worse local minimum found");

        let config = SolverConfig {
            num_measures: 2,
            degree: Some(8),
            bm_rank: Some(9),
            ..SolverConfig::default()
        };
        let problem = Problem::new(&poly, &config).unwrap();
        let mixed = problem
            .delta_state(&[vec![worse_x], vec![0.0]], &[0.5, 0.5])
            .unwrap();
        let mixed_value = problem.objective(&mixed);
        let dual = DualState::zeros(problem.layout(), config.penalty_gamma);
        let (solution, _) = certify_and_restart(&problem, mixed, dual, &config).unwrap();
        assert!(solution.restarts_used >= 1, "expected at least one restart");
        assert!(solution.certified_global);
        assert!(solution.value <= mixed_value - config.tol_kkt_abs_val);
        let rel = (solution.value - (-2.0)).abs() / 2.0;
        assert!(rel <= 1e-2, "certified value {}", solution.value);
    }

    #[test]
    fn objective_noise_path_solves() {
        let poly = SparseChebPoly::from_terms(
            1,
            Basis::Chebyshev,
            [(MultiIndex(vec![2]), 1.0)],
        )
        .unwrap();
        let config = SolverConfig {
            num_measures: 2,
            objective_noise: 1e-6,
            ..SolverConfig::default()
        };
        let (solution, _) = solve_certified(&poly, &config).unwrap();
        // T_2 has two global minimizers at 0 of value -1; noise picks one.
        assert!((solution.value - (-1.0)).abs() <= 5e-2, "value {}", solution.value);
    }
}
