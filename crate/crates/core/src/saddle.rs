//! Alternating primal descent / dual ascent on the augmented Lagrangian.
//!
//! Each outer iteration minimizes the augmented Lagrangian over the primal
//! variables with L-BFGS at fixed multipliers, then takes a gradient-ascent
//! step on the multipliers, `lambda_k += gamma * c_k`. The loop stops once
//! the primal relative gradient and the change in objective value are below
//! their tolerances and every constraint residual is within the feasibility
//! tolerance. The penalty parameter is held constant by default.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bm::{ConstraintResiduals, DualState, LagrangianOracle, LayoutParams, MomentState, Problem};
use crate::error::{Error, Result};
use crate::lbfgs::{self, InnerStop, LineSearchParams};
use crate::poly::SparseChebPoly;

/// All solver knobs. Field names match the config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Number of product-measure blocks, `L` (at least 2: certification
    /// compares against a zeroed second block).
    pub num_measures: usize,
    /// Moment-matrix order `d`; defaults to the polynomial's per-variable
    /// degree.
    pub degree: Option<usize>,
    /// Burer-Monteiro factor width; defaults to the full `d + 1`.
    pub bm_rank: Option<usize>,
    /// Penalty parameter of the augmented Lagrangian.
    pub penalty_gamma: f64,
    /// Sufficient-decrease factor of the backtracking line search.
    pub wolfe_beta: f64,
    /// L-BFGS history length.
    pub lbfgs_order: usize,
    /// Outer stop: relative primal gradient.
    pub tol_kkt_rel_grad: f64,
    /// Outer stop: absolute objective change between outer iterates.
    pub tol_kkt_abs_val: f64,
    /// Outer stop: max constraint residual magnitude.
    pub tol_feasibility: f64,
    /// Inner stop: relative gradient.
    pub tol_inner_rel_grad: f64,
    /// Inner stop: absolute value change.
    pub tol_inner_abs_val: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub max_backtracks: usize,
    pub seed: u64,
    /// Redundant product-moment box constraints (numerical stabilizer).
    pub enforce_product_constraints: bool,
    /// Certification restarts allowed before giving up.
    pub restart_cap: usize,
    /// Multiplicative penalty growth applied when feasibility stalls between
    /// outer iterations; 1.0 (the default) disables adaptation.
    pub gamma_stall_factor: f64,
    /// Seeded relative perturbation of the objective coefficients, as a
    /// fraction of the largest coefficient magnitude; breaks ties between
    /// non-unique minimizers. 0.0 (the default) disables it.
    pub objective_noise: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            num_measures: 4,
            degree: None,
            bm_rank: None,
            penalty_gamma: 8.0,
            wolfe_beta: 0.3,
            lbfgs_order: 100,
            tol_kkt_rel_grad: 1e-2,
            tol_kkt_abs_val: 1e-4,
            tol_feasibility: 1e-2,
            tol_inner_rel_grad: 1e-3,
            tol_inner_abs_val: 1e-4,
            max_outer_iters: 500,
            max_inner_iters: 5000,
            max_backtracks: 40,
            seed: 0,
            enforce_product_constraints: true,
            restart_cap: 10,
            gamma_stall_factor: 1.0,
            objective_noise: 0.0,
        }
    }
}

impl SolverConfig {
    /// Preset used for the first benchmark family (degree-8 objectives).
    pub fn family1_preset() -> Self {
        SolverConfig {
            degree: Some(8),
            bm_rank: Some(9),
            ..SolverConfig::default()
        }
    }

    /// Preset used for the second benchmark family (degree-4 objectives).
    pub fn family2_preset() -> Self {
        SolverConfig {
            num_measures: 6,
            degree: Some(4),
            bm_rank: Some(5),
            penalty_gamma: 10.0,
            wolfe_beta: 0.4,
            lbfgs_order: 40,
            tol_kkt_abs_val: 1e-3,
            tol_inner_rel_grad: 1e-2,
            tol_inner_abs_val: 1e-5,
            ..SolverConfig::default()
        }
    }

    /// Validates ranges that do not depend on the polynomial.
    pub fn validate(&self) -> Result<()> {
        if self.num_measures < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_measures must be at least 2 (certification needs a second block), got {}",
                self.num_measures
            )));
        }
        if !(self.penalty_gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "penalty_gamma must be positive, got {}",
                self.penalty_gamma
            )));
        }
        if !(self.wolfe_beta > 0.0 && self.wolfe_beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "wolfe beta out of range (0, 1): {}",
                self.wolfe_beta
            )));
        }
        if !(self.tol_feasibility > 0.0 && self.tol_feasibility < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tol_feasibility out of range (0, 1): {}",
                self.tol_feasibility
            )));
        }
        for (name, value) in [
            ("tol_kkt_rel_grad", self.tol_kkt_rel_grad),
            ("tol_kkt_abs_val", self.tol_kkt_abs_val),
            ("tol_inner_rel_grad", self.tol_inner_rel_grad),
            ("tol_inner_abs_val", self.tol_inner_abs_val),
        ] {
            if !(value > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{} must be positive, got {}",
                    name, value
                )));
            }
        }
        if self.lbfgs_order == 0 {
            return Err(Error::InvalidConfig("lbfgs_order must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        if !(self.gamma_stall_factor >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma_stall_factor must be at least 1.0, got {}",
                self.gamma_stall_factor
            )));
        }
        if !(self.objective_noise >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "objective_noise must be nonnegative, got {}",
                self.objective_noise
            )));
        }
        Ok(())
    }

    /// Resolves degree and rank defaults against a polynomial.
    pub fn layout_params(&self, poly: &SparseChebPoly) -> Result<LayoutParams> {
        let degree = self
            .degree
            .unwrap_or_else(|| (poly.per_var_degree() as usize).max(1));
        let rank = self.bm_rank.unwrap_or(degree + 1);
        Ok(LayoutParams {
            num_measures: self.num_measures,
            dims: poly.dimension(),
            degree,
            rank,
            num_support: poly.num_terms(),
            product_constraints: self.enforce_product_constraints,
        })
    }

    pub(crate) fn line_search_params(&self) -> LineSearchParams {
        LineSearchParams {
            beta: self.wolfe_beta,
            max_backtracks: self.max_backtracks,
            shrink: 0.5,
        }
    }

    pub(crate) fn inner_stop(&self) -> InnerStop {
        InnerStop {
            tol_rel_grad: self.tol_inner_rel_grad,
            tol_abs_val: self.tol_inner_abs_val,
            max_iters: self.max_inner_iters,
        }
    }
}

/// Per-outer-iteration measurements, also emitted as log lines.
#[derive(Debug, Clone, Copy)]
pub struct OuterTrace {
    pub outer: usize,
    pub objective: f64,
    pub feasibility_inf: f64,
    pub feasibility_l2: f64,
    pub inner_iterations: usize,
    pub wall_seconds: f64,
}

/// Outcome summary of one saddle-point solve.
#[derive(Debug, Clone)]
pub struct OuterStats {
    pub outer_iterations: usize,
    pub total_inner_iterations: usize,
    pub final_feasibility_inf_norm: f64,
    pub final_objective: f64,
    pub wall_seconds: f64,
    pub converged: bool,
    pub trace: Vec<OuterTrace>,
}

/// Consecutive outer iterations on which all three stopping criteria must
/// hold before the solve is declared converged.
const CONVERGENCE_STREAK: usize = 3;

/// Seeded random start: every primal scalar uniform on `[-1, 1]`, zero
/// multipliers, penalty from the config.
pub fn initialize(problem: &Problem, config: &SolverConfig) -> (MomentState, DualState) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = problem.layout();
    let values: Vec<f64> = (0..layout.num_vars())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let state = MomentState::from_flat(layout, values).expect("layout-sized vector");
    let dual = DualState::zeros(layout, config.penalty_gamma);
    (state, dual)
}

/// Gradient-ascent step on the multipliers: `lambda_k += gamma * c_k`.
/// The penalty is unchanged.
pub fn dual_update(dual: &DualState, residuals: &ConstraintResiduals) -> Result<DualState> {
    if dual.lambda.len() != residuals.c.len() {
        return Err(Error::ShapeMismatch(format!(
            "dual has {} multipliers, residuals have {}",
            dual.lambda.len(),
            residuals.c.len()
        )));
    }
    Ok(DualState {
        lambda: dual
            .lambda
            .iter()
            .zip(&residuals.c)
            .map(|(&l, &c)| l + dual.gamma * c)
            .collect(),
        gamma: dual.gamma,
    })
}

/// Solves the factorized problem for `poly` from a fresh random start.
pub fn solve(
    poly: &SparseChebPoly,
    config: &SolverConfig,
) -> Result<(Problem, MomentState, DualState, OuterStats)> {
    config.validate()?;
    let problem = Problem::new(poly, config)?;
    let (state, dual) = initialize(&problem, config);
    let (state, dual, stats) = solve_from(&problem, state, dual, config)?;
    Ok((problem, state, dual, stats))
}

/// Runs the outer alternation from an existing primal/dual point.
pub fn solve_from(
    problem: &Problem,
    state: MomentState,
    dual: DualState,
    config: &SolverConfig,
) -> Result<(MomentState, DualState, OuterStats)> {
    let layout = problem.layout();
    log::info!(
        "solve dims={} measures={} degree={} rank={} vars={} constraints={}",
        layout.params().dims,
        layout.params().num_measures,
        layout.params().degree,
        layout.params().rank,
        layout.num_vars(),
        layout.num_constraints()
    );
    let ls = config.line_search_params();
    let inner = config.inner_stop();
    let start = Instant::now();

    let mut state = state;
    let mut dual = dual;
    let mut trace = Vec::new();
    let mut total_inner = 0usize;
    let mut prev_value: Option<f64> = None;
    let mut prev_feasibility = f64::INFINITY;
    let mut converged = false;
    let mut settled_streak = 0usize;
    let mut slacks_reinitialized = false;
    // Multiplier updates leave the Lagrangian's curvature untouched, so the
    // quasi-Newton memory stays valid across outer iterations. Without it
    // every primal phase would restart as steepest descent and stall on the
    // value-change criterion long before reaching a small gradient.
    let mut memory = lbfgs::LbfgsMemory::new(config.lbfgs_order);
    // Fallback for non-convergent runs: the most feasible state seen, with
    // objective as the tie-breaker once inside the feasibility tolerance.
    let mut best: Option<(MomentState, f64, f64)> = None;
    let mut outer_done = 0usize;

    for outer in 0..config.max_outer_iters {
        // A wildly infeasible start can overflow the moment products. Redraw
        // the slack variables once; they are the only unbounded-by-descent
        // block with no data worth keeping.
        {
            let mut oracle = LagrangianOracle::new(problem, &dual);
            let l0 = lbfgs::Objective::value(&mut oracle, state.as_flat());
            if !l0.is_finite() {
                if slacks_reinitialized {
                    return Err(Error::NonFinite(
                        "augmented Lagrangian after slack reinitialization".into(),
                    ));
                }
                slacks_reinitialized = true;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000);
                for idx in layout.slack_range() {
                    state.as_flat_mut()[idx] = rng.gen_range(-1.0..1.0);
                }
                let l1 = lbfgs::Objective::value(&mut oracle, state.as_flat());
                if !l1.is_finite() {
                    return Err(Error::NonFinite(
                        "augmented Lagrangian remains non-finite after slack reinitialization"
                            .into(),
                    ));
                }
            }
        }

        let result = {
            let mut oracle = LagrangianOracle::new(problem, &dual);
            lbfgs::minimize_with_memory(&mut oracle, state.as_flat(), &mut memory, &ls, &inner)?
        };
        total_inner += result.stats.iterations;
        state = MomentState::from_flat(layout, result.x)?;

        let residuals = problem.residuals(&state);
        let feasibility = residuals.max_abs();
        let objective = problem.objective(&state);
        let grad = problem.lagrangian_gradient(&state, &dual)?;
        let lagrangian = problem.lagrangian(&state, &dual)?;
        let rel_grad = lbfgs::rel_grad(lagrangian, &grad);
        let wall = start.elapsed().as_secs_f64();
        outer_done = outer + 1;

        log::info!(
            "outer={} objective={:.6e} feas_inf={:.3e} rel_grad={:.3e} inner_iters={} wall_s={:.3}",
            outer,
            objective,
            feasibility,
            rel_grad,
            result.stats.iterations,
            wall
        );
        trace.push(OuterTrace {
            outer,
            objective,
            feasibility_inf: feasibility,
            feasibility_l2: residuals.norm_l2(),
            inner_iterations: result.stats.iterations,
            wall_seconds: wall,
        });

        let better = match &best {
            None => true,
            Some((_, best_feas, best_obj)) => {
                let feas_ok = feasibility < config.tol_feasibility;
                let best_ok = *best_feas < config.tol_feasibility;
                (feas_ok && !best_ok)
                    || (feas_ok && best_ok && objective < *best_obj)
                    || (!feas_ok && !best_ok && feasibility < *best_feas)
            }
        };
        if better {
            best = Some((state.clone(), feasibility, objective));
        }

        // The value criterion watches the merit function actually being
        // optimized; the raw objective fluctuates by the multiplier-weighted
        // residuals and would mask convergence. A value change is a noisy
        // convergence signal: a single dip below tolerance during a slow
        // stretch says nothing, so the criteria must hold on consecutive
        // outer iterations before the loop stops.
        let value_settled = prev_value
            .map(|prev| (lagrangian - prev).abs() < config.tol_kkt_abs_val)
            .unwrap_or(false);
        if feasibility < config.tol_feasibility
            && rel_grad < config.tol_kkt_rel_grad
            && value_settled
        {
            settled_streak += 1;
            if settled_streak >= CONVERGENCE_STREAK {
                converged = true;
                break;
            }
        } else {
            settled_streak = 0;
        }

        dual = dual_update(&dual, &residuals)?;
        if config.gamma_stall_factor > 1.0 && feasibility >= prev_feasibility {
            dual.gamma *= config.gamma_stall_factor;
            // The penalty term scales the curvature; stored pairs are stale.
            memory.clear();
        }
        prev_feasibility = feasibility;
        prev_value = Some(lagrangian);
    }

    if !converged {
        if let Some((best_state, _, _)) = best {
            state = best_state;
        }
        log::warn!("solve did not converge within {} outer iterations", config.max_outer_iters);
    }
    let residuals = problem.residuals(&state);
    let stats = OuterStats {
        outer_iterations: outer_done,
        total_inner_iterations: total_inner,
        final_feasibility_inf_norm: residuals.max_abs(),
        final_objective: problem.objective(&state),
        wall_seconds: start.elapsed().as_secs_f64(),
        converged,
        trace,
    };
    Ok((state, dual, stats))
}
