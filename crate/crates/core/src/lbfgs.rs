//! Limited-memory BFGS descent with backtracking line search.
//!
//! Directions come from the standard two-loop recursion over a bounded
//! history of `(s, y)` pairs. Steps are chosen by pure halving backtracking
//! under the sufficient-decrease condition
//! `f(x + 0.5^k d) <= f(x) + 0.5^k beta (g . d)`; when the search exhausts
//! its backtracks the caller retries once along the raw negative gradient.
//! The minimizer is monotone (accepted steps strictly decrease `f`) and
//! returns the best iterate seen.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Relative curvature threshold below which an `(s, y)` pair is rejected.
const CURVATURE_GUARD: f64 = 1e-12;

/// Objective with a value-only path (line search) and a fused
/// value-and-gradient path (everything else).
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Closure-backed objective for tests and small problems.
pub struct FnObjective<F>(pub F);

impl<F: FnMut(&[f64], Option<&mut [f64]>) -> f64> Objective for FnObjective<F> {
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.0)(x, None)
    }

    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.0)(x, Some(grad))
    }
}

/// Backtracking line-search parameters.
#[derive(Debug, Clone, Copy)]
pub struct LineSearchParams {
    /// Sufficient-decrease factor, in `(0, 1)`.
    pub beta: f64,
    /// Number of halvings tried before giving up.
    pub max_backtracks: usize,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        LineSearchParams {
            beta: 0.3,
            max_backtracks: 40,
            shrink: 0.5,
        }
    }
}

/// Inner stopping criteria: relative gradient, absolute value change, and an
/// iteration cap.
#[derive(Debug, Clone, Copy)]
pub struct InnerStop {
    pub tol_rel_grad: f64,
    pub tol_abs_val: f64,
    pub max_iters: usize,
}

impl Default for InnerStop {
    fn default() -> Self {
        InnerStop {
            tol_rel_grad: 1e-3,
            tol_abs_val: 1e-4,
            max_iters: 5000,
        }
    }
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    inv_sy: f64,
    gamma: f64,
}

/// Ring buffer of curvature pairs for the two-loop recursion.
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<Pair>,
}

impl LbfgsMemory {
    pub fn new(order: usize) -> Self {
        LbfgsMemory {
            capacity: order.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Inserts a pair unless it fails the curvature guard
    /// `s . y > 1e-12 ||s|| ||y||`; returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        let ss = dot(&s, &s).sqrt();
        let yy = dot(&y, &y);
        if !(sy > CURVATURE_GUARD * ss * yy.sqrt()) || yy == 0.0 {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(Pair {
            s,
            y,
            inv_sy: 1.0 / sy,
            gamma: sy / yy,
        });
        true
    }

    /// Drops all stored pairs (required when the objective's curvature
    /// changes, e.g. a penalty-parameter update).
    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Smallest `s . y` over stored pairs (infinity when empty); all stored
    /// pairs satisfy the curvature guard.
    pub fn min_curvature(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| 1.0 / p.inv_sy)
            .fold(f64::INFINITY, f64::min)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: approximate `-H g` from the stored pairs, scaled by
/// the latest curvature. Returns `-g` on empty memory.
pub fn descent_direction(g: &[f64], memory: &LbfgsMemory) -> Result<Vec<f64>> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient passed to descent_direction".into()));
    }
    let mut q = g.to_vec();
    if memory.is_empty() {
        for v in &mut q {
            *v = -*v;
        }
        return Ok(q);
    }
    let mut alphas = vec![0.0; memory.pairs.len()];
    for (idx, pair) in memory.pairs.iter().enumerate().rev() {
        let a = pair.inv_sy * dot(&pair.s, &q);
        alphas[idx] = a;
        for (qv, yv) in q.iter_mut().zip(&pair.y) {
            *qv -= a * yv;
        }
    }
    let scale = memory.pairs.back().expect("nonempty").gamma;
    for v in &mut q {
        *v *= scale;
    }
    for (idx, pair) in memory.pairs.iter().enumerate() {
        let b = pair.inv_sy * dot(&pair.y, &q);
        let coef = alphas[idx] - b;
        for (qv, sv) in q.iter_mut().zip(&pair.s) {
            *qv += coef * sv;
        }
    }
    for v in &mut q {
        *v = -*v;
    }
    Ok(q)
}

/// Why a line search returned without a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearchFailure {
    /// `g . d >= 0`: not a descent direction.
    NotDescent,
    /// No backtrack satisfied the sufficient-decrease condition.
    Exhausted,
}

/// Backtracking search along `d` from `x` where `f0 = f(x)` and `gd = g . d`.
///
/// Tries steps `shrink^k` for `k = 0 .. max_backtracks` and accepts the first
/// satisfying `f(x + step d) <= f0 + step * beta * gd`. On success the
/// accepted point is left in `trial` and `(step, f(trial))` is returned.
pub fn line_search<O: Objective>(
    objective: &mut O,
    x: &[f64],
    d: &[f64],
    f0: f64,
    gd: f64,
    params: &LineSearchParams,
    trial: &mut [f64],
    evals: &mut usize,
) -> std::result::Result<(f64, f64), LineSearchFailure> {
    if !(gd < 0.0) {
        return Err(LineSearchFailure::NotDescent);
    }
    let mut step = 1.0;
    for _ in 0..params.max_backtracks {
        for ((t, &xv), &dv) in trial.iter_mut().zip(x).zip(d) {
            *t = xv + step * dv;
        }
        let f_trial = objective.value(trial);
        *evals += 1;
        // A NaN trial value fails the comparison and backtracks.
        if f_trial <= f0 + step * params.beta * gd {
            return Ok((step, f_trial));
        }
        step *= params.shrink;
    }
    Err(LineSearchFailure::Exhausted)
}

/// Why the minimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `||g|| / (1 + |f|)` fell below the tolerance.
    RelGrad,
    /// Value change between consecutive iterates fell below the tolerance.
    AbsVal,
    /// Iteration cap reached.
    MaxIters,
    /// Line search failed even along the negative gradient.
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeStats {
    pub iterations: usize,
    pub value_evals: usize,
    pub grad_evals: usize,
    /// Times the direction was reset to the negative gradient.
    pub fallbacks: usize,
    pub stop: StopReason,
}

#[derive(Debug)]
pub struct MinimizeResult {
    /// Best (lowest-value) iterate seen.
    pub x: Vec<f64>,
    pub value: f64,
    /// Gradient at the final iterate.
    pub grad: Vec<f64>,
    pub stats: MinimizeStats,
}

/// Relative gradient `||g||_inf / (1 + |f|)`.
///
/// The max norm keeps the criterion meaningful across problem sizes; a
/// Euclidean norm would tighten the same tolerance by sqrt(n).
pub fn rel_grad(value: f64, grad: &[f64]) -> f64 {
    grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) / (1.0 + value.abs())
}

/// L-BFGS descent from `x0` until the relative gradient or the absolute value
/// change falls below its tolerance, or the iteration cap is hit.
pub fn minimize<O: Objective>(
    objective: &mut O,
    x0: &[f64],
    order: usize,
    ls: &LineSearchParams,
    stop: &InnerStop,
) -> Result<MinimizeResult> {
    let mut memory = LbfgsMemory::new(order);
    minimize_with_memory(objective, x0, &mut memory, ls, stop)
}

/// [`minimize`] with caller-owned curvature memory.
///
/// Lets an outer loop resume descent across repeated calls when the
/// objective's Hessian is unchanged between them (multiplier updates of an
/// augmented Lagrangian change the gradient but not the curvature, so stored
/// pairs stay valid).
pub fn minimize_with_memory<O: Objective>(
    objective: &mut O,
    x0: &[f64],
    memory: &mut LbfgsMemory,
    ls: &LineSearchParams,
    stop: &InnerStop,
) -> Result<MinimizeResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut value = objective.value_grad(&x, &mut grad);
    let mut stats = MinimizeStats {
        iterations: 0,
        value_evals: 0,
        grad_evals: 1,
        fallbacks: 0,
        stop: StopReason::RelGrad,
    };
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective at start: {}", value)));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient at start".into()));
    }

    let mut best_x = x.clone();
    let mut best_value = value;
    if rel_grad(value, &grad) < stop.tol_rel_grad {
        return Ok(MinimizeResult {
            x: best_x,
            value: best_value,
            grad,
            stats,
        });
    }

    let mut trial = vec![0.0; n];
    let mut next_grad = vec![0.0; n];

    while stats.iterations < stop.max_iters {
        let mut direction = descent_direction(&grad, memory)?;
        let mut gd = dot(&grad, &direction);
        if !(gd < 0.0) {
            // Degenerate memory; steepest descent always works.
            for (dv, &gv) in direction.iter_mut().zip(&grad) {
                *dv = -gv;
            }
            gd = -dot(&grad, &grad);
            stats.fallbacks += 1;
        }

        let mut accepted = line_search(
            objective,
            &x,
            &direction,
            value,
            gd,
            ls,
            &mut trial,
            &mut stats.value_evals,
        );
        if accepted.is_err() && !memory.is_empty() {
            // Revert to a gradient-descent direction and retry once.
            stats.fallbacks += 1;
            for (dv, &gv) in direction.iter_mut().zip(&grad) {
                *dv = -gv;
            }
            gd = -dot(&grad, &grad);
            accepted = line_search(
                objective,
                &x,
                &direction,
                value,
                gd,
                ls,
                &mut trial,
                &mut stats.value_evals,
            );
        }
        let (_step, next_value) = match accepted {
            Ok(found) => found,
            Err(_) => {
                stats.stop = StopReason::LineSearchFailed;
                break;
            }
        };

        let reported = objective.value_grad(&trial, &mut next_grad);
        stats.grad_evals += 1;
        if next_grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient during descent".into()));
        }
        // Use the fused evaluation's value; it matches the line-search value
        // up to roundoff and keeps value/gradient consistent.
        let next_value = if reported.is_finite() { reported } else { next_value };

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        memory.push(s, y);

        let delta = (value - next_value).abs();
        x.copy_from_slice(&trial);
        std::mem::swap(&mut grad, &mut next_grad);
        value = next_value;
        stats.iterations += 1;
        if value < best_value {
            best_value = value;
            best_x.copy_from_slice(&x);
        }

        if delta < stop.tol_abs_val {
            stats.stop = StopReason::AbsVal;
            break;
        }
        if rel_grad(value, &grad) < stop.tol_rel_grad {
            stats.stop = StopReason::RelGrad;
            break;
        }
        if stats.iterations >= stop.max_iters {
            stats.stop = StopReason::MaxIters;
            break;
        }
    }
    if stats.iterations >= stop.max_iters && stats.stop == StopReason::RelGrad {
        stats.stop = StopReason::MaxIters;
    }

    Ok(MinimizeResult {
        x: best_x,
        value: best_value,
        grad,
        stats,
    })
}
