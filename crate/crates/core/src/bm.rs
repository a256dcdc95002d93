//! Factorized problem layout, constraint residuals and the augmented
//! Lagrangian with analytic gradients.
//!
//! The decision variables for one instance are, per measure block `l` and
//! dimension `i`:
//!
//! * a moment vector `mu[l][i]` of length `2d + 1`,
//! * a `(d+1) x rank` factor `R[l][i]` enforcing `M_d(mu) = R Rᵀ`,
//! * squared slacks for the two-sided moment box, the mass nonnegativity
//!   `mu[l][0][0] >= 0`, and (optionally) the redundant product-moment box
//!   `|prod_i mu[l][i][n_i]| <= 1` for every support index of the objective
//!   polynomial.
//!
//! The moment box encodes that Chebyshev moments of a positive measure on
//! the interval never exceed its mass: `|mu[l][i][k]| <= mu[l][i][0]`.
//! Dimensions `i >= 1` have unit mass pinned, so their bound is the plain
//! `|mu| <= 1`; dimension 0 carries the block mass and is bounded by its own
//! zeroth moment. The scaled bound matters: with a fixed `|mu| <= 1` box, a
//! near-zero-mass block can imitate an atom just outside the interval,
//! pushing a high moment to the box bound at almost no mass cost and
//! dragging the objective below the true minimum.
//!
//! Everything is flattened into a single parameter vector so the inner
//! descent can treat the state as a plain point in `R^n`; [`ProblemLayout`]
//! is the deterministic index map between the structured view and the flat
//! one. Support-localizing matrices are not enforced: the moment box plus
//! the PSD moment matrix already confine the measures, which roughly halves
//! the constraint count relative to carrying a second factorized matrix per
//! block and dimension. Moment-matrix equalities are likewise enforced on
//! the upper triangle only, since both sides are symmetric; the published
//! constraint count reflects both choices.

use crate::error::{Error, Result};
use crate::moments::assemble_moment_matrix;
use crate::poly::{cheb_eval_all, Basis, SparseChebPoly};
use crate::saddle::SolverConfig;

/// Structural dimensions of one problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutParams {
    /// Number of product-measure blocks, `L`.
    pub num_measures: usize,
    /// Ambient dimension, `D`.
    pub dims: usize,
    /// Moment-matrix order, `d`; moment vectors have length `2d + 1`.
    pub degree: usize,
    /// Burer-Monteiro factor width, `1 <= rank <= d + 1`.
    pub rank: usize,
    /// Number of support indices of the objective polynomial, `N(p)`.
    pub num_support: usize,
    /// Whether the redundant product-moment box constraints are enforced.
    pub product_constraints: bool,
}

impl LayoutParams {
    pub fn moments_len(&self) -> usize {
        2 * self.degree + 1
    }

    pub fn matrix_size(&self) -> usize {
        self.degree + 1
    }

    /// Box constraints cover degrees `1..=2d`; the zeroth moment is handled
    /// by the mass and pinning constraints.
    pub fn box_entries(&self) -> usize {
        2 * self.degree
    }
}

/// Deterministic index map from structured variables and constraints to
/// positions in the flat parameter and residual vectors.
///
/// Variable order: moments, factors, upper box slacks, lower box slacks,
/// mass slacks, upper product slacks, lower product slacks. Constraint
/// order: moment-matrix equalities (upper triangle), upper box, lower box,
/// mass, pinned unit masses for dimensions `i >= 1`, normalization, upper
/// product, lower product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemLayout {
    params: LayoutParams,
    // Variable section bases.
    var_mu: usize,
    var_factor: usize,
    var_t_box_hi: usize,
    var_t_box_lo: usize,
    var_t_mass: usize,
    var_t_prod_hi: usize,
    var_t_prod_lo: usize,
    num_vars: usize,
    // Constraint section bases.
    con_matrix: usize,
    con_box_hi: usize,
    con_box_lo: usize,
    con_mass: usize,
    con_pinned: usize,
    con_norm: usize,
    con_prod_hi: usize,
    con_prod_lo: usize,
    num_constraints: usize,
}

impl ProblemLayout {
    pub fn new(params: LayoutParams) -> Result<Self> {
        if params.num_measures < 1 {
            return Err(Error::InvalidConfig(
                "number of product measures must be at least 1".into(),
            ));
        }
        if params.dims < 1 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if params.degree < 1 {
            return Err(Error::InvalidConfig("degree must be at least 1".into()));
        }
        if params.rank < 1 || params.rank > params.degree + 1 {
            return Err(Error::InvalidConfig(format!(
                "rank must satisfy 1 <= rank <= degree + 1, got {} with degree {}",
                params.rank, params.degree
            )));
        }
        let (l, d) = (params.num_measures, params.dims);
        let mlen = params.moments_len();
        let msize = params.matrix_size();
        let boxes = params.box_entries();
        let blocks = l * d;
        let prods = if params.product_constraints {
            l * params.num_support
        } else {
            0
        };

        let var_mu = 0;
        let var_factor = var_mu + blocks * mlen;
        let var_t_box_hi = var_factor + blocks * msize * params.rank;
        let var_t_box_lo = var_t_box_hi + blocks * boxes;
        let var_t_mass = var_t_box_lo + blocks * boxes;
        let var_t_prod_hi = var_t_mass + l;
        let var_t_prod_lo = var_t_prod_hi + prods;
        let num_vars = var_t_prod_lo + prods;

        let triangle = msize * (msize + 1) / 2;
        let con_matrix = 0;
        let con_box_hi = con_matrix + blocks * triangle;
        let con_box_lo = con_box_hi + blocks * boxes;
        let con_mass = con_box_lo + blocks * boxes;
        let con_pinned = con_mass + l;
        let con_norm = con_pinned + l * (d - 1);
        let con_prod_hi = con_norm + 1;
        let con_prod_lo = con_prod_hi + prods;
        let num_constraints = con_prod_lo + prods;

        Ok(ProblemLayout {
            params,
            var_mu,
            var_factor,
            var_t_box_hi,
            var_t_box_lo,
            var_t_mass,
            var_t_prod_hi,
            var_t_prod_lo,
            num_vars,
            con_matrix,
            con_box_hi,
            con_box_lo,
            con_mass,
            con_pinned,
            con_norm,
            con_prod_hi,
            con_prod_lo,
            num_constraints,
        })
    }

    pub fn params(&self) -> &LayoutParams {
        &self.params
    }

    /// Total scalar variables in the flat parameter vector.
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Total scalar equality constraints, `K`.
    pub fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    #[inline]
    pub fn mu_index(&self, block: usize, dim: usize, k: usize) -> usize {
        self.var_mu + (block * self.params.dims + dim) * self.params.moments_len() + k
    }

    #[inline]
    pub fn factor_index(&self, block: usize, dim: usize, row: usize, col: usize) -> usize {
        self.var_factor
            + ((block * self.params.dims + dim) * self.params.matrix_size() + row)
                * self.params.rank
            + col
    }

    #[inline]
    pub fn t_box_hi_index(&self, block: usize, dim: usize, k: usize) -> usize {
        debug_assert!(k >= 1);
        self.var_t_box_hi + (block * self.params.dims + dim) * self.params.box_entries() + (k - 1)
    }

    #[inline]
    pub fn t_box_lo_index(&self, block: usize, dim: usize, k: usize) -> usize {
        debug_assert!(k >= 1);
        self.var_t_box_lo + (block * self.params.dims + dim) * self.params.box_entries() + (k - 1)
    }

    #[inline]
    pub fn t_mass_index(&self, block: usize) -> usize {
        self.var_t_mass + block
    }

    #[inline]
    pub fn t_prod_hi_index(&self, block: usize, term: usize) -> usize {
        self.var_t_prod_hi + block * self.params.num_support + term
    }

    #[inline]
    pub fn t_prod_lo_index(&self, block: usize, term: usize) -> usize {
        self.var_t_prod_lo + block * self.params.num_support + term
    }

    /// First moment-matrix constraint of a `(block, dim)` pair; entries
    /// follow in upper-triangle row-major order.
    #[inline]
    pub fn con_matrix_base(&self, block: usize, dim: usize) -> usize {
        let msize = self.params.matrix_size();
        self.con_matrix + (block * self.params.dims + dim) * (msize * (msize + 1) / 2)
    }

    /// Upper-triangle offset of entry `(row, col)`, `row <= col`.
    #[inline]
    pub fn triangle_offset(&self, row: usize, col: usize) -> usize {
        let msize = self.params.matrix_size();
        row * msize - row * (row - 1) / 2 + (col - row)
    }

    #[inline]
    pub fn con_box_hi_index(&self, block: usize, dim: usize, k: usize) -> usize {
        debug_assert!(k >= 1);
        self.con_box_hi + (block * self.params.dims + dim) * self.params.box_entries() + (k - 1)
    }

    #[inline]
    pub fn con_box_lo_index(&self, block: usize, dim: usize, k: usize) -> usize {
        debug_assert!(k >= 1);
        self.con_box_lo + (block * self.params.dims + dim) * self.params.box_entries() + (k - 1)
    }

    #[inline]
    pub fn con_mass_index(&self, block: usize) -> usize {
        self.con_mass + block
    }

    /// Pinned unit-mass constraint for dimension `dim >= 1`.
    #[inline]
    pub fn con_pinned_index(&self, block: usize, dim: usize) -> usize {
        debug_assert!(dim >= 1);
        self.con_pinned + block * (self.params.dims - 1) + (dim - 1)
    }

    #[inline]
    pub fn con_norm_index(&self) -> usize {
        self.con_norm
    }

    #[inline]
    pub fn con_prod_hi_index(&self, block: usize, term: usize) -> usize {
        self.con_prod_hi + block * self.params.num_support + term
    }

    #[inline]
    pub fn con_prod_lo_index(&self, block: usize, term: usize) -> usize {
        self.con_prod_lo + block * self.params.num_support + term
    }

    /// Flat-vector positions of every slack variable (they form the tail of
    /// the variable order).
    pub fn slack_range(&self) -> std::ops::Range<usize> {
        self.var_t_box_hi..self.num_vars
    }
}

/// Full primal variable block, backed by the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    values: Vec<f64>,
}

impl MomentState {
    /// All-zero state for a layout.
    pub fn zeros(layout: &ProblemLayout) -> Self {
        MomentState {
            values: vec![0.0; layout.num_vars()],
        }
    }

    /// Wraps a flat parameter vector; the inverse of [`Self::as_flat`].
    pub fn from_flat(layout: &ProblemLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_vars() {
            return Err(Error::ShapeMismatch(format!(
                "flat state has {} values, layout expects {}",
                values.len(),
                layout.num_vars()
            )));
        }
        Ok(MomentState { values })
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    /// Moment vector of one `(block, dim)` pair.
    pub fn moment_vector(&self, layout: &ProblemLayout, block: usize, dim: usize) -> &[f64] {
        let base = layout.mu_index(block, dim, 0);
        &self.values[base..base + layout.params().moments_len()]
    }

    pub fn moment(&self, layout: &ProblemLayout, block: usize, dim: usize, k: usize) -> f64 {
        self.values[layout.mu_index(block, dim, k)]
    }

    /// Mass of one block: product of the zeroth moments over dimensions.
    pub fn block_mass(&self, layout: &ProblemLayout, block: usize) -> f64 {
        (0..layout.params().dims)
            .map(|dim| self.moment(layout, block, dim, 0))
            .product()
    }

    /// Masses of all blocks.
    pub fn block_masses(&self, layout: &ProblemLayout) -> Vec<f64> {
        (0..layout.params().num_measures)
            .map(|block| self.block_mass(layout, block))
            .collect()
    }
}

/// Lagrange multipliers and the penalty parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub gamma: f64,
}

impl DualState {
    /// Zero multipliers of the layout's constraint count.
    pub fn zeros(layout: &ProblemLayout, gamma: f64) -> Self {
        DualState {
            lambda: vec![0.0; layout.num_constraints()],
            gamma,
        }
    }
}

/// Residuals of the scalar equality constraints; feasibility is
/// `max |c_k| = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResiduals {
    pub c: Vec<f64>,
}

impl ConstraintResiduals {
    pub fn max_abs(&self) -> f64 {
        self.c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.c.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Augmented value `objective + lambda . c + (gamma / 2) ||c||^2`.
pub fn augmented_value(objective: f64, c: &[f64], lambda: &[f64], gamma: f64) -> f64 {
    debug_assert_eq!(c.len(), lambda.len());
    let mut linear = 0.0;
    let mut quad = 0.0;
    for (&ck, &lk) in c.iter().zip(lambda) {
        linear += lk * ck;
        quad += ck * ck;
    }
    objective + linear + 0.5 * gamma * quad
}

/// One polynomial compiled against a layout: support indices, coefficients
/// and the index map needed to evaluate the objective, residuals and the
/// augmented Lagrangian.
#[derive(Debug, Clone)]
pub struct Problem {
    layout: ProblemLayout,
    /// Support multi-indices, row-major `num_support x dims`.
    support: Vec<u32>,
    /// Coefficient per support index, in lexicographic index order.
    coefs: Vec<f64>,
}

impl Problem {
    /// Compiles `poly` with explicit structural parameters.
    ///
    /// `params.num_support` is overwritten from the polynomial.
    pub fn with_params(poly: &SparseChebPoly, mut params: LayoutParams) -> Result<Self> {
        if poly.basis() != Basis::Chebyshev {
            return Err(Error::BasisMismatch(
                "the solver operates on Chebyshev-basis polynomials".into(),
            ));
        }
        if poly.dimension() != params.dims {
            return Err(Error::DimensionMismatch {
                expected: params.dims,
                got: poly.dimension(),
            });
        }
        if poly.per_var_degree() as usize > 2 * params.degree {
            return Err(Error::InvalidConfig(format!(
                "moment vectors of length {} cannot express per-variable degree {}",
                2 * params.degree + 1,
                poly.per_var_degree()
            )));
        }
        params.num_support = poly.num_terms();
        let layout = ProblemLayout::new(params)?;
        let mut support = Vec::with_capacity(params.num_support * params.dims);
        let mut coefs = Vec::with_capacity(params.num_support);
        for (index, coef) in poly.terms() {
            support.extend_from_slice(&index.0);
            coefs.push(coef);
        }
        Ok(Problem {
            layout,
            support,
            coefs,
        })
    }

    /// Compiles `poly` under a solver configuration (degree and rank
    /// defaults are resolved against the polynomial).
    pub fn new(poly: &SparseChebPoly, config: &SolverConfig) -> Result<Self> {
        let params = config.layout_params(poly)?;
        Self::with_params(poly, params)
    }

    pub fn layout(&self) -> &ProblemLayout {
        &self.layout
    }

    pub fn params(&self) -> &LayoutParams {
        self.layout.params()
    }

    pub fn coefs(&self) -> &[f64] {
        &self.coefs
    }

    /// Support entry `n_i` of one term.
    #[inline]
    fn support_entry(&self, term: usize, dim: usize) -> usize {
        self.support[term * self.params().dims + dim] as usize
    }

    /// Per-variable degree selected by support index `term` in `dim`.
    pub fn support_degree(&self, term: usize, dim: usize) -> usize {
        self.support_entry(term, dim)
    }

    /// Evaluates the compiled polynomial at a point of the hypercube.
    pub fn evaluate_at(&self, x: &[f64]) -> Result<f64> {
        let p = self.params();
        if x.len() != p.dims {
            return Err(Error::DimensionMismatch {
                expected: p.dims,
                got: x.len(),
            });
        }
        let table: Vec<Vec<f64>> = x.iter().map(|&xi| cheb_eval_all(2 * p.degree, xi)).collect();
        let mut total = 0.0;
        for term in 0..self.coefs.len() {
            let mut prod = self.coefs[term];
            for (dim, t) in table.iter().enumerate() {
                prod *= t[self.support_entry(term, dim)];
            }
            total += prod;
        }
        Ok(total)
    }

    /// Moment objective `sum_n p_n sum_l prod_i mu[l][i][n_i]`.
    pub fn objective(&self, state: &MomentState) -> f64 {
        let x = state.as_flat();
        let p = self.params();
        let mut total = 0.0;
        for block in 0..p.num_measures {
            for term in 0..self.coefs.len() {
                let mut prod = self.coefs[term];
                for dim in 0..p.dims {
                    prod *= x[self.layout.mu_index(block, dim, self.support_entry(term, dim))];
                }
                total += prod;
            }
        }
        total
    }

    /// Residuals of every scalar equality constraint, freshly allocated.
    pub fn residuals(&self, state: &MomentState) -> ConstraintResiduals {
        let mut c = vec![0.0; self.layout.num_constraints()];
        let mut prods = vec![0.0; self.prod_cache_len()];
        self.residuals_into(state.as_flat(), &mut c, &mut prods);
        ConstraintResiduals { c }
    }

    fn prod_cache_len(&self) -> usize {
        self.params().num_measures * self.coefs.len()
    }

    /// Fills `c` with residuals and `prods` with the per-(block, term)
    /// moment products (also used by the objective).
    fn residuals_into(&self, x: &[f64], c: &mut [f64], prods: &mut [f64]) {
        let p = *self.params();
        let msize = p.matrix_size();
        let mlen = p.moments_len();

        for block in 0..p.num_measures {
            for dim in 0..p.dims {
                let mu = self.layout.mu_index(block, dim, 0);
                let fac = self.layout.factor_index(block, dim, 0, 0);
                // Moment-matrix equalities, upper triangle.
                let mut k = self.layout.con_matrix_base(block, dim);
                for row in 0..msize {
                    let r_row = fac + row * p.rank;
                    for col in row..msize {
                        let r_col = fac + col * p.rank;
                        let mut gram = 0.0;
                        for q in 0..p.rank {
                            gram += x[r_row + q] * x[r_col + q];
                        }
                        c[k] = 0.5 * x[mu + row + col] + 0.5 * x[mu + col - row] - gram;
                        k += 1;
                    }
                }
                // Two-sided moment box through squared slacks. The bound is
                // the mass entry for dimension 0 and the pinned 1 elsewhere.
                let bound = if dim == 0 { x[mu] } else { 1.0 };
                for k in 1..mlen {
                    let m = x[mu + k];
                    let t_hi = x[self.layout.t_box_hi_index(block, dim, k)];
                    let t_lo = x[self.layout.t_box_lo_index(block, dim, k)];
                    c[self.layout.con_box_hi_index(block, dim, k)] = bound - m - t_hi * t_hi;
                    c[self.layout.con_box_lo_index(block, dim, k)] = bound + m - t_lo * t_lo;
                }
            }
            // Mass nonnegativity on dimension 0; unit masses pinned elsewhere.
            let t_mass = x[self.layout.t_mass_index(block)];
            c[self.layout.con_mass_index(block)] =
                x[self.layout.mu_index(block, 0, 0)] - t_mass * t_mass;
            for dim in 1..p.dims {
                c[self.layout.con_pinned_index(block, dim)] =
                    x[self.layout.mu_index(block, dim, 0)] - 1.0;
            }
        }

        // Normalization: total mass one.
        let mut mass = 0.0;
        for block in 0..p.num_measures {
            mass += x[self.layout.mu_index(block, 0, 0)];
        }
        c[self.layout.con_norm_index()] = mass - 1.0;

        // Product moments, cached for the objective; box residuals only if
        // the redundant constraints are enforced.
        for block in 0..p.num_measures {
            for term in 0..self.coefs.len() {
                let mut prod = 1.0;
                for dim in 0..p.dims {
                    prod *= x[self.layout.mu_index(block, dim, self.support_entry(term, dim))];
                }
                prods[block * self.coefs.len() + term] = prod;
                if p.product_constraints {
                    let t_hi = x[self.layout.t_prod_hi_index(block, term)];
                    let t_lo = x[self.layout.t_prod_lo_index(block, term)];
                    c[self.layout.con_prod_hi_index(block, term)] = 1.0 - prod - t_hi * t_hi;
                    c[self.layout.con_prod_lo_index(block, term)] = 1.0 + prod - t_lo * t_lo;
                }
            }
        }
    }

    fn objective_from_prods(&self, prods: &[f64]) -> f64 {
        let n = self.coefs.len();
        let mut total = 0.0;
        for block in 0..self.params().num_measures {
            for term in 0..n {
                total += self.coefs[term] * prods[block * n + term];
            }
        }
        total
    }

    /// Augmented Lagrangian `objective + lambda . c + (gamma / 2) ||c||^2`.
    pub fn lagrangian(&self, state: &MomentState, dual: &DualState) -> Result<f64> {
        self.check_dual(dual)?;
        let mut c = vec![0.0; self.layout.num_constraints()];
        let mut prods = vec![0.0; self.prod_cache_len()];
        self.residuals_into(state.as_flat(), &mut c, &mut prods);
        Ok(augmented_value(
            self.objective_from_prods(&prods),
            &c,
            &dual.lambda,
            dual.gamma,
        ))
    }

    /// Exact gradient of the augmented Lagrangian with respect to every
    /// scalar in the state, freshly allocated.
    pub fn lagrangian_gradient(&self, state: &MomentState, dual: &DualState) -> Result<Vec<f64>> {
        self.check_dual(dual)?;
        let mut scratch = EvalScratch::new(self);
        let mut grad = vec![0.0; self.layout.num_vars()];
        self.eval_with_gradient(state.as_flat(), &dual.lambda, dual.gamma, &mut grad, &mut scratch);
        Ok(grad)
    }

    fn check_dual(&self, dual: &DualState) -> Result<()> {
        if dual.lambda.len() != self.layout.num_constraints() {
            return Err(Error::ShapeMismatch(format!(
                "dual has {} multipliers, layout expects {}",
                dual.lambda.len(),
                self.layout.num_constraints()
            )));
        }
        Ok(())
    }

    /// Value-only evaluation on a flat state.
    pub(crate) fn eval_value(&self, x: &[f64], lambda: &[f64], gamma: f64, scratch: &mut EvalScratch) -> f64 {
        self.residuals_into(x, &mut scratch.c, &mut scratch.prods);
        augmented_value(self.objective_from_prods(&scratch.prods), &scratch.c, lambda, gamma)
    }

    /// Fused value-and-gradient evaluation on a flat state.
    ///
    /// The gradient of the objective and of the product constraints shares
    /// the leave-one-out products `prod_{j != i} mu[l][j][n_j]`, computed by
    /// prefix/suffix sweeps so zero factors need no special casing.
    pub(crate) fn eval_with_gradient(
        &self,
        x: &[f64],
        lambda: &[f64],
        gamma: f64,
        grad: &mut [f64],
        scratch: &mut EvalScratch,
    ) -> f64 {
        let p = *self.params();
        let msize = p.matrix_size();
        let mlen = p.moments_len();
        self.residuals_into(x, &mut scratch.c, &mut scratch.prods);
        let c = &scratch.c;
        let value = augmented_value(self.objective_from_prods(&scratch.prods), c, lambda, gamma);

        grad.fill(0.0);
        for block in 0..p.num_measures {
            for dim in 0..p.dims {
                let mu = self.layout.mu_index(block, dim, 0);
                let fac = self.layout.factor_index(block, dim, 0, 0);
                let mut k = self.layout.con_matrix_base(block, dim);
                for row in 0..msize {
                    let r_row = fac + row * p.rank;
                    for col in row..msize {
                        let w = lambda[k] + gamma * c[k];
                        k += 1;
                        let r_col = fac + col * p.rank;
                        grad[mu + row + col] += 0.5 * w;
                        grad[mu + col - row] += 0.5 * w;
                        for q in 0..p.rank {
                            grad[r_row + q] -= w * x[r_col + q];
                            grad[r_col + q] -= w * x[r_row + q];
                        }
                    }
                }
                for k in 1..mlen {
                    let hi = self.layout.con_box_hi_index(block, dim, k);
                    let lo = self.layout.con_box_lo_index(block, dim, k);
                    let w_hi = lambda[hi] + gamma * c[hi];
                    let w_lo = lambda[lo] + gamma * c[lo];
                    grad[mu + k] += w_lo - w_hi;
                    if dim == 0 {
                        // The bound itself is the mass variable.
                        grad[mu] += w_hi + w_lo;
                    }
                    let t_hi = self.layout.t_box_hi_index(block, dim, k);
                    let t_lo = self.layout.t_box_lo_index(block, dim, k);
                    grad[t_hi] -= 2.0 * w_hi * x[t_hi];
                    grad[t_lo] -= 2.0 * w_lo * x[t_lo];
                }
            }
            let mass_con = self.layout.con_mass_index(block);
            let w_mass = lambda[mass_con] + gamma * c[mass_con];
            grad[self.layout.mu_index(block, 0, 0)] += w_mass;
            let t_mass = self.layout.t_mass_index(block);
            grad[t_mass] -= 2.0 * w_mass * x[t_mass];
            for dim in 1..p.dims {
                let pin = self.layout.con_pinned_index(block, dim);
                grad[self.layout.mu_index(block, dim, 0)] += lambda[pin] + gamma * c[pin];
            }
        }

        let norm = self.layout.con_norm_index();
        let w_norm = lambda[norm] + gamma * c[norm];
        for block in 0..p.num_measures {
            grad[self.layout.mu_index(block, 0, 0)] += w_norm;
        }

        // Objective and product-box gradients through the shared products.
        for block in 0..p.num_measures {
            for term in 0..self.coefs.len() {
                let mut weight = self.coefs[term];
                if p.product_constraints {
                    let hi = self.layout.con_prod_hi_index(block, term);
                    let lo = self.layout.con_prod_lo_index(block, term);
                    let w_hi = lambda[hi] + gamma * c[hi];
                    let w_lo = lambda[lo] + gamma * c[lo];
                    weight += w_lo - w_hi;
                    let t_hi = self.layout.t_prod_hi_index(block, term);
                    let t_lo = self.layout.t_prod_lo_index(block, term);
                    grad[t_hi] -= 2.0 * w_hi * x[t_hi];
                    grad[t_lo] -= 2.0 * w_lo * x[t_lo];
                }
                if weight == 0.0 {
                    continue;
                }
                let prefix = &mut scratch.prefix;
                let suffix = &mut scratch.suffix;
                prefix[0] = 1.0;
                for dim in 1..p.dims {
                    prefix[dim] = prefix[dim - 1]
                        * x[self.layout.mu_index(block, dim - 1, self.support_entry(term, dim - 1))];
                }
                suffix[p.dims - 1] = 1.0;
                for dim in (0..p.dims - 1).rev() {
                    suffix[dim] = suffix[dim + 1]
                        * x[self.layout.mu_index(block, dim + 1, self.support_entry(term, dim + 1))];
                }
                for dim in 0..p.dims {
                    grad[self.layout.mu_index(block, dim, self.support_entry(term, dim))] +=
                        weight * prefix[dim] * suffix[dim];
                }
            }
        }
        value
    }

    /// Analytic point-mass state: block `b` concentrates at `locations[b]`
    /// with mass `masses[b]`. Dimension 0 carries the mass; blocks with zero
    /// mass get a zero dimension-0 moment vector and keep unit point masses
    /// in the remaining dimensions, so they contribute nothing to any moment
    /// product while satisfying the pinned constraints. Slacks and factors
    /// are set consistently, so the state is feasible whenever the masses
    /// are nonnegative and sum to one.
    pub fn delta_state(&self, locations: &[Vec<f64>], masses: &[f64]) -> Result<MomentState> {
        let p = *self.params();
        if locations.len() != p.num_measures || masses.len() != p.num_measures {
            return Err(Error::ShapeMismatch(format!(
                "need {} locations and masses, got {} and {}",
                p.num_measures,
                locations.len(),
                masses.len()
            )));
        }
        let mut state = MomentState::zeros(&self.layout);
        for block in 0..p.num_measures {
            if locations[block].len() != p.dims {
                return Err(Error::DimensionMismatch {
                    expected: p.dims,
                    got: locations[block].len(),
                });
            }
            let mass = masses[block];
            if !(0.0..=1.0).contains(&mass) {
                return Err(Error::Precondition(format!(
                    "block mass {} outside [0, 1]",
                    mass
                )));
            }
            for dim in 0..p.dims {
                let xi = locations[block][dim];
                if !(-1.0..=1.0).contains(&xi) {
                    return Err(Error::Precondition(format!(
                        "delta location {} outside [-1, 1]",
                        xi
                    )));
                }
                let scale = if dim == 0 { mass } else { 1.0 };
                let values = cheb_eval_all(2 * p.degree, xi);
                for (k, &t) in values.iter().enumerate() {
                    let m = scale * t;
                    let flat = state.as_flat_mut();
                    flat[self.layout.mu_index(block, dim, k)] = m;
                    if k >= 1 {
                        flat[self.layout.t_box_hi_index(block, dim, k)] =
                            (scale - m).max(0.0).sqrt();
                        flat[self.layout.t_box_lo_index(block, dim, k)] =
                            (scale + m).max(0.0).sqrt();
                    }
                }
                let matrix = assemble_moment_matrix(
                    state.moment_vector(&self.layout, block, dim),
                    p.degree,
                )?;
                let factor = matrix.psd_sqrt_factor(p.rank);
                let flat = state.as_flat_mut();
                for row in 0..p.matrix_size() {
                    for col in 0..p.rank {
                        flat[self.layout.factor_index(block, dim, row, col)] =
                            factor[row * p.rank + col];
                    }
                }
            }
            let flat = state.as_flat_mut();
            flat[self.layout.t_mass_index(block)] = mass.sqrt();
            if p.product_constraints {
                for term in 0..self.coefs.len() {
                    let mut prod = 1.0;
                    for dim in 0..p.dims {
                        prod *= flat[self.layout.mu_index(block, dim, self.support_entry(term, dim))];
                    }
                    flat[self.layout.t_prod_hi_index(block, term)] = (1.0 - prod).max(0.0).sqrt();
                    flat[self.layout.t_prod_lo_index(block, term)] = (1.0 + prod).max(0.0).sqrt();
                }
            }
        }
        Ok(state)
    }
}

/// Reusable buffers for Lagrangian evaluations.
pub(crate) struct EvalScratch {
    pub c: Vec<f64>,
    prods: Vec<f64>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

impl EvalScratch {
    pub fn new(problem: &Problem) -> Self {
        EvalScratch {
            c: vec![0.0; problem.layout().num_constraints()],
            prods: vec![0.0; problem.prod_cache_len()],
            prefix: vec![0.0; problem.params().dims],
            suffix: vec![0.0; problem.params().dims],
        }
    }
}

/// Augmented-Lagrangian oracle over the flat state, for the inner descent.
pub struct LagrangianOracle<'a> {
    problem: &'a Problem,
    lambda: &'a [f64],
    gamma: f64,
    scratch: EvalScratch,
}

impl<'a> LagrangianOracle<'a> {
    pub fn new(problem: &'a Problem, dual: &'a DualState) -> Self {
        LagrangianOracle {
            problem,
            lambda: &dual.lambda,
            gamma: dual.gamma,
            scratch: EvalScratch::new(problem),
        }
    }
}

impl crate::lbfgs::Objective for LagrangianOracle<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.problem.eval_value(x, self.lambda, self.gamma, &mut self.scratch)
    }

    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.problem
            .eval_with_gradient(x, self.lambda, self.gamma, grad, &mut self.scratch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{family1, MultiIndex};
    use crate::verify::central_fd_gradient;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn t1_problem() -> Problem {
        let p = SparseChebPoly::from_terms(1, Basis::Chebyshev, [(MultiIndex(vec![1]), 1.0)])
            .unwrap();
        Problem::with_params(
            &p,
            LayoutParams {
                num_measures: 1,
                dims: 1,
                degree: 1,
                rank: 2,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn layout_constraint_count_by_enumeration() {
        // D = 1, d = 1, L = 1, rank = 2, one support term:
        // upper-triangle matrix entries 3, box 2 * 2 (degrees 1..=2d),
        // mass 1, pinned 0, normalization 1, product box 2.
        let problem = t1_problem();
        assert_eq!(problem.layout().num_constraints(), 3 + 4 + 1 + 0 + 1 + 2);
        // Variables: moments 3, factor 2 * 2, box slacks 2 * 2, mass slack 1,
        // product slacks 2.
        assert_eq!(problem.layout().num_vars(), 3 + 4 + 4 + 1 + 2);
    }

    #[test]
    fn layout_is_deterministic() {
        let p = family1(3);
        let params = LayoutParams {
            num_measures: 2,
            dims: 3,
            degree: 8,
            rank: 9,
            num_support: 0,
            product_constraints: true,
        };
        let a = Problem::with_params(&p, params).unwrap();
        let b = Problem::with_params(&p, params).unwrap();
        assert_eq!(a.layout(), b.layout());
        assert_eq!(a.coefs(), b.coefs());
    }

    #[test]
    fn layout_rejects_bad_rank_and_measures() {
        let p = family1(1);
        let mut params = LayoutParams {
            num_measures: 1,
            dims: 1,
            degree: 8,
            rank: 10,
            num_support: 0,
            product_constraints: true,
        };
        assert!(Problem::with_params(&p, params).is_err());
        params.rank = 0;
        assert!(Problem::with_params(&p, params).is_err());
        params.rank = 9;
        params.num_measures = 0;
        assert!(Problem::with_params(&p, params).is_err());
    }

    fn random_state(layout: &ProblemLayout, rng: &mut ChaCha8Rng) -> MomentState {
        let values: Vec<f64> = (0..layout.num_vars())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        MomentState::from_flat(layout, values).unwrap()
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(seed in 0u64..1000) {
            let problem = t1_problem();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let state = random_state(problem.layout(), &mut rng);
            let flat = state.as_flat().to_vec();
            let back = MomentState::from_flat(problem.layout(), flat.clone()).unwrap();
            prop_assert_eq!(back.as_flat(), &flat[..]);
            prop_assert_eq!(back, state);
        }
    }

    #[test]
    fn feasible_delta_state_has_zero_residuals() {
        let p = family1(2);
        let problem = Problem::with_params(
            &p,
            LayoutParams {
                num_measures: 2,
                dims: 2,
                degree: 8,
                rank: 9,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let state = problem
            .delta_state(
                &[vec![0.3, -0.7], vec![0.1, 0.9]],
                &[1.0, 0.0],
            )
            .unwrap();
        let res = problem.residuals(&state);
        assert!(
            res.max_abs() <= 1e-10,
            "feasible delta state residual {}",
            res.max_abs()
        );
    }

    #[test]
    fn zero_state_normalization_residual() {
        let problem = t1_problem();
        let state = MomentState::zeros(problem.layout());
        let res = problem.residuals(&state);
        assert_eq!(res.c[problem.layout().con_norm_index()], -1.0);
    }

    #[test]
    fn perturbing_one_moment_touches_only_its_constraints() {
        let p = family1(2);
        let problem = Problem::with_params(
            &p,
            LayoutParams {
                num_measures: 2,
                dims: 2,
                degree: 4,
                rank: 5,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let state = random_state(problem.layout(), &mut rng);
        let base = problem.residuals(&state);

        let mut bumped = state.clone();
        let target = problem.layout().mu_index(1, 0, 3);
        bumped.as_flat_mut()[target] += 0.125;
        let after = problem.residuals(&bumped);

        let layout = problem.layout();
        for k in 0..layout.num_constraints() {
            let changed = base.c[k] != after.c[k];
            // Moment (1, 0, 3) appears in: matrix entries of block 1 dim 0
            // with row + col == 3 or col - row == 3, its own box pair, and
            // any product constraint whose support index selects degree 3
            // in dimension 0 (none for family 1).
            let mm_base = layout.con_matrix_base(1, 0);
            let in_matrix = (k >= mm_base && k < mm_base + 15) && {
                let off = k - mm_base;
                // Decode the upper-triangle offset.
                let mut found = false;
                let mut cursor = 0;
                'outer: for row in 0..5 {
                    for col in row..5 {
                        if cursor == off {
                            found = row + col == 3 || col - row == 3;
                            break 'outer;
                        }
                        cursor += 1;
                    }
                }
                found
            };
            let in_box = k == layout.con_box_hi_index(1, 0, 3) || k == layout.con_box_lo_index(1, 0, 3);
            assert_eq!(
                changed,
                in_matrix || in_box,
                "constraint {} changed unexpectedly",
                k
            );
        }
    }

    #[test]
    fn objective_matches_pointwise_evaluation_on_delta_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for dims in 1..=3usize {
            for _ in 0..8 {
                let n_terms = rng.gen_range(1..6);
                let pairs: Vec<(MultiIndex, f64)> = (0..n_terms)
                    .map(|_| {
                        let idx =
                            MultiIndex((0..dims).map(|_| rng.gen_range(0..=4u32)).collect());
                        (idx, rng.gen_range(-1.0..1.0))
                    })
                    .collect();
                let poly = SparseChebPoly::from_terms(dims, Basis::Chebyshev, pairs).unwrap();
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
                .unwrap();
                let x: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let other: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let state = problem.delta_state(&[x.clone(), other], &[1.0, 0.0]).unwrap();
                let got = problem.objective(&state);
                let want = poly.evaluate(&x).unwrap();
                assert!(
                    (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
                    "objective {} vs evaluation {}",
                    got,
                    want
                );
            }
        }
    }

    #[test]
    fn objective_on_family1_delta_at_origin() {
        let poly = family1(2);
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 2,
                dims: 2,
                degree: 8,
                rank: 9,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let state = problem
            .delta_state(&[vec![0.0, 0.0], vec![0.5, 0.5]], &[1.0, 0.0])
            .unwrap();
        assert!((problem.objective(&state) - (-2.0)).abs() <= 1e-12);
    }

    #[test]
    fn constant_objective_on_normalized_state() {
        let poly = SparseChebPoly::from_terms(
            2,
            Basis::Chebyshev,
            [(MultiIndex(vec![0, 0]), 2.5)],
        )
        .unwrap();
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 3,
                dims: 2,
                degree: 2,
                rank: 3,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let state = problem
            .delta_state(
                &[vec![0.2, 0.1], vec![-0.4, 0.8], vec![0.9, -0.9]],
                &[0.5, 0.25, 0.25],
            )
            .unwrap();
        assert!((problem.objective(&state) - 2.5).abs() <= 1e-12);
    }

    #[test]
    fn objective_invariant_under_block_permutation() {
        let poly = family1(2);
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 2,
                dims: 2,
                degree: 8,
                rank: 9,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let a = problem
            .delta_state(&[vec![0.2, -0.4], vec![0.6, 0.1]], &[0.7, 0.3])
            .unwrap();
        let b = problem
            .delta_state(&[vec![0.6, 0.1], vec![0.2, -0.4]], &[0.3, 0.7])
            .unwrap();
        assert!((problem.objective(&a) - problem.objective(&b)).abs() <= 1e-12);
    }

    #[test]
    fn lagrangian_equals_objective_when_feasible_and_dual_zero() {
        let poly = family1(1);
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 2,
                dims: 1,
                degree: 8,
                rank: 9,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let state = problem
            .delta_state(&[vec![0.25], vec![0.0]], &[1.0, 0.0])
            .unwrap();
        let dual = DualState::zeros(problem.layout(), 8.0);
        let lag = problem.lagrangian(&state, &dual).unwrap();
        let obj = problem.objective(&state);
        assert!((lag - obj).abs() <= 1e-9, "lagrangian {} objective {}", lag, obj);
    }

    #[test]
    fn penalty_scales_linearly_in_gamma() {
        let problem = t1_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(problem.layout(), &mut rng);
        let obj = problem.objective(&state);
        let dual1 = DualState::zeros(problem.layout(), 2.0);
        let dual2 = DualState::zeros(problem.layout(), 4.0);
        let pen1 = problem.lagrangian(&state, &dual1).unwrap() - obj;
        let pen2 = problem.lagrangian(&state, &dual2).unwrap() - obj;
        assert!(pen1 > 0.0);
        assert!((pen2 - 2.0 * pen1).abs() <= 1e-9 * pen1.abs());
    }

    #[test]
    fn augmented_value_toy_arithmetic() {
        // One constraint: c = 0.5, lambda = 2, gamma = 4 adds
        // 2 * 0.5 + (4 / 2) * 0.25 = 1.5.
        assert_eq!(augmented_value(0.0, &[0.5], &[2.0], 4.0), 1.5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let poly = {
            let pairs: Vec<(MultiIndex, f64)> = (0..5)
                .map(|_| {
                    let idx = MultiIndex((0..3).map(|_| rng.gen_range(0..=4u32)).collect());
                    (idx, rng.gen_range(-1.0..1.0))
                })
                .collect();
            SparseChebPoly::from_terms(3, Basis::Chebyshev, pairs).unwrap()
        };
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
        .unwrap();
        for _ in 0..10 {
            let state = random_state(problem.layout(), &mut rng);
            let lambda: Vec<f64> = (0..problem.layout().num_constraints())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let dual = DualState {
                lambda,
                gamma: 1.0,
            };
            let analytic = problem.lagrangian_gradient(&state, &dual).unwrap();
            let fd = central_fd_gradient(
                |x| {
                    let s = MomentState::from_flat(problem.layout(), x.to_vec()).unwrap();
                    problem.lagrangian(&s, &dual).unwrap()
                },
                state.as_flat(),
                1e-6,
            );
            for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
                let rel = (a - f).abs() / (1.0 + a.abs());
                assert!(rel <= 1e-6, "coordinate {}: analytic {} fd {} rel {}", i, a, f, rel);
            }
        }
    }

    #[test]
    fn penalty_gradient_vanishes_at_feasible_points() {
        // Zero objective isolates the constraint part of the gradient.
        let poly = SparseChebPoly::zero(2, Basis::Chebyshev);
        let problem = Problem::with_params(
            &poly,
            LayoutParams {
                num_measures: 2,
                dims: 2,
                degree: 3,
                rank: 4,
                num_support: 0,
                product_constraints: true,
            },
        )
        .unwrap();
        let state = problem
            .delta_state(&[vec![0.4, -0.2], vec![0.0, 0.0]], &[0.5, 0.5])
            .unwrap();
        let dual = DualState::zeros(problem.layout(), 8.0);
        let grad = problem.lagrangian_gradient(&state, &dual).unwrap();
        let worst = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(worst <= 1e-9, "gradient at feasible point: {}", worst);
    }

    #[test]
    fn dual_shape_mismatch_is_rejected() {
        let problem = t1_problem();
        let state = MomentState::zeros(problem.layout());
        let dual = DualState {
            lambda: vec![0.0; 3],
            gamma: 1.0,
        };
        assert!(problem.lagrangian(&state, &dual).is_err());
        assert!(problem.lagrangian_gradient(&state, &dual).is_err());
    }

    #[test]
    #[ignore = "informational timing sweep; run manually"]
    fn objective_cost_grows_linearly() {
        // Factor-8 sweep in L * N * D via the dimension of family 1.
        let mut timings = Vec::new();
        for dims in [8usize, 64] {
            let poly = family1(dims);
            let problem = Problem::with_params(
                &poly,
                LayoutParams {
                    num_measures: 4,
                    dims,
                    degree: 8,
                    rank: 9,
                    num_support: 0,
                    product_constraints: true,
                },
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let state = random_state(problem.layout(), &mut rng);
            let start = std::time::Instant::now();
            let mut sink = 0.0;
            for _ in 0..2000 {
                sink += problem.objective(&state);
            }
            timings.push(start.elapsed().as_secs_f64());
            assert!(sink.is_finite());
        }
        // L * N * D grew by ~64x (N ~ D); allow generous slack around the
        // linear prediction.
        println!("objective timings: {:?}", timings);
        assert!(timings[1] < timings[0] * 64.0 * 8.0);
    }
}
