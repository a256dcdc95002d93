//! Global minimization of sparse multivariate polynomials over the hypercube
//! `[-1,1]^D`.
//!
//! The original problem `min p(x)` is rewritten as the minimization of a
//! linear-in-moments objective over convex combinations of product measures,
//! characterized by their one-dimensional Chebyshev moment vectors. Positive
//! semidefiniteness of the per-dimension moment matrices is enforced through
//! Burer-Monteiro factors `M = R Rᵀ`, inequalities through squared slacks, and
//! the resulting equality-constrained problem is solved as a saddle point of an
//! augmented Lagrangian: L-BFGS descent on the primal variables alternating
//! with gradient ascent on the multipliers. A converged state is certified
//! globally optimal by renormalizing its dominant measure block, zeroing the
//! others, and re-descending; absence of further descent is the certificate,
//! and the minimizer location is read off the degree-one moments.
//!
//! Modules follow the pipeline: [`poly`] (sparse Chebyshev polynomials),
//! [`moments`] (moment vectors and matrices), [`bm`] (factorized problem
//! layout, residuals, Lagrangian and its gradient), [`lbfgs`] (inner descent),
//! [`saddle`] (outer alternation), [`extract`] (location extraction and
//! certification), [`verify`] (self-check oracles).

pub mod bm;
pub mod error;
pub mod extract;
pub mod lbfgs;
pub mod moments;
pub mod poly;
pub mod saddle;
pub mod verify;

pub use error::Error;
pub use poly::{Basis, MultiIndex, SparseChebPoly};
pub use saddle::{OuterStats, SolverConfig};
pub use extract::Solution;
