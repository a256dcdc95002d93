//! Chebyshev moment vectors of 1D measures and their moment matrices.
//!
//! A measure on `[-1,1]` enters the solver only through its moments
//! `mu_k = integral of T_k`. A vector of moments up to degree `2d` determines
//! the `(d+1) x (d+1)` moment matrix with entries
//! `(mu_{m+n} + mu_{|m-n|}) / 2`, whose positive semidefiniteness certifies
//! that the vector comes from a genuine positive measure. The eigenvalue
//! check here is a diagnostic; the solver enforces PSD-ness through `R Rᵀ`
//! factors instead.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::poly::cheb_eval_all;

/// Moments `mu_0 .. mu_{2d}` of a 1D measure in the Chebyshev basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    values: Vec<f64>,
}

impl MomentVector {
    /// Wraps raw values; length must be odd (`2d + 1` for some `d >= 0`).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "moment vector length must be 2d + 1, got {}",
                values.len()
            )));
        }
        Ok(MomentVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Matrix order `d` supported by this vector.
    pub fn order(&self) -> usize {
        (self.values.len() - 1) / 2
    }
}

/// Symmetric `(d+1) x (d+1)` Chebyshev moment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    order: usize,
    /// Row-major `(order + 1)^2` entries; symmetric by construction.
    data: Vec<f64>,
}

impl MomentMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn size(&self) -> usize {
        self.order + 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * (self.order + 1) + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Smallest eigenvalue, via a symmetric eigendecomposition.
    ///
    /// Matrices here are tiny (at most 17 x 17), so the dense decomposition
    /// costs nothing next to a solve.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.size();
        let m = DMatrix::from_row_slice(n, n, &self.data);
        m.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// Factor `R` of size `(d+1) x rank` with `R Rᵀ` the closest PSD part of
    /// the matrix: eigenvalues are clamped at zero and the largest `rank` of
    /// them are kept. Exact whenever the matrix is PSD with rank at most
    /// `rank`. Returned row-major.
    pub fn psd_sqrt_factor(&self, rank: usize) -> Vec<f64> {
        let n = self.size();
        let m = DMatrix::from_row_slice(n, n, &self.data);
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("eigenvalues are finite")
        });
        let mut factor = vec![0.0; n * rank];
        for (col, &which) in order.iter().take(rank.min(n)).enumerate() {
            let scale = eig.eigenvalues[which].max(0.0).sqrt();
            for row in 0..n {
                factor[row * rank + col] = scale * eig.eigenvectors[(row, which)];
            }
        }
        factor
    }
}

/// Assembles the `(d+1) x (d+1)` moment matrix from moments up to `2d`.
///
/// Entry `(m, n)` is `(mu_{m+n} + mu_{|m-n|}) / 2`; the two halves coincide
/// when either index is zero. The matrix is exactly symmetric: each entry is
/// computed once and mirrored.
pub fn assemble_moment_matrix(moments: &[f64], order: usize) -> Result<MomentMatrix> {
    if moments.len() < 2 * order + 1 {
        return Err(Error::ShapeMismatch(format!(
            "need {} moments for matrix order {}, got {}",
            2 * order + 1,
            order,
            moments.len()
        )));
    }
    let n = order + 1;
    let mut data = vec![0.0; n * n];
    for m in 0..n {
        for k in m..n {
            let value = 0.5 * moments[m + k] + 0.5 * moments[k - m];
            data[m * n + k] = value;
            data[k * n + m] = value;
        }
    }
    Ok(MomentMatrix { order, data })
}

/// Moments of the unit point mass at `x`: `mu_k = T_k(x)` for `k = 0..2d`.
///
/// The resulting moment matrix is PSD of rank one.
pub fn delta_moments(x: f64, order: usize) -> Result<MomentVector> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Precondition(format!(
            "delta location {} outside [-1, 1]",
            x
        )));
    }
    MomentVector::new(cheb_eval_all(2 * order, x))
}

/// Bound on the mass a degree-`degree` polynomial can see outside
/// `[-1 - alpha, 1 + alpha]` from a measure whose moments up to `2 *
/// matrix_order` are bounded by one with a PSD moment matrix:
/// `(degree + 1) * max_coef / (alpha * (1 + alpha)^(2 * matrix_order - degree - 1))`.
///
/// Diagnostic only; it justifies replacing support-localizing constraints by
/// moment box constraints and is not used to alter the constraint set.
pub fn tail_bound(alpha: f64, matrix_order: usize, degree: usize, max_coef: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!(
            "tail bound needs alpha > 0, got {}",
            alpha
        )));
    }
    if 2 * matrix_order <= degree {
        return Err(Error::Precondition(format!(
            "tail bound needs 2 * matrix_order > degree, got order {} degree {}",
            matrix_order, degree
        )));
    }
    if max_coef < 0.0 {
        return Err(Error::Precondition(format!(
            "tail bound needs max_coef >= 0, got {}",
            max_coef
        )));
    }
    let exponent = 2 * matrix_order as i32 - (degree as i32 + 1);
    Ok((degree as f64 + 1.0) * max_coef / (alpha * (1.0 + alpha).powi(exponent)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delta_at_one_gives_all_ones_matrix() {
        let mu = delta_moments(1.0, 2).unwrap();
        let m = assemble_moment_matrix(mu.values(), 2).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                assert_eq!(m.get(row, col), 1.0);
            }
        }
        assert!(m.min_eigenvalue() >= -1e-10);
    }

    #[test]
    fn delta_at_zero_matrix() {
        let mu = delta_moments(0.0, 2).unwrap();
        assert_eq!(mu.values(), &[1.0, 0.0, -1.0, 0.0, 1.0]);
        let m = assemble_moment_matrix(mu.values(), 2).unwrap();
        let expected = [[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]];
        for row in 0..3 {
            for col in 0..3 {
                assert_eq!(m.get(row, col), expected[row][col], "({}, {})", row, col);
            }
        }
    }

    #[test]
    fn zero_moments_give_zero_matrix() {
        let m = assemble_moment_matrix(&[0.0; 5], 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_rejects_short_vector() {
        assert!(assemble_moment_matrix(&[1.0, 0.5], 2).is_err());
    }

    #[test]
    fn assembled_matrix_is_bitwise_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let moments: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = assemble_moment_matrix(&moments, 8).unwrap();
        for row in 0..m.size() {
            for col in 0..m.size() {
                assert_eq!(m.get(row, col).to_bits(), m.get(col, row).to_bits());
            }
        }
    }

    #[test]
    fn min_eigenvalue_known_matrices() {
        let identity = MomentMatrix {
            order: 2,
            data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        assert!((identity.min_eigenvalue() - 1.0).abs() <= 1e-10);

        let ones = MomentMatrix {
            order: 2,
            data: vec![1.0; 9],
        };
        assert!(ones.min_eigenvalue().abs() <= 1e-10);

        let diag = MomentMatrix {
            order: 1,
            data: vec![1.0, 0.0, 0.0, -2.0],
        };
        assert!((diag.min_eigenvalue() - (-2.0)).abs() <= 1e-10);
    }

    #[test]
    fn delta_moments_known_values() {
        assert_eq!(delta_moments(1.0, 1).unwrap().values(), &[1.0, 1.0, 1.0]);
        assert_eq!(
            delta_moments(0.5, 1).unwrap().values(),
            &[1.0, 0.5, -0.5]
        );
        assert!(delta_moments(1.2, 1).is_err());
        assert!(delta_moments(-1.0 - 1e-12, 1).is_err());
    }

    #[test]
    fn delta_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let x: f64 = rng.gen_range(-1.0..=1.0);
            let order = rng.gen_range(1..=8usize);
            let mu = delta_moments(x, order).unwrap();
            let m = assemble_moment_matrix(mu.values(), order).unwrap();
            assert!(
                m.min_eigenvalue() >= -1e-10,
                "x = {}, order = {}: min eig {}",
                x,
                order,
                m.min_eigenvalue()
            );
        }
    }

    #[test]
    fn convex_combination_of_deltas_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let order = 4;
            let w: f64 = rng.gen_range(0.0..1.0);
            let a = delta_moments(rng.gen_range(-1.0..=1.0), order).unwrap();
            let b = delta_moments(rng.gen_range(-1.0..=1.0), order).unwrap();
            let mix: Vec<f64> = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| w * x + (1.0 - w) * y)
                .collect();
            let m = assemble_moment_matrix(&mix, order).unwrap();
            assert!(m.min_eigenvalue() >= -1e-10);
        }
    }

    #[test]
    fn psd_sqrt_factor_reconstructs_delta_matrix() {
        let mu = delta_moments(0.3, 3).unwrap();
        let m = assemble_moment_matrix(mu.values(), 3).unwrap();
        for rank in [1usize, 2, 4] {
            let r = m.psd_sqrt_factor(rank);
            let n = m.size();
            for row in 0..n {
                for col in 0..n {
                    let got: f64 = (0..rank).map(|q| r[row * rank + q] * r[col * rank + q]).sum();
                    assert!(
                        (got - m.get(row, col)).abs() <= 1e-12,
                        "rank {} entry ({}, {})",
                        rank,
                        row,
                        col
                    );
                }
            }
        }
    }

    #[test]
    fn tail_bound_examples() {
        assert_eq!(tail_bound(1.0, 2, 1, 1.0).unwrap(), 0.5);
        assert_eq!(tail_bound(0.7, 3, 2, 0.0).unwrap(), 0.0);

        let mut prev = f64::INFINITY;
        for order in 3..=10 {
            let b = tail_bound(0.5, order, 4, 1.0).unwrap();
            assert!(b < prev, "bound must strictly decrease in the order");
            prev = b;
        }
        // Goes to zero as the order grows.
        assert!(tail_bound(0.5, 200, 4, 1.0).unwrap() < 1e-30);

        assert!(tail_bound(0.0, 2, 1, 1.0).is_err());
        assert!(tail_bound(-1.0, 2, 1, 1.0).is_err());
        assert!(tail_bound(1.0, 1, 2, 1.0).is_err());
        assert!(tail_bound(1.0, 2, 1, -1.0).is_err());
    }
}
