//! Sparse multivariate polynomials in Chebyshev (and monomial) bases.
//!
//! A polynomial is a map from multi-indices to coefficients plus a basis tag.
//! Terms are kept in a `BTreeMap` so iteration order is lexicographic and
//! everything downstream (serialization, constraint layouts, gradients) is
//! reproducible. Coefficients whose magnitude falls below
//! [`COEF_DROP_TOLERANCE`] after arithmetic are dropped, so stored terms are
//! always nonzero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Coefficients with |c| below this are dropped after arithmetic.
pub const COEF_DROP_TOLERANCE: f64 = 1e-14;

/// Polynomial basis tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Chebyshev polynomials of the first kind, `T_n`.
    Chebyshev,
    /// Plain monomials `x^n`.
    Monomial,
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Basis::Chebyshev => write!(f, "chebyshev"),
            Basis::Monomial => write!(f, "monomial"),
        }
    }
}

/// Tuple of per-variable degrees selecting one basis function per dimension.
///
/// Ordering is lexicographic (derived from the inner `Vec`), which fixes the
/// term order used everywhere else.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest per-variable degree in the index.
    pub fn max_entry(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// `k`-th standard unit index scaled by `degree`, in `dims` dimensions.
    pub fn axis(dims: usize, k: usize, degree: u32) -> Self {
        let mut entries = vec![0u32; dims];
        entries[k] = degree;
        MultiIndex(entries)
    }
}

/// Sparse multivariate polynomial: multi-index -> coefficient map with a
/// basis tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseChebPoly {
    dimension: usize,
    basis: Basis,
    terms: BTreeMap<MultiIndex, f64>,
}

impl SparseChebPoly {
    /// Empty (zero) polynomial in `dimension` variables.
    pub fn zero(dimension: usize, basis: Basis) -> Self {
        assert!(dimension >= 1, "dimension must be positive");
        SparseChebPoly {
            dimension,
            basis,
            terms: BTreeMap::new(),
        }
    }

    /// Builds a polynomial from `(index, coefficient)` pairs.
    ///
    /// Duplicate indices are summed; near-zero results are dropped.
    pub fn from_terms(
        dimension: usize,
        basis: Basis,
        terms: impl IntoIterator<Item = (MultiIndex, f64)>,
    ) -> Result<Self> {
        let mut poly = SparseChebPoly::zero(dimension, basis);
        for (index, coef) in terms {
            poly.add_term(index, coef)?;
        }
        poly.prune();
        Ok(poly)
    }

    /// Adds `coef` to the coefficient at `index` (no pruning).
    fn add_term(&mut self, index: MultiIndex, coef: f64) -> Result<()> {
        if index.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: index.len(),
            });
        }
        *self.terms.entry(index).or_insert(0.0) += coef;
        Ok(())
    }

    /// Drops terms with |coefficient| below [`COEF_DROP_TOLERANCE`].
    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEF_DROP_TOLERANCE);
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    /// Number of stored (nonzero) terms.
    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in lexicographic multi-index order.
    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(n, &c)| (n, c))
    }

    /// Largest per-variable degree over all stored terms (0 for the zero
    /// polynomial).
    pub fn per_var_degree(&self) -> u32 {
        self.terms.keys().map(|n| n.max_entry()).max().unwrap_or(0)
    }

    /// Largest coefficient magnitude (0 for the zero polynomial).
    pub fn max_abs_coef(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Evaluates the polynomial at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
            });
        }
        // Tabulate basis values per dimension up to the max degree once.
        let deg = self.per_var_degree() as usize;
        let table: Vec<Vec<f64>> = x
            .iter()
            .map(|&xi| match self.basis {
                Basis::Chebyshev => cheb_eval_all(deg, xi),
                Basis::Monomial => {
                    let mut pows = Vec::with_capacity(deg + 1);
                    let mut p = 1.0;
                    for _ in 0..=deg {
                        pows.push(p);
                        p *= xi;
                    }
                    pows
                }
            })
            .collect();
        let mut total = 0.0;
        for (index, coef) in self.terms() {
            let mut prod = coef;
            for (i, &ni) in index.0.iter().enumerate() {
                prod *= table[i][ni as usize];
            }
            total += prod;
        }
        Ok(total)
    }

    /// Exact product of two Chebyshev-basis polynomials.
    ///
    /// Uses `T_m T_n = (T_{m+n} + T_{|m-n|}) / 2` per variable; when one of
    /// the degrees is zero both halves land on the same index and the factor
    /// is 1.
    pub fn cheb_mul(&self, other: &SparseChebPoly) -> Result<SparseChebPoly> {
        if self.basis != Basis::Chebyshev || other.basis != Basis::Chebyshev {
            return Err(Error::BasisMismatch(
                "cheb_mul requires both operands in the Chebyshev basis".into(),
            ));
        }
        if self.dimension != other.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: other.dimension,
            });
        }
        let mut result = SparseChebPoly::zero(self.dimension, Basis::Chebyshev);
        let mut partial: Vec<(Vec<u32>, f64)> = Vec::new();
        let mut next: Vec<(Vec<u32>, f64)> = Vec::new();
        for (m, a) in self.terms() {
            for (n, b) in other.terms() {
                // Expand the per-variable product identity dimension by
                // dimension, branching only where both degrees are nonzero.
                partial.clear();
                partial.push((Vec::with_capacity(self.dimension), a * b));
                for i in 0..self.dimension {
                    let (mi, ni) = (m.0[i], n.0[i]);
                    next.clear();
                    for (prefix, w) in partial.drain(..) {
                        if mi == 0 || ni == 0 {
                            let mut e = prefix;
                            e.push(mi + ni);
                            next.push((e, w));
                        } else {
                            let mut lo = prefix.clone();
                            lo.push(mi.abs_diff(ni));
                            next.push((lo, 0.5 * w));
                            let mut hi = prefix;
                            hi.push(mi + ni);
                            next.push((hi, 0.5 * w));
                        }
                    }
                    std::mem::swap(&mut partial, &mut next);
                }
                for (index, w) in partial.drain(..) {
                    *result.terms.entry(MultiIndex(index)).or_insert(0.0) += w;
                }
            }
        }
        result.prune();
        Ok(result)
    }

    /// Exact change of basis from monomials to Chebyshev polynomials.
    pub fn monomial_to_cheb(&self) -> Result<SparseChebPoly> {
        if self.basis != Basis::Monomial {
            return Err(Error::BasisMismatch(
                "monomial_to_cheb requires a monomial-basis polynomial".into(),
            ));
        }
        let mut result = SparseChebPoly::zero(self.dimension, Basis::Chebyshev);
        for (index, coef) in self.terms() {
            // Per-variable 1D expansions x^k = sum_j c_j T_j, then their
            // cartesian product.
            let factors: Vec<Vec<(u32, f64)>> = index
                .0
                .iter()
                .map(|&k| monomial_power_in_cheb(k))
                .collect();
            let mut partial: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), coef)];
            for factor in &factors {
                let mut next = Vec::with_capacity(partial.len() * factor.len());
                for (prefix, w) in &partial {
                    for &(deg, c) in factor {
                        let mut e = prefix.clone();
                        e.push(deg);
                        next.push((e, w * c));
                    }
                }
                partial = next;
            }
            for (entries, w) in partial {
                *result.terms.entry(MultiIndex(entries)).or_insert(0.0) += w;
            }
        }
        result.prune();
        Ok(result)
    }

    /// Serializes to the line-oriented text format (see [`parse`]).
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "poly {} {}", self.dimension, self.basis);
        for (index, coef) in self.terms() {
            let _ = write!(out, "{:?}", coef);
            for e in &index.0 {
                let _ = write!(out, " {}", e);
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates the Chebyshev polynomial `T_n` at `x` via the three-term
/// recurrence `T_{k+1} = 2x T_k - T_{k-1}`, valid for any real `x`.
pub fn cheb_eval_1d(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = x;
    for _ in 1..n {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Values `T_0(x) .. T_max_degree(x)` by the same recurrence.
pub fn cheb_eval_all(max_degree: usize, x: f64) -> Vec<f64> {
    let mut vals = Vec::with_capacity(max_degree + 1);
    vals.push(1.0);
    if max_degree == 0 {
        return vals;
    }
    vals.push(x);
    for k in 2..=max_degree {
        vals.push(2.0 * x * vals[k - 1] - vals[k - 2]);
    }
    vals
}

/// Chebyshev expansion of the 1D monomial `x^k`.
///
/// Built by repeated application of `x T_j = (T_{j+1} + T_{|j-1|}) / 2`.
fn monomial_power_in_cheb(k: u32) -> Vec<(u32, f64)> {
    let mut coefs: BTreeMap<u32, f64> = BTreeMap::new();
    coefs.insert(0, 1.0);
    for _ in 0..k {
        let mut next: BTreeMap<u32, f64> = BTreeMap::new();
        for (&j, &c) in &coefs {
            if j == 0 {
                *next.entry(1).or_insert(0.0) += c;
            } else {
                *next.entry(j + 1).or_insert(0.0) += 0.5 * c;
                *next.entry(j - 1).or_insert(0.0) += 0.5 * c;
            }
        }
        coefs = next;
    }
    coefs.into_iter().collect()
}

/// First benchmark family: `(1/D) sum_i T_2(x_i) - prod_i T_8(x_i)`.
///
/// Has `D + 1` terms, per-variable degree 8, and a unique global minimum of
/// -2.0 at the origin.
pub fn family1(dims: usize) -> SparseChebPoly {
    assert!(dims >= 1, "dimension must be positive");
    let mut terms = Vec::with_capacity(dims + 1);
    for i in 0..dims {
        terms.push((MultiIndex::axis(dims, i, 2), 1.0 / dims as f64));
    }
    terms.push((MultiIndex(vec![8; dims]), -1.0));
    SparseChebPoly::from_terms(dims, Basis::Chebyshev, terms).expect("index lengths match")
}

/// Second benchmark family: `(1/D) sum_i T_4(x_i) + ((1/D) sum_i T_1(x_i))^3`.
///
/// The cube is expanded through [`SparseChebPoly::cheb_mul`], giving
/// `O(D^3)` terms of per-variable degree at most 4. The unique global minimum
/// is approximately -1.3911 at `(-0.75553, ..., -0.75553)`.
pub fn family2(dims: usize) -> SparseChebPoly {
    assert!(dims >= 1, "dimension must be positive");
    let inv = 1.0 / dims as f64;
    let linear = SparseChebPoly::from_terms(
        dims,
        Basis::Chebyshev,
        (0..dims).map(|i| (MultiIndex::axis(dims, i, 1), inv)),
    )
    .expect("index lengths match");
    let squared = linear.cheb_mul(&linear).expect("same basis and dimension");
    let cubed = squared.cheb_mul(&linear).expect("same basis and dimension");
    let mut result = cubed;
    for i in 0..dims {
        result
            .add_term(MultiIndex::axis(dims, i, 4), inv)
            .expect("index lengths match");
    }
    result.prune();
    result
}

/// Parses the line-oriented polynomial text format.
///
/// ```text
/// poly <D> <chebyshev|monomial>
/// <coef> <n_1> <n_2> ... <n_D>
/// ```
///
/// Blank lines and lines starting with `#` are skipped. Duplicate
/// multi-indices are an error, reported with the offending line number.
pub fn parse(text: &str) -> Result<SparseChebPoly> {
    let mut lines = text.lines().enumerate();
    let (header_line, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or(Error::Parse {
            line: 1,
            msg: "missing `poly <D> <basis>` header".into(),
        })?;
    let header_no = header_line + 1;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "poly" {
        return Err(Error::Parse {
            line: header_no,
            msg: format!("expected `poly <D> <basis>`, got `{}`", header.trim()),
        });
    }
    let dimension: usize = fields[1].parse().map_err(|_| Error::Parse {
        line: header_no,
        msg: format!("invalid dimension `{}`", fields[1]),
    })?;
    if dimension == 0 {
        return Err(Error::Parse {
            line: header_no,
            msg: "dimension must be positive".into(),
        });
    }
    let basis = match fields[2] {
        "chebyshev" => Basis::Chebyshev,
        "monomial" => Basis::Monomial,
        other => {
            return Err(Error::Parse {
                line: header_no,
                msg: format!("unknown basis `{}`", other),
            })
        }
    };

    let mut poly = SparseChebPoly::zero(dimension, basis);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != dimension + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected `<coef>` followed by {} indices, got {} fields",
                    dimension,
                    fields.len()
                ),
            });
        }
        let coef: f64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid coefficient `{}`", fields[0]),
        })?;
        let mut entries = Vec::with_capacity(dimension);
        for f in &fields[1..] {
            let e: u32 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid index entry `{}`", f),
            })?;
            entries.push(e);
        }
        let index = MultiIndex(entries);
        if poly.terms.contains_key(&index) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate multi-index {:?}", index.0),
            });
        }
        poly.terms.insert(index, coef);
    }
    poly.prune();
    Ok(poly)
}
