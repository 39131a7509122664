//! Dense symmetric linear algebra shared by the solvers.
//!
//! Everything here is a pure function of its inputs. Cholesky is the only
//! factorization used for SPD systems: it provides the log-determinant and
//! the solves from a single pass.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot guard: a pivot must exceed this fraction of the largest
/// diagonal entry for the matrix to count as positive definite.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Dense symmetric matrix. Construction symmetrizes the input as `(M + Mᵀ)/2`,
/// so `get(j, k) == get(k, j)` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::DimensionMismatch(
                "symmetric matrix must have dimension >= 1".into(),
            ));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without dimension checks. Callers guarantee squareness.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds the matrix from a function evaluated on the lower triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            for i in j..dim {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
        self.0[(j, i)] = v;
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.0[(j, j)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_off_diagonal(&self) -> f64 {
        let n = self.dim();
        let mut m = 0.0_f64;
        for j in 0..n {
            for i in (j + 1)..n {
                m = m.max(self.0[(i, j)].abs());
            }
        }
        m
    }

    /// Sum of absolute values over all entries, diagonal included.
    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn l1_norm_off_diagonal(&self) -> f64 {
        self.l1_norm() - self.diagonal().iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Number of nonzero entries in the upper triangle, diagonal included.
    pub fn count_upper_nonzeros(&self) -> usize {
        let n = self.dim();
        let mut c = 0;
        for j in 0..n {
            for i in 0..=j {
                if self.0[(i, j)] != 0.0 {
                    c += 1;
                }
            }
        }
        c
    }

    /// `tr(self · other)` for two symmetric matrices.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        Cholesky::factor(&self.0)
    }

    pub fn inverse(&self) -> Result<SymMatrix> {
        Ok(self.cholesky()?.inverse())
    }

    /// Principal submatrix on `idx`.
    pub fn principal(&self, idx: &IndexSet) -> Result<SymMatrix> {
        Ok(SymMatrix(submatrix(&self.0, idx, idx)?))
    }

    /// `P A Pᵀ` for the permutation mapping new index `i` to old index `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SymMatrix {
        let n = self.dim();
        SymMatrix(DMatrix::from_fn(n, n, |i, j| self.0[(perm[i], perm[j])]))
    }
}

/// Strictly increasing list of column indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Validates strict monotonicity and the bound `index < p`.
    pub fn new(indices: Vec<usize>, p: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "index set must be strictly increasing, got {} before {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= p {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    dim: p,
                });
            }
        }
        Ok(IndexSet(indices))
    }

    /// Indices where `mask[j] == want`.
    pub fn from_mask(mask: &[bool], want: bool) -> Self {
        IndexSet(
            mask.iter()
                .enumerate()
                .filter_map(|(j, &m)| (m == want).then_some(j))
                .collect(),
        )
    }

    pub fn all(p: usize) -> Self {
        IndexSet((0..p).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= dim => Err(Error::IndexOutOfRange { index: last, dim }),
            _ => Ok(()),
        }
    }
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors the lower triangle of `a`. Fails when a pivot is not above
    /// `PIVOT_TOLERANCE` times the largest diagonal entry.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch("cholesky needs a square matrix".into()));
        }
        let max_diag = (0..n).fold(0.0_f64, |m, j| m.max(a[(j, j)]));
        let floor = PIVOT_TOLERANCE * max_diag;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) || max_diag <= 0.0 {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor_l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log|A| = 2 Σ log L_jj`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|j| self.l[(j, j)].ln()).sum::<f64>()
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    /// `xᵀ A⁻¹ x` via one forward substitution.
    pub fn inv_quadratic_form(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut z = x.to_vec();
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
            acc += z[i] * z[i];
        }
        acc
    }

    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim();
        SymMatrix::symmetrized(self.solve(&DMatrix::identity(n, n)))
    }
}

/// Factors `a` once and returns `(log|A|, A⁻¹ B)`.
pub fn chol_logdet_solve(a: &SymMatrix, b: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if b.nrows() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, matrix has dimension {}",
            b.nrows(),
            a.dim()
        )));
    }
    let chol = a.cholesky()?;
    Ok((chol.logdet(), chol.solve(b)))
}

/// Block `A[rows, cols]`.
pub fn submatrix(a: &DMatrix<f64>, rows: &IndexSet, cols: &IndexSet) -> Result<DMatrix<f64>> {
    rows.check(a.nrows())?;
    cols.check(a.ncols())?;
    let r = rows.as_slice();
    let c = cols.as_slice();
    Ok(DMatrix::from_fn(r.len(), c.len(), |i, j| a[(r[i], c[j])]))
}

/// Places `values` at `(rows, cols)` in a `p × p` zero matrix.
pub fn embed(values: &DMatrix<f64>, rows: &IndexSet, cols: &IndexSet, p: usize) -> Result<DMatrix<f64>> {
    rows.check(p)?;
    cols.check(p)?;
    if values.nrows() != rows.len() || values.ncols() != cols.len() {
        return Err(Error::DimensionMismatch(format!(
            "block is {}x{} but index sets select {}x{}",
            values.nrows(),
            values.ncols(),
            rows.len(),
            cols.len()
        )));
    }
    let mut out = DMatrix::zeros(p, p);
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            out[(r, c)] = values[(i, j)];
        }
    }
    Ok(out)
}

/// `(A + b bᵀ)⁻¹` from `A⁻¹` by the Sherman–Morrison formula.
pub fn rank_one_inverse_update(ainv: &SymMatrix, b: &DVector<f64>) -> Result<SymMatrix> {
    let n = ainv.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "update vector has length {}, matrix has dimension {n}",
            b.len()
        )));
    }
    let u = ainv.as_matrix() * b;
    let denom = 1.0 + b.dot(&u);
    if !(denom > 0.0) {
        return Err(Error::NotPositiveDefinite {
            index: 0,
            pivot: denom,
        });
    }
    let mut m = ainv.as_matrix().clone();
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] -= u[i] * u[j] / denom;
        }
    }
    Ok(SymMatrix::symmetrized(m))
}

/// `max_ij |A_ij|`.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
