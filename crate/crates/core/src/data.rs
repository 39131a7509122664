//! Data matrices with missing cells, grouped by missingness pattern.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::linalg::IndexSet;

/// Rows sharing one missingness pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub observed: IndexSet,
    pub missing: IndexSet,
    pub rows: Vec<usize>,
}

/// An `n × p` matrix whose cells may be missing. Missing cells hold `NaN`.
#[derive(Clone, Debug)]
pub struct IncompleteMatrix {
    n: usize,
    p: usize,
    /// Row-major values.
    values: Vec<f64>,
    mask: Vec<bool>,
    patterns: Vec<Pattern>,
}

impl IncompleteMatrix {
    /// Builds from row-major cells, `None` marking a missing cell.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(invalid("data has no rows"));
        }
        let p = rows[0].len();
        let mut values = Vec::with_capacity(n * p);
        let mut mask = Vec::with_capacity(n * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} cells, expected {p}",
                    row.len()
                )));
            }
            for cell in row {
                match cell {
                    Some(v) if v.is_finite() => {
                        values.push(*v);
                        mask.push(true);
                    }
                    Some(v) => return Err(invalid(format!("non-finite value {v} in row {i}"))),
                    None => {
                        values.push(f64::NAN);
                        mask.push(false);
                    }
                }
            }
        }
        Self::build(n, p, values, mask)
    }

    /// Builds from a dense matrix and a row-major observation mask
    /// (`true` = observed). Values under a `false` mask are discarded.
    pub fn from_mask(x: &DMatrix<f64>, mask: &[bool]) -> Result<Self> {
        let (n, p) = x.shape();
        if mask.len() != n * p {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries for a {n}x{p} matrix",
                mask.len()
            )));
        }
        let mut values = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                let v = x[(i, j)];
                if mask[i * p + j] {
                    if !v.is_finite() {
                        return Err(invalid(format!("non-finite value at ({i}, {j})")));
                    }
                    values.push(v);
                } else {
                    values.push(f64::NAN);
                }
            }
        }
        Self::build(n, p, values, mask.to_vec())
    }

    pub fn complete(x: &DMatrix<f64>) -> Result<Self> {
        Self::from_mask(x, &vec![true; x.nrows() * x.ncols()])
    }

    fn build(n: usize, p: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if p == 0 {
            return Err(invalid("data has no columns"));
        }
        let mut index: HashMap<&[bool], usize> = HashMap::new();
        let mut patterns: Vec<Pattern> = Vec::new();
        for i in 0..n {
            let sig = &mask[i * p..(i + 1) * p];
            match index.get(sig) {
                Some(&g) => patterns[g].rows.push(i),
                None => {
                    index.insert(sig, patterns.len());
                    patterns.push(Pattern {
                        observed: IndexSet::from_mask(sig, true),
                        missing: IndexSet::from_mask(sig, false),
                        rows: vec![i],
                    });
                }
            }
        }
        Ok(IncompleteMatrix {
            n,
            p,
            values,
            mask,
            patterns,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    /// `None` when the cell is missing.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.p + j;
        self.mask[k].then(|| self.values[k])
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.p + j]
    }

    /// Row `i` with `NaN` in missing cells.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.p..(i + 1) * self.p]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Missingness patterns in order of first appearance.
    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// First column without a single observed cell, if any.
    pub fn empty_column(&self) -> Option<usize> {
        (0..self.p).find(|&j| (0..self.n).all(|i| !self.mask[i * self.p + j]))
    }

    /// Means over observed cells; fails on a column with no observations.
    pub fn column_means(&self) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.p];
        let mut count = vec![0usize; self.p];
        for i in 0..self.n {
            for j in 0..self.p {
                if self.mask[i * self.p + j] {
                    sum[j] += self.values[i * self.p + j];
                    count[j] += 1;
                }
            }
        }
        (0..self.p)
            .map(|j| {
                if count[j] == 0 {
                    Err(Error::DegenerateData(format!("column {j} has no observed values")))
                } else {
                    Ok(sum[j] / count[j] as f64)
                }
            })
            .collect()
    }

    /// Dense copy with missing cells replaced by their column means.
    pub fn mean_imputed(&self) -> Result<DMatrix<f64>> {
        let means = self.column_means()?;
        Ok(self.filled(|_, j| means[j]))
    }

    /// Dense copy with missing cell `(i, j)` set to `fill(i, j)`.
    pub fn filled(&self, mut fill: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.p, |i, j| {
            let k = i * self.p + j;
            if self.mask[k] {
                self.values[k]
            } else {
                fill(i, j)
            }
        })
    }

    /// The rows listed in `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.p);
        let mut mask = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            if i >= self.n {
                return Err(Error::IndexOutOfRange { index: i, dim: self.n });
            }
            values.extend_from_slice(self.row(i));
            mask.extend_from_slice(self.row_mask(i));
        }
        if rows.is_empty() {
            return Err(invalid("row selection is empty"));
        }
        Self::build(rows.len(), self.p, values, mask)
    }

    /// Column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "permutation of length {} for {} columns",
                perm.len(),
                self.p
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        let mut mask = Vec::with_capacity(self.mask.len());
        for i in 0..self.n {
            for &j in perm {
                if j >= self.p {
                    return Err(Error::IndexOutOfRange { index: j, dim: self.p });
                }
                values.push(self.values[i * self.p + j]);
                mask.push(self.mask[i * self.p + j]);
            }
        }
        Self::build(self.n, self.p, values, mask)
    }
}

/// Covariance with divisor `n` of the rows of a dense matrix, and its mean.
pub fn empirical_covariance(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let mu: Vec<f64> = (0..p).map(|j| x.column(j).sum() / n as f64).collect();
    let mut c = x.clone();
    for j in 0..p {
        c.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let s = c.tr_mul(&c) / n as f64;
    (mu, s)
}
