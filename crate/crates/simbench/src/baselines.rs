//! Reference methods the penalized estimators are compared against.

use missglasso::data::IncompleteMatrix;
use missglasso::linalg::SymMatrix;
use missglasso::missglasso::{fit_em, EmOptions, FitReport, GaussianModel, MStep};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Result};

/// Missing cells replaced by observed column means.
pub fn mean_impute(x: &IncompleteMatrix) -> Result<DMatrix<f64>> {
    Ok(x.mean_imputed()?)
}

/// Root-mean-square difference over coordinates observed in both rows;
/// `None` when the rows share no coordinate.
fn row_distance(x: &IncompleteMatrix, a: usize, b: usize) -> Option<f64> {
    let (ra, rb) = (x.row(a), x.row(b));
    let (ma, mb) = (x.row_mask(a), x.row_mask(b));
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..ra.len() {
        if ma[j] && mb[j] {
            sum += (ra[j] - rb[j]).powi(2);
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// Each missing cell becomes the average of that column over the `k`
/// nearest rows observed there (ties broken by row order). Cells without
/// any usable neighbour fall back to the column mean.
pub fn knn_impute(x: &IncompleteMatrix, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    let means = x.column_means()?;
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = x.filled(|_, j| means[j]);
    for i in 0..n {
        let mask = x.row_mask(i);
        if mask.iter().all(|&m| m) {
            continue;
        }
        let mut near: Vec<(f64, usize)> = (0..n)
            .filter(|&r| r != i)
            .filter_map(|r| row_distance(x, i, r).map(|d| (d, r)))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in (0..p).filter(|&j| !mask[j]) {
            let donors: Vec<f64> = near.iter().filter_map(|&(_, r)| x.get(r, j)).take(k).collect();
            if !donors.is_empty() {
                out[(i, j)] = donors.iter().sum::<f64>() / donors.len() as f64;
            }
        }
    }
    Ok(out)
}

/// Neighbour count minimizing the squared error on observed cells hidden at
/// random (`reps` rounds, 10% of observed cells each, never emptying a
/// column). Ties go to the smaller `k`.
pub fn select_knn_k<R: Rng>(x: &IncompleteMatrix, candidates: &[usize], reps: usize, rng: &mut R) -> Result<usize> {
    let (n, p) = (x.nrows(), x.ncols());
    let candidates: Vec<usize> = candidates.iter().copied().filter(|&k| k >= 1 && k < n).collect();
    if candidates.is_empty() {
        return Err(invalid("no admissible neighbour count"));
    }
    let mut err = vec![0.0; candidates.len()];
    for _ in 0..reps {
        let mut cells: Vec<usize> = (0..n * p).filter(|&c| x.mask()[c]).collect();
        cells.shuffle(rng);
        let target = (cells.len() / 10).max(1);
        let mut left: Vec<usize> = (0..p).map(|j| (0..n).filter(|&i| x.is_observed(i, j)).count()).collect();
        let mut mask = x.mask().to_vec();
        let mut hidden = Vec::with_capacity(target);
        for c in cells {
            if hidden.len() == target {
                break;
            }
            if left[c % p] > 1 {
                left[c % p] -= 1;
                mask[c] = false;
                hidden.push(c);
            }
        }
        let full = x.filled(|_, _| 0.0);
        let held = IncompleteMatrix::from_mask(&full, &mask)?;
        for (e, &k) in err.iter_mut().zip(&candidates) {
            let imp = knn_impute(&held, k)?;
            *e += hidden.iter().map(|&c| (imp[(c / p, c % p)] - full[(c / p, c % p)]).powi(2)).sum::<f64>();
        }
    }
    let best = (0..err.len()).fold(0, |b, i| if err[i] < err[b] { i } else { b });
    Ok(candidates[best])
}

/// Unpenalized maximum likelihood by EM. May fail with a non-positive
/// definite expected covariance when the data carry too little information.
pub fn mle_em(x: &IncompleteMatrix, opts: &EmOptions) -> Result<(GaussianModel, FitReport)> {
    Ok(fit_em(x, &MStep::Unpenalized, opts)?)
}

/// `count` log-spaced values from `max` down to `max·ratio`.
pub fn log_grid(max: f64, count: usize, ratio: f64) -> Result<Vec<f64>> {
    if !(max > 0.0) || !max.is_finite() || count == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("bad grid: max {max}, count {count}, ratio {ratio}")));
    }
    if count == 1 {
        return Ok(vec![max]);
    }
    Ok((0..count)
        .map(|i| max * ratio.powf(i as f64 / (count - 1) as f64))
        .collect())
}

/// Lasso `½‖y - Xβ‖² + λ‖β‖₁` along a decreasing grid with warm starts.
pub fn lasso_path(x: &DMatrix<f64>, y: &[f64], lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.nrows() != y.len() {
        return Err(invalid(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    let p = x.ncols();
    let g = x.tr_mul(x);
    let v = SymMatrix::from_fn(p, |i, j| g[(i, j)]);
    let u: Vec<f64> = (0..p).map(|j| x.column(j).iter().zip(y).map(|(a, b)| a * b).sum()).collect();
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        beta = missglasso::glasso::lasso_gram(&v, &u, l, &beta)?;
        out.push(beta.clone());
    }
    Ok(out)
}

/// Smallest penalty with an all-zero lasso solution.
pub fn lasso_lambda_max(x: &DMatrix<f64>, y: &[f64]) -> f64 {
    (0..x.ncols())
        .map(|j| x.column(j).iter().zip(y).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Mean squared prediction error of `Xβ`.
pub fn prediction_error(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let n = x.nrows();
    (0..n)
        .map(|i| {
            let f: f64 = (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum();
            (y[i] - f).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

/// Lasso on `(x, y)` with the penalty picked by prediction error on
/// `(xv, yv)`.
pub fn lasso_validated(
    x: &DMatrix<f64>,
    y: &[f64],
    xv: &DMatrix<f64>,
    yv: &[f64],
    count: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    let max = lasso_lambda_max(x, y);
    if max == 0.0 {
        return Ok(vec![0.0; x.ncols()]);
    }
    let path = lasso_path(x, y, &log_grid(max, count, ratio)?)?;
    let errs: Vec<f64> = path.iter().map(|b| prediction_error(xv, yv, b)).collect();
    let best = (0..errs.len()).fold(0, |b, i| if errs[i] < errs[b] { i } else { b });
    Ok(path.into_iter().nth(best).expect("non-empty path"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;

    fn rows(v: &[&[Option<f64>]]) -> IncompleteMatrix {
        IncompleteMatrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn knn_copies_duplicate_row() {
        let x = rows(&[
            &[Some(1.0), Some(2.0), None],
            &[Some(5.0), Some(-1.0), Some(0.0)],
            &[Some(1.0), Some(2.0), Some(7.5)],
        ]);
        let out = knn_impute(&x, 1).unwrap();
        assert_eq!(out[(0, 2)], 7.5);
        let out = knn_impute(&x, 2).unwrap();
        assert_eq!(out[(0, 2)], 3.75);
    }

    #[test]
    fn complete_data_passes_through() {
        let x = rows(&[&[Some(1.0), Some(2.0)], &[Some(3.0), Some(5.0)]]);
        let full = x.filled(|_, _| f64::NAN);
        assert_eq!(mean_impute(&x).unwrap(), full);
        assert_eq!(knn_impute(&x, 3).unwrap(), full);
    }

    #[test]
    fn knn_without_shared_coordinates_uses_mean() {
        let x = rows(&[&[Some(1.0), None], &[None, Some(4.0)], &[None, Some(6.0)]]);
        let out = knn_impute(&x, 1).unwrap();
        assert_eq!(out[(0, 1)], 5.0);
    }

    #[test]
    fn knn_selection_prefers_informative_neighbourhoods() {
        // two tight clusters: one neighbour is right, many neighbours mix clusters
        let mut r = Vec::new();
        for i in 0..20 {
            let c = if i % 2 == 0 { 10.0 } else { -10.0 };
            let e = (i as f64) * 1e-3;
            r.push(vec![Some(c + e), Some(c - e), Some(c + 2.0 * e)]);
        }
        let x = IncompleteMatrix::from_rows(&r).unwrap();
        let k = select_knn_k(&x, &[1, 15], 2, &mut stream_rng(3, 0, 0, 0)).unwrap();
        assert_eq!(k, 1);
    }

    #[test]
    fn lasso_grid_ends() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]);
        let y = [1.0, 2.0, 3.0, 1.0];
        let max = lasso_lambda_max(&x, &y);
        let path = lasso_path(&x, &y, &[max, 1e-12]).unwrap();
        assert!(path[0].iter().all(|&b| b == 0.0));
        // least squares at a vanishing penalty
        let g = x.tr_mul(&x);
        let ls = g.try_inverse().unwrap() * x.tr_mul(&nalgebra::DMatrix::from_column_slice(4, 1, &y));
        assert!((path[1][0] - ls[0]).abs() < 1e-6 && (path[1][1] - ls[1]).abs() < 1e-6);
        assert_eq!(log_grid(8.0, 4, 0.125).unwrap(), vec![8.0, 4.0, 2.0, 1.0]);
    }
}
