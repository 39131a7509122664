//! Choosing the penalty: BIC on the observed likelihood, V-fold
//! cross-validation with held-out negative log-likelihood, and warm-started
//! fits along a decreasing grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{empirical_covariance, IncompleteMatrix};
use crate::error::{invalid, Error, Result};
use crate::missglasso::{fit_missglasso, observed_neg_loglik, EmInit, EmOptions, FitReport, GaussianModel};
use crate::two_stage::{fit_stage2, lambda2_max, predict, stage2_objective, JointModel, RegressionData, TwoStageOptions};

/// `2·NLL + log(n)·df`, with `df` the number of nonzero entries of `K` on
/// and above the diagonal.
pub fn bic_score(data: &IncompleteMatrix, model: &GaussianModel) -> Result<f64> {
    let nll = observed_neg_loglik(data, model)?;
    let df = model.k.count_upper_nonzeros() as f64;
    Ok(2.0 * nll + (data.nrows() as f64).ln() * df)
}

/// Log-spaced grid from `λ_max` down to `ratio·λ_max`, where `λ_max` is the
/// smallest penalty giving a diagonal precision matrix on the mean-imputed
/// covariance: `(n/2)·max_{j≠k}|S_jk|`.
pub fn lambda_grid(data: &IncompleteMatrix, count: usize, ratio: f64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(invalid(format!("grid needs at least two values, got {count}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("grid ratio must lie in (0, 1), got {ratio}")));
    }
    let (_, s) = empirical_covariance(&data.mean_imputed()?);
    let p = s.nrows();
    let mut off = 0.0_f64;
    for j in 0..p {
        for i in (j + 1)..p {
            off = off.max(s[(i, j)].abs());
        }
    }
    if !(off > 0.0) {
        // no correlations to remove: scale the grid by the variances instead
        off = s.diagonal().amax();
    }
    if !(off > 0.0) {
        return Err(Error::DegenerateData("all columns are constant".into()));
    }
    let lmax = 0.5 * data.nrows() as f64 * off;
    Ok((0..count)
        .map(|i| lmax * ratio.powf(i as f64 / (count - 1) as f64))
        .collect())
}

/// Fits along a decreasing grid.
#[derive(Clone, Debug)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<(GaussianModel, FitReport)>,
    pub scores: Vec<f64>,
}

impl LambdaPath {
    /// Index of the smallest score (first one on ties).
    pub fn best_index(&self) -> usize {
        argmin(&self.scores)
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s < v[best] || (v[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

fn check_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(invalid("empty penalty grid"));
    }
    if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(invalid("penalties must be positive and finite"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("penalty grid must be strictly decreasing"));
    }
    Ok(())
}

/// Fits every penalty in `lambdas` (strictly decreasing), each started from
/// the previous solution when `warm` is set.
pub fn fit_path(
    data: &IncompleteMatrix,
    lambdas: &[f64],
    opts: &EmOptions,
    warm: bool,
) -> Result<Vec<(GaussianModel, FitReport)>> {
    check_grid(lambdas)?;
    let mut fits: Vec<(GaussianModel, FitReport)> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let o = match fits.last() {
            Some((prev, _)) if warm => EmOptions {
                init: EmInit::Model(prev.clone()),
                ..opts.clone()
            },
            _ => opts.clone(),
        };
        fits.push(fit_missglasso(data, lambda, &o)?);
    }
    Ok(fits)
}

/// Path scored by BIC.
pub fn bic_path(data: &IncompleteMatrix, lambdas: &[f64], opts: &EmOptions) -> Result<LambdaPath> {
    let fits = fit_path(data, lambdas, opts, true)?;
    let scores = fits
        .iter()
        .map(|(m, _)| bic_score(data, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaPath {
        lambdas: lambdas.to_vec(),
        fits,
        scores,
    })
}

/// Path fitted on `train` and scored by `2·NLL` on `validation`.
pub fn validation_path(
    train: &IncompleteMatrix,
    validation: &IncompleteMatrix,
    lambdas: &[f64],
    opts: &EmOptions,
) -> Result<LambdaPath> {
    let fits = fit_path(train, lambdas, opts, true)?;
    let scores = fits
        .iter()
        .map(|(m, _)| observed_neg_loglik(validation, m).map(|v| 2.0 * v))
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaPath {
        lambdas: lambdas.to_vec(),
        fits,
        scores,
    })
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub lambdas: Vec<f64>,
    /// Summed held-out `2·NLL` per penalty.
    pub scores: Vec<f64>,
    /// Fold of each row.
    pub folds: Vec<usize>,
    pub best_lambda: f64,
    /// Refit on all rows at `best_lambda`.
    pub model: GaussianModel,
    pub report: FitReport,
}

/// Seeded random partition of `n` rows into `v` groups whose sizes differ
/// by at most one.
pub fn fold_assignment(n: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % v;
    }
    folds
}

pub fn cross_validate(
    data: &IncompleteMatrix,
    lambdas: &[f64],
    v: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<CrossValidation> {
    if v < 2 {
        return Err(invalid(format!("need at least two folds, got {v}")));
    }
    if data.nrows() < v {
        return Err(invalid(format!("{} rows cannot fill {v} folds", data.nrows())));
    }
    cross_validate_folds(data, lambdas, &fold_assignment(data.nrows(), v, seed), opts)
}

/// Cross-validation over an explicit fold assignment (`folds[i]` is the fold
/// of row `i`, folds numbered from 0).
pub fn cross_validate_folds(
    data: &IncompleteMatrix,
    lambdas: &[f64],
    folds: &[usize],
    opts: &EmOptions,
) -> Result<CrossValidation> {
    check_grid(lambdas)?;
    if folds.len() != data.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} fold labels for {} rows",
            folds.len(),
            data.nrows()
        )));
    }
    let v = folds.iter().max().map_or(0, |m| m + 1);
    let per_fold = (0..v)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let test: Vec<usize> = (0..data.nrows()).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = (0..data.nrows()).filter(|&i| folds[i] != f).collect();
            if test.is_empty() || train.is_empty() {
                return Err(invalid(format!("fold {f} is empty or covers all rows")));
            }
            let train = data.select_rows(&train)?;
            if let Some(column) = train.empty_column() {
                return Err(Error::FoldDegenerate { fold: f, column });
            }
            let test = data.select_rows(&test)?;
            Ok(validation_path(&train, &test, lambdas, opts)?.scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = (0..lambdas.len())
        .map(|l| per_fold.iter().map(|s| s[l]).sum())
        .collect();
    let best_lambda = lambdas[argmin(&scores)];
    let (model, report) = fit_missglasso(data, best_lambda, opts)?;
    Ok(CrossValidation {
        lambdas: lambdas.to_vec(),
        scores,
        folds: folds.to_vec(),
        best_lambda,
        model,
        report,
    })
}

/// Log-spaced second-stage grid from the smallest penalty that keeps
/// `β = 0` down to `ratio` times that value.
pub fn lambda2_grid(data: &RegressionData, x_model: &GaussianModel, count: usize, ratio: f64) -> Result<Vec<f64>> {
    if count < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("bad grid: count {count}, ratio {ratio}")));
    }
    let max = lambda2_max(data, x_model)?;
    if !(max > 0.0) {
        return Err(Error::DegenerateData("response is orthogonal to every covariate".into()));
    }
    Ok((0..count)
        .map(|i| max * ratio.powf(i as f64 / (count - 1) as f64))
        .collect())
}

/// Second-stage fits along a decreasing grid, each started from the
/// previous solution.
pub fn stage2_path(
    data: &RegressionData,
    x_model: &GaussianModel,
    lambdas: &[f64],
    opts: &TwoStageOptions,
) -> Result<Vec<(JointModel, FitReport)>> {
    check_grid(lambdas)?;
    let mut fits: Vec<(JointModel, FitReport)> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let fit = fit_stage2(data, x_model, l, fits.last().map(|f| &f.0), opts)?;
        fits.push(fit);
    }
    Ok(fits)
}

/// `2·NLL(y | x_obs) + log(n)·(nnz(β) + 1)`.
pub fn stage2_bic(data: &RegressionData, model: &JointModel) -> Result<f64> {
    let nll = stage2_objective(data, model, 0.0)?;
    let df = model.beta.iter().filter(|b| **b != 0.0).count() as f64 + 1.0;
    Ok(2.0 * nll + (data.n() as f64).ln() * df)
}

#[derive(Clone, Debug)]
pub struct Stage2Selection {
    pub lambdas: Vec<f64>,
    pub scores: Vec<f64>,
    pub best_lambda: f64,
    pub model: JointModel,
    pub report: FitReport,
}

pub fn stage2_bic_path(
    data: &RegressionData,
    x_model: &GaussianModel,
    lambdas: &[f64],
    opts: &TwoStageOptions,
) -> Result<Stage2Selection> {
    let mut fits = stage2_path(data, x_model, lambdas, opts)?;
    let scores = fits
        .iter()
        .map(|(m, _)| stage2_bic(data, m))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin(&scores);
    let (model, report) = fits.swap_remove(best);
    Ok(Stage2Selection {
        lambdas: lambdas.to_vec(),
        scores,
        best_lambda: lambdas[best],
        model,
        report,
    })
}

/// V-fold cross-validation of the second-stage penalty with the covariate
/// law held fixed. Scores are summed squared errors of held-out responses
/// predicted from their observed covariates.
pub fn cross_validate_stage2(
    data: &RegressionData,
    x_model: &GaussianModel,
    lambdas: &[f64],
    v: usize,
    seed: u64,
    opts: &TwoStageOptions,
) -> Result<Stage2Selection> {
    check_grid(lambdas)?;
    let n = data.n();
    if v < 2 || n < v {
        return Err(invalid(format!("cannot split {n} rows into {v} folds")));
    }
    let folds = fold_assignment(n, v, seed);
    let per_fold = (0..v)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let sub = RegressionData::new(train.iter().map(|&i| data.y[i]).collect(), data.x.select_rows(&train)?)?;
            stage2_path(&sub, x_model, lambdas, opts)?
                .iter()
                .map(|(m, _)| {
                    test.iter()
                        .map(|&i| {
                            let row: Vec<Option<f64>> = (0..data.x.ncols()).map(|j| data.x.get(i, j)).collect();
                            Ok((data.y[i] - predict(m, &row)?).powi(2))
                        })
                        .sum::<Result<f64>>()
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = (0..lambdas.len())
        .map(|l| per_fold.iter().map(|s| s[l]).sum())
        .collect();
    let best_lambda = lambdas[argmin(&scores)];
    let (model, report) = fit_stage2(data, x_model, best_lambda, None, opts)?;
    Ok(Stage2Selection {
        lambdas: lambdas.to_vec(),
        scores,
        best_lambda,
        model,
        report,
    })
}
