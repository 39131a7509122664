//! Sparse linear regression when covariates have missing cells.
//!
//! Stage one estimates the covariate law `N(μ, K⁻¹)` with the penalized EM of
//! [`crate::missglasso`]. Stage two holds that law fixed and runs EM for the
//! regression coefficients and noise scale: the E-step conditions the joint
//! Gaussian of `(y, x)` on the observed cells, and the M-step is a scaled
//! lasso on the expected inner products.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::data::IncompleteMatrix;
use crate::error::{invalid, Error, Result};
use crate::linalg::{rank_one_inverse_update, submatrix, SymMatrix};
use crate::missglasso::{conditional_mean_impute, fit_missglasso, EmOptions, FitReport, GaussianModel, PatternCache};
use crate::scaled_lasso::{scaled_lasso_fit, InnerProducts, ScaledLassoFit};

/// Regression coefficients and noise scale with the covariate law they
/// condition on.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub x_model: GaussianModel,
}

/// Fully observed response with incomplete covariates.
#[derive(Clone, Debug)]
pub struct RegressionData {
    pub y: Vec<f64>,
    pub x: IncompleteMatrix,
}

impl RegressionData {
    pub fn new(y: Vec<f64>, x: IncompleteMatrix) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, covariates have {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("response value {i} is missing or not finite")));
        }
        Ok(RegressionData { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Subtracts the response mean and observed column means. Returns the
    /// centered data with the response mean and column means.
    pub fn centered(&self) -> Result<(RegressionData, f64, Vec<f64>)> {
        let ybar = self.y.iter().sum::<f64>() / self.n() as f64;
        let means = self.x.column_means()?;
        let rows: Vec<Vec<Option<f64>>> = (0..self.n())
            .map(|i| (0..self.x.ncols()).map(|j| self.x.get(i, j).map(|v| v - means[j])).collect())
            .collect();
        let x = IncompleteMatrix::from_rows(&rows)?;
        let y = self.y.iter().map(|v| v - ybar).collect();
        Ok((RegressionData { y, x }, ybar, means))
    }
}

/// Mean and precision of `(y, x)`:
/// `μ̃ = (βᵀμ, μ)`, `K̃ = [[1/σ², -βᵀ/σ²], [-β/σ², K + ββᵀ/σ²]]`.
pub fn joint_model_assemble(beta: &[f64], sigma: f64, x_model: &GaussianModel) -> Result<(Vec<f64>, SymMatrix)> {
    let p = x_model.dim();
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have length {}, covariate model has dimension {p}",
            beta.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("noise scale must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let k = x_model.k.as_matrix();
    let kt = DMatrix::from_fn(p + 1, p + 1, |i, j| match (i, j) {
        (0, 0) => 1.0 / s2,
        (0, j) => -beta[j - 1] / s2,
        (i, 0) => -beta[i - 1] / s2,
        (i, j) => k[(i - 1, j - 1)] + beta[i - 1] * beta[j - 1] / s2,
    });
    let kt = SymMatrix::symmetrized(kt);
    kt.cholesky()?;
    let mut mu = vec![beta.iter().zip(&x_model.mu).map(|(b, m)| b * m).sum()];
    mu.extend_from_slice(&x_model.mu);
    Ok((mu, kt))
}

/// Expected `yᵀx`, `xᵀx` and the (observed) `yᵀy`.
#[derive(Clone, Debug)]
pub struct RegressionStats {
    pub t1: Vec<f64>,
    pub t2: SymMatrix,
    pub yy: f64,
    pub n: usize,
}

impl RegressionStats {
    pub fn inner_products(&self) -> InnerProducts {
        InnerProducts {
            yy: self.yy,
            yx: self.t1.clone(),
            xx: self.t2.clone(),
            n: self.n,
        }
    }
}

/// Per-pattern conditional law of the missing covariates given `y` and the
/// observed covariates.
struct JointFactor {
    /// `(K_mm + β_mβ_mᵀ/σ²)⁻¹`.
    cov: DMatrix<f64>,
    /// `cov · K_mo`.
    gain_x: DMatrix<f64>,
    /// `cov · β_m / σ²`.
    gain_y: DVector<f64>,
}

fn joint_factors(data: &RegressionData, model: &JointModel, cache: &PatternCache) -> Result<Vec<JointFactor>> {
    let k = model.x_model.k.as_matrix();
    let s2 = model.sigma * model.sigma;
    data.x
        .patterns()
        .iter()
        .enumerate()
        .map(|(g, pat)| {
            let m = &pat.missing;
            if m.is_empty() {
                return Ok(JointFactor {
                    cov: DMatrix::zeros(0, 0),
                    gain_x: DMatrix::zeros(0, pat.observed.len()),
                    gain_y: DVector::zeros(0),
                });
            }
            let b = DVector::from_iterator(m.len(), m.iter().map(|j| model.beta[j] / model.sigma));
            let ainv = SymMatrix::symmetrized(cache.missing_covariance(g).clone());
            let cov = rank_one_inverse_update(&ainv, &b)?.into_matrix();
            let kmo = submatrix(k, m, &pat.observed)?;
            let gain_x = &cov * kmo;
            let bm = DVector::from_iterator(m.len(), m.iter().map(|j| model.beta[j] / s2));
            let gain_y = &cov * bm;
            Ok(JointFactor { cov, gain_x, gain_y })
        })
        .collect()
}

/// Expected inner products given `y` and the observed covariates under the
/// joint law of `model`.
pub fn e_step_regression(data: &RegressionData, model: &JointModel) -> Result<RegressionStats> {
    let cache = PatternCache::new(&data.x, &model.x_model)?;
    e_step_regression_cached(data, model, &cache)
}

fn e_step_regression_cached(data: &RegressionData, model: &JointModel, cache: &PatternCache) -> Result<RegressionStats> {
    let (n, p) = (data.n(), data.x.ncols());
    let mu = &model.x_model.mu;
    let factors = joint_factors(data, model, cache)?;
    let mut xhat = DMatrix::zeros(n, p);
    let mut t2_corr = DMatrix::zeros(p, p);
    for (pat, f) in data.x.patterns().iter().zip(&factors) {
        let (o, m) = (pat.observed.as_slice(), pat.missing.as_slice());
        for &i in &pat.rows {
            let row = data.x.row(i);
            let r: Vec<f64> = o.iter().map(|&j| row[j] - mu[j]).collect();
            // residual of y after the observed covariates and the missing means
            let mut e = data.y[i];
            for &j in o {
                e -= model.beta[j] * row[j];
            }
            for &j in m {
                e -= model.beta[j] * mu[j];
            }
            for &j in o {
                xhat[(i, j)] = row[j];
            }
            for (a, &j) in m.iter().enumerate() {
                let mut c = mu[j] + f.gain_y[a] * e;
                for (b, &rb) in r.iter().enumerate() {
                    c -= f.gain_x[(a, b)] * rb;
                }
                xhat[(i, j)] = c;
            }
        }
        let cnt = pat.rows.len() as f64;
        for (b, &jb) in m.iter().enumerate() {
            for (a, &ja) in m.iter().enumerate() {
                t2_corr[(ja, jb)] += cnt * f.cov[(a, b)];
            }
        }
    }
    let y = DVector::from_column_slice(&data.y);
    let t1 = xhat.tr_mul(&y);
    let t2 = xhat.tr_mul(&xhat) + t2_corr;
    Ok(RegressionStats {
        t1: t1.iter().copied().collect(),
        t2: SymMatrix::symmetrized(t2),
        yy: y.dot(&y),
        n,
    })
}

/// `Σᵢ -log p(yᵢ | x_obs,i) + λ₂‖β‖₁/σ` under the fixed covariate law; the
/// covariate marginal is omitted since it does not depend on `(β, σ)`.
pub fn stage2_objective(data: &RegressionData, model: &JointModel, lambda2: f64) -> Result<f64> {
    let cache = PatternCache::new(&data.x, &model.x_model)?;
    stage2_objective_cached(data, model, lambda2, &cache)
}

fn stage2_objective_cached(data: &RegressionData, model: &JointModel, lambda2: f64, cache: &PatternCache) -> Result<f64> {
    let xhat = conditional_mean_impute(&data.x, &model.x_model)?;
    let s2 = model.sigma * model.sigma;
    let mut total = 0.0;
    for (g, pat) in data.x.patterns().iter().enumerate() {
        let m = pat.missing.as_slice();
        let cov = cache.missing_covariance(g);
        let mut extra = 0.0;
        for (a, &ja) in m.iter().enumerate() {
            for (b, &jb) in m.iter().enumerate() {
                extra += model.beta[ja] * cov[(a, b)] * model.beta[jb];
            }
        }
        let v = s2 + extra;
        for &i in &pat.rows {
            let fit: f64 = (0..data.x.ncols()).map(|j| model.beta[j] * xhat[(i, j)]).sum();
            let r = data.y[i] - fit;
            total += 0.5 * ((2.0 * PI * v).ln() + r * r / v);
        }
    }
    let l1: f64 = model.beta.iter().map(|b| b.abs()).sum();
    Ok(total + lambda2 * l1 / model.sigma)
}

#[derive(Clone, Debug)]
pub struct TwoStageOptions {
    /// Stage one (covariate law).
    pub stage1: EmOptions,
    pub max_em: usize,
    pub tol: f64,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        TwoStageOptions {
            stage1: EmOptions::default(),
            max_em: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageReport {
    pub stage1: FitReport,
    pub stage2: FitReport,
}

/// Smallest `λ₂` at which `β = 0` is a fixed point of stage two.
pub fn lambda2_max(data: &RegressionData, x_model: &GaussianModel) -> Result<f64> {
    let model = JointModel {
        beta: vec![0.0; data.x.ncols()],
        sigma: 1.0,
        x_model: x_model.clone(),
    };
    let stats = e_step_regression(data, &model)?;
    Ok(stats.inner_products().lambda_max())
}

/// Both stages: covariate law at `λ₁`, then regression at `λ₂`.
pub fn fit_two_stage(
    data: &RegressionData,
    lambda1: f64,
    lambda2: f64,
    opts: &TwoStageOptions,
) -> Result<(JointModel, TwoStageReport)> {
    let (x_model, stage1) = fit_missglasso(&data.x, lambda1, &opts.stage1)?;
    let (model, stage2) = fit_stage2(data, &x_model, lambda2, None, opts)?;
    Ok((model, TwoStageReport { stage1, stage2 }))
}

/// Stage two only, with the covariate law held at `x_model`. Starts from
/// `init` or from `β = 0` and `σ²` the empirical variance of `y`.
pub fn fit_stage2(
    data: &RegressionData,
    x_model: &GaussianModel,
    lambda2: f64,
    init: Option<&JointModel>,
    opts: &TwoStageOptions,
) -> Result<(JointModel, FitReport)> {
    let start = Instant::now();
    let n = data.n();
    if !(lambda2 >= 0.0) || !lambda2.is_finite() {
        return Err(invalid(format!("penalty must be finite and >= 0, got {lambda2}")));
    }
    let yy: f64 = data.y.iter().map(|v| v * v).sum();
    if !(yy > 0.0) {
        return Err(Error::ZeroResponse);
    }
    let mut model = match init {
        Some(m) => JointModel {
            x_model: x_model.clone(),
            ..m.clone()
        },
        None => {
            let ybar = data.y.iter().sum::<f64>() / n as f64;
            let var = data.y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n as f64;
            let var = if var > 0.0 { var } else { yy / n as f64 };
            JointModel {
                beta: vec![0.0; data.x.ncols()],
                sigma: var.sqrt(),
                x_model: x_model.clone(),
            }
        }
    };
    let cache = PatternCache::new(&data.x, x_model)?;
    let mut objective = stage2_objective_cached(data, &model, lambda2, &cache)?;
    let mut trace = vec![objective];
    let mut converged = false;
    let mut rejected = 0;
    let mut iterations = 0;
    let mut last_fit: Option<ScaledLassoFit> = None;

    while iterations < opts.max_em {
        iterations += 1;
        let stats = e_step_regression_cached(data, &model, &cache)?;
        let init_phi: Vec<f64>;
        let warm = match &last_fit {
            Some(f) => Some((f.phi.as_slice(), f.rho_scale)),
            None => {
                init_phi = model.beta.iter().map(|b| b / model.sigma).collect();
                Some((init_phi.as_slice(), 1.0 / model.sigma))
            }
        };
        let fit = scaled_lasso_fit(&stats.inner_products(), lambda2, warm)?;
        let candidate = JointModel {
            beta: fit.beta.clone(),
            sigma: fit.sigma,
            x_model: x_model.clone(),
        };
        let cand_obj = stage2_objective_cached(data, &candidate, lambda2, &cache)?;
        if !(cand_obj <= objective) {
            rejected += 1;
            converged = cand_obj.is_finite() && cand_obj - objective <= opts.tol * objective.abs().max(1.0);
            break;
        }
        let decrease = objective - cand_obj;
        model = candidate;
        objective = cand_obj;
        trace.push(objective);
        last_fit = Some(fit);
        if decrease <= opts.tol * objective.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let report = FitReport {
        objective_trace: trace,
        em_iterations: iterations,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        init: if init.is_some() { "supplied" } else { "zero-coefficients" }.to_string(),
        rejected_steps: rejected,
        inexact_m_steps: 0,
    };
    Ok((model, report))
}

/// `βᵀx̂`, where `x̂` fills missing features (`None`) with their conditional
/// means under the covariate law.
pub fn predict(model: &JointModel, x_row: &[Option<f64>]) -> Result<f64> {
    if x_row.len() != model.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "row has {} features, model has {}",
            x_row.len(),
            model.beta.len()
        )));
    }
    if x_row.iter().all(|v| v.is_some()) {
        return Ok(x_row.iter().zip(&model.beta).map(|(x, b)| x.unwrap() * b).sum());
    }
    let row = IncompleteMatrix::from_rows(&[x_row.to_vec()])?;
    let xhat = conditional_mean_impute(&row, &model.x_model)?;
    Ok((0..model.beta.len()).map(|j| model.beta[j] * xhat[(0, j)]).sum())
}
