//! Penalized maximum likelihood for a Gaussian observed with missing cells,
//! fitted by EM. The E-step conditions the missing block on the observed one
//! in precision form; the M-step is a graphical lasso on the expected
//! covariance.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{empirical_covariance, IncompleteMatrix, Pattern};
use crate::error::{invalid, Error, Result};
use crate::glasso::{best_effort, glasso_fit_with, GlassoOptions, GlassoProblem, GlassoSolution};
use crate::linalg::{submatrix, SymMatrix};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mean and precision of a multivariate normal.
#[derive(Clone, Debug)]
pub struct GaussianModel {
    pub mu: Vec<f64>,
    pub k: SymMatrix,
    sigma_cache: Option<SymMatrix>,
}

impl GaussianModel {
    /// Checks dimensions and positive definiteness of `k`.
    pub fn new(mu: Vec<f64>, k: SymMatrix) -> Result<Self> {
        if mu.len() != k.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {}, precision has dimension {}",
                mu.len(),
                k.dim()
            )));
        }
        k.cholesky()?;
        Ok(GaussianModel {
            mu,
            k,
            sigma_cache: None,
        })
    }

    pub(crate) fn with_sigma(mut self, sigma: SymMatrix) -> Self {
        self.sigma_cache = Some(sigma);
        self
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `K⁻¹`, from the cache when present.
    pub fn sigma(&self) -> SymMatrix {
        match &self.sigma_cache {
            Some(s) => s.clone(),
            None => self.k.inverse().expect("precision checked positive definite"),
        }
    }
}

/// Expected first and second moments summed over rows.
#[derive(Clone, Debug)]
pub struct SufficientStats {
    pub t1: Vec<f64>,
    pub t2: SymMatrix,
    pub n: usize,
}

impl SufficientStats {
    pub fn mean(&self) -> Vec<f64> {
        self.t1.iter().map(|v| v / self.n as f64).collect()
    }

    /// `T2/n - μμᵀ`, with round-off below zero on the diagonal clipped.
    pub fn covariance(&self) -> SymMatrix {
        let mu = self.mean();
        let n = self.n as f64;
        let p = mu.len();
        let mut s = DMatrix::from_fn(p, p, |i, j| self.t2.get(i, j) / n - mu[i] * mu[j]);
        for j in 0..p {
            s[(j, j)] = s[(j, j)].max(0.0);
        }
        SymMatrix::symmetrized(s)
    }
}

/// Per-pattern quantities derived from `K`, shared by the E-step, the
/// observed likelihood and imputation.
#[derive(Clone, Debug)]
pub(crate) struct PatternFactor {
    /// `K_mm⁻¹` (0×0 for complete rows).
    pub kmm_inv: DMatrix<f64>,
    /// `K_mm⁻¹ K_mo`; the conditional mean is `μ_m - regress · (x_o - μ_o)`.
    pub regress: DMatrix<f64>,
    /// Precision of the observed marginal, `K_oo - K_om K_mm⁻¹ K_mo`.
    pub obs_precision: DMatrix<f64>,
    pub obs_logdet_precision: f64,
}

#[derive(Clone, Debug)]
pub struct PatternCache {
    pub(crate) factors: Vec<PatternFactor>,
}

impl PatternCache {
    pub fn new(data: &IncompleteMatrix, model: &GaussianModel) -> Result<Self> {
        if data.ncols() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} columns, model has dimension {}",
                data.ncols(),
                model.dim()
            )));
        }
        let k = model.k.as_matrix();
        let logdet_k = model.k.cholesky()?.logdet();
        let factors = data
            .patterns()
            .par_iter()
            .map(|pat| pattern_factor(k, logdet_k, pat))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatternCache { factors })
    }

    /// `K_mm⁻¹` for pattern `g`.
    pub fn missing_covariance(&self, g: usize) -> &DMatrix<f64> {
        &self.factors[g].kmm_inv
    }
}

fn pattern_factor(k: &DMatrix<f64>, logdet_k: f64, pat: &Pattern) -> Result<PatternFactor> {
    let (o, m) = (&pat.observed, &pat.missing);
    if m.is_empty() {
        return Ok(PatternFactor {
            kmm_inv: DMatrix::zeros(0, 0),
            regress: DMatrix::zeros(0, o.len()),
            obs_precision: k.clone(),
            obs_logdet_precision: logdet_k,
        });
    }
    let kmm = SymMatrix::symmetrized(submatrix(k, m, m)?);
    let chol = kmm.cholesky()?;
    let kmo = submatrix(k, m, o)?;
    let regress = chol.solve(&kmo);
    let kmm_inv = chol.inverse().into_matrix();
    let obs_precision = if o.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        let koo = submatrix(k, o, o)?;
        let schur = koo - kmo.transpose() * &regress;
        SymMatrix::symmetrized(schur).into_matrix()
    };
    // |K| = |K_mm| · |Schur complement|
    Ok(PatternFactor {
        kmm_inv,
        regress,
        obs_precision,
        obs_logdet_precision: logdet_k - chol.logdet(),
    })
}

/// Observed residual `x_o - μ_o` of `row`.
fn observed_residual(row: &[f64], mu: &[f64], pat: &Pattern) -> Vec<f64> {
    pat.observed.iter().map(|j| row[j] - mu[j]).collect()
}

/// Writes the conditional mean of the missing cells of `row` into `out`
/// (a full-length row; observed cells copied).
fn complete_row(row: &[f64], mu: &[f64], pat: &Pattern, f: &PatternFactor, out: &mut [f64]) {
    let r = observed_residual(row, mu, pat);
    for j in pat.observed.iter() {
        out[j] = row[j];
    }
    for (a, j) in pat.missing.iter().enumerate() {
        let mut c = mu[j];
        for (b, &rb) in r.iter().enumerate() {
            c -= f.regress[(a, b)] * rb;
        }
        out[j] = c;
    }
}

/// Negative observed-data log-likelihood, including `½|obs|·log 2π` per row.
pub fn observed_neg_loglik(data: &IncompleteMatrix, model: &GaussianModel) -> Result<f64> {
    let cache = PatternCache::new(data, model)?;
    Ok(neg_loglik_cached(data, model, &cache))
}

pub(crate) fn neg_loglik_cached(data: &IncompleteMatrix, model: &GaussianModel, cache: &PatternCache) -> f64 {
    let mut total = 0.0;
    for (pat, f) in data.patterns().iter().zip(&cache.factors) {
        let o = pat.observed.len();
        if o == 0 {
            continue;
        }
        let per_row_const = o as f64 * LN_2PI - f.obs_logdet_precision;
        for &i in &pat.rows {
            let r = observed_residual(data.row(i), &model.mu, pat);
            let mut q = 0.0;
            for b in 0..o {
                let mut acc = 0.0;
                for a in 0..o {
                    acc += f.obs_precision[(a, b)] * r[a];
                }
                q += acc * r[b];
            }
            total += 0.5 * (per_row_const + q);
        }
    }
    total
}

/// Expected sufficient statistics given the observed cells.
pub fn e_step(data: &IncompleteMatrix, model: &GaussianModel) -> Result<SufficientStats> {
    let cache = PatternCache::new(data, model)?;
    Ok(e_step_cached(data, model, &cache))
}

pub(crate) fn e_step_cached(data: &IncompleteMatrix, model: &GaussianModel, cache: &PatternCache) -> SufficientStats {
    let xhat = impute_cached(data, model, cache);
    let p = data.ncols();
    let t1: Vec<f64> = (0..p).map(|j| xhat.column(j).sum()).collect();
    let mut t2 = xhat.tr_mul(&xhat);
    for (pat, f) in data.patterns().iter().zip(&cache.factors) {
        let cnt = pat.rows.len() as f64;
        let m = pat.missing.as_slice();
        for (b, &jb) in m.iter().enumerate() {
            for (a, &ja) in m.iter().enumerate() {
                t2[(ja, jb)] += cnt * f.kmm_inv[(a, b)];
            }
        }
    }
    SufficientStats {
        t1,
        t2: SymMatrix::symmetrized(t2),
        n: data.nrows(),
    }
}

fn impute_cached(data: &IncompleteMatrix, model: &GaussianModel, cache: &PatternCache) -> DMatrix<f64> {
    let (n, p) = (data.nrows(), data.ncols());
    let mut xhat = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    for (pat, f) in data.patterns().iter().zip(&cache.factors) {
        for &i in &pat.rows {
            complete_row(data.row(i), &model.mu, pat, f, &mut buf);
            for j in 0..p {
                xhat[(i, j)] = buf[j];
            }
        }
    }
    xhat
}

/// Fills each missing cell with its conditional mean given the row's
/// observed cells.
pub fn conditional_mean_impute(data: &IncompleteMatrix, model: &GaussianModel) -> Result<DMatrix<f64>> {
    let cache = PatternCache::new(data, model)?;
    Ok(impute_cached(data, model, &cache))
}

/// How the precision matrix is re-estimated from expected statistics.
#[derive(Clone, Debug)]
pub enum MStep {
    /// Graphical lasso with `ρ = 2λ/n`.
    Glasso {
        lambda: f64,
        penalize_diagonal: bool,
        options: GlassoOptions,
    },
    /// Plain inversion of the expected covariance (maximum likelihood).
    Unpenalized,
}

impl MStep {
    pub fn glasso(lambda: f64) -> Self {
        MStep::Glasso {
            lambda,
            penalize_diagonal: true,
            options: GlassoOptions::tight(),
        }
    }

    fn penalty(&self, k: &SymMatrix) -> f64 {
        match self {
            MStep::Glasso {
                lambda,
                penalize_diagonal,
                ..
            } => {
                lambda
                    * if *penalize_diagonal {
                        k.l1_norm()
                    } else {
                        k.l1_norm_off_diagonal()
                    }
            }
            MStep::Unpenalized => 0.0,
        }
    }

    /// Solves for `K` at covariance `s` estimated from `n` rows.
    fn solve(&self, s: SymMatrix, n: usize, warm: Option<&GlassoSolution>) -> Result<MSolution> {
        match self {
            MStep::Glasso {
                lambda,
                penalize_diagonal,
                options,
            } => {
                let problem = GlassoProblem::new(s, 2.0 * lambda / n as f64)?.with_penalize_diagonal(*penalize_diagonal);
                let (sol, converged) = best_effort(glasso_fit_with(&problem, warm, options))?;
                Ok(MSolution {
                    k: sol.k.clone(),
                    sigma: sol.sigma.clone(),
                    glasso: Some(sol),
                    converged,
                })
            }
            MStep::Unpenalized => {
                let chol = s.cholesky()?;
                Ok(MSolution {
                    k: chol.inverse(),
                    sigma: s,
                    glasso: None,
                    converged: true,
                })
            }
        }
    }
}

struct MSolution {
    k: SymMatrix,
    sigma: SymMatrix,
    glasso: Option<GlassoSolution>,
    converged: bool,
}

/// M-step at penalty `λ` on the original likelihood scale.
pub fn m_step(stats: &SufficientStats, lambda: f64) -> Result<(GaussianModel, GlassoSolution)> {
    m_step_with(stats, lambda, None, &GlassoOptions::default())
}

pub fn m_step_with(
    stats: &SufficientStats,
    lambda: f64,
    warm: Option<&GlassoSolution>,
    options: &GlassoOptions,
) -> Result<(GaussianModel, GlassoSolution)> {
    if stats.n == 0 {
        return Err(invalid("statistics from zero rows"));
    }
    let problem = GlassoProblem::new(stats.covariance(), 2.0 * lambda / stats.n as f64)?;
    let sol = glasso_fit_with(&problem, warm, options)?;
    let model = GaussianModel::new(stats.mean(), sol.k.clone())?.with_sigma(sol.sigma.clone());
    Ok((model, sol))
}

#[derive(Clone, Debug)]
pub enum EmInit {
    /// Column means and the estimator applied to the mean-imputed covariance.
    MeanImpute,
    Model(GaussianModel),
}

#[derive(Clone, Debug)]
pub struct EmOptions {
    pub max_em: usize,
    /// Relative decrease of the penalized objective that ends the iteration.
    pub tol: f64,
    pub init: EmInit,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_em: 200,
            tol: 1e-6,
            init: EmInit::MeanImpute,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Penalized observed negative log-likelihood: at the starting point,
    /// then after every accepted EM iteration.
    pub objective_trace: Vec<f64>,
    pub em_iterations: usize,
    pub converged: bool,
    /// Seconds.
    pub wall_time: f64,
    pub init: String,
    /// Iterations whose M-step raised the objective (round-off level) and
    /// were discarded.
    pub rejected_steps: usize,
    /// M-steps whose graphical lasso hit its sweep limit.
    pub inexact_m_steps: usize,
}

impl FitReport {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the starting point")
    }
}

/// Penalized observed objective: negative log-likelihood plus `λ‖K‖₁`.
pub fn penalized_objective(data: &IncompleteMatrix, model: &GaussianModel, lambda: f64) -> Result<f64> {
    Ok(observed_neg_loglik(data, model)? + lambda * model.k.l1_norm())
}

/// EM for the penalized estimator at penalty `λ`.
pub fn fit_missglasso(data: &IncompleteMatrix, lambda: f64, opts: &EmOptions) -> Result<(GaussianModel, FitReport)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(invalid(format!("penalty must be positive, got {lambda}")));
    }
    fit_em(data, &MStep::glasso(lambda), opts)
}

/// EM with the given M-step; `fit_missglasso` and the unpenalized maximum
/// likelihood estimator are both instances.
pub fn fit_em(data: &IncompleteMatrix, mstep: &MStep, opts: &EmOptions) -> Result<(GaussianModel, FitReport)> {
    let start = Instant::now();
    let n = data.nrows();
    if n < 2 {
        return Err(invalid("at least two rows are required"));
    }
    if let Some(j) = data.empty_column() {
        return Err(Error::DegenerateData(format!("column {j} has no observed values")));
    }

    let (mut model, mut warm, mut inexact, init) = match &opts.init {
        EmInit::MeanImpute => {
            let (mu, s) = empirical_covariance(&data.mean_imputed()?);
            let sol = mstep.solve(SymMatrix::symmetrized(s), n, None)?;
            let model = GaussianModel::new(mu, sol.k)?.with_sigma(sol.sigma);
            (model, sol.glasso, usize::from(!sol.converged), "mean-impute")
        }
        EmInit::Model(m) => (m.clone(), None, 0, "supplied"),
    };
    if model.dim() != data.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "initial model has dimension {}, data has {} columns",
            model.dim(),
            data.ncols()
        )));
    }

    let mut cache = PatternCache::new(data, &model)?;
    let mut objective = neg_loglik_cached(data, &model, &cache) + mstep.penalty(&model.k);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut rejected = 0;
    let mut iterations = 0;

    while iterations < opts.max_em {
        iterations += 1;
        let stats = e_step_cached(data, &model, &cache);
        let sol = mstep.solve(stats.covariance(), n, warm.as_ref())?;
        let candidate = GaussianModel::new(stats.mean(), sol.k)?.with_sigma(sol.sigma);
        let cand_cache = PatternCache::new(data, &candidate)?;
        let cand_obj = neg_loglik_cached(data, &candidate, &cand_cache) + mstep.penalty(&candidate.k);
        if !sol.converged {
            inexact += 1;
        }

        if !(cand_obj <= objective) {
            // EM cannot increase the objective with an exact M-step; an
            // increase means the M-step error dominates the remaining
            // progress, so the current iterate is kept.
            rejected += 1;
            converged = cand_obj.is_finite() && cand_obj - objective <= opts.tol * objective.abs().max(1.0);
            break;
        }
        let decrease = objective - cand_obj;
        model = candidate;
        cache = cand_cache;
        warm = sol.glasso;
        objective = cand_obj;
        trace.push(objective);
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
        init: init.to_string(),
        rejected_steps: rejected,
        inexact_m_steps: inexact,
    };
    Ok((model, report))
}
