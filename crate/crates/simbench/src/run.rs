//! Scenario runner.
//!
//! Each run draws its own training and validation sets from generators keyed
//! by (seed, run), so results do not depend on thread count or scheduling.
//! A method that fails in one run is recorded with its cause and left out of
//! the summary statistics.

use std::fmt::Write as _;
use std::time::Instant;

use missglasso::data::IncompleteMatrix;
use missglasso::io::fmt_f64;
use missglasso::linalg::SymMatrix;
use missglasso::missglasso::{conditional_mean_impute, EmOptions, FitReport, GaussianModel};
use missglasso::select::{bic_path, cross_validate, lambda_grid, validation_path};
use missglasso::two_stage::{fit_stage2, lambda2_max, JointModel, RegressionData, TwoStageOptions};
use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baselines::{knn_impute, lasso_validated, log_grid, mean_impute, mle_em, prediction_error, select_knn_k};
use crate::config::{Kind, Method, ScenarioConfig, Tuning};
use crate::error::Result;
use crate::metrics::{kl_loss, l2, tpr_tnr, zero_frequency};
use crate::missingness::apply_missingness;
use crate::models::{sample_mvn, TrueModel};
use crate::stream_rng;

/// Second-stage penalty grid (lasso and two-stage regression).
const PATH2_COUNT: usize = 30;
const PATH2_RATIO: f64 = 1e-2;
/// Grid points without a new best validation error before the two-stage
/// path stops.
const PATH2_PATIENCE: usize = 5;
const KNN_CANDIDATES: [usize; 9] = [1, 2, 3, 4, 6, 8, 10, 15, 20];
const KNN_REPS: usize = 3;

// generator purposes
const SAMPLE: u64 = 0;
const DELETE: u64 = 1;
const TUNE: u64 = 2;
const KNN: u64 = 3;

pub const CSV_HEADER: &str = "method,missing_pct,run,kl_loss,tpr,tnr,l2,runtime_s,em_iters";

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub method: Method,
    /// Index into the configured levels.
    pub level: usize,
    pub missing_pct: f64,
    /// 1-based.
    pub run: usize,
    pub kl_loss: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub l2: Option<f64>,
    pub runtime_s: Option<f64>,
    pub em_iters: Option<usize>,
    pub failure: Option<String>,
    /// Selected precision estimate, kept for zero-frequency maps.
    pub k_hat: Option<SymMatrix>,
}

impl MetricsRow {
    fn new(method: Method, level: usize, missing_pct: f64, run: usize) -> Self {
        MetricsRow {
            method,
            level,
            missing_pct,
            run,
            kl_loss: None,
            tpr: None,
            tnr: None,
            l2: None,
            runtime_s: None,
            em_iters: None,
            failure: None,
            k_hat: None,
        }
    }

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_f64);
        format!(
            "{},{:.2},{},{},{},{},{},{},{}",
            self.method.name(),
            self.missing_pct,
            self.run,
            f(self.kl_loss),
            f(self.tpr),
            f(self.tnr),
            f(self.l2),
            f(self.runtime_s),
            self.em_iters.map_or_else(|| "NA".to_string(), |v| v.to_string()),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub sd: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Option<Stat> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, sd })
    }
}

#[derive(Clone, Debug)]
pub struct SummaryCell {
    pub method: Method,
    pub level: usize,
    pub missing_pct: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub kl_loss: Option<Stat>,
    pub tpr: Option<Stat>,
    pub tnr: Option<Stat>,
    pub l2: Option<Stat>,
    pub em_iters: Option<Stat>,
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    /// Ordered by level, then configured method order, then run.
    pub rows: Vec<MetricsRow>,
}

impl ScenarioResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> Vec<SummaryCell> {
        let mut out = Vec::new();
        for (li, &level) in self.config.levels.iter().enumerate() {
            for &method in &self.config.methods {
                let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.level == li && r.method == method).collect();
                let ok: Vec<&&MetricsRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
                let stat = |g: &dyn Fn(&MetricsRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| g(r)).collect::<Vec<_>>());
                out.push(SummaryCell {
                    method,
                    level: li,
                    missing_pct: self.config.mechanism.missing_pct(level),
                    succeeded: ok.len(),
                    failed: rows.len() - ok.len(),
                    kl_loss: stat(&|r| r.kl_loss),
                    tpr: stat(&|r| r.tpr),
                    tnr: stat(&|r| r.tnr),
                    l2: stat(&|r| r.l2),
                    em_iters: stat(&|r| r.em_iters.map(|v| v as f64)),
                });
            }
        }
        out
    }

    /// Summary cell for `method` at level index `level`.
    pub fn cell(&self, method: Method, level: usize) -> Option<SummaryCell> {
        self.summary().into_iter().find(|c| c.method == method && c.level == level)
    }

    pub fn summary_table(&self) -> String {
        let fmt = |s: Option<Stat>, scale: f64| {
            s.map_or_else(|| "-".to_string(), |s| format!("{:.3} ({:.3})", scale * s.mean, scale * s.sd))
        };
        let mut t = String::new();
        let regression = self.config.kind == Kind::Regression;
        if regression {
            writeln!(t, "{:<12} {:>8} {:>5} {:>6} {:>20} {:>14}", "method", "missing%", "ok", "failed", "L2 mean (sd)", "EM iters").unwrap();
        } else {
            writeln!(
                t,
                "{:<12} {:>8} {:>5} {:>6} {:>20} {:>20} {:>20} {:>14}",
                "method", "missing%", "ok", "failed", "KL mean (sd)", "TPR% mean (sd)", "TNR% mean (sd)", "EM iters"
            )
            .unwrap();
        }
        for c in self.summary() {
            let iters = c.em_iters.map_or_else(|| "-".to_string(), |s| format!("{:.1}", s.mean));
            if regression {
                writeln!(
                    t,
                    "{:<12} {:>8.2} {:>5} {:>6} {:>20} {:>14}",
                    c.method.name(),
                    c.missing_pct,
                    c.succeeded,
                    c.failed,
                    fmt(c.l2, 1.0),
                    iters
                )
                .unwrap();
            } else {
                writeln!(
                    t,
                    "{:<12} {:>8.2} {:>5} {:>6} {:>20} {:>20} {:>20} {:>14}",
                    c.method.name(),
                    c.missing_pct,
                    c.succeeded,
                    c.failed,
                    fmt(c.kl_loss, 1.0),
                    fmt(c.tpr, 100.0),
                    fmt(c.tnr, 100.0),
                    iters
                )
                .unwrap();
            }
        }
        for r in self.rows.iter().filter(|r| r.failure.is_some()) {
            writeln!(
                t,
                "failed: {} at {:.2}% run {}: {}",
                r.method.name(),
                r.missing_pct,
                r.run,
                r.failure.as_deref().unwrap_or("")
            )
            .unwrap();
        }
        t
    }

    /// Per-entry frequency of exact zeros in the selected precision
    /// estimates of `method` at level index `level`.
    pub fn zero_frequency(&self, method: Method, level: usize) -> Option<DMatrix<f64>> {
        let ks: Vec<&SymMatrix> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.level == level)
            .filter_map(|r| r.k_hat.as_ref())
            .collect();
        zero_frequency(&ks)
    }
}

/// Plain CSV of a matrix, one row per line.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Penalized precision fit with the penalty chosen by `tuning`.
pub fn tuned_fit(
    cfg: &ScenarioConfig,
    x: &IncompleteMatrix,
    validation: &IncompleteMatrix,
    seed: u64,
) -> Result<(GaussianModel, FitReport)> {
    let lambdas = lambda_grid(x, cfg.lambda_count, cfg.lambda_ratio)?;
    let opts = EmOptions::default();
    Ok(match cfg.tuning {
        Tuning::Validation => {
            let mut path = validation_path(x, validation, &lambdas, &opts)?;
            let best = path.best_index();
            path.fits.swap_remove(best)
        }
        Tuning::Bic => {
            let mut path = bic_path(x, &lambdas, &opts)?;
            let best = path.best_index();
            path.fits.swap_remove(best)
        }
        Tuning::Cv => {
            let cv = cross_validate(x, &lambdas, cfg.cv_folds, seed, &opts)?;
            (cv.model, cv.report)
        }
    })
}

/// Two-stage regression along a decreasing second-stage penalty grid with
/// warm starts; the fit with the smallest prediction error on `(xv, yv)` wins.
///
/// The path stops early after `PATH2_PATIENCE` points without improvement,
/// or when a fit past the first one fails to converge (deep in the path the
/// residual scale collapses and the solver slows down sharply).
pub fn two_stage_validated(
    data: &RegressionData,
    x_model: &GaussianModel,
    xv: &DMatrix<f64>,
    yv: &[f64],
    count: usize,
    ratio: f64,
) -> Result<(JointModel, FitReport)> {
    let opts = TwoStageOptions::default();
    let max = lambda2_max(data, x_model)?;
    if max == 0.0 {
        return Ok(fit_stage2(data, x_model, 0.0, None, &opts)?);
    }
    let mut best: Option<(f64, JointModel, FitReport)> = None;
    let mut prev: Option<JointModel> = None;
    let mut stale = 0;
    for l in log_grid(max, count, ratio)? {
        let (m, r) = match fit_stage2(data, x_model, l, prev.as_ref(), &opts) {
            Ok(fit) => fit,
            Err(missglasso::Error::NotConverged { .. }) if best.is_some() => break,
            Err(e) => return Err(e.into()),
        };
        let err = prediction_error(xv, yv, &m.beta);
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, m.clone(), r));
            stale = 0;
        } else {
            stale += 1;
            if stale >= PATH2_PATIENCE {
                break;
            }
        }
        prev = Some(m);
    }
    let (_, m, r) = best.expect("non-empty grid");
    Ok((m, r))
}

fn precision_method(
    cfg: &ScenarioConfig,
    method: Method,
    x: &IncompleteMatrix,
    val: &IncompleteMatrix,
    seed: u64,
) -> Result<(GaussianModel, Option<usize>)> {
    Ok(match method {
        Method::MissGlasso => {
            let (m, r) = tuned_fit(cfg, x, val, seed)?;
            (m, Some(r.em_iterations))
        }
        Method::MeanImpute => {
            let xi = IncompleteMatrix::complete(&mean_impute(x)?)?;
            (tuned_fit(cfg, &xi, val, seed)?.0, None)
        }
        Method::Mle => {
            let (m, r) = mle_em(x, &EmOptions::default())?;
            (m, Some(r.em_iterations))
        }
        other => unreachable!("{} is a regression method", other.name()),
    })
}

fn precision_run(cfg: &ScenarioConfig, truth: &TrueModel, run: usize) -> Result<Vec<MetricsRow>> {
    let p = truth.sigma.dim();
    let zeros = vec![0.0; p];
    let mut rng = stream_rng(cfg.seed, run, SAMPLE, 0);
    let train = sample_mvn(&mut rng, cfg.n, &zeros, &truth.sigma)?;
    let val = IncompleteMatrix::complete(&sample_mvn(&mut rng, cfg.n_validation, &zeros, &truth.sigma)?)?;
    let mut rows = Vec::new();
    for (li, &level) in cfg.levels.iter().enumerate() {
        let pct = cfg.mechanism.missing_pct(level);
        let x = apply_missingness(&train, cfg.mechanism.at(level), &mut stream_rng(cfg.seed, run, DELETE, li));
        let seed = stream_rng(cfg.seed, run, TUNE, li).next_u64();
        for &method in &cfg.methods {
            let mut row = MetricsRow::new(method, li, pct, run + 1);
            let start = Instant::now();
            let fit = match &x {
                Ok(x) => precision_method(cfg, method, x, &val, seed),
                Err(e) => Err(crate::error::invalid(e.to_string())),
            };
            let scored = fit.and_then(|(m, iters)| {
                let kl = kl_loss(&m.k, &truth.sigma)?;
                let (tpr, tnr) = tpr_tnr(&m.k, &truth.k)?;
                Ok((m, iters, kl, tpr, tnr))
            });
            match scored {
                Ok((m, iters, kl, tpr, tnr)) => {
                    row.kl_loss = Some(kl);
                    row.tpr = tpr;
                    row.tnr = tnr;
                    row.em_iters = iters;
                    row.k_hat = Some(m.k);
                }
                Err(e) => row.failure = Some(e.to_string()),
            }
            if cfg.timing {
                row.runtime_s = Some(start.elapsed().as_secs_f64());
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn regression_sample<R: Rng>(
    rng: &mut R,
    n: usize,
    truth: &TrueModel,
    beta: &[f64],
    sd: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let p = beta.len();
    let x = sample_mvn(rng, n, &vec![0.0; p], &truth.sigma)?;
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + sd * e
        })
        .collect();
    Ok((x, y))
}

fn regression_run(cfg: &ScenarioConfig, truth: &TrueModel, run: usize) -> Result<Vec<MetricsRow>> {
    let mut rng = stream_rng(cfg.seed, run, SAMPLE, 0);
    let (xt, yt) = regression_sample(&mut rng, cfg.n, truth, &cfg.beta, cfg.noise_sd)?;
    let (xv, yv) = regression_sample(&mut rng, cfg.n_validation, truth, &cfg.beta, cfg.noise_sd)?;
    let val = IncompleteMatrix::complete(&xv)?;
    let mut rows = Vec::new();
    for (li, &level) in cfg.levels.iter().enumerate() {
        let pct = cfg.mechanism.missing_pct(level);
        let x = apply_missingness(&xt, cfg.mechanism.at(level), &mut stream_rng(cfg.seed, run, DELETE, li))
            .map_err(|e| e.to_string());
        let seed = stream_rng(cfg.seed, run, TUNE, li).next_u64();
        // first-stage fit shared by the two methods that need it
        let mut stage1: Option<std::result::Result<(GaussianModel, f64), String>> = None;
        for &method in &cfg.methods {
            let mut row = MetricsRow::new(method, li, pct, run + 1);
            let start = Instant::now();
            let mut extra_time = 0.0;
            let res: std::result::Result<(Vec<f64>, Option<usize>), String> = x.clone().and_then(|x| {
                let lasso = |xi: &DMatrix<f64>| {
                    lasso_validated(xi, &yt, &xv, &yv, PATH2_COUNT, PATH2_RATIO).map_err(|e| e.to_string())
                };
                match method {
                    Method::Complete => Ok((lasso(&xt)?, None)),
                    Method::Mean => Ok((lasso(&mean_impute(&x).map_err(|e| e.to_string())?)?, None)),
                    Method::Knn => {
                        let k = match cfg.knn_k {
                            Some(k) => k,
                            None => select_knn_k(&x, &KNN_CANDIDATES, KNN_REPS, &mut stream_rng(cfg.seed, run, KNN, li))
                                .map_err(|e| e.to_string())?,
                        };
                        Ok((lasso(&knn_impute(&x, k).map_err(|e| e.to_string())?)?, None))
                    }
                    Method::Missgl | Method::TwoStage => {
                        let fresh = stage1.is_none();
                        let (model, t1) = stage1
                            .get_or_insert_with(|| {
                                let s = Instant::now();
                                tuned_fit(cfg, &x, &val, seed)
                                    .map(|(m, _)| (m, s.elapsed().as_secs_f64()))
                                    .map_err(|e| format!("first stage: {e}"))
                            })
                            .clone()?;
                        if !fresh {
                            extra_time = t1;
                        }
                        if method == Method::Missgl {
                            let xi = conditional_mean_impute(&x, &model).map_err(|e| e.to_string())?;
                            Ok((lasso(&xi)?, None))
                        } else {
                            let data = RegressionData::new(yt.clone(), x).map_err(|e| e.to_string())?;
                            let (m, r) = two_stage_validated(&data, &model, &xv, &yv, PATH2_COUNT, PATH2_RATIO)
                                .map_err(|e| e.to_string())?;
                            Ok((m.beta, Some(r.em_iterations)))
                        }
                    }
                    other => unreachable!("{} is a precision method", other.name()),
                }
            });
            match res {
                Ok((beta, iters)) => {
                    row.l2 = Some(l2(&beta, &cfg.beta));
                    row.em_iters = iters;
                }
                Err(e) => row.failure = Some(e),
            }
            if cfg.timing {
                // the shared first stage is charged to every method using it
                row.runtime_s = Some(start.elapsed().as_secs_f64() + extra_time);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Runs every (run, level, method) cell of `cfg`. Runs execute in parallel
/// on the current rayon pool.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let truth = cfg.model.generate()?;
    let per_run = (0..cfg.runs)
        .into_par_iter()
        .map(|run| match cfg.kind {
            Kind::Precision => precision_run(cfg, &truth, run),
            Kind::Regression => regression_run(cfg, &truth, run),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<MetricsRow> = per_run.into_iter().flatten().collect();
    let order = |m: Method| cfg.methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (r.level, order(r.method), r.run));
    Ok(ScenarioResult {
        config: cfg.clone(),
        rows,
    })
}
