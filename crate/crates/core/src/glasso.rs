//! Complete-data l1-penalized precision estimation.
//!
//! Minimizes `-log|K| + tr(KS) + ρ‖K‖₁` by block coordinate ascent on the
//! dual `max log det Σ` subject to `‖Σ - S‖_∞ ≤ ρ`. Each block update solves a
//! Lasso problem in Gram form for one row/column of `Σ`; the precision matrix
//! is recovered from the Lasso coefficients through `KΣ = I`.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::linalg::SymMatrix;

/// Entries of the recovered precision matrix below this fraction of
/// `sqrt(k_jj k_kk)` are set to exactly zero.
pub const ZERO_SNAP: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct GlassoProblem {
    pub s: SymMatrix,
    pub rho: f64,
    /// When false the diagonal of `K` is left out of the penalty.
    pub penalize_diagonal: bool,
}

impl GlassoProblem {
    pub fn new(s: SymMatrix, rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(invalid(format!("penalty must be finite and >= 0, got {rho}")));
        }
        if let Some(j) = s.diagonal().iter().position(|&d| !(d >= 0.0)) {
            return Err(invalid(format!("covariance has negative diagonal at {j}")));
        }
        Ok(GlassoProblem {
            s,
            rho,
            penalize_diagonal: true,
        })
    }

    pub fn with_penalize_diagonal(mut self, yes: bool) -> Self {
        self.penalize_diagonal = yes;
        self
    }

    pub fn dim(&self) -> usize {
        self.s.dim()
    }

    fn penalty(&self, k: &SymMatrix) -> f64 {
        if self.penalize_diagonal {
            self.rho * k.l1_norm()
        } else {
            self.rho * k.l1_norm_off_diagonal()
        }
    }

    /// `-log|K| + tr(KS) + ρ‖K‖₁`; `+∞` when `K` is not positive definite.
    pub fn objective(&self, k: &SymMatrix) -> f64 {
        match k.cholesky() {
            Ok(ch) => -ch.logdet() + k.trace_product(&self.s) + self.penalty(k),
            Err(_) => f64::INFINITY,
        }
    }

    /// Largest violation of the subgradient optimality conditions at `K`.
    pub fn kkt_gap(&self, k: &SymMatrix) -> Result<f64> {
        let sigma = k.inverse()?;
        let p = self.dim();
        let mut gap = 0.0_f64;
        for j in 0..p {
            for i in j..p {
                let g = self.s.get(i, j) - sigma.get(i, j);
                let kij = k.get(i, j);
                let v = if i == j && !self.penalize_diagonal {
                    g.abs()
                } else if kij != 0.0 {
                    (g + self.rho * kij.signum()).abs()
                } else {
                    (g.abs() - self.rho).max(0.0)
                };
                gap = gap.max(v);
            }
        }
        Ok(gap)
    }
}

#[derive(Clone, Debug)]
pub struct GlassoOptions {
    /// Relative change of the primal objective between sweeps.
    pub objective_tol: f64,
    /// Inner Lasso tolerance on the largest coordinate move (gradient units).
    pub inner_tol: f64,
    /// Required KKT gap at termination, relative to `1 + ‖S‖_∞`.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        GlassoOptions {
            objective_tol: 1e-7,
            inner_tol: 1e-8,
            kkt_tol: 1e-6,
            max_sweeps: 500,
        }
    }
}

impl GlassoOptions {
    /// Tolerances used inside EM, where M-step accuracy bounds how far the
    /// observed-likelihood descent can be resolved.
    pub fn tight() -> Self {
        GlassoOptions {
            objective_tol: 1e-11,
            inner_tol: 1e-11,
            kkt_tol: 1e-9,
            max_sweeps: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlassoSolution {
    pub sigma: SymMatrix,
    pub k: SymMatrix,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_gap: f64,
    /// Primal objective after each sweep.
    pub objective_trace: Vec<f64>,
    /// Column `j` holds the Lasso coefficients of block `j` (zero at row `j`).
    pub(crate) beta: DMatrix<f64>,
}

impl GlassoSolution {
    pub fn lasso_coefficients(&self) -> &DMatrix<f64> {
        &self.beta
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Solves `min_β ½βᵀVβ - uᵀβ + ρ‖β‖₁` by cyclic coordinate descent, starting
/// from `init`.
pub fn lasso_gram(v: &SymMatrix, u: &[f64], rho: f64, init: &[f64]) -> Result<Vec<f64>> {
    lasso_gram_with(v, u, rho, init, 1e-8, 100_000)
}

pub fn lasso_gram_with(
    v: &SymMatrix,
    u: &[f64],
    rho: f64,
    init: &[f64],
    tol: f64,
    max_passes: usize,
) -> Result<Vec<f64>> {
    let n = v.dim();
    if u.len() != n || init.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "gram matrix is {n}x{n}, u has {} and init has {} entries",
            u.len(),
            init.len()
        )));
    }
    if !(rho >= 0.0) {
        return Err(invalid("lasso penalty must be >= 0"));
    }
    if let Some(index) = (0..n).find(|&j| !(v.get(j, j) > 0.0)) {
        return Err(Error::ZeroDiagonal { index });
    }
    let mut beta = init.to_vec();
    let mut grad = vec![0.0; n];
    let passes = lasso_cd(v.as_matrix(), u, rho, &mut beta, &mut grad, tol, max_passes);
    if passes >= max_passes {
        return Err(Error::NotConverged { iterations: passes });
    }
    Ok(beta)
}

/// Coordinate descent core. `grad` is scratch of length `n`; on return it
/// holds `Vβ`. Returns the number of passes taken.
pub(crate) fn lasso_cd(
    v: &DMatrix<f64>,
    u: &[f64],
    rho: f64,
    beta: &mut [f64],
    grad: &mut [f64],
    tol: f64,
    max_passes: usize,
) -> usize {
    let n = u.len();
    for i in 0..n {
        grad[i] = 0.0;
    }
    for (k, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            let col = v.column(k);
            for i in 0..n {
                grad[i] += col[i] * b;
            }
        }
    }
    let scale = u.iter().fold(rho, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let threshold = tol * scale;

    let update = |j: usize, beta: &mut [f64], grad: &mut [f64]| -> f64 {
        let vjj = v[(j, j)];
        let old = beta[j];
        let z = u[j] - (grad[j] - vjj * old);
        let new = soft_threshold(z, rho) / vjj;
        let delta = new - old;
        if delta != 0.0 {
            beta[j] = new;
            let col = v.column(j);
            for i in 0..n {
                grad[i] += col[i] * delta;
            }
        }
        delta.abs() * vjj
    };

    let mut passes = 0;
    loop {
        // full pass
        let mut change = 0.0_f64;
        for j in 0..n {
            change = change.max(update(j, beta, grad));
        }
        passes += 1;
        if change <= threshold || passes >= max_passes {
            return passes;
        }
        // iterate on the active set until it settles, then re-check everything
        let active: Vec<usize> = (0..n).filter(|&j| beta[j] != 0.0).collect();
        loop {
            let mut change = 0.0_f64;
            for &j in &active {
                change = change.max(update(j, beta, grad));
            }
            passes += 1;
            if change <= threshold || passes >= max_passes {
                break;
            }
        }
        if passes >= max_passes {
            return passes;
        }
    }
}

/// Fits the graphical lasso with default options.
pub fn glasso_fit(problem: &GlassoProblem, warm: Option<&GlassoSolution>) -> Result<GlassoSolution> {
    glasso_fit_with(problem, warm, &GlassoOptions::default())
}

pub fn glasso_fit_with(
    problem: &GlassoProblem,
    warm: Option<&GlassoSolution>,
    opts: &GlassoOptions,
) -> Result<GlassoSolution> {
    let p = problem.dim();
    let s = &problem.s;
    let rho = problem.rho;
    let diag_shift = if problem.penalize_diagonal { rho } else { 0.0 };

    if let Some(index) = (0..p).find(|&j| !(s.get(j, j) + diag_shift > 0.0)) {
        return Err(Error::ZeroDiagonal { index });
    }
    if rho == 0.0 {
        // unpenalized: the solution is S itself, which must be invertible
        s.cholesky()?;
    }

    let cold = || -> (DMatrix<f64>, DMatrix<f64>) {
        let mut w = if problem.penalize_diagonal {
            s.as_matrix().clone()
        } else {
            DMatrix::from_diagonal(&s.as_matrix().diagonal())
        };
        for j in 0..p {
            w[(j, j)] = s.get(j, j) + diag_shift;
        }
        (w, DMatrix::zeros(p, p))
    };
    let (mut w, mut beta) = match warm {
        Some(ws) if ws.sigma.dim() == p => {
            let mut w = ws.sigma.as_matrix().clone();
            for j in 0..p {
                w[(j, j)] = s.get(j, j) + diag_shift;
            }
            if SymMatrix::symmetrized(w.clone()).cholesky().is_ok() {
                (w, ws.beta.clone())
            } else {
                let (w, _) = cold();
                (w, ws.beta.clone())
            }
        }
        _ => cold(),
    };

    let m = p.saturating_sub(1);
    let mut v = DMatrix::<f64>::zeros(m, m);
    let mut u = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut trace = Vec::new();
    let mut best: Option<GlassoSolution> = None;
    let s_scale = 1.0 + s.max_abs();

    for sweep in 1..=opts.max_sweeps {
        if p > 1 {
            for j in 0..p {
                let others = |i: usize| if i < j { i } else { i + 1 };
                for c in 0..m {
                    let oc = others(c);
                    for r in 0..m {
                        v[(r, c)] = 0.5 * w[(others(r), oc)];
                    }
                    u[c] = s.get(oc, j);
                    b[c] = beta[(oc, j)];
                }
                lasso_cd(&v, &u, rho, &mut b, &mut grad, opts.inner_tol, 1_000_000);
                // grad = V β = Σ11 β / 2 is the new off-diagonal column of Σ
                for c in 0..m {
                    let oc = others(c);
                    w[(oc, j)] = grad[c];
                    w[(j, oc)] = grad[c];
                    beta[(oc, j)] = b[c];
                }
            }
        }
        let k = recover_precision(&w, &beta);
        let objective = problem.objective(&k);
        trace.push(objective);
        let kkt_gap = if objective.is_finite() {
            problem.kkt_gap(&k).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        let sol = GlassoSolution {
            sigma: SymMatrix::symmetrized(w.clone()),
            k,
            objective,
            iterations: sweep,
            kkt_gap,
            objective_trace: trace.clone(),
            beta: beta.clone(),
        };
        let prev = trace.len().checked_sub(2).map(|i| trace[i]);
        let settled = match prev {
            Some(prev) => (prev - objective).abs() <= opts.objective_tol * objective.abs().max(1.0),
            None => false,
        };
        if objective.is_finite() && kkt_gap <= opts.kkt_tol * s_scale && (settled || kkt_gap == 0.0) {
            return Ok(sol);
        }
        if objective.is_finite() && best.as_ref().is_none_or(|bs| objective <= bs.objective) {
            best = Some(sol);
        }
    }
    match best {
        Some(best) => Err(Error::GlassoNotConverged {
            sweeps: opts.max_sweeps,
            best: Box::new(best),
        }),
        None => Err(Error::NotPositiveDefinite {
            index: 0,
            pivot: f64::NAN,
        }),
    }
}

/// Recovers `K` column by column from `KΣ = I` and the block Lasso
/// coefficients: `k_jj = 1/(σ_jj - σ12ᵀβ/2)`, `k_12 = -k_jj β/2`.
fn recover_precision(w: &DMatrix<f64>, beta: &DMatrix<f64>) -> SymMatrix {
    let p = w.nrows();
    let mut k = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut dot = 0.0;
        for i in 0..p {
            if i != j {
                dot += w[(i, j)] * beta[(i, j)];
            }
        }
        let kjj = 1.0 / (w[(j, j)] - 0.5 * dot);
        k[(j, j)] = kjj;
        for i in 0..p {
            if i != j {
                k[(i, j)] = -0.5 * beta[(i, j)] * kjj;
            }
        }
    }
    let mut k = SymMatrix::symmetrized(k);
    for j in 0..p {
        for i in (j + 1)..p {
            let scale = (k.get(i, i) * k.get(j, j)).abs().sqrt();
            if k.get(i, j).abs() < ZERO_SNAP * scale {
                k.set(i, j, 0.0);
            }
        }
    }
    k
}

/// Unwraps a non-converged fit into its best iterate; other errors pass through.
pub fn best_effort(r: Result<GlassoSolution>) -> Result<(GlassoSolution, bool)> {
    match r {
        Ok(s) => Ok((s, true)),
        Err(Error::GlassoNotConverged { best, .. }) => Ok((*best, false)),
        Err(e) => Err(e),
    }
}
