//! Covariance models and multivariate normal sampling.

use missglasso::linalg::SymMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum CovModel {
    /// `Σ_jk = τ^|j-k|`.
    Ar1 { p: usize, tau: f64 },
    /// Banded precision with bands 1, 0.4, 0.2, 0.2, 0.1.
    Ar4 { p: usize },
    /// Block diagonal with 3x3 blocks `Σ_jk = 0.7^|j-k|`.
    Block { p: usize },
    /// Unit variances; the first `block` variables share correlation `rho`,
    /// the rest are independent.
    Equicorrelated { p: usize, block: usize, rho: f64 },
    Custom(SymMatrix),
}

/// Covariance together with its precision. Precision entries that are zero
/// in theory are exactly zero here.
#[derive(Clone, Debug)]
pub struct TrueModel {
    pub sigma: SymMatrix,
    pub k: SymMatrix,
}

const AR4_BANDS: [f64; 5] = [1.0, 0.4, 0.2, 0.2, 0.1];

fn ar1_precision(p: usize, tau: f64) -> SymMatrix {
    if p == 1 {
        return SymMatrix::identity(1);
    }
    let c = 1.0 / (1.0 - tau * tau);
    SymMatrix::from_fn(p, |i, j| {
        if i == j {
            if i == 0 || i == p - 1 {
                c
            } else {
                c * (1.0 + tau * tau)
            }
        } else if i - j == 1 {
            -tau * c
        } else {
            0.0
        }
    })
}

/// Inverse with round-off fill-in (entries below `1e-12` of the diagonal
/// scale) snapped to zero.
fn clean_inverse(s: &SymMatrix) -> Result<SymMatrix> {
    let mut k = s.inverse()?;
    let p = k.dim();
    for i in 0..p {
        for j in 0..i {
            if k.get(i, j).abs() <= 1e-12 * (k.get(i, i) * k.get(j, j)).sqrt() {
                k.set(i, j, 0.0);
                k.set(j, i, 0.0);
            }
        }
    }
    Ok(k)
}

impl CovModel {
    pub fn dim(&self) -> usize {
        match self {
            CovModel::Ar1 { p, .. } | CovModel::Ar4 { p } | CovModel::Block { p } => *p,
            CovModel::Equicorrelated { p, .. } => *p,
            CovModel::Custom(s) => s.dim(),
        }
    }

    /// Covariance model estimated from complete data (divisor `n`).
    pub fn from_data(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(invalid("need at least two rows to estimate a covariance"));
        }
        let (_, s) = missglasso::data::empirical_covariance(x);
        let s = SymMatrix::new(s)?;
        s.cholesky()?;
        Ok(CovModel::Custom(s))
    }

    pub fn generate(&self) -> Result<TrueModel> {
        let p = self.dim();
        if p == 0 {
            return Err(invalid("model dimension must be >= 1"));
        }
        let (sigma, k) = match self {
            CovModel::Ar1 { tau, .. } => {
                if !(tau.abs() < 1.0) {
                    return Err(invalid(format!("AR(1) coefficient must lie in (-1, 1), got {tau}")));
                }
                (SymMatrix::from_fn(p, |i, j| tau.powi((i - j) as i32)), ar1_precision(p, *tau))
            }
            CovModel::Ar4 { .. } => {
                let k = SymMatrix::from_fn(p, |i, j| AR4_BANDS.get(i - j).copied().unwrap_or(0.0));
                (k.inverse()?, k)
            }
            CovModel::Block { .. } => {
                if p % 3 != 0 {
                    return Err(invalid(format!("block model needs p divisible by 3, got {p}")));
                }
                let b = ar1_precision(3, 0.7);
                let sigma = SymMatrix::from_fn(p, |i, j| {
                    if i / 3 == j / 3 {
                        0.7_f64.powi((i - j) as i32)
                    } else {
                        0.0
                    }
                });
                let k = SymMatrix::from_fn(p, |i, j| if i / 3 == j / 3 { b.get(i % 3, j % 3) } else { 0.0 });
                (sigma, k)
            }
            CovModel::Equicorrelated { block, rho, .. } => {
                let sigma = SymMatrix::from_fn(p, |i, j| {
                    if i == j {
                        1.0
                    } else if i < *block && j < *block {
                        *rho
                    } else {
                        0.0
                    }
                });
                let k = clean_inverse(&sigma)?;
                (sigma, k)
            }
            CovModel::Custom(s) => (s.clone(), clean_inverse(s)?),
        };
        sigma.cholesky()?;
        k.cholesky()?;
        Ok(TrueModel { sigma, k })
    }
}

/// `n` rows drawn from `N(μ, Σ)`.
pub fn sample_mvn<R: Rng>(rng: &mut R, n: usize, mu: &[f64], sigma: &SymMatrix) -> Result<DMatrix<f64>> {
    let p = sigma.dim();
    if mu.len() != p {
        return Err(invalid(format!("mean has {} entries, covariance is {p}x{p}", mu.len())));
    }
    let chol = sigma.cholesky()?;
    let l = chol.factor_l();
    let mut x = DMatrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..p {
            let mut s = mu[a];
            for b in 0..=a {
                s += l[(a, b)] * z[b];
            }
            x[(i, a)] = s;
        }
    }
    Ok(x)
}
