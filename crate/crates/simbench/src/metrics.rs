use missglasso::linalg::SymMatrix;
use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// `tr(ΣK̂) - log|ΣK̂| - p`.
pub fn kl_loss(k_hat: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    let p = sigma.dim();
    if k_hat.dim() != p {
        return Err(invalid(format!("dimensions differ: {} vs {p}", k_hat.dim())));
    }
    let logdet = k_hat.cholesky()?.logdet() + sigma.cholesky()?.logdet();
    Ok(sigma.trace_product(k_hat) - logdet - p as f64)
}

/// True positive and true negative rates of the off-diagonal support of
/// `k_hat`. A rate is `None` when the truth has no entries of that kind.
pub fn tpr_tnr(k_hat: &SymMatrix, k_true: &SymMatrix) -> Result<(Option<f64>, Option<f64>)> {
    let p = k_true.dim();
    if k_hat.dim() != p {
        return Err(invalid(format!("dimensions differ: {} vs {p}", k_hat.dim())));
    }
    let (mut pos, mut tp, mut neg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..p {
        for j in (i + 1)..p {
            let est = k_hat.get(i, j) != 0.0;
            if k_true.get(i, j) != 0.0 {
                pos += 1;
                tp += est as usize;
            } else {
                neg += 1;
                tn += !est as usize;
            }
        }
    }
    let rate = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok((rate(tp, pos), rate(tn, neg)))
}

/// `‖β̂ - β‖²`.
pub fn l2(beta_hat: &[f64], beta: &[f64]) -> f64 {
    beta_hat.iter().zip(beta).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Fraction of estimates in which each entry is exactly zero.
pub fn zero_frequency(ks: &[&SymMatrix]) -> Option<DMatrix<f64>> {
    let p = ks.first()?.dim();
    let mut f = DMatrix::zeros(p, p);
    for k in ks {
        for i in 0..p {
            for j in 0..p {
                if k.get(i, j) == 0.0 {
                    f[(i, j)] += 1.0;
                }
            }
        }
    }
    Some(f / ks.len() as f64)
}
