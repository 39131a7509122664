//! Deletion mechanisms.
//!
//! The block mechanisms act on variables grouped in consecutive triples:
//! only the third variable of each triple ever goes missing.

use missglasso::data::IncompleteMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mechanism {
    /// Exactly `⌊frac·n·p⌋` cells, uniformly without replacement.
    Mcar(f64),
    /// Third variable of each triple missing with probability `π`.
    McarBernoulli(f64),
    /// Third variable missing when the first variable of its triple is below `T`.
    Mar(f64),
    /// Third variable missing when its own value is below `T`.
    Nmar(f64),
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

impl Mechanism {
    fn is_block(&self) -> bool {
        !matches!(self, Mechanism::Mcar(_))
    }

    fn is_random(&self) -> bool {
        matches!(self, Mechanism::Mcar(_) | Mechanism::McarBernoulli(_))
    }

    fn validate(&self, p: usize) -> Result<()> {
        match *self {
            Mechanism::Mcar(f) if !(0.0..1.0).contains(&f) => Err(invalid(format!("missing fraction {f} not in [0, 1)"))),
            Mechanism::McarBernoulli(pi) if !(0.0..=1.0).contains(&pi) => {
                Err(invalid(format!("missing probability {pi} not in [0, 1]")))
            }
            Mechanism::Mar(t) | Mechanism::Nmar(t) if t.is_nan() => Err(invalid("threshold is NaN")),
            _ if self.is_block() && p % 3 != 0 => Err(invalid(format!("block mechanisms need p divisible by 3, got {p}"))),
            _ => Ok(()),
        }
    }

    /// Row-major observation mask.
    fn draw_mask<R: Rng>(&self, x: &DMatrix<f64>, rng: &mut R) -> Vec<bool> {
        let (n, p) = x.shape();
        let mut mask = vec![true; n * p];
        match *self {
            Mechanism::Mcar(frac) => {
                let m = (frac * (n * p) as f64).floor() as usize;
                for c in rand::seq::index::sample(rng, n * p, m) {
                    mask[c] = false;
                }
            }
            Mechanism::McarBernoulli(pi) => {
                for i in 0..n {
                    for b in 0..p / 3 {
                        if rng.random_bool(pi) {
                            mask[i * p + 3 * b + 2] = false;
                        }
                    }
                }
            }
            Mechanism::Mar(t) | Mechanism::Nmar(t) => {
                let own = matches!(self, Mechanism::Nmar(_));
                for i in 0..n {
                    for b in 0..p / 3 {
                        let trigger = if own { x[(i, 3 * b + 2)] } else { x[(i, 3 * b)] };
                        if trigger < t {
                            mask[i * p + 3 * b + 2] = false;
                        }
                    }
                }
            }
        }
        mask
    }
}

fn empty_column(mask: &[bool], n: usize, p: usize) -> Option<usize> {
    (0..p).find(|&j| (0..n).all(|i| !mask[i * p + j]))
}

/// Deletes cells of `x` according to `mech`. A draw that empties a column is
/// redrawn once; deterministic mechanisms fail straight away.
pub fn apply_missingness<R: Rng>(x: &DMatrix<f64>, mech: Mechanism, rng: &mut R) -> Result<IncompleteMatrix> {
    let (n, p) = x.shape();
    mech.validate(p)?;
    let mut mask = mech.draw_mask(x, rng);
    if let Some(column) = empty_column(&mask, n, p) {
        if !mech.is_random() {
            return Err(SimError::AllMissingColumn { column });
        }
        mask = mech.draw_mask(x, rng);
        if let Some(column) = empty_column(&mask, n, p) {
            return Err(SimError::AllMissingColumn { column });
        }
    }
    Ok(IncompleteMatrix::from_mask(x, &mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;

    fn data(n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0)
    }

    #[test]
    fn mcar_deletes_exact_count() {
        let x = data(40, 6);
        for frac in [0.0, 0.1, 0.25, 0.5] {
            let d = apply_missingness(&x, Mechanism::Mcar(frac), &mut stream_rng(1, 0, 0, 0)).unwrap();
            assert_eq!(d.missing_count(), (frac * 240.0) as usize);
        }
        assert!(apply_missingness(&x, Mechanism::Mcar(1.0), &mut stream_rng(1, 0, 0, 0)).is_err());
    }

    #[test]
    fn nmar_rule_is_exact() {
        let x = data(30, 6);
        let d = apply_missingness(&x, Mechanism::Nmar(0.0), &mut stream_rng(1, 0, 0, 0)).unwrap();
        for i in 0..30 {
            for j in 0..6 {
                assert_eq!(d.is_observed(i, j), !(j % 3 == 2 && x[(i, j)] < 0.0));
            }
        }
    }

    #[test]
    fn mar_conditions_on_first_of_triple() {
        let x = data(30, 6);
        let d = apply_missingness(&x, Mechanism::Mar(-1.0), &mut stream_rng(1, 0, 0, 0)).unwrap();
        for i in 0..30 {
            for j in 0..6 {
                let want = !(j % 3 == 2 && x[(i, j - 2 * (j % 3 == 2) as usize)] < -1.0);
                assert_eq!(d.is_observed(i, j), want);
            }
        }
    }

    #[test]
    fn bernoulli_only_touches_third_variables() {
        let x = data(3000, 6);
        let d = apply_missingness(&x, Mechanism::McarBernoulli(0.5), &mut stream_rng(2, 0, 0, 0)).unwrap();
        let frac = d.missing_count() as f64 / (3000.0 * 6.0);
        assert!((frac - 1.0 / 6.0).abs() < 0.01, "{frac}");
        for i in 0..3000 {
            assert!(d.is_observed(i, 0) && d.is_observed(i, 1) && d.is_observed(i, 3) && d.is_observed(i, 4));
        }
    }

    #[test]
    fn emptied_column_is_an_error() {
        let x = DMatrix::from_element(5, 3, -1.0);
        let e = apply_missingness(&x, Mechanism::Nmar(0.0), &mut stream_rng(1, 0, 0, 0)).unwrap_err();
        assert!(matches!(e, SimError::AllMissingColumn { column: 2 }));
        assert!(apply_missingness(&data(5, 4), Mechanism::Mar(0.0), &mut stream_rng(1, 0, 0, 0)).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.75) - 0.6744897501960817).abs() < 1e-9);
    }
}
