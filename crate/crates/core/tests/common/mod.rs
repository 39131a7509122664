//! Independent oracles shared by the integration tests. Nothing here calls
//! into the solver paths it is used to check.
#![allow(dead_code)]

use missglasso::linalg::SymMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn gj_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        m.swap_rows(col, piv);
        inv.swap_rows(col, piv);
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                if f != 0.0 {
                    for j in 0..n {
                        m[(i, j)] -= f * m[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
    }
    inv
}

/// Log-determinant from the eigenvalues; `None` unless all are positive.
pub fn eig_logdet(a: &DMatrix<f64>) -> Option<f64> {
    let e = a.clone().symmetric_eigen();
    if e.eigenvalues.iter().any(|&v| v <= 0.0) {
        return None;
    }
    Some(e.eigenvalues.iter().map(|v| v.ln()).sum())
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> SymMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut s = &a * a.transpose();
    for i in 0..n {
        s[(i, i)] += 0.3;
    }
    SymMatrix::new(s).unwrap()
}

/// Random sparse SPD precision matrix (diagonally dominant).
pub fn random_sparse_precision<R: Rng>(rng: &mut R, n: usize, density: f64) -> SymMatrix {
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            if rng.random_bool(density) {
                let v = rng.random_range(-0.5..0.5);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| k[(i, j)].abs()).sum();
        k[(i, i)] = off + rng.random_range(0.5..1.5);
    }
    SymMatrix::new(k).unwrap()
}

/// Empirical covariance (divide by n) of `n` random draws with covariance `cov`.
pub fn sample_covariance<R: Rng>(rng: &mut R, cov: &SymMatrix, n: usize) -> SymMatrix {
    let x = sample_rows(rng, cov, &vec![0.0; cov.dim()], n);
    let p = cov.dim();
    let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    SymMatrix::new(DMatrix::from_fn(p, p, |a, b| {
        x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n as f64
    }))
    .unwrap()
}

pub fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box–Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn sample_rows<R: Rng>(rng: &mut R, cov: &SymMatrix, mu: &[f64], n: usize) -> Vec<Vec<f64>> {
    let l = cov.as_matrix().clone().cholesky().unwrap().l();
    let p = cov.dim();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(p, |_, _| std_normal(rng));
            let x = &l * z;
            (0..p).map(|j| x[j] + mu[j]).collect()
        })
        .collect()
}

/// Maximizes `log det W` over the box `|W - S| <= rho` (entrywise, diagonal
/// included) by spectral projected gradient. Returns `(W, log det W + p)`,
/// the latter being the optimal value of the primal problem.
pub fn glasso_dual_oracle(s: &SymMatrix, rho: f64) -> (DMatrix<f64>, f64) {
    let p = s.dim();
    let sm = s.as_matrix();
    let proj = |w: &DMatrix<f64>| {
        DMatrix::from_fn(p, p, |i, j| {
            let v = 0.5 * (w[(i, j)] + w[(j, i)]);
            v.clamp(sm[(i, j)] - rho, sm[(i, j)] + rho)
        })
    };
    let f = |w: &DMatrix<f64>| eig_logdet(w).unwrap_or(f64::NEG_INFINITY);
    let mut w = DMatrix::from_fn(p, p, |i, j| sm[(i, j)] + if i == j { rho } else { 0.0 });
    let mut fw = f(&w);
    let mut g = gj_inverse(&w);
    let mut step = 1.0;
    let mut history = vec![fw; 10];
    for it in 0..200_000 {
        let mut t = step;
        let (wn, fn_) = loop {
            let cand = proj(&(&w + &g * t));
            let fc = f(&cand);
            let d = &cand - &w;
            let ref_val = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if (fc.is_finite() && fc >= ref_val + 1e-4 * g.dot(&d)) || t < 1e-20 {
                break (cand, fc);
            }
            t *= 0.5;
        };
        let d = &wn - &w;
        if max_abs(&d) < 1e-15 {
            w = wn;
            fw = fn_;
            break;
        }
        let gn = gj_inverse(&wn);
        let y = &gn - &g;
        let sy = d.dot(&y);
        let ss = d.dot(&d);
        // ascent on a concave function: -sy > 0
        step = if sy < 0.0 { (ss / -sy).clamp(1e-10, 1e10) } else { 1.0 };
        w = wn;
        fw = fn_;
        g = gn;
        history[it % 10] = fw;
    }
    (w, fw + p as f64)
}

/// Conditional law of the missing block given the observed one, computed
/// from the covariance: mean `μ_m + Σ_mo Σ_oo⁻¹ (x_o - μ_o)`, covariance
/// `Σ_mm - Σ_mo Σ_oo⁻¹ Σ_om`.
pub fn sigma_side_conditional(
    sigma: &DMatrix<f64>,
    mu: &[f64],
    x: &[f64],
    observed: &[bool],
) -> (Vec<f64>, DMatrix<f64>) {
    let o: Vec<usize> = (0..mu.len()).filter(|&j| observed[j]).collect();
    let m: Vec<usize> = (0..mu.len()).filter(|&j| !observed[j]).collect();
    let block = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| sigma[(r[i], c[j])]);
    let s_mm = block(&m, &m);
    if o.is_empty() {
        return (m.iter().map(|&j| mu[j]).collect(), s_mm);
    }
    let s_oo_inv = gj_inverse(&block(&o, &o));
    let s_mo = block(&m, &o);
    let r = DVector::from_iterator(o.len(), o.iter().map(|&j| x[j] - mu[j]));
    let gain = &s_mo * s_oo_inv;
    let mean = &gain * r;
    let cov = s_mm - &gain * s_mo.transpose();
    (m.iter().enumerate().map(|(a, &j)| mu[j] + mean[a]).collect(), cov)
}

/// Expected `x` and `x xᵀ` of one row under the conditional law above.
pub fn sigma_side_moments(
    sigma: &DMatrix<f64>,
    mu: &[f64],
    x: &[f64],
    observed: &[bool],
) -> (Vec<f64>, DMatrix<f64>) {
    let p = mu.len();
    let (cm, cc) = sigma_side_conditional(sigma, mu, x, observed);
    let m: Vec<usize> = (0..p).filter(|&j| !observed[j]).collect();
    let mut e = x.to_vec();
    for (a, &j) in m.iter().enumerate() {
        e[j] = cm[a];
    }
    let mut ee = DMatrix::from_fn(p, p, |i, j| e[i] * e[j]);
    for (a, &i) in m.iter().enumerate() {
        for (b, &j) in m.iter().enumerate() {
            ee[(i, j)] += cc[(a, b)];
        }
    }
    (e, ee)
}

/// `-log N(x_o; μ_o, Σ_oo)` including the `2π` constant; 0 for an empty row.
pub fn marginal_neg_logdensity(sigma: &DMatrix<f64>, mu: &[f64], x: &[f64], observed: &[bool]) -> f64 {
    let o: Vec<usize> = (0..mu.len()).filter(|&j| observed[j]).collect();
    if o.is_empty() {
        return 0.0;
    }
    let s = DMatrix::from_fn(o.len(), o.len(), |i, j| sigma[(o[i], o[j])]);
    let r = DVector::from_iterator(o.len(), o.iter().map(|&j| x[j] - mu[j]));
    let q = (r.transpose() * gj_inverse(&s) * &r)[(0, 0)];
    0.5 * (o.len() as f64 * (2.0 * std::f64::consts::PI).ln() + eig_logdet(&s).unwrap() + q)
}

/// Nelder–Mead simplex minimization from `x0` with initial step `step`.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
            .fold(0.0_f64, f64::max);
        if (vals[d] - vals[0]).abs() < 1e-13 || diameter < 1e-11 {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|k| simplex[..d].iter().map(|v| v[k]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|k| centroid[k] + t * (simplex[d][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best])
}

/// Repeated Nelder–Mead restarts from the previous optimum.
pub fn minimize(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> (Vec<f64>, f64) {
    let (mut x, mut v) = nelder_mead(f, x0, step, 20_000);
    let mut s = step;
    for _ in 0..30 {
        s = (s * 0.5).max(1e-4);
        let (x2, v2) = nelder_mead(f, &x, s, 20_000);
        let done = v - v2 < 1e-12;
        x = x2;
        v = v2;
        if done && s <= 1e-3 {
            break;
        }
    }
    (x, v)
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..400 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Global minimum of `-n log ρ + ½(ρ²yy - 2ρ yxᵀφ + φᵀxxφ) + λ‖φ‖₁` by
/// enumerating sign patterns of φ. On a fixed pattern φ is affine in ρ and
/// the remaining one-dimensional problem in ρ is solved by golden section.
pub fn scaled_lasso_oracle(yy: f64, yx: &[f64], xx: &DMatrix<f64>, n: usize, lambda: f64) -> (Vec<f64>, f64, f64) {
    let p = yx.len();
    let mut best: (Vec<f64>, f64, f64) = (vec![0.0; p], 0.0, f64::INFINITY);
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        let mut c = code;
        let signs: Vec<i32> = (0..p)
            .map(|_| {
                let s = (c % 3) as i32 - 1;
                c /= 3;
                s
            })
            .collect();
        let act: Vec<usize> = (0..p).filter(|&j| signs[j] != 0).collect();
        let k = act.len();
        let (a0, a1) = if k == 0 {
            (DVector::zeros(0), DVector::zeros(0))
        } else {
            let inv = gj_inverse(&DMatrix::from_fn(k, k, |i, j| xx[(act[i], act[j])]));
            let s = DVector::from_iterator(k, act.iter().map(|&j| signs[j] as f64));
            let u = DVector::from_iterator(k, act.iter().map(|&j| yx[j]));
            // φ_A(ρ) = a0 + ρ·a1
            (&inv * s * (-lambda), &inv * u)
        };
        let phi_of = |rho: f64| -> Vec<f64> {
            let mut phi = vec![0.0; p];
            for (i, &j) in act.iter().enumerate() {
                phi[j] = a0[i] + rho * a1[i];
            }
            phi
        };
        let obj = |phi: &[f64], rho: f64| {
            let mut quad = 0.0;
            for a in 0..p {
                for b in 0..p {
                    quad += phi[a] * xx[(a, b)] * phi[b];
                }
            }
            let lin: f64 = (0..p).map(|j| yx[j] * phi[j]).sum();
            let l1: f64 = phi.iter().map(|v| v.abs()).sum();
            -(n as f64) * rho.ln() + 0.5 * (rho * rho * yy - 2.0 * rho * lin + quad) + lambda * l1
        };
        // optimize over log ρ on a generous bracket
        let h = |t: f64| {
            let rho = t.exp();
            let phi = phi_of(rho);
            // the signed penalty is exact only on the pattern; use it for the
            // restricted problem and check consistency afterwards
            let mut quad = 0.0;
            for a in 0..p {
                for b in 0..p {
                    quad += phi[a] * xx[(a, b)] * phi[b];
                }
            }
            let lin: f64 = (0..p).map(|j| yx[j] * phi[j]).sum();
            let signed: f64 = (0..p).map(|j| signs[j] as f64 * phi[j]).sum();
            -(n as f64) * rho.ln() + 0.5 * (rho * rho * yy - 2.0 * rho * lin + quad) + lambda * signed
        };
        let (t, _) = golden_section(&h, -30.0, 30.0);
        let rho = t.exp();
        let phi = phi_of(rho);
        if act.iter().all(|&j| phi[j] * signs[j] as f64 > 0.0) {
            let v = obj(&phi, rho);
            if v < best.2 {
                best = (phi, rho, v);
            }
        }
    }
    best
}
