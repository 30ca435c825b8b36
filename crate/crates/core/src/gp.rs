//! GP inference: conjugate regression, Laplace-approximated logistic
//! classification, and evaluation metrics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_jittered, gauss_hermite_100, gauss_hermite_20};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LikelihoodSpec {
    Gaussian { noise_sd: f64 },
    BernoulliLogistic,
}

/// Predictive summary on a set of test points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorSummary {
    /// Predictive mean of the response (regression) or of the latent `f`.
    pub mean: Vec<f64>,
    /// Predictive variance of the latent `f`.
    pub variance: Vec<f64>,
    pub class_prob: Option<Vec<f64>>,
}

const LN_2PI: f64 = 1.8378770664093453;

#[inline]
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^u)` without overflow.
#[inline]
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn check_square(k: &DMatrix<f64>, m: usize) -> Result<()> {
    if k.nrows() != m || k.ncols() != m {
        return Err(invalid(format!("covariance is {}x{}, expected {m}x{m}", k.nrows(), k.ncols())));
    }
    Ok(())
}

fn noisy(kmm: &DMatrix<f64>, noise_sd: f64) -> Result<DMatrix<f64>> {
    if !(noise_sd > 0.0 && noise_sd.is_finite()) {
        return Err(invalid(format!("noise sd {noise_sd} must be positive")));
    }
    let mut k = kmm.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += noise_sd * noise_sd;
    }
    Ok(k)
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log marginal likelihood of `y` under `N(0, Kmm + σ²I)`.
pub fn gaussian_marginal_loglik(kmm: &DMatrix<f64>, y: &[f64], noise_sd: f64) -> Result<f64> {
    check_square(kmm, y.len())?;
    let (ch, _) = cholesky_jittered(&noisy(kmm, noise_sd)?)?;
    let yv = DVector::from_column_slice(y);
    let alpha = ch.solve(&yv);
    Ok(-0.5 * yv.dot(&alpha) - 0.5 * log_det(&ch) - 0.5 * y.len() as f64 * LN_2PI)
}

/// Gaussian conditional prediction given the labeled block `kmm`, the
/// cross block `k_tm` (test × labeled) and the test prior variances.
pub fn gp_regression_predict(
    kmm: &DMatrix<f64>,
    k_tm: &DMatrix<f64>,
    k_diag: &[f64],
    y: &[f64],
    noise_sd: f64,
) -> Result<PosteriorSummary> {
    let m = y.len();
    check_square(kmm, m)?;
    if k_tm.ncols() != m || k_tm.nrows() != k_diag.len() {
        return Err(invalid("cross block does not match the labeled and test sets"));
    }
    let (ch, _) = cholesky_jittered(&noisy(kmm, noise_sd)?)?;
    let alpha = ch.solve(&DVector::from_column_slice(y));
    let mean = (k_tm * &alpha).iter().copied().collect();
    let mut v = k_tm.transpose();
    ch.l_dirty().solve_lower_triangular_mut(&mut v);
    let variance = k_diag
        .iter()
        .enumerate()
        .map(|(i, kss)| (kss - v.column(i).norm_squared()).max(0.0))
        .collect();
    Ok(PosteriorSummary { mean, variance, class_prob: None })
}

/// Laplace approximation at the posterior mode of a logistic GP.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: Vec<f64>,
    /// `K⁻¹ f̂`, equal to `y − π̂` at the mode.
    pub a: Vec<f64>,
    pub pi: Vec<f64>,
    /// Site precisions `π̂(1 − π̂)`.
    pub w: Vec<f64>,
    pub iterations: usize,
    /// ∞-norm of `(y − π) − a` at the returned mode.
    pub gradient_norm: f64,
    /// Laplace approximation of the log marginal likelihood.
    pub log_evidence: f64,
    chol_b: Cholesky<f64, Dyn>,
}

pub const LAPLACE_TOL: f64 = 1e-6;
pub const LAPLACE_MAX_ITER: usize = 100;

struct NewtonState {
    f: DVector<f64>,
    a: DVector<f64>,
    psi: f64,
}

fn log_lik(y: &[f64], f: &DVector<f64>) -> f64 {
    y.iter().zip(f.iter()).map(|(&yi, &fi)| yi * fi - softplus(fi)).sum()
}

fn state(kmm: &DMatrix<f64>, y: &[f64], a: DVector<f64>) -> NewtonState {
    let f = kmm * &a;
    let psi = -0.5 * a.dot(&f) + log_lik(y, &f);
    NewtonState { f, a, psi }
}

/// Mode-finding Newton iteration with step halving for `y ∈ {0,1}^m`.
pub fn laplace_fit(kmm: &DMatrix<f64>, y: &[f64]) -> Result<LaplaceFit> {
    let m = y.len();
    check_square(kmm, m)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("classification labels must be 0 or 1"));
    }
    let mut cur = state(kmm, y, DVector::zeros(m));
    let mut iterations = 0;
    loop {
        let pi: Vec<f64> = cur.f.iter().map(|&f| logistic(f)).collect();
        let grad = DVector::from_iterator(m, y.iter().zip(&pi).map(|(y, p)| y - p)) - &cur.a;
        let gnorm = grad.amax();
        let w: Vec<f64> = pi.iter().map(|p| p * (1.0 - p)).collect();
        let sw = DVector::from_iterator(m, w.iter().map(|w| w.sqrt()));
        let mut b = DMatrix::from_fn(m, m, |i, j| sw[i] * kmm[(i, j)] * sw[j]);
        for i in 0..m {
            b[(i, i)] += 1.0;
        }
        let (chol_b, _) = cholesky_jittered(&b)?;
        if gnorm < LAPLACE_TOL || iterations >= LAPLACE_MAX_ITER {
            if gnorm >= LAPLACE_TOL {
                return Err(Error::NonConvergence { solver: "laplace newton", iterations, residual: gnorm });
            }
            let log_evidence = cur.psi - chol_b.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            return Ok(LaplaceFit {
                mode: cur.f.iter().copied().collect(),
                a: cur.a.iter().copied().collect(),
                pi,
                w,
                iterations,
                gradient_norm: gnorm,
                log_evidence,
                chol_b,
            });
        }
        iterations += 1;
        // Newton step in the a-parameterization.
        let bvec = DVector::from_iterator(
            m,
            (0..m).map(|i| w[i] * cur.f[i] + (y[i] - pi[i])),
        );
        let kb = kmm * &bvec;
        let rhs = sw.component_mul(&kb);
        let sol = chol_b.solve(&rhs);
        let a_new = &bvec - sw.component_mul(&sol);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let a_try = &cur.a + (&a_new - &cur.a) * step;
            let next = state(kmm, y, a_try);
            if next.psi >= cur.psi {
                cur = next;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent possible at machine precision: report the gradient.
            iterations = LAPLACE_MAX_ITER;
        }
    }
}

/// Latent predictive moments and class probabilities from a Laplace fit.
pub fn laplace_predict(fit: &LaplaceFit, k_tm: &DMatrix<f64>, k_diag: &[f64]) -> Result<PosteriorSummary> {
    let m = fit.mode.len();
    if k_tm.ncols() != m || k_tm.nrows() != k_diag.len() {
        return Err(invalid("cross block does not match the labeled and test sets"));
    }
    let resid = DVector::from_iterator(m, fit.a.iter().copied());
    let mean: Vec<f64> = (k_tm * &resid).iter().copied().collect();
    let sw: Vec<f64> = fit.w.iter().map(|w| w.sqrt()).collect();
    let mut v = k_tm.transpose();
    for (i, mut row) in v.row_iter_mut().enumerate() {
        row.scale_mut(sw[i]);
    }
    fit.chol_b.l_dirty().solve_lower_triangular_mut(&mut v);
    let variance: Vec<f64> =
        k_diag.iter().enumerate().map(|(i, kss)| (kss - v.column(i).norm_squared()).max(0.0)).collect();
    let class_prob = mean.iter().zip(&variance).map(|(&mu, &var)| predict_prob(mu, var)).collect();
    Ok(PosteriorSummary { mean, variance, class_prob: Some(class_prob) })
}

/// `E[logistic(f)]` for `f ~ N(μ, var)` by Gauss–Hermite quadrature
/// (20 nodes for `var ≤ 1`, 100 nodes up to `var = 10`). Wider latents are
/// integrated as a step function plus a smooth remainder, see
/// [`wide_prob`].
pub fn predict_prob(mu: f64, var: f64) -> f64 {
    if !(var > 0.0) {
        return logistic(mu);
    }
    if var > WIDE_VAR {
        return wide_prob(mu, var);
    }
    let (x, w) = if var <= 1.0 { gauss_hermite_20() } else { gauss_hermite_100() };
    let s = (2.0 * var).sqrt();
    let total: f64 = x.iter().zip(w).map(|(x, w)| w * logistic(mu + s * x)).sum();
    (total / std::f64::consts::PI.sqrt()).clamp(0.0, 1.0)
}

const WIDE_VAR: f64 = 10.0;
const WIDE_CUTOFF: f64 = 40.0;
const WIDE_INTERVALS: usize = 2000;

/// `logistic(u) = 1{u > 0} + g(u)` with `g` odd and `|g(u)| ≤ e^{−|u|}`. The
/// step contributes `Φ(μ/sd)` exactly; `g` is folded onto `u > 0` and
/// integrated by composite Simpson on `[0, 40]`.
fn wide_prob(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let pdf = |u: f64| {
        let z = (u - mu) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    let g = |u: f64| logistic(-u) * (pdf(-u) - pdf(u));
    let h = WIDE_CUTOFF / WIDE_INTERVALS as f64;
    let mut acc = g(0.0) + g(WIDE_CUTOFF);
    for i in 1..WIDE_INTERVALS {
        acc += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let step = 0.5 * libm::erfc(-mu / (sd * std::f64::consts::SQRT_2));
    (step + acc * h / 3.0).clamp(0.0, 1.0)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(invalid("metric on empty input"));
    }
    if a != b {
        return Err(invalid(format!("metric inputs have lengths {a} and {b}")));
    }
    Ok(())
}

/// Fraction misclassified at threshold ½ (ties go to class 1).
pub fn metric_error_rate(prob: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(prob.len(), truth.len())?;
    let wrong = prob.iter().zip(truth).filter(|(p, t)| (if **p >= 0.5 { 1.0 } else { 0.0 }) != **t).count();
    Ok(wrong as f64 / prob.len() as f64)
}

pub fn metric_rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Probabilities are clamped away from 0 and 1 by this much.
const PROB_FLOOR: f64 = 1e-300;

/// Mean `−log p(y)` under Bernoulli predictions.
pub fn metric_nll_bernoulli(prob: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(prob.len(), truth.len())?;
    let total: f64 = prob
        .iter()
        .zip(truth)
        .map(|(&p, &t)| -(if t == 1.0 { p } else { 1.0 - p }).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / prob.len() as f64)
}

/// Mean `−log N(y; μ, var + σ²)`.
pub fn metric_nll_gaussian(mean: &[f64], variance: &[f64], noise_sd: f64, truth: &[f64]) -> Result<f64> {
    check_lengths(mean.len(), truth.len())?;
    check_lengths(variance.len(), truth.len())?;
    let total: f64 = mean
        .iter()
        .zip(variance)
        .zip(truth)
        .map(|((&mu, &var), &y)| {
            let s2 = var + noise_sd * noise_sd;
            0.5 * (LN_2PI + s2.ln() + (y - mu) * (y - mu) / s2)
        })
        .sum();
    Ok(total / mean.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid_prob(mu: f64, var: f64) -> f64 {
        let sd = var.sqrt();
        let n = 200_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += wgt * logistic(mu + sd * z) * (-0.5 * z * z).exp();
        }
        total * h / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn marginal_loglik_scalars() {
        let k1 = DMatrix::from_element(1, 1, 1.0);
        let v = gaussian_marginal_loglik(&DMatrix::zeros(1, 1), &[0.0], 1.0).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
        let v = gaussian_marginal_loglik(&k1, &[0.0], 1e-9).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-9);
    }

    #[test]
    fn marginal_loglik_permutation_invariant() {
        let k = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.3, 0.1, 0.3, 1.0]);
        let y = [0.3, -1.0, 2.0];
        let perm = [2, 0, 1];
        let kp = DMatrix::from_fn(3, 3, |i, j| k[(perm[i], perm[j])]);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = gaussian_marginal_loglik(&k, &y, 0.2).unwrap();
        let b = gaussian_marginal_loglik(&kp, &yp, 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn regression_scalar_conditional() {
        let rho = 0.6;
        let out = gp_regression_predict(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_row_slice(2, 1, &[rho, 0.0]),
            &[1.0, 2.0],
            &[1.5],
            1e-7,
        )
        .unwrap();
        assert!((out.mean[0] - rho * 1.5).abs() < 1e-10);
        assert!((out.variance[0] - (1.0 - rho * rho)).abs() < 1e-10);
        assert_eq!(out.mean[1], 0.0);
        assert_eq!(out.variance[1], 2.0);
    }

    #[test]
    fn regression_is_linear_in_y() {
        let k = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.3, 0.1, 0.3, 1.0]);
        let kt = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.1, 0.9, -0.1, 0.3]);
        let y1 = [0.3, -1.0, 2.0];
        let y2 = [1.0, 0.5, -0.7];
        let y: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let p = |y: &[f64]| gp_regression_predict(&k, &kt, &[1.0, 1.0], y, 0.3).unwrap().mean;
        let (a, b, c) = (p(&y1), p(&y2), p(&y));
        for i in 0..2 {
            assert!((c[i] - (2.0 * a[i] - 3.0 * b[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn laplace_symmetric_duplicates() {
        let k = DMatrix::from_element(2, 2, 1.3);
        let fit = laplace_fit(&k, &[0.0, 1.0]).unwrap();
        assert!((fit.mode[0] - fit.mode[1]).abs() < 1e-12);
        assert!((fit.pi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn laplace_zero_prior() {
        let fit = laplace_fit(&DMatrix::zeros(3, 3), &[1.0, 0.0, 1.0]).unwrap();
        assert!(fit.mode.iter().all(|f| *f == 0.0));
        assert!(fit.pi.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn laplace_gradient_recomputed() {
        let n = 12;
        let k = DMatrix::from_fn(n, n, |i, j| 4.0 * (-((i as f64 - j as f64).powi(2)) / 8.0).exp());
        let y: Vec<f64> = (0..n).map(|i| if i < 5 || i == 9 { 1.0 } else { 0.0 }).collect();
        let fit = laplace_fit(&k, &y).unwrap();
        // Gradient of log p(y|f) − ½ fᵀK⁻¹f via a solve independent of `a`.
        let f = DVector::from_vec(fit.mode.clone());
        let kinv_f = k.clone().lu().solve(&f).unwrap();
        let g = DVector::from_iterator(n, (0..n).map(|i| y[i] - logistic(f[i]))) - kinv_f;
        assert!(g.amax() < 1e-6, "{}", g.amax());
        let pred = laplace_predict(&fit, &k.rows(0, 2).into_owned(), &[4.0, 4.0]).unwrap();
        for (i, p) in pred.class_prob.unwrap().iter().enumerate() {
            assert!((*p >= 0.5) == (y[i] == 1.0));
        }
    }

    #[test]
    fn hermite_probabilities() {
        assert!((predict_prob(0.0, 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(predict_prob(0.7, 0.0), logistic(0.7));
        assert!((predict_prob(1.0, 1.0) - 0.6967347).abs() < 1e-7);
        for &mu in &[-8.0, -5.0, -1.0, 0.3, 2.0, 5.0, 8.0] {
            for &var in &[0.01, 0.5, 1.0, 3.0, 10.0, 10.5, 40.0, 300.0] {
                let d = (predict_prob(mu, var) - trapezoid_prob(mu, var)).abs();
                assert!(d < 1e-6, "mu={mu} var={var} diff={d}");
            }
        }
    }

    #[test]
    fn metrics() {
        assert_eq!(metric_error_rate(&[0.9, 0.1, 0.5], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(metric_error_rate(&[0.5], &[0.0]).unwrap(), 1.0);
        assert!((metric_nll_bernoulli(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((metric_nll_bernoulli(&[0.8], &[1.0]).unwrap() - 0.2231435513142097).abs() < 1e-15);
        assert_eq!(metric_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(metric_rmse(&[], &[]).is_err());
        let nll = metric_nll_gaussian(&[0.0], &[0.5], (0.5f64).sqrt(), &[0.0]).unwrap();
        assert!((nll - 0.5 * LN_2PI).abs() < 1e-15);
    }
}
