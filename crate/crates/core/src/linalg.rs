//! Dense helpers: symmetric eigensolvers, jittered Cholesky, Gauss–Hermite rules.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng_from_seed;

/// A symmetric linear operator applied to blocks of column vectors.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
}

/// Eigenpairs sorted by decreasing eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    /// `dim × k`, orthonormal columns.
    pub vectors: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovOptions {
    /// Residual tolerance relative to the largest Ritz value magnitude.
    pub tol: f64,
    /// Budget of operator applications (counted per column).
    pub max_matvecs: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl KrylovOptions {
    pub fn for_count(k: usize, seed: u64) -> Self {
        Self { tol: 1e-10, max_matvecs: 1000 * k.max(1), block_size: 16, seed }
    }
}

/// Operators at most this large are solved densely.
pub const DENSE_EIGEN_LIMIT: usize = 512;

/// Full symmetric eigendecomposition, sorted by decreasing eigenvalue.
pub fn dense_symmetric_eigen(a: DMatrix<f64>) -> Eigenpairs {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Eigenpairs { values, vectors }
}

/// Flip each column so its largest-magnitude entry is positive (ties to the
/// first index).
pub fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col.len() > 0 && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn materialize(op: &dyn SymmetricOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut a = op.apply(&DMatrix::identity(n, n));
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// The `k` algebraically largest eigenpairs of a symmetric operator.
///
/// Small operators are materialized and solved densely; larger ones use
/// block Lanczos with full reorthogonalization and an explicit residual
/// check of the returned pairs.
pub fn top_eigenpairs(op: &dyn SymmetricOperator, k: usize, opts: &KrylovOptions) -> Result<Eigenpairs> {
    let n = op.dim();
    let k = k.min(n);
    if n <= DENSE_EIGEN_LIMIT || 2 * k + 2 * opts.block_size >= n {
        let mut all = dense_symmetric_eigen(materialize(op));
        all.values.truncate(k);
        all.vectors = all.vectors.columns(0, k).into_owned();
        return Ok(all);
    }
    block_lanczos(op, k, opts)
}

fn random_block(n: usize, b: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, b, |_, _| StandardNormal.sample(rng))
}

/// Orthogonalize `w` against the columns of `basis` (two passes); returns
/// the accumulated coefficients.
fn project_out(basis: &DMatrix<f64>, w: &mut DMatrix<f64>) -> DMatrix<f64> {
    let mut h = basis.tr_mul(w);
    *w -= basis * &h;
    let h2 = basis.tr_mul(w);
    *w -= basis * &h2;
    h += h2;
    h
}

/// QR of a block already orthogonal to the basis. Columns that vanish are
/// replaced by random vectors orthogonal to everything so far.
fn orthonormalize_block(
    basis: &DMatrix<f64>,
    w: &mut DMatrix<f64>,
    scale: &[f64],
    rng: &mut crate::Rng,
) -> Option<DMatrix<f64>> {
    let (n, b) = w.shape();
    let mut r = DMatrix::zeros(b, b);
    for c in 0..b {
        for _pass in 0..2 {
            for q in 0..c {
                let d = w.column(q).dot(&w.column(c));
                r[(q, c)] += d;
                let qc = w.column(q).clone_owned();
                w.column_mut(c).axpy(-d, &qc, 1.0);
            }
        }
        let nrm = w.column(c).norm();
        if nrm > 1e-10 * scale[c].max(f64::MIN_POSITIVE) && nrm > 0.0 {
            r[(c, c)] = nrm;
            w.column_mut(c).scale_mut(1.0 / nrm);
            continue;
        }
        // Deflation: substitute a fresh direction.
        let mut found = false;
        for _attempt in 0..3 {
            let mut x = random_block(n, 1, rng);
            if basis.ncols() > 0 {
                project_out(basis, &mut x);
            }
            for _pass in 0..2 {
                for q in 0..c {
                    let d = w.column(q).dot(&x.column(0));
                    let qc = w.column(q).clone_owned();
                    x.column_mut(0).axpy(-d, &qc, 1.0);
                }
            }
            let xn = x.norm();
            if xn > 1e-8 {
                w.set_column(c, &(x.column(0) / xn));
                for q in 0..b {
                    r[(c, q)] = 0.0;
                }
                found = true;
                break;
            }
        }
        if !found {
            return None;
        }
    }
    Some(r)
}

fn block_lanczos(op: &dyn SymmetricOperator, k: usize, opts: &KrylovOptions) -> Result<Eigenpairs> {
    let n = op.dim();
    let b = opts.block_size.clamp(1, n);
    let mut rng = rng_from_seed(opts.seed);
    let max_dim = n.min((3 * k).max(k + 8 * b));
    let keep = (k + b).min(max_dim.saturating_sub(b)).max(k);

    let mut basis = random_block(n, b, &mut rng);
    let ones = vec![1.0; b];
    orthonormalize_block(&DMatrix::zeros(n, 0), &mut basis, &ones, &mut rng)
        .ok_or_else(|| Error::Fit("eigensolver start block is degenerate".into()))?;
    // Projected matrix over the processed part of the basis.
    let mut t = DMatrix::zeros(0, 0);
    let mut processed = 0usize;
    let mut matvecs = 0usize;
    let mut next_check = (k + 2 * b).min(max_dim);

    loop {
        let start = processed;
        let cur = basis.columns(start, basis.ncols() - start).into_owned();
        let mut w = op.apply(&cur);
        matvecs += cur.ncols();
        let col_scale: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
        let h = project_out(&basis, &mut w);
        processed = basis.ncols();

        let mut t_new = DMatrix::zeros(processed, processed);
        t_new.view_mut((0, 0), (start, start)).copy_from(&t);
        for (cj, j) in (start..processed).enumerate() {
            for i in 0..=j {
                let v = if i >= start { 0.5 * (h[(i, cj)] + h[(j, i - start)]) } else { h[(i, cj)] };
                t_new[(i, j)] = v;
                t_new[(j, i)] = v;
            }
        }
        t = t_new;

        let r = if processed < n { orthonormalize_block(&basis, &mut w, &col_scale, &mut rng) } else { None };
        let full = processed + w.ncols() > max_dim;
        let out_of_budget = matvecs >= opts.max_matvecs;

        if processed >= next_check || r.is_none() || full || out_of_budget {
            let eig = dense_symmetric_eigen(t.clone());
            let kk = k.min(processed);
            let scale = eig.values.iter().take(kk).fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let mut worst = 0.0f64;
            if let Some(r) = &r {
                let tail = eig.vectors.view((processed - cur.ncols(), 0), (cur.ncols(), kk)).into_owned();
                let est = r * tail;
                for c in 0..kk {
                    worst = worst.max(est.column(c).norm());
                }
            }
            let mut last_residual = worst / scale;
            if last_residual <= opts.tol || r.is_none() {
                let y = eig.vectors.columns(0, kk).into_owned();
                let mut x = &basis * &y;
                let ax = op.apply(&x);
                matvecs += kk;
                let mut true_worst = 0.0f64;
                for c in 0..kk {
                    let res = ax.column(c) - x.column(c) * eig.values[c];
                    true_worst = true_worst.max(res.norm());
                }
                last_residual = true_worst / scale;
                if last_residual <= 100.0 * opts.tol.max(1e-13) || r.is_none() {
                    orthonormalize_columns(&mut x);
                    return Ok(Eigenpairs { values: eig.values[..kk].to_vec(), vectors: x });
                }
            }
            if out_of_budget {
                return Err(Error::NonConvergence {
                    solver: "block lanczos",
                    iterations: matvecs,
                    residual: last_residual,
                });
            }
            if full {
                // Thick restart on the leading Ritz vectors plus the residual block.
                let kept = keep.min(processed);
                let x = &basis * eig.vectors.columns(0, kept);
                let mut restarted = DMatrix::zeros(n, kept + w.ncols());
                restarted.columns_mut(0, kept).copy_from(&x);
                restarted.columns_mut(kept, w.ncols()).copy_from(&w);
                basis = restarted;
                t = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&eig.values[..kept]));
                processed = kept;
                next_check = (kept + b).min(max_dim);
                continue;
            }
            next_check = (processed + processed / 4).max(processed + b).min(max_dim);
        }
        let add = w.ncols().min(n - processed);
        let mut grown = DMatrix::zeros(n, processed + add);
        grown.columns_mut(0, processed).copy_from(&basis);
        grown.columns_mut(processed, add).copy_from(&w.columns(0, add));
        basis = grown;
    }
}

/// Modified Gram–Schmidt on the columns, in place.
pub fn orthonormalize_columns(v: &mut DMatrix<f64>) {
    for c in 0..v.ncols() {
        for _pass in 0..2 {
            for q in 0..c {
                let d = v.column(q).dot(&v.column(c));
                let qc = v.column(q).clone_owned();
                v.column_mut(c).axpy(-d, &qc, 1.0);
            }
        }
        let nrm = v.column(c).norm();
        if nrm > 0.0 {
            v.column_mut(c).scale_mut(1.0 / nrm);
        }
    }
}

/// Number of jitter escalations (decades) tried before giving up.
pub const JITTER_DECADES: i32 = 3;
pub const BASE_JITTER: f64 = 1e-10;

/// Cholesky of a symmetric matrix. Tries the matrix as is, then adds
/// `BASE_JITTER · 10^k · trace/m` for `k = 0..=JITTER_DECADES`.
/// Returns the factor and the jitter actually added.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        if ch.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            return Ok((ch, 0.0));
        }
    }
    let m = a.nrows().max(1) as f64;
    let base = (a.trace() / m).abs().max(f64::MIN_POSITIVE) * BASE_JITTER;
    let mut jitter = base;
    for _ in 0..=JITTER_DECADES {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(b) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { jitter: jitter / 10.0 })
}

/// Physicists' Gauss–Hermite rule `(nodes, weights)` with `N` nodes,
/// computed by the Golub–Welsch eigenvalue method.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(nodes, nodes);
    for k in 1..nodes {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..nodes)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove rounding asymmetry.
    let n = pairs.len();
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[n - 1 - i].1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

pub(crate) fn gauss_hermite_20() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(20))
}

pub(crate) fn gauss_hermite_100() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(100))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let a = random_block(n, n, &mut rng);
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn dense_eigen_sorted_descending() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = dense_symmetric_eigen(a);
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sign_convention() {
        let mut v = DMatrix::from_column_slice(3, 2, &[0.1, -0.9, 0.3, 0.5, -0.5, 0.1]);
        fix_signs(&mut v);
        assert_eq!(v.column(0).as_slice(), &[-0.1, 0.9, -0.3]);
        assert_eq!(v.column(1).as_slice(), &[0.5, -0.5, 0.1]);
    }

    #[test]
    fn lanczos_matches_dense() {
        let n = 700;
        let a = random_symmetric(n, 3);
        let dense = dense_symmetric_eigen(a.clone());
        let got = top_eigenpairs(&a, 12, &KrylovOptions::for_count(12, 9)).unwrap();
        for i in 0..12 {
            assert!((got.values[i] - dense.values[i]).abs() < 1e-8, "{i}");
            let d = got.vectors.column(i).dot(&dense.vectors.column(i)).abs();
            assert!((d - 1.0).abs() < 1e-6, "{i}: {d}");
        }
    }

    #[test]
    fn lanczos_handles_multiplicity() {
        // Four-fold top eigenvalue 1 on a 600-dimensional diagonal operator.
        let n = 600;
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = if i % 150 == 0 { 1.0 } else { 0.9 * (i as f64 / n as f64) };
        }
        let got = top_eigenpairs(&d, 6, &KrylovOptions::for_count(6, 1)).unwrap();
        for i in 0..4 {
            assert!((got.values[i] - 1.0).abs() < 1e-10);
        }
        assert!(got.values[4] < 0.9);
        let gram = got.vectors.tr_mul(&got.vectors);
        assert!((gram - DMatrix::identity(6, 6)).abs().max() < 1e-10);
    }

    #[test]
    fn jittered_cholesky() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let (ch, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-7);
        let rec = ch.l() * ch.l().transpose();
        assert!((rec - a).abs().max() < 1e-6);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&bad), Err(Error::Conditioning { .. })));
    }

    #[test]
    fn hermite_rule_integrates_polynomials() {
        for n in [20, 100] {
            let (x, w) = gauss_hermite(n);
            let sqrt_pi = std::f64::consts::PI.sqrt();
            let m0: f64 = w.iter().sum();
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            assert!((m0 - sqrt_pi).abs() < 1e-13);
            assert!((m2 - sqrt_pi / 2.0).abs() < 1e-13);
            assert!((m4 - 0.75 * sqrt_pi).abs() < 1e-12);
        }
    }
}
