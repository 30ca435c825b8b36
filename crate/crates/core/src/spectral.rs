//! Laplacian spectra: truncated SVD of `ZΛ^{-1/2}`, the dense oracle, and
//! the one-step (GLGP) and Nyström spectra.

use nalgebra::DMatrix;

use crate::basekernel::se_value;
use crate::data::PointCloud;
use crate::error::{invalid, Error, Result};
use crate::graph::{OneStepOperators, SimilarityMatrix, TransitionPair};
use crate::linalg::{
    dense_symmetric_eigen, fix_signs, top_eigenpairs, Eigenpairs, KrylovOptions, SymmetricOperator,
    DENSE_EIGEN_LIMIT,
};
use crate::sparse::SparseCrossMatrix;

/// Singular values below this count as numerical rank deficiency.
pub const RANK_TOL: f64 = 1e-6;

/// `M` Laplacian eigenvalues (nondecreasing) with unit-norm eigenvectors
/// over the point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSpectrum {
    eigenvalues: Vec<f64>,
    /// Row-major `n × M`.
    vectors: Vec<f64>,
    n: usize,
    /// Fewer pairs than requested were returned.
    pub truncated: bool,
}

impl LaplacianSpectrum {
    /// From eigenvalues and an `n × M` matrix of eigenvector columns.
    pub fn new(eigenvalues: Vec<f64>, vectors: &DMatrix<f64>) -> Result<Self> {
        if vectors.ncols() != eigenvalues.len() {
            return Err(invalid(format!("{} eigenvalues for {} vectors", eigenvalues.len(), vectors.ncols())));
        }
        let n = vectors.nrows();
        let m = eigenvalues.len();
        let mut flat = vec![0.0; n * m];
        for k in 0..m {
            for i in 0..n {
                flat[i * m + k] = vectors[(i, k)];
            }
        }
        Ok(Self { eigenvalues, vectors: flat, n, truncated: false })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of retained eigenpairs.
    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Row `i` of the eigenvector matrix (length `M`).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.m();
        &self.vectors[i * m..(i + 1) * m]
    }

    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i)[k]).collect()
    }

    pub fn vectors_dense(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m(), &self.vectors)
    }

    /// Keep the first `m` pairs.
    pub fn truncate(&mut self, m: usize) {
        let old = self.m();
        if m >= old {
            return;
        }
        let mut flat = Vec::with_capacity(self.n * m);
        for i in 0..self.n {
            flat.extend_from_slice(&self.vectors[i * old..i * old + m]);
        }
        self.vectors = flat;
        self.eigenvalues.truncate(m);
    }
}

/// `w ↦ Bᵀ(B w)` with `B = ZΛ^{-1/2}`, applied matrix-free.
struct GramOperator<'a> {
    b: &'a SparseCrossMatrix,
}

impl SymmetricOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.b.ncols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.b.tmul_dense(&self.b.mul_dense(x))
    }
}

impl SymmetricOperator for SparseCrossMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.mul_dense(x)
    }
}

/// Dense `BᵀB` accumulated row by row (cost `O(n r²)`).
fn dense_gram(b: &SparseCrossMatrix) -> DMatrix<f64> {
    let s = b.ncols();
    let mut g = DMatrix::zeros(s, s);
    for i in 0..b.nrows() {
        let (cols, vals) = b.row(i);
        for (a, &j) in cols.iter().enumerate() {
            for (c, &k) in cols.iter().enumerate().skip(a) {
                g[(j, k)] += vals[a] * vals[c];
            }
        }
    }
    for k in 0..s {
        for j in 0..k {
            g[(k, j)] = g[(j, k)];
        }
    }
    g
}

/// Top-`M` singular triplets of `ZΛ^{-1/2}`, returned as Laplacian
/// eigenpairs `λ = 1 − σ` with left singular vectors.
///
/// `max_iter` bounds the number of operator applications.
pub fn truncated_svd(tp: &TransitionPair, m: usize, tol: f64, max_iter: usize, seed: u64) -> Result<LaplacianSpectrum> {
    let s = tp.s();
    if m == 0 || m > s {
        return Err(invalid(format!("requested {m} eigenpairs from {s} landmarks")));
    }
    let b = tp.b_matrix();
    let eig = if s <= DENSE_EIGEN_LIMIT {
        let mut all = dense_symmetric_eigen(dense_gram(&b));
        all.values.truncate(m);
        all.vectors = all.vectors.columns(0, m).into_owned();
        all
    } else {
        let opts = KrylovOptions { tol, max_matvecs: max_iter, block_size: 16, seed };
        top_eigenpairs(&GramOperator { b: &b }, m, &opts)?
    };
    left_vectors(&b, eig)
}

fn left_vectors(b: &SparseCrossMatrix, eig: Eigenpairs) -> Result<LaplacianSpectrum> {
    let requested = eig.values.len();
    let sigma: Vec<f64> = eig.values.iter().map(|&mu| mu.max(0.0).sqrt()).collect();
    let keep = sigma.iter().take_while(|&&x| x > RANK_TOL).count();
    if keep == 0 {
        return Err(Error::Fit("transition operator has numerical rank zero".into()));
    }
    if keep < requested {
        log::warn!("numerical rank {keep} below requested {requested} eigenpairs");
    }
    let w = eig.vectors.columns(0, keep).into_owned();
    let mut v = b.mul_dense(&w);
    for (k, mut col) in v.column_iter_mut().enumerate() {
        col.scale_mut(1.0 / sigma[k]);
        let nrm = col.norm();
        col.scale_mut(1.0 / nrm);
    }
    fix_signs(&mut v);
    let lambda = sigma[..keep].iter().map(|x| (1.0 - x).clamp(0.0, 1.0)).collect();
    let mut spec = LaplacianSpectrum::new(lambda, &v)?;
    spec.truncated = keep < requested;
    Ok(spec)
}

/// Largest cloud accepted by [`dense_eig_oracle`].
pub const ORACLE_LIMIT: usize = 2000;

/// Dense reference: eigendecomposition of `ZΛ^{-1}Zᵀ`, `λ = 1 − √μ`.
pub fn dense_eig_oracle(tp: &TransitionPair, m: usize) -> Result<LaplacianSpectrum> {
    if tp.n() > ORACLE_LIMIT {
        return Err(Error::Size { what: "dense eigen oracle", size: tp.n(), limit: ORACLE_LIMIT });
    }
    if m == 0 || m > tp.n() {
        return Err(invalid(format!("requested {m} eigenpairs from {} points", tp.n())));
    }
    let eig = dense_symmetric_eigen(tp.two_step_dense()?);
    let mut v = eig.vectors.columns(0, m).into_owned();
    fix_signs(&mut v);
    let lambda = eig.values[..m].iter().map(|&mu| (1.0 - mu.max(0.0).sqrt()).clamp(0.0, 1.0)).collect();
    LaplacianSpectrum::new(lambda, &v)
}

/// One-step spectrum: `λ̄ = 1 − eig(Z̄)` for the `M` largest eigenvalues of
/// `Z̄`, solved through the symmetric conjugate and mapped back.
pub fn one_step_spectrum(ops: OneStepOperators, m: usize, seed: u64) -> Result<LaplacianSpectrum> {
    let n = ops.n();
    if m == 0 || m > n {
        return Err(invalid(format!("requested {m} eigenpairs from {n} points")));
    }
    let (sym, degree) = ops.into_symmetric();
    let eig = blockwise_top_eigenpairs(&sym, m, seed)?;
    drop(sym);
    let mut v = eig.vectors;
    for mut col in v.column_iter_mut() {
        for (x, d) in col.iter_mut().zip(&degree) {
            *x /= d.sqrt();
        }
        let nrm = col.norm();
        col.scale_mut(1.0 / nrm);
    }
    fix_signs(&mut v);
    let lambda = eig.values.iter().map(|mu| (1.0 - mu).max(0.0)).collect();
    LaplacianSpectrum::new(lambda, &v)
}

/// Entries of the normalized similarity below this fraction of the larger
/// row maximum do not connect points when splitting into components.
pub const COMPONENT_CUTOFF: f64 = f64::EPSILON;

/// Components up to this size are solved densely.
const DENSE_COMPONENT_LIMIT: usize = 1200;

fn row_maxima(sym: &SimilarityMatrix) -> Vec<f64> {
    match sym {
        SimilarityMatrix::Dense(a) => a.column_iter().map(|c| c.amax()).collect(),
        SimilarityMatrix::Sparse(a) => {
            (0..a.nrows()).map(|i| a.row(i).1.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
        }
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the similarity graph, ordered by smallest member.
pub fn similarity_components(sym: &SimilarityMatrix) -> Vec<Vec<usize>> {
    let n = match sym {
        SimilarityMatrix::Dense(a) => a.nrows(),
        SimilarityMatrix::Sparse(a) => a.nrows(),
    };
    let rmax = row_maxima(sym);
    let mut parent: Vec<usize> = (0..n).collect();
    let link = |i: usize, j: usize, v: f64, parent: &mut Vec<usize>| {
        if i != j && v.abs() > COMPONENT_CUTOFF * rmax[i].max(rmax[j]) {
            let (a, b) = (find(parent, i), find(parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    };
    match sym {
        SimilarityMatrix::Dense(a) => {
            for j in 0..n {
                for i in 0..j {
                    link(i, j, a[(i, j)], &mut parent);
                }
            }
        }
        SimilarityMatrix::Sparse(a) => {
            for i in 0..n {
                let (cols, vals) = a.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    link(i, j, v, &mut parent);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[r]].push(i);
    }
    comps
}

fn component_block(sym: &SimilarityMatrix, members: &[usize]) -> Result<SimilarityMatrix> {
    Ok(match sym {
        SimilarityMatrix::Dense(a) => SimilarityMatrix::Dense(a.select_rows(members).select_columns(members)),
        SimilarityMatrix::Sparse(a) => {
            let mut local = vec![usize::MAX; a.ncols()];
            for (l, &g) in members.iter().enumerate() {
                local[g] = l;
            }
            let rows = members.iter().map(|&g| {
                let (cols, vals) = a.row(g);
                cols.iter()
                    .zip(vals)
                    .filter(|(c, _)| local[**c] != usize::MAX)
                    .map(|(c, v)| (local[*c], *v))
                    .collect::<Vec<_>>()
            });
            SimilarityMatrix::Sparse(SparseCrossMatrix::from_rows(members.len(), rows)?)
        }
    })
}

fn solve_block(sym: &SimilarityMatrix, k: usize, seed: u64) -> Result<Eigenpairs> {
    let opts = KrylovOptions::for_count(k, seed);
    match sym {
        SimilarityMatrix::Dense(a) if a.nrows() <= DENSE_COMPONENT_LIMIT => {
            let mut all = dense_symmetric_eigen(a.clone());
            all.values.truncate(k);
            all.vectors = all.vectors.columns(0, k).into_owned();
            Ok(all)
        }
        SimilarityMatrix::Sparse(a) if a.nrows() <= DENSE_COMPONENT_LIMIT => {
            let mut all = dense_symmetric_eigen(a.to_dense());
            all.values.truncate(k);
            all.vectors = all.vectors.columns(0, k).into_owned();
            Ok(all)
        }
        SimilarityMatrix::Dense(a) => top_eigenpairs(a, k, &opts),
        SimilarityMatrix::Sparse(a) => top_eigenpairs(a, k, &opts),
    }
}

/// Top `m` eigenpairs of the normalized similarity, solved separately on
/// each connected component and merged.
fn blockwise_top_eigenpairs(sym: &SimilarityMatrix, m: usize, seed: u64) -> Result<Eigenpairs> {
    let comps = similarity_components(sym);
    if comps.len() == 1 {
        return solve_block(sym, m, seed);
    }
    let n = comps.iter().map(Vec::len).sum();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    let mut solved = Vec::with_capacity(comps.len());
    for (c, members) in comps.iter().enumerate() {
        let k = m.min(members.len());
        let block = component_block(sym, members)?;
        let eig = solve_block(&block, k, seed.wrapping_add(c as u64))?;
        pairs.extend(eig.values.iter().enumerate().map(|(l, &v)| (v, c, l)));
        solved.push(eig);
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs.truncate(m);
    let mut vectors = DMatrix::zeros(n, pairs.len());
    for (col, &(_, c, l)) in pairs.iter().enumerate() {
        for (r, &g) in comps[c].iter().enumerate() {
            vectors[(g, col)] = solved[c].vectors[(r, l)];
        }
    }
    Ok(Eigenpairs { values: pairs.iter().map(|p| p.0).collect(), vectors })
}

/// Eigenvalues of `Z̄` below this magnitude are not extended.
pub const NYSTROM_MIN_EIGENVALUE: f64 = 1e-8;

/// Nyström one-step spectrum: the one-step operator is built on the
/// `landmarks` only and its eigenvectors are extended to every point by
/// `φ(x) = Σ_j Z̄(x,j) φ(u_j) / μ`, then l²-normalized over the cloud.
pub fn nystrom_spectrum(
    cloud: &PointCloud,
    landmarks: &[usize],
    epsilon: f64,
    m: usize,
    seed: u64,
) -> Result<LaplacianSpectrum> {
    let sub = cloud.select(landmarks);
    let s = sub.n();
    let ops = crate::graph::one_step_operators(&sub, epsilon, crate::graph::OneStepPattern::Dense)?;
    if m == 0 || m > s {
        return Err(invalid(format!("requested {m} eigenpairs from {s} landmarks")));
    }
    // Landmark kernel column sums K̄_·j.
    let kbar_cols: Vec<f64> = (0..s)
        .map(|j| (0..s).map(|i| se_value(sub.point(i), sub.point(j), epsilon)).sum())
        .collect();
    let (sym, degree) = ops.into_symmetric();
    let a = match sym {
        SimilarityMatrix::Dense(a) => a,
        SimilarityMatrix::Sparse(a) => a.to_dense(),
    };
    let eig = top_eigenpairs(&a, m, &KrylovOptions::for_count(m, seed))?;
    let keep = eig.values.iter().take_while(|&&mu| mu > NYSTROM_MIN_EIGENVALUE).count();
    if keep == 0 {
        return Err(Error::Fit("Nyström operator has no positive eigenvalue".into()));
    }
    // Right eigenvectors of Z̄ on the landmarks, pre-divided by μ.
    let mut phi = eig.vectors.columns(0, keep).into_owned();
    for (k, mut col) in phi.column_iter_mut().enumerate() {
        for (x, d) in col.iter_mut().zip(&degree) {
            *x /= d.sqrt();
        }
        col.scale_mut(1.0 / eig.values[k]);
    }
    let n = cloud.n();
    let mut ext = DMatrix::zeros(n, keep);
    let mut row = vec![0.0; s];
    for x in 0..n {
        let p = cloud.point(x);
        let mut kx = 0.0;
        for j in 0..s {
            row[j] = se_value(p, sub.point(j), epsilon);
            kx += row[j];
        }
        if !(kx > 0.0) {
            return Err(Error::EmptyRow { point: x });
        }
        let mut total = 0.0;
        for j in 0..s {
            row[j] /= kx * kbar_cols[j];
            total += row[j];
        }
        for k in 0..keep {
            let mut acc = 0.0;
            for j in 0..s {
                acc += row[j] * phi[(j, k)];
            }
            ext[(x, k)] = acc / total;
        }
    }
    for mut col in ext.column_iter_mut() {
        let nrm = col.norm();
        col.scale_mut(1.0 / nrm);
    }
    fix_signs(&mut ext);
    let lambda = eig.values[..keep].iter().map(|mu| (1.0 - mu).max(0.0)).collect();
    let mut spec = LaplacianSpectrum::new(lambda, &ext)?;
    spec.truncated = keep < m;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{one_step_operators, row_normalize, OneStepPattern};

    fn pair(rows: Vec<Vec<(usize, f64)>>, s: usize) -> TransitionPair {
        row_normalize(&SparseCrossMatrix::from_rows(s, rows).unwrap()).unwrap()
    }

    #[test]
    fn single_landmark_two_points() {
        let tp = pair(vec![vec![(0, 1.0)], vec![(0, 1.0)]], 1);
        let spec = truncated_svd(&tp, 1, 1e-10, 1000, 0).unwrap();
        assert!(spec.eigenvalues()[0].abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((spec.row(0)[0] - h).abs() < 1e-15 && (spec.row(1)[0] - h).abs() < 1e-15);
    }

    #[test]
    fn symmetric_two_by_two() {
        for z in [0.9, 0.6, 0.2] {
            let tp = pair(vec![vec![(0, z), (1, 1.0 - z)], vec![(0, 1.0 - z), (1, z)]], 2);
            let spec = truncated_svd(&tp, 2, 1e-10, 1000, 0).unwrap();
            assert!(spec.eigenvalues()[0].abs() < 1e-14);
            assert!((spec.eigenvalues()[1] - (1.0 - (2.0 * z - 1.0f64).abs())).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_oracle() {
        let tp = pair(vec![vec![(0, 0.3), (1, 0.7)]; 4], 2);
        let spec = dense_eig_oracle(&tp, 3).unwrap();
        assert!(spec.eigenvalues()[0].abs() < 1e-12);
        assert!((spec.eigenvalues()[1] - 1.0).abs() < 1e-7);
        // TSVD drops the null direction and flags it.
        let t = truncated_svd(&tp, 2, 1e-10, 1000, 0).unwrap();
        assert_eq!(t.m(), 1);
        assert!(t.truncated);
    }

    #[test]
    fn svd_matches_oracle_on_random_input() {
        let ds = crate::data::generate_concentric_circles(48, 5, 11).unwrap();
        let induced = crate::subsample::random_subsample(&ds.cloud, 10, 2).unwrap();
        let k = crate::basekernel::sparse_se_cross_kernel(
            &ds.cloud,
            &induced,
            &crate::basekernel::KernelConfig::squared_exponential(1.5, 10),
        )
        .unwrap();
        let tp = row_normalize(&crate::graph::cross_similarity(&k, &induced.counts).unwrap()).unwrap();
        let a = truncated_svd(&tp, 6, 1e-10, 6000, 1).unwrap();
        let b = dense_eig_oracle(&tp, 6).unwrap();
        for k in 0..6 {
            assert!((a.eigenvalues()[k] - b.eigenvalues()[k]).abs() < 1e-8);
            let d: f64 = (0..48).map(|i| a.row(i)[k] * b.row(i)[k]).sum();
            assert!(d.abs() > 1.0 - 1e-8, "{k}: {d}");
        }
    }

    #[test]
    fn one_step_spectrum_matches_nonsymmetric_eigenvectors() {
        let ds = crate::data::generate_spiral(60, 5, 0.0, 1).unwrap();
        let ops = one_step_operators(&ds.cloud, 0.5, OneStepPattern::Dense).unwrap();
        let z = ops.transition_dense();
        let spec = one_step_spectrum(ops, 5, 3).unwrap();
        assert!(spec.eigenvalues()[0].abs() < 1e-10);
        for k in 0..5 {
            let v = nalgebra::DVector::from_vec(spec.eigenvector(k));
            let res = &z * &v - &v * (1.0 - spec.eigenvalues()[k]);
            assert!(res.amax() < 1e-10, "{k}");
        }
    }

    #[test]
    fn disconnected_graph_is_solved_per_component() {
        let ds = crate::data::generate_concentric_circles(78, 5, 2).unwrap();
        let ops = one_step_operators(&ds.cloud, 0.1, OneStepPattern::Dense).unwrap();
        let z = ops.transition_dense();
        let (sym, _) = ops.clone().into_symmetric();
        assert!(similarity_components(&sym).len() >= 6);
        let spec = one_step_spectrum(ops, 10, 1).unwrap();
        for k in 0..6 {
            assert!(spec.eigenvalues()[k].abs() < 1e-12);
        }
        for k in 0..10 {
            let v = nalgebra::DVector::from_vec(spec.eigenvector(k));
            let res = &z * &v - &v * (1.0 - spec.eigenvalues()[k]);
            assert!(res.amax() < 1e-10, "{k}");
        }
    }

    #[test]
    fn nystrom_with_all_points_is_glgp() {
        let ds = crate::data::generate_concentric_circles(78, 5, 3).unwrap();
        let eps = 0.4;
        let all: Vec<usize> = (0..78).collect();
        let ny = nystrom_spectrum(&ds.cloud, &all, eps, 6, 1).unwrap();
        let ops = one_step_operators(&ds.cloud, eps, OneStepPattern::Dense).unwrap();
        let gl = one_step_spectrum(ops, 6, 1).unwrap();
        for k in 0..6 {
            assert!((ny.eigenvalues()[k] - gl.eigenvalues()[k]).abs() < 1e-10);
        }
        // Compare through the projector onto the span (eigenvalues may repeat).
        let a = ny.vectors_dense();
        let b = gl.vectors_dense();
        let pa = &a * a.transpose();
        let pb = &b * b.transpose();
        assert!((pa - pb).abs().max() < 1e-8);
    }
}
