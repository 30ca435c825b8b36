//! Cross similarity, transition matrices and the one-step baseline operators.

use nalgebra::DMatrix;

use crate::basekernel::se_from_sq_dist;
use crate::data::{sq_dist, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::sparse::SparseCrossMatrix;

/// Column masses at or below this are treated as zero and their landmark dropped.
pub const DROP_THRESHOLD: f64 = 1e-14;

/// Density-corrected cross similarity
/// `A_ij = n_j K_ij / (K_·j Σ_q n_q K_iq)` on the sparsity pattern of `K`.
///
/// Landmarks whose column of `K` is empty keep an empty column; they are
/// removed by [`row_normalize`].
pub fn cross_similarity(k: &SparseCrossMatrix, counts: &[usize]) -> Result<SparseCrossMatrix> {
    if counts.len() != k.ncols() {
        return Err(invalid(format!("{} counts for {} landmarks", counts.len(), k.ncols())));
    }
    let col = k.col_sums();
    let mut values = Vec::with_capacity(k.nnz());
    for i in 0..k.nrows() {
        let (cols, vals) = k.row(i);
        let weighted: f64 = cols.iter().zip(vals).map(|(&j, &v)| counts[j] as f64 * v).sum();
        if weighted <= 0.0 {
            return Err(invalid(format!("row {i} of the base kernel has no positive entry")));
        }
        for (&j, &v) in cols.iter().zip(vals) {
            values.push(counts[j] as f64 * v / (col[j] * weighted));
        }
    }
    Ok(k.with_values(values))
}

/// Row-stochastic transition `Z` from the points to the retained landmarks,
/// with landmark masses `Λ_jj = Z_·j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub z: SparseCrossMatrix,
    pub lambda: Vec<f64>,
    /// Original indices of the landmarks kept as columns of `z`.
    pub retained: Vec<usize>,
    /// Original indices of landmarks removed for (near) zero mass.
    pub dropped: Vec<usize>,
}

impl TransitionPair {
    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn s(&self) -> usize {
        self.z.ncols()
    }

    fn inv_sqrt_lambda(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| 1.0 / l.sqrt()).collect()
    }

    /// `B w = Z (Λ^{-1/2} w)`.
    pub fn apply_b(&self, w: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = w.iter().zip(self.inv_sqrt_lambda()).map(|(a, b)| a * b).collect();
        self.z.mul_vec(&scaled)
    }

    /// `Bᵀ v = Λ^{-1/2} (Zᵀ v)`.
    pub fn apply_bt(&self, v: &[f64]) -> Vec<f64> {
        self.z.tmul_vec(v).into_iter().zip(self.inv_sqrt_lambda()).map(|(a, b)| a * b).collect()
    }

    /// `B = ZΛ^{-1/2}` as a sparse matrix.
    pub fn b_matrix(&self) -> SparseCrossMatrix {
        self.z.scale_columns(&self.inv_sqrt_lambda())
    }

    /// Dense two-step operator `ZΛ^{-1}Zᵀ`; oracle use only.
    pub fn two_step_dense(&self) -> Result<DMatrix<f64>> {
        const LIMIT: usize = 5000;
        if self.n() > LIMIT {
            return Err(Error::Size { what: "dense two-step operator", size: self.n(), limit: LIMIT });
        }
        let b = self.b_matrix().to_dense();
        Ok(&b * b.transpose())
    }
}

/// Row-normalize `A` into `Z`, dropping landmarks whose mass `Z_·j` is at
/// most [`DROP_THRESHOLD`] and re-normalizing the affected rows.
pub fn row_normalize(a: &SparseCrossMatrix) -> Result<TransitionPair> {
    let sums = a.row_sums();
    if let Some(i) = sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::EmptyRow { point: i });
    }
    let inv: Vec<f64> = sums.iter().map(|s| 1.0 / s).collect();
    let mut z = a.scale_rows(&inv);
    let mut lambda = z.col_sums();
    let keep: Vec<bool> = lambda.iter().map(|&l| l > DROP_THRESHOLD).collect();
    let retained: Vec<usize> = (0..a.ncols()).filter(|&j| keep[j]).collect();
    let dropped: Vec<usize> = (0..a.ncols()).filter(|&j| !keep[j]).collect();
    if !dropped.is_empty() {
        log::info!("dropping {} landmarks with zero transition mass", dropped.len());
        z = z.retain_columns(&keep);
        let sums = z.row_sums();
        if let Some(i) = sums.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::EmptyRow { point: i });
        }
        let inv: Vec<f64> = sums.iter().map(|s| 1.0 / s).collect();
        z = z.scale_rows(&inv);
        lambda = z.col_sums();
    }
    Ok(TransitionPair { z, lambda, retained, dropped })
}

/// Largest cloud for which the dense one-step operators are built.
pub const DENSE_ONE_STEP_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub enum OneStepPattern {
    Dense,
    /// Keep `K̄_ij` when `j` is among the `k` nearest neighbors of `i` or
    /// vice versa (self included).
    NearestNeighbors(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityMatrix {
    Dense(DMatrix<f64>),
    Sparse(SparseCrossMatrix),
}

/// One-step operators on the full cloud: the symmetric similarity
/// `Ā_ij = k(x_i,x_j)/(K̄_i· K̄_·j)` and its row sums.
/// The random-walk transition is `Z̄ = diag(degree)^{-1} Ā`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepOperators {
    pub similarity: SimilarityMatrix,
    pub degree: Vec<f64>,
}

impl OneStepOperators {
    pub fn n(&self) -> usize {
        self.degree.len()
    }

    /// Dense `Z̄`.
    pub fn transition_dense(&self) -> DMatrix<f64> {
        let mut z = match &self.similarity {
            SimilarityMatrix::Dense(a) => a.clone(),
            SimilarityMatrix::Sparse(a) => a.to_dense(),
        };
        for i in 0..z.nrows() {
            let d = self.degree[i];
            z.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        z
    }

    /// Symmetric conjugate `D^{-1/2} Ā D^{-1/2}` of `Z̄`, consuming `self`.
    pub fn into_symmetric(self) -> (SimilarityMatrix, Vec<f64>) {
        let isq: Vec<f64> = self.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let sym = match self.similarity {
            SimilarityMatrix::Dense(mut a) => {
                let n = a.nrows();
                for j in 0..n {
                    for i in 0..n {
                        a[(i, j)] *= isq[i] * isq[j];
                    }
                }
                SimilarityMatrix::Dense(a)
            }
            SimilarityMatrix::Sparse(a) => SimilarityMatrix::Sparse(a.scale_rows(&isq).scale_columns(&isq)),
        };
        (sym, self.degree)
    }
}

/// Build the one-step operators with the squared-exponential kernel of
/// bandwidth `epsilon`, self-similarity included.
pub fn one_step_operators(cloud: &PointCloud, epsilon: f64, pattern: OneStepPattern) -> Result<OneStepOperators> {
    let sq = pairwise_sq_dists_if_dense(cloud, &pattern)?;
    one_step_from_parts(cloud, epsilon, &pattern, sq.as_ref())
}

fn pairwise_sq_dists_if_dense(cloud: &PointCloud, pattern: &OneStepPattern) -> Result<Option<DMatrix<f64>>> {
    match pattern {
        OneStepPattern::Dense => Ok(Some(pairwise_sq_dists(cloud)?)),
        OneStepPattern::NearestNeighbors(_) => Ok(None),
    }
}

/// Dense matrix of squared pairwise distances (guarded).
pub fn pairwise_sq_dists(cloud: &PointCloud) -> Result<DMatrix<f64>> {
    let n = cloud.n();
    if n > DENSE_ONE_STEP_LIMIT {
        return Err(Error::Size { what: "dense one-step operator", size: n, limit: DENSE_ONE_STEP_LIMIT });
    }
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let v = sq_dist(cloud.point(i), cloud.point(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Same as [`one_step_operators`] reusing precomputed squared distances for
/// the dense pattern.
pub fn one_step_from_parts(
    cloud: &PointCloud,
    epsilon: f64,
    pattern: &OneStepPattern,
    sq_dists: Option<&DMatrix<f64>>,
) -> Result<OneStepOperators> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("bandwidth {epsilon} must be positive")));
    }
    let n = cloud.n();
    match pattern {
        OneStepPattern::Dense => {
            let sq = match sq_dists {
                Some(d) => d,
                None => return Err(invalid("dense one-step operators need the distance matrix")),
            };
            if sq.nrows() != n {
                return Err(invalid("distance matrix does not match the cloud"));
            }
            let mut a = sq.map(|d| se_from_sq_dist(d, epsilon));
            let rows: Vec<f64> = (0..n).map(|j| a.column(j).sum()).collect(); // symmetric: column sums = row sums
            for j in 0..n {
                for i in 0..n {
                    a[(i, j)] /= rows[i] * rows[j];
                }
            }
            // Exact symmetry regardless of rounding in the products above.
            for j in 0..n {
                for i in 0..j {
                    let v = a[(i, j)];
                    a[(j, i)] = v;
                }
            }
            let degree = (0..n).map(|i| a.row(i).sum()).collect();
            Ok(OneStepOperators { similarity: SimilarityMatrix::Dense(a), degree })
        }
        OneStepPattern::NearestNeighbors(k) => {
            let k = (*k).clamp(1, n);
            let mut neighbors: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut d: Vec<(f64, usize)> =
                        (0..n).map(|j| (sq_dist(cloud.point(i), cloud.point(j)), j)).collect();
                    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                    if k < n {
                        d.select_nth_unstable_by(k - 1, cmp);
                        d.truncate(k);
                    }
                    let mut idx: Vec<usize> = d.into_iter().map(|(_, j)| j).collect();
                    if !idx.contains(&i) {
                        idx.push(i);
                    }
                    idx
                })
                .collect();
            // Symmetrize the pattern.
            for i in 0..n {
                for t in 0..neighbors[i].len() {
                    let j = neighbors[i][t];
                    if !neighbors[j].contains(&i) {
                        neighbors[j].push(i);
                    }
                }
            }
            let rows = neighbors.iter().enumerate().map(|(i, nb)| {
                nb.iter()
                    .map(|&j| (j, se_from_sq_dist(sq_dist(cloud.point(i), cloud.point(j)), epsilon)))
                    .collect::<Vec<_>>()
            });
            let kbar = SparseCrossMatrix::from_rows(n, rows)?;
            let sums = kbar.row_sums();
            let inv: Vec<f64> = sums.iter().map(|s| 1.0 / s).collect();
            let a = kbar.scale_rows(&inv).scale_columns(&inv);
            let degree = a.row_sums();
            Ok(OneStepOperators { similarity: SimilarityMatrix::Sparse(a), degree })
        }
    }
}
