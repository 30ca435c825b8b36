//! Sparse `n × s` base kernels between the cloud and its landmarks.
//!
//! Both kernels only touch the `r` nearest landmarks of each point. The
//! neighbor structure does not depend on the bandwidth, so it is computed once
//! ([`LandmarkNeighbors`]) and reused across a bandwidth grid.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sq_dist, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::sparse::SparseCrossMatrix;
use crate::subsample::InducedPointSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKernelKind {
    #[serde(alias = "se")]
    SquaredExponential,
    Lae,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kind: BaseKernelKind,
    /// Bandwidth; only read by the squared-exponential kernel.
    pub epsilon: f64,
    /// Number of nearest landmarks kept per point.
    pub r: usize,
}

impl KernelConfig {
    pub fn squared_exponential(epsilon: f64, r: usize) -> Self {
        Self { kind: BaseKernelKind::SquaredExponential, epsilon, r }
    }

    pub fn lae(r: usize) -> Self {
        Self { kind: BaseKernelKind::Lae, epsilon: f64::NAN, r }
    }
}

/// Kernel values below this are stored as exact zeros (keeps dense
/// products out of the subnormal range).
pub const SE_FLUSH: f64 = 1e-150;

/// `exp(-‖x - u‖² / 4ε²)`.
#[inline]
pub fn se_value(x: &[f64], u: &[f64], epsilon: f64) -> f64 {
    se_from_sq_dist(sq_dist(x, u), epsilon)
}

#[inline]
pub fn se_from_sq_dist(d2: f64, epsilon: f64) -> f64 {
    let v = (-d2 / (4.0 * epsilon * epsilon)).exp();
    if v < SE_FLUSH {
        0.0
    } else {
        v
    }
}

/// The `r` nearest landmarks of every point, nearest first (ties by index).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkNeighbors {
    r: usize,
    s: usize,
    indices: Vec<usize>,
    sq_dists: Vec<f64>,
}

impl LandmarkNeighbors {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn n(&self) -> usize {
        self.indices.len() / self.r
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = i * self.r..(i + 1) * self.r;
        (&self.indices[span.clone()], &self.sq_dists[span])
    }

    /// Median distance from a point to its `r`-th nearest landmark.
    pub fn median_rth_distance(&self) -> f64 {
        let mut d: Vec<f64> = (0..self.n()).map(|i| self.row(i).1[self.r - 1].sqrt()).collect();
        let mid = d.len() / 2;
        let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }
}

pub fn landmark_neighbors(cloud: &PointCloud, induced: &InducedPointSet, r: usize) -> Result<LandmarkNeighbors> {
    let s = induced.s();
    if r == 0 || r > s {
        return Err(invalid(format!("r = {r} outside 1..={s}")));
    }
    if induced.p() != cloud.p() {
        return Err(invalid("landmark dimension differs from the cloud"));
    }
    let rows: Vec<Vec<(f64, usize)>> = cloud
        .as_slice()
        .par_chunks(cloud.p())
        .with_min_len(128)
        .map_init(
            || Vec::with_capacity(s),
            |d: &mut Vec<(f64, usize)>, x| {
                d.clear();
                d.extend((0..s).map(|j| (sq_dist(x, induced.center(j)), j)));
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if r < s {
                    d.select_nth_unstable_by(r - 1, cmp);
                }
                let mut row = d[..r].to_vec();
                row.sort_unstable_by(cmp);
                row
            },
        )
        .collect();
    let mut indices = Vec::with_capacity(cloud.n() * r);
    let mut sq_dists = Vec::with_capacity(cloud.n() * r);
    for row in rows {
        for (d, j) in row {
            indices.push(j);
            sq_dists.push(d);
        }
    }
    Ok(LandmarkNeighbors { r, s, indices, sq_dists })
}

/// Squared-exponential values on a cached neighbor structure. Fails when a
/// row underflows to all zeros (bandwidth too small for that point).
pub fn se_cross_kernel(nbrs: &LandmarkNeighbors, epsilon: f64) -> Result<SparseCrossMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("bandwidth {epsilon} must be positive")));
    }
    let denom = 4.0 * epsilon * epsilon;
    let rows = (0..nbrs.n()).map(|i| {
        let (cols, d2) = nbrs.row(i);
        cols.iter().zip(d2).map(|(&j, &d)| (j, (-d / denom).exp())).collect::<Vec<_>>()
    });
    let k = SparseCrossMatrix::from_rows(nbrs.s(), rows)?;
    if let Some(i) = (0..k.nrows()).find(|&i| k.row(i).0.is_empty()) {
        return Err(Error::Fit(format!(
            "bandwidth {epsilon:e} underflows every kernel value of point {i}"
        )));
    }
    Ok(k)
}

pub fn sparse_se_cross_kernel(
    cloud: &PointCloud,
    induced: &InducedPointSet,
    config: &KernelConfig,
) -> Result<SparseCrossMatrix> {
    if config.kind != BaseKernelKind::SquaredExponential {
        return Err(invalid("sparse_se_cross_kernel needs a squared-exponential config"));
    }
    let nbrs = landmark_neighbors(cloud, induced, config.r)?;
    se_cross_kernel(&nbrs, config.epsilon)
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Ridge added to the local Gram matrix so the step size stays finite for
/// coincident or collinear landmarks.
pub const LAE_GRAM_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LaeSolution {
    pub weights: Vec<f64>,
    /// Objective after every accepted iterate, starting at the initial point.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Reconstruct `x` as a convex combination of `local` landmarks with
/// accelerated projected gradient (step `1/L`, restart when the objective
/// would increase).
pub fn lae_solve(x: &[f64], local: &[&[f64]], max_iter: usize, tol: f64) -> LaeSolution {
    let r = local.len();
    let gram = DMatrix::from_fn(r, r, |a, b| {
        let g: f64 = local[a].iter().zip(local[b]).map(|(u, v)| u * v).sum();
        if a == b { g + LAE_GRAM_RIDGE } else { g }
    });
    let lin: Vec<f64> = local.iter().map(|u| u.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let lipschitz = if r == 1 {
        gram[(0, 0)]
    } else {
        SymmetricEigen::new(gram.clone()).eigenvalues.max()
    };

    let gradient = |w: &[f64]| -> Vec<f64> {
        (0..r).map(|a| (0..r).map(|b| gram[(a, b)] * w[b]).sum::<f64>() - lin[a]).collect()
    };
    // ½‖x − Σ w_j u_j‖² (+ ridge), expanded through the Gram matrix.
    let objective = |w: &[f64]| -> f64 {
        let mut quad = 0.0;
        for a in 0..r {
            for b in 0..r {
                quad += w[a] * gram[(a, b)] * w[b];
            }
        }
        let lw: f64 = lin.iter().zip(w).map(|(l, v)| l * v).sum();
        (0.5 * quad - lw + 0.5 * xx).max(0.0)
    };
    let pg_step = |w: &[f64]| -> Vec<f64> {
        let g = gradient(w);
        let moved: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - gi / lipschitz).collect();
        simplex_project(&moved)
    };
    let pg_norm = |w: &[f64], next: &[f64]| -> f64 {
        lipschitz * w.iter().zip(next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };

    let mut w = vec![0.0; r];
    w[0] = 1.0;
    let mut f_w = objective(&w);
    let mut history = vec![f_w];
    if r == 1 || lipschitz <= 0.0 {
        return LaeSolution { weights: w, objective_history: history, iterations: 0, converged: true };
    }
    let mut y = w.clone();
    let mut momentum: f64 = 1.0;
    let mut converged = pg_norm(&w, &pg_step(&w)) < tol;
    let mut iterations = 0;
    while !converged && iterations < max_iter {
        iterations += 1;
        let mut w_new = pg_step(&y);
        let mut f_new = objective(&w_new);
        if f_new > f_w {
            // Restart from the last iterate with a plain projected step.
            momentum = 1.0;
            w_new = pg_step(&w);
            f_new = objective(&w_new);
        }
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        y = w_new.iter().zip(&w).map(|(a, b)| a + beta * (a - b)).collect();
        momentum = next_momentum;
        w = w_new;
        f_w = f_new.min(f_w);
        history.push(f_w);
        converged = pg_norm(&w, &pg_step(&w)) < tol;
    }
    for v in &mut w {
        if *v < 1e-12 {
            *v = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    LaeSolution { weights: w, objective_history: history, iterations, converged }
}

pub const LAE_DEFAULT_MAX_ITER: usize = 200;
pub const LAE_DEFAULT_TOL: f64 = 1e-8;

pub fn lae_cross_kernel_from_neighbors(
    cloud: &PointCloud,
    induced: &InducedPointSet,
    nbrs: &LandmarkNeighbors,
    max_iter: usize,
    tol: f64,
) -> Result<SparseCrossMatrix> {
    let rows: Vec<Vec<(usize, f64)>> = (0..cloud.n())
        .into_par_iter()
        .with_min_len(128)
        .map(|i| {
            let (cols, _) = nbrs.row(i);
            let local: Vec<&[f64]> = cols.iter().map(|&j| induced.center(j)).collect();
            let sol = lae_solve(cloud.point(i), &local, max_iter, tol);
            cols.iter().copied().zip(sol.weights).filter(|&(_, w)| w > 0.0).collect()
        })
        .collect();
    SparseCrossMatrix::from_rows(induced.s(), rows)
}

pub fn lae_cross_kernel(
    cloud: &PointCloud,
    induced: &InducedPointSet,
    r: usize,
    max_iter: usize,
    tol: f64,
) -> Result<SparseCrossMatrix> {
    let nbrs = landmark_neighbors(cloud, induced, r)?;
    lae_cross_kernel_from_neighbors(cloud, induced, &nbrs, max_iter, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subsample::SubsampleMethod;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.to_vec(), 1).unwrap()
    }

    #[test]
    fn se_values() {
        assert_eq!(se_value(&[1.0, 2.0], &[1.0, 2.0], 0.3), 1.0);
        let eps = 0.7;
        let v = se_value(&[0.0, 0.0], &[2.0 * eps, 0.0], eps);
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.36788).abs() < 1e-5);
        assert_eq!(se_value(&[0.3, -1.0], &[2.0, 0.5], 1.1), se_value(&[2.0, 0.5], &[0.3, -1.0], 1.1));
    }

    #[test]
    fn sparse_se_on_a_line() {
        let cloud = line(&[0.0, 1.0, 10.0]);
        let induced = InducedPointSet::from_centers(&cloud, vec![0.0, 10.0], SubsampleMethod::Random).unwrap();
        let k = sparse_se_cross_kernel(&cloud, &induced, &KernelConfig::squared_exponential(1.0, 1)).unwrap();
        assert_eq!(k.row(0), (&[0usize][..], &[1.0][..]));
        assert_eq!(k.row(1).0, &[0]);
        assert!((k.row(1).1[0] - (-0.25f64).exp()).abs() < 1e-15);
        assert_eq!(k.row(2), (&[1usize][..], &[1.0][..]));
    }

    #[test]
    fn sparse_se_full_rank_equals_dense() {
        let ds = crate::data::generate_concentric_circles(60, 6, 2).unwrap();
        let induced = crate::subsample::random_subsample(&ds.cloud, 12, 3).unwrap();
        let k = sparse_se_cross_kernel(&ds.cloud, &induced, &KernelConfig::squared_exponential(0.8, 12)).unwrap();
        for i in 0..ds.n() {
            for j in 0..12 {
                assert_eq!(k.get(i, j), se_value(ds.cloud.point(i), induced.center(j), 0.8));
            }
        }
        let k1 = sparse_se_cross_kernel(&ds.cloud, &induced, &KernelConfig::squared_exponential(0.8, 1)).unwrap();
        for i in 0..ds.n() {
            assert_eq!(k1.row(i).0, &[induced.assignment[i]]);
        }
    }

    #[test]
    fn tiny_bandwidth_is_an_error() {
        let cloud = line(&[0.0, 100.0]);
        let induced = InducedPointSet::from_centers(&cloud, vec![0.0], SubsampleMethod::Random).unwrap();
        assert!(sparse_se_cross_kernel(&cloud, &induced, &KernelConfig::squared_exponential(0.01, 1)).is_err());
    }

    #[test]
    fn simplex_projection_cases() {
        assert_eq!(simplex_project(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(simplex_project(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(simplex_project(&[0.6, 0.6]), vec![0.5, 0.5]);
        let w = simplex_project(&[-3.0, 0.1, 4.0, 0.2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn lae_vertex_interior_and_boundary() {
        let u0 = [0.0];
        let u1 = [1.0];
        let at_vertex = lae_solve(&[0.0], &[&u0, &u1], 200, 1e-10);
        assert!((at_vertex.weights[0] - 1.0).abs() < 1e-8);

        let inside = lae_solve(&[0.3], &[&u0, &u1], 200, 1e-10);
        assert!((inside.weights[0] - 0.7).abs() < 1e-8 && (inside.weights[1] - 0.3).abs() < 1e-8);
        assert!(inside.converged);

        let outside = lae_solve(&[-1.0], &[&u0, &u1], 200, 1e-10);
        assert_eq!(outside.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn lae_kernel_rows_on_simplex() {
        let ds = crate::data::generate_spiral(300, 10, 0.0, 1).unwrap();
        let induced = crate::subsample::kmeans_lloyd(&ds.cloud, 30, 50, 1e-9, 1).unwrap();
        let k = lae_cross_kernel(&ds.cloud, &induced, 4, LAE_DEFAULT_MAX_ITER, LAE_DEFAULT_TOL).unwrap();
        assert!(k.rows_nonempty());
        for s in k.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
