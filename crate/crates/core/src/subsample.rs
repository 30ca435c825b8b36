//! Induced-point selection: random subsampling, Lloyd k-means and
//! mini-batch k-means, all seeded.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sq_dist, PointCloud};
use crate::error::{invalid, Result};
use crate::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMethod {
    Random,
    #[serde(alias = "k-means")]
    Kmeans,
    #[serde(alias = "mini-batch")]
    Minibatch,
}

/// Landmarks `u_1..u_s` with their nearest-point assignment and occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedPointSet {
    centers: Vec<f64>,
    p: usize,
    /// `counts[j]` = number of cloud points whose nearest landmark is `j`.
    pub counts: Vec<usize>,
    /// `assignment[i]` = index of the landmark nearest to point `i`.
    pub assignment: Vec<usize>,
    pub method: SubsampleMethod,
    /// Within-cluster sum of squared distances to the assigned landmark.
    pub objective: f64,
}

impl InducedPointSet {
    /// Assign every point to its nearest center and drop centers that end up
    /// with no points.
    pub fn from_centers(cloud: &PointCloud, centers: Vec<f64>, method: SubsampleMethod) -> Result<Self> {
        let p = cloud.p();
        if centers.is_empty() || centers.len() % p != 0 {
            return Err(invalid("centers do not match the cloud dimension"));
        }
        let s = centers.len() / p;
        let (assignment, d2) = assign_nearest(cloud, &centers);
        let mut counts = vec![0usize; s];
        for &a in &assignment {
            counts[a] += 1;
        }
        let objective = d2.iter().sum();
        if counts.iter().all(|&c| c > 0) {
            return Ok(Self { centers, p, counts, assignment, method, objective });
        }
        let mut remap = vec![usize::MAX; s];
        let mut kept = Vec::new();
        let mut kept_counts = Vec::new();
        for j in 0..s {
            if counts[j] > 0 {
                remap[j] = kept_counts.len();
                kept.extend_from_slice(&centers[j * p..(j + 1) * p]);
                kept_counts.push(counts[j]);
            }
        }
        log::debug!("dropped {} empty landmarks", s - kept_counts.len());
        let assignment = assignment.into_iter().map(|a| remap[a]).collect();
        Ok(Self { centers: kept, p, counts: kept_counts, assignment, method, objective })
    }

    pub fn s(&self) -> usize {
        self.counts.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.p..(j + 1) * self.p]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn centers_cloud(&self) -> PointCloud {
        PointCloud::new(self.centers.clone(), self.p).expect("centers are finite")
    }
}

/// Index and squared distance of the nearest center; ties go to the smallest index.
#[inline]
pub fn nearest_center(x: &[f64], centers: &[f64]) -> (usize, f64) {
    let p = x.len();
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(p).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn assign_nearest(cloud: &PointCloud, centers: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = cloud
        .as_slice()
        .par_chunks(cloud.p())
        .with_min_len(256)
        .map(|x| nearest_center(x, centers))
        .collect();
    pairs.into_iter().unzip()
}

fn check_s(cloud: &PointCloud, s: usize) -> Result<()> {
    if s == 0 || s > cloud.n() {
        return Err(invalid(format!("s = {s} outside 1..={}", cloud.n())));
    }
    Ok(())
}

/// `s` distinct cloud points chosen uniformly without replacement.
pub fn random_subsample(cloud: &PointCloud, s: usize, seed: u64) -> Result<InducedPointSet> {
    check_s(cloud, s)?;
    let mut rng = rng_from_seed(seed);
    let mut picked = index::sample(&mut rng, cloud.n(), s).into_vec();
    picked.sort_unstable();
    let centers = cloud.select(&picked).as_slice().to_vec();
    InducedPointSet::from_centers(cloud, centers, SubsampleMethod::Random)
}

/// Default Lloyd stopping tolerance on the largest center shift.
pub fn default_kmeans_tol(cloud: &PointCloud) -> f64 {
    1e-6 * cloud.diameter()
}

/// k-means++ seeding: first center uniform, the rest drawn with probability
/// proportional to the squared distance to the closest chosen center.
fn kmeans_plus_plus(cloud: &PointCloud, s: usize, rng: &mut crate::Rng) -> Vec<f64> {
    let n = cloud.n();
    let p = cloud.p();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = cloud.point(first).to_vec();
    let mut d2: Vec<f64> = cloud.rows().map(|x| sq_dist(x, cloud.point(first))).collect();
    for _ in 1..s {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // Every point coincides with a center; take any unused index.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = cloud.point(pick).to_vec();
        for (i, x) in cloud.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centers.extend_from_slice(&c);
    }
    debug_assert_eq!(centers.len(), s * p);
    centers
}

/// Result of a Lloyd run with the objective recorded after every assignment.
#[derive(Debug, Clone)]
pub struct LloydOutcome {
    pub induced: InducedPointSet,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd k-means from k-means++ seeding. Stops when the largest center
/// shift drops below `tol` or after `max_iter` iterations.
pub fn kmeans_lloyd(cloud: &PointCloud, s: usize, max_iter: usize, tol: f64, seed: u64) -> Result<InducedPointSet> {
    Ok(kmeans_lloyd_traced(cloud, s, max_iter, tol, seed)?.induced)
}

pub fn kmeans_lloyd_traced(
    cloud: &PointCloud,
    s: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<LloydOutcome> {
    check_s(cloud, s)?;
    let p = cloud.p();
    let mut rng = rng_from_seed(seed);
    let mut centers = kmeans_plus_plus(cloud, s, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let (assignment, mut d2) = assign_nearest(cloud, &centers);
        history.push(d2.iter().sum());

        let mut sums = vec![0.0; s * p];
        let mut sizes = vec![0usize; s];
        for (x, &a) in cloud.rows().zip(&assignment) {
            sizes[a] += 1;
            for (acc, v) in sums[a * p..(a + 1) * p].iter_mut().zip(x) {
                *acc += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..s {
            let new: Vec<f64> = if sizes[j] > 0 {
                sums[j * p..(j + 1) * p].iter().map(|v| v / sizes[j] as f64).collect()
            } else {
                // Empty cluster: reseed at the point farthest from its center.
                let far = d2
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
                d2[far] = f64::NEG_INFINITY;
                cloud.point(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, &centers[j * p..(j + 1) * p]).sqrt());
            centers[j * p..(j + 1) * p].copy_from_slice(&new);
        }
        if shift < tol {
            break;
        }
    }
    let induced = InducedPointSet::from_centers(cloud, centers, SubsampleMethod::Kmeans)?;
    history.push(induced.objective);
    Ok(LloydOutcome { induced, objective_history: history, iterations })
}

/// Mini-batch k-means: each iteration draws `batch` distinct points and moves
/// each point's nearest center toward it with rate `1 / (times seen)`.
pub fn minibatch_kmeans(
    cloud: &PointCloud,
    s: usize,
    batch: usize,
    iters: usize,
    seed: u64,
) -> Result<InducedPointSet> {
    check_s(cloud, s)?;
    if batch == 0 {
        return Err(invalid("batch must be at least 1"));
    }
    let n = cloud.n();
    let p = cloud.p();
    let batch = batch.min(n);
    let mut rng = rng_from_seed(seed);
    let mut centers = kmeans_plus_plus(cloud, s, &mut rng);
    let mut seen = vec![0u64; s];
    for _ in 0..iters {
        let picked = index::sample(&mut rng, n, batch).into_vec();
        let nearest: Vec<usize> = picked.iter().map(|&i| nearest_center(cloud.point(i), &centers).0).collect();
        for (&i, &j) in picked.iter().zip(&nearest) {
            seen[j] += 1;
            let eta = 1.0 / seen[j] as f64;
            for (c, x) in centers[j * p..(j + 1) * p].iter_mut().zip(cloud.point(i)) {
                *c += eta * (x - *c);
            }
        }
    }
    InducedPointSet::from_centers(cloud, centers, SubsampleMethod::Minibatch)
}
