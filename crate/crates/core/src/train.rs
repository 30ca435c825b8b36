//! End-to-end fitting: FLGP, the EGP / GLGP / Nyström GLGP baselines, and
//! the marginal-likelihood hyperparameter search shared by all of them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basekernel::{
    landmark_neighbors, lae_cross_kernel_from_neighbors, se_cross_kernel, BaseKernelKind, LAE_DEFAULT_MAX_ITER,
    LAE_DEFAULT_TOL,
};
use crate::data::{sq_dist, Dataset, PointCloud, Task};
use crate::error::{invalid, Error, Result};
use crate::gp::{
    gaussian_marginal_loglik, gp_regression_predict, laplace_fit, laplace_predict, metric_error_rate,
    metric_nll_bernoulli, metric_nll_gaussian, metric_rmse, PosteriorSummary,
};
use crate::graph::{cross_similarity, one_step_from_parts, pairwise_sq_dists, row_normalize, OneStepPattern};
use crate::heatkernel::{add_jitter, CovarianceSource, HeatKernelCovariance, SquaredExponentialCovariance, DEFAULT_JITTER};
use crate::spectral::{nystrom_spectrum, one_step_spectrum, truncated_svd, LaplacianSpectrum};
use crate::subsample::{default_kmeans_tol, kmeans_lloyd, minibatch_kmeans, random_subsample, InducedPointSet, SubsampleMethod};

/// Every fitting method the experiment runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Egp,
    Glgp,
    GlgpNystrom,
    Srflgp,
    Skflgp,
    Lrflgp,
    Lkflgp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Egp,
        Method::Glgp,
        Method::GlgpNystrom,
        Method::Srflgp,
        Method::Skflgp,
        Method::Lrflgp,
        Method::Lkflgp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Egp => "egp",
            Method::Glgp => "glgp",
            Method::GlgpNystrom => "glgp-nystrom",
            Method::Srflgp => "srflgp",
            Method::Skflgp => "skflgp",
            Method::Lrflgp => "lrflgp",
            Method::Lkflgp => "lkflgp",
        }
    }

    /// Subsampling and base kernel for the FLGP variants.
    pub fn flgp_parts(self) -> Option<(SubsampleMethod, BaseKernelKind)> {
        match self {
            Method::Srflgp => Some((SubsampleMethod::Random, BaseKernelKind::SquaredExponential)),
            Method::Skflgp => Some((SubsampleMethod::Kmeans, BaseKernelKind::SquaredExponential)),
            Method::Lrflgp => Some((SubsampleMethod::Random, BaseKernelKind::Lae)),
            Method::Lkflgp => Some((SubsampleMethod::Kmeans, BaseKernelKind::Lae)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Hyperparameters for FLGP and the baselines. Fields a method does not use
/// are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlgpConfig {
    /// Induced points (landmarks for the Nyström baseline).
    pub s: usize,
    /// Nearest landmarks kept per point; also the neighbor rank behind the
    /// default bandwidth of the graph baselines.
    pub r: usize,
    /// Eigenpairs retained.
    #[serde(rename = "eigenpairs", alias = "M")]
    pub m: usize,
    pub subsampling: SubsampleMethod,
    pub kernel: BaseKernelKind,
    /// Explicit bandwidth grid; default `2^k · ε₀`, `k = −2..2`.
    pub epsilon_grid: Option<Vec<f64>>,
    /// Diffusion time bounds; default `[1e−3, 10] · diameter²`.
    pub t_bounds: Option<[f64; 2]>,
    /// Noise sd bounds for regression; default `[1e−3, 1] · sd(y)`.
    pub sigma_bounds: Option<[f64; 2]>,
    pub kmeans_max_iter: usize,
    pub minibatch_size: usize,
    pub minibatch_iters: usize,
    pub svd_tol: f64,
    pub seed: u64,
}

impl Default for FlgpConfig {
    fn default() -> Self {
        Self {
            s: 600,
            r: 3,
            m: 100,
            subsampling: SubsampleMethod::Kmeans,
            kernel: BaseKernelKind::SquaredExponential,
            epsilon_grid: None,
            t_bounds: None,
            sigma_bounds: None,
            kmeans_max_iter: 100,
            minibatch_size: 1024,
            minibatch_iters: 100,
            svd_tol: 1e-10,
            seed: 0,
        }
    }
}

impl FlgpConfig {
    /// Copy with the subsampling and kernel of an FLGP method.
    pub fn for_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        if let Some((sub, kernel)) = method.flgp_parts() {
            c.subsampling = sub;
            c.kernel = kernel;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.r == 0 || self.m == 0 {
            return Err(invalid("s, r and the eigenpair count must be positive"));
        }
        if self.r > self.s {
            return Err(invalid(format!("r = {} exceeds s = {}", self.r, self.s)));
        }
        if self.m > self.s {
            return Err(invalid(format!("eigenpair count {} exceeds s = {}", self.m, self.s)));
        }
        if let Some(g) = &self.epsilon_grid {
            if g.is_empty() || g.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(invalid("epsilon grid must be non-empty and positive"));
            }
        }
        for b in [self.t_bounds, self.sigma_bounds].into_iter().flatten() {
            if !(b[0] > 0.0 && b[0] <= b[1] && b[1].is_finite()) {
                return Err(invalid(format!("bounds {b:?} must be positive and ordered")));
            }
        }
        if !(self.svd_tol > 0.0) {
            return Err(invalid("svd tolerance must be positive"));
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage, summed over grid candidates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimes {
    pub subsample: f64,
    pub kernel: f64,
    pub graph: f64,
    pub spectral: f64,
    pub optimize: f64,
    pub predict: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.subsample + self.kernel + self.graph + self.spectral + self.optimize + self.predict
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub error_rate: Option<f64>,
    pub rmse: Option<f64>,
    pub nll: f64,
}

/// One evaluated bandwidth candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub epsilon: Option<f64>,
    /// `(t, σ, log marginal)` when the candidate could be fitted.
    pub optimum: Option<Optimum>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epsilon: Option<f64>,
    /// Diffusion time (amplitude for EGP).
    pub t: f64,
    pub noise_sd: Option<f64>,
    pub log_marginal: f64,
    pub times: StageTimes,
    /// Predictions on the unlabeled points `m..n`.
    pub posterior: PosteriorSummary,
    pub metrics: Option<Metrics>,
    pub candidates: Vec<Candidate>,
    pub spectral_solves: usize,
    /// Gradient ∞-norm at the final Laplace mode (classification).
    pub laplace_gradient: Option<f64>,
    /// Eigenpairs actually used.
    pub eigenpairs: Option<usize>,
}

/// Result of the `(t, σ)` search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub t: f64,
    pub sigma: Option<f64>,
    pub loglik: f64,
}

/// Points in the coarse scan preceding each golden-section search.
pub const SCAN_POINTS: usize = 13;
pub const OPT_SWEEPS: usize = 3;
pub const OPT_TOL: f64 = 1e-3;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Maximize `g` over `[lo, hi]`: coarse scan, then golden section around the
/// best scan point. Non-finite values count as `−∞`.
fn maximize_1d(mut g: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let mut eval = |x: f64| {
        let v = g(x);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    if hi - lo <= tol {
        let x = 0.5 * (lo + hi);
        return (x, eval(x));
    }
    let mut best = (lo, f64::NEG_INFINITY);
    let mut scan = Vec::with_capacity(SCAN_POINTS);
    for i in 0..SCAN_POINTS {
        let x = if i + 1 == SCAN_POINTS { hi } else { lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64 };
        let v = eval(x);
        scan.push(v);
        if v > best.1 {
            best = (x, v);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return best;
    }
    let i = scan.iter().position(|&v| v == best.1).unwrap_or(0);
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let mut a = if i == 0 { lo } else { lo + step * (i - 1) as f64 };
    let mut b = if i + 1 >= SCAN_POINTS { hi } else { (lo + step * (i + 1) as f64).min(hi) };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (eval(c), eval(d));
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c);
            if fc > best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d);
            if fd > best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

/// Maximize `objective(t, σ)` by alternating one-dimensional searches over
/// `log t` and `log σ` (`σ` is absent for classification). Failed
/// evaluations (`None`) count as `−∞`.
pub fn optimize_t_sigma(
    mut objective: impl FnMut(f64, Option<f64>) -> Option<f64>,
    t_bounds: [f64; 2],
    sigma_bounds: Option<[f64; 2]>,
) -> Optimum {
    let (tl, th) = (t_bounds[0].ln(), t_bounds[1].ln());
    let mut f = |t: f64, s: Option<f64>| objective(t, s).unwrap_or(f64::NEG_INFINITY);
    match sigma_bounds {
        None => {
            let (x, v) = maximize_1d(|x| f(x.exp(), None), tl, th, OPT_TOL);
            Optimum { t: x.exp(), sigma: None, loglik: v }
        }
        Some(sb) => {
            let (sl, sh) = (sb[0].ln(), sb[1].ln());
            let mut log_s = 0.5 * (sl + sh);
            let mut log_t = 0.5 * (tl + th);
            let mut best = f64::NEG_INFINITY;
            for sweep in 0..OPT_SWEEPS {
                let (x, v) = maximize_1d(|x| f(x.exp(), Some(log_s.exp())), tl, th, OPT_TOL);
                let dt = (x - log_t).abs();
                if v > best || sweep == 0 {
                    log_t = x;
                    best = v;
                }
                let (y, w) = maximize_1d(|y| f(log_t.exp(), Some(y.exp())), sl, sh, OPT_TOL);
                let ds = (y - log_s).abs();
                if w > best {
                    log_s = y;
                    best = w;
                }
                if sweep > 0 && dt < OPT_TOL && ds < OPT_TOL {
                    break;
                }
            }
            Optimum { t: log_t.exp(), sigma: Some(log_s.exp()), loglik: best }
        }
    }
}

/// Labels prepared for fitting: regression responses are centered by their
/// labeled mean.
struct Targets {
    y: Vec<f64>,
    offset: f64,
    task: Task,
}

impl Targets {
    fn new(ds: &Dataset) -> Self {
        let labels = ds.labels();
        match ds.task {
            Task::Regression => {
                let mean = labels.iter().sum::<f64>() / labels.len() as f64;
                Self { y: labels.iter().map(|v| v - mean).collect(), offset: mean, task: ds.task }
            }
            Task::BinaryClassification => Self { y: labels.to_vec(), offset: 0.0, task: ds.task },
        }
    }

    fn sd(&self) -> f64 {
        let m = self.y.len() as f64;
        let var = self.y.iter().map(|v| v * v).sum::<f64>() / m;
        if var > 0.0 {
            var.sqrt()
        } else {
            1.0
        }
    }

    fn sigma_bounds(&self, config: &FlgpConfig) -> Option<[f64; 2]> {
        match self.task {
            Task::Regression => {
                Some(config.sigma_bounds.unwrap_or_else(|| [1e-3 * self.sd(), self.sd()]))
            }
            Task::BinaryClassification => None,
        }
    }

    /// Model evidence of the labeled block.
    fn evidence(&self, kmm: &DMatrix<f64>, sigma: Option<f64>) -> Option<f64> {
        let k = add_jitter(kmm, DEFAULT_JITTER).ok()?;
        match self.task {
            Task::Regression => gaussian_marginal_loglik(&k, &self.y, sigma?).ok(),
            Task::BinaryClassification => laplace_fit(&k, &self.y).ok().map(|f| f.log_evidence),
        }
    }
}

fn default_t_bounds(cloud: &PointCloud, config: &FlgpConfig) -> [f64; 2] {
    config.t_bounds.unwrap_or_else(|| {
        let d2 = cloud.diameter().powi(2).max(f64::MIN_POSITIVE);
        [1e-3 * d2, 10.0 * d2]
    })
}

fn epsilon_grid(config: &FlgpConfig, eps0: f64) -> Result<Vec<f64>> {
    match &config.epsilon_grid {
        Some(g) => Ok(g.clone()),
        None => {
            if !(eps0 > 0.0 && eps0.is_finite()) {
                return Err(Error::Fit(format!("cannot derive a bandwidth grid from ε₀ = {eps0}")));
            }
            Ok((-2..=2).map(|k| eps0 * 2f64.powi(k)).collect())
        }
    }
}

/// Final prediction on the unlabeled points with the selected covariance.
fn predict(
    ds: &Dataset,
    targets: &Targets,
    cov: &dyn CovarianceSource,
    sigma: Option<f64>,
) -> Result<(PosteriorSummary, Option<Metrics>, Option<f64>)> {
    let m = ds.m();
    let train: Vec<usize> = (0..m).collect();
    let test: Vec<usize> = (m..ds.n()).collect();
    let kmm = add_jitter(&cov.block(&train, &train)?, DEFAULT_JITTER)?;
    let k_tm = cov.block(&test, &train)?;
    let k_diag = cov.diag(&test)?;
    let truth = ds.unlabeled_truth().filter(|t| !t.is_empty());
    match targets.task {
        Task::Regression => {
            let sigma = sigma.ok_or_else(|| invalid("regression needs a noise level"))?;
            let mut post = gp_regression_predict(&kmm, &k_tm, &k_diag, &targets.y, sigma)?;
            post.mean.iter_mut().for_each(|v| *v += targets.offset);
            let metrics = match truth {
                Some(t) => Some(Metrics {
                    error_rate: None,
                    rmse: Some(metric_rmse(&post.mean, t)?),
                    nll: metric_nll_gaussian(&post.mean, &post.variance, sigma, t)?,
                }),
                None => None,
            };
            Ok((post, metrics, None))
        }
        Task::BinaryClassification => {
            let fit = laplace_fit(&kmm, &targets.y)?;
            let post = laplace_predict(&fit, &k_tm, &k_diag)?;
            let metrics = match (truth, &post.class_prob) {
                (Some(t), Some(p)) => Some(Metrics {
                    error_rate: Some(metric_error_rate(p, t)?),
                    rmse: None,
                    nll: metric_nll_bernoulli(p, t)?,
                }),
                _ => None,
            };
            Ok((post, metrics, Some(fit.gradient_norm)))
        }
    }
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.m() >= ds.n() {
        return Err(invalid("no unlabeled points to predict"));
    }
    Ok(())
}

/// Optimize `(t, σ)` for one heat-kernel spectrum.
fn optimize_spectrum(
    spectrum: &Arc<LaplacianSpectrum>,
    divisor: f64,
    targets: &Targets,
    t_bounds: [f64; 2],
    sigma_bounds: Option<[f64; 2]>,
) -> Optimum {
    let m = targets.y.len();
    // Labeled rows of the eigenvector matrix, reused for every t.
    let rows: Vec<&[f64]> = (0..m).map(|i| spectrum.row(i)).collect();
    let n = spectrum.n() as f64;
    let lambda = spectrum.eigenvalues();
    let mut weights = vec![0.0; lambda.len()];
    let mut cached_t = f64::NAN;
    let mut kmm = DMatrix::zeros(m, m);
    optimize_t_sigma(
        |t, sigma| {
            if t != cached_t {
                for (w, l) in weights.iter_mut().zip(lambda) {
                    *w = n * (-t * l / divisor).exp();
                }
                for j in 0..m {
                    for i in 0..=j {
                        let v: f64 = rows[i].iter().zip(rows[j]).zip(&weights).map(|((a, b), w)| w * (a * b)).sum();
                        kmm[(i, j)] = v;
                        kmm[(j, i)] = v;
                    }
                }
                cached_t = t;
            }
            targets.evidence(&kmm, sigma)
        },
        t_bounds,
        sigma_bounds,
    )
}

fn subsample(cloud: &PointCloud, config: &FlgpConfig) -> Result<InducedPointSet> {
    match config.subsampling {
        SubsampleMethod::Random => random_subsample(cloud, config.s, config.seed),
        SubsampleMethod::Kmeans => {
            kmeans_lloyd(cloud, config.s, config.kmeans_max_iter, default_kmeans_tol(cloud), config.seed)
        }
        SubsampleMethod::Minibatch => {
            minibatch_kmeans(cloud, config.s, config.minibatch_size, config.minibatch_iters, config.seed)
        }
    }
}

fn better(a: &Optimum, eps_a: Option<f64>, b: &Optimum, eps_b: Option<f64>) -> bool {
    // Ties: smaller ε, then smaller t.
    if a.loglik != b.loglik {
        return a.loglik > b.loglik;
    }
    match (eps_a, eps_b) {
        (Some(x), Some(y)) if x != y => x < y,
        _ => a.t < b.t,
    }
}

/// Keeps the best candidate and its spectrum across the grid.
struct Selection {
    best: Option<(Option<f64>, Optimum, Arc<LaplacianSpectrum>, f64)>,
    candidates: Vec<Candidate>,
}

impl Selection {
    fn new() -> Self {
        Self { best: None, candidates: Vec::new() }
    }

    fn offer(&mut self, eps: Option<f64>, opt: Option<Optimum>, spectrum: Option<Arc<LaplacianSpectrum>>, div: f64) {
        let opt = opt.filter(|o| o.loglik.is_finite());
        self.candidates.push(Candidate { epsilon: eps, optimum: opt });
        if let (Some(o), Some(s)) = (opt, spectrum) {
            let replace = match &self.best {
                None => true,
                Some((be, bo, _, _)) => better(&o, eps, bo, *be),
            };
            if replace {
                self.best = Some((eps, o, s, div));
            }
        }
    }
}

/// Fit FLGP (subsample, kernel, graph, spectrum, covariance, then marginal-likelihood selection) and predict on
/// the unlabeled points.
pub fn fit_flgp(ds: &Dataset, config: &FlgpConfig) -> Result<FitReport> {
    config.validate()?;
    check_dataset(ds)?;
    if config.s > ds.n() {
        return Err(invalid(format!("s = {} exceeds n = {}", config.s, ds.n())));
    }
    let targets = Targets::new(ds);
    let mut times = StageTimes::default();
    let cloud = &ds.cloud;

    let clock = Instant::now();
    let induced = subsample(cloud, config)?;
    times.subsample = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let nbrs = landmark_neighbors(cloud, &induced, config.r.min(induced.s()))?;
    times.kernel += clock.elapsed().as_secs_f64();

    let t_bounds = default_t_bounds(cloud, config);
    let sigma_bounds = targets.sigma_bounds(config);
    let m_eig = config.m.min(induced.s());
    let mut selection = Selection::new();
    let mut solves = 0;
    let mut last_error = None;

    let grid: Vec<Option<f64>> = match config.kernel {
        BaseKernelKind::SquaredExponential => {
            epsilon_grid(config, nbrs.median_rth_distance())?.into_iter().map(Some).collect()
        }
        BaseKernelKind::Lae => vec![None],
    };
    for eps in grid {
        let clock = Instant::now();
        let k = match eps {
            Some(e) => se_cross_kernel(&nbrs, e),
            None => lae_cross_kernel_from_neighbors(cloud, &induced, &nbrs, LAE_DEFAULT_MAX_ITER, LAE_DEFAULT_TOL),
        };
        times.kernel += clock.elapsed().as_secs_f64();
        let spectrum = k.and_then(|k| {
            let clock = Instant::now();
            let tp = row_normalize(&cross_similarity(&k, &induced.counts)?);
            times.graph += clock.elapsed().as_secs_f64();
            let tp = tp?;
            let clock = Instant::now();
            let m = m_eig.min(tp.s());
            let spec = truncated_svd(&tp, m, config.svd_tol, 1000 * m, config.seed);
            times.spectral += clock.elapsed().as_secs_f64();
            solves += 1;
            spec
        });
        let spectrum = match spectrum {
            Ok(s) => Arc::new(s),
            Err(e) => {
                log::warn!("candidate ε = {eps:?} failed: {e}");
                last_error = Some(e);
                selection.offer(eps, None, None, 1.0);
                continue;
            }
        };
        let div = eps.map_or(1.0, |e| e * e);
        let clock = Instant::now();
        let opt = optimize_spectrum(&spectrum, div, &targets, t_bounds, sigma_bounds);
        times.optimize += clock.elapsed().as_secs_f64();
        selection.offer(eps, Some(opt), Some(spectrum), div);
    }
    finish(ds, &targets, selection, times, solves, last_error)
}

fn finish(
    ds: &Dataset,
    targets: &Targets,
    selection: Selection,
    mut times: StageTimes,
    solves: usize,
    last_error: Option<Error>,
) -> Result<FitReport> {
    let Some((eps, opt, spectrum, div)) = selection.best else {
        return Err(match last_error {
            Some(e) => Error::Fit(format!("every grid candidate failed; last error: {e}")),
            None => Error::Fit("every grid candidate failed to factorize".into()),
        });
    };
    let clock = Instant::now();
    let eigenpairs = spectrum.m();
    let cov = HeatKernelCovariance::new(spectrum, opt.t, div)?;
    let (posterior, metrics, grad) = predict(ds, targets, &cov, opt.sigma)?;
    times.predict = clock.elapsed().as_secs_f64();
    Ok(FitReport {
        epsilon: eps,
        t: opt.t,
        noise_sd: opt.sigma,
        log_marginal: opt.loglik,
        times,
        posterior,
        metrics,
        candidates: selection.candidates,
        spectral_solves: solves,
        laplace_gradient: grad,
        eigenpairs: Some(eigenpairs),
    })
}

/// Median distance from each point of `cloud` to its `k`-th nearest other
/// point (brute force).
fn median_kth_neighbor_distance(cloud: &PointCloud, k: usize) -> f64 {
    let n = cloud.n();
    if n < 2 {
        return f64::NAN;
    }
    let k = k.clamp(1, n - 1);
    let mut dists: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| sq_dist(cloud.point(i), cloud.point(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    median(&mut dists)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Euclidean GP with `amplitude · exp(−‖x−x'‖²/4ε²)`. Classification keeps
/// the unit amplitude; for regression the amplitude takes the place of `t`
/// in the search, bounded by `[1e−2, 1e2]` times the label variance.
pub fn fit_egp_baseline(ds: &Dataset, config: &FlgpConfig) -> Result<FitReport> {
    config.validate()?;
    check_dataset(ds)?;
    let targets = Targets::new(ds);
    let mut times = StageTimes::default();
    let labeled = ds.cloud.select(&(0..ds.m()).collect::<Vec<_>>());
    let eps0 = median_kth_neighbor_distance(&labeled, 1);
    let grid = epsilon_grid(config, eps0)?;
    let default_amp = match ds.task {
        Task::Regression => {
            let v = targets.sd().powi(2);
            [1e-2 * v, 1e2 * v]
        }
        Task::BinaryClassification => [1.0, 1.0],
    };
    let amp_bounds = config.t_bounds.unwrap_or(default_amp);
    let sigma_bounds = targets.sigma_bounds(config);
    let train: Vec<usize> = (0..ds.m()).collect();

    let mut best: Option<(f64, Optimum)> = None;
    let mut candidates = Vec::new();
    let clock = Instant::now();
    for &eps in &grid {
        let unit = SquaredExponentialCovariance { cloud: &ds.cloud, epsilon: eps, amplitude: 1.0 };
        let k1 = unit.block(&train, &train)?;
        let opt = optimize_t_sigma(|a, s| targets.evidence(&(&k1 * a), s), amp_bounds, sigma_bounds);
        let opt = Some(opt).filter(|o| o.loglik.is_finite());
        candidates.push(Candidate { epsilon: Some(eps), optimum: opt });
        if let Some(o) = opt {
            if best.as_ref().is_none_or(|(be, bo)| better(&o, Some(eps), bo, Some(*be))) {
                best = Some((eps, o));
            }
        }
    }
    times.optimize = clock.elapsed().as_secs_f64();
    let (eps, opt) = best.ok_or_else(|| Error::Fit("every EGP candidate failed to factorize".into()))?;
    let clock = Instant::now();
    let cov = SquaredExponentialCovariance { cloud: &ds.cloud, epsilon: eps, amplitude: opt.t };
    let (posterior, metrics, grad) = predict(ds, &targets, &cov, opt.sigma)?;
    times.predict = clock.elapsed().as_secs_f64();
    Ok(FitReport {
        epsilon: Some(eps),
        t: opt.t,
        noise_sd: opt.sigma,
        log_marginal: opt.loglik,
        times,
        posterior,
        metrics,
        candidates,
        spectral_solves: 0,
        laplace_gradient: grad,
        eigenpairs: None,
    })
}

/// One-step graph-Laplacian GP on the full cloud (dense, `n ≤ 20000`).
pub fn fit_glgp_baseline(ds: &Dataset, config: &FlgpConfig) -> Result<FitReport> {
    config.validate()?;
    check_dataset(ds)?;
    let targets = Targets::new(ds);
    let mut times = StageTimes::default();
    let cloud = &ds.cloud;

    let clock = Instant::now();
    let sq = pairwise_sq_dists(cloud)?;
    let n = cloud.n();
    let r = config.r.clamp(1, n - 1);
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq[(i, j)]).collect();
            d.select_nth_unstable_by(r - 1, f64::total_cmp);
            d[r - 1].sqrt()
        })
        .collect();
    let eps0 = median(&mut kth);
    times.kernel = clock.elapsed().as_secs_f64();

    let t_bounds = default_t_bounds(cloud, config);
    let sigma_bounds = targets.sigma_bounds(config);
    let m_eig = config.m.min(n);
    let mut selection = Selection::new();
    let mut solves = 0;
    let mut last_error = None;
    for eps in epsilon_grid(config, eps0)? {
        let clock = Instant::now();
        let ops = one_step_from_parts(cloud, eps, &OneStepPattern::Dense, Some(&sq));
        times.graph += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let spectrum = ops.and_then(|ops| one_step_spectrum(ops, m_eig, config.seed));
        times.spectral += clock.elapsed().as_secs_f64();
        solves += 1;
        match spectrum {
            Ok(s) => {
                let s = Arc::new(s);
                let clock = Instant::now();
                let opt = optimize_spectrum(&s, eps * eps, &targets, t_bounds, sigma_bounds);
                times.optimize += clock.elapsed().as_secs_f64();
                selection.offer(Some(eps), Some(opt), Some(s), eps * eps);
            }
            Err(e) => {
                log::warn!("GLGP candidate ε = {eps} failed: {e}");
                last_error = Some(e);
                selection.offer(Some(eps), None, None, 1.0);
            }
        }
    }
    drop(sq);
    finish(ds, &targets, selection, times, solves, last_error)
}

/// Nyström GLGP: one-step operator on `s` uniformly drawn landmarks, with
/// eigenvectors extended to the whole cloud.
pub fn fit_nystrom_baseline(ds: &Dataset, config: &FlgpConfig) -> Result<FitReport> {
    config.validate()?;
    check_dataset(ds)?;
    let targets = Targets::new(ds);
    let mut times = StageTimes::default();
    let cloud = &ds.cloud;
    let n = cloud.n();
    let s = config.s.min(n);

    let clock = Instant::now();
    let mut rng = crate::rng_from_seed(config.seed);
    let mut landmarks = rand::seq::index::sample(&mut rng, n, s).into_vec();
    landmarks.sort_unstable();
    times.subsample = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let eps0 = median_kth_neighbor_distance(&cloud.select(&landmarks), config.r);
    times.kernel = clock.elapsed().as_secs_f64();

    let t_bounds = default_t_bounds(cloud, config);
    let sigma_bounds = targets.sigma_bounds(config);
    let m_eig = config.m.min(s);
    let mut selection = Selection::new();
    let mut solves = 0;
    let mut last_error = None;
    for eps in epsilon_grid(config, eps0)? {
        let clock = Instant::now();
        let spectrum = nystrom_spectrum(cloud, &landmarks, eps, m_eig, config.seed);
        times.spectral += clock.elapsed().as_secs_f64();
        solves += 1;
        match spectrum {
            Ok(sp) => {
                let sp = Arc::new(sp);
                let clock = Instant::now();
                let opt = optimize_spectrum(&sp, eps * eps, &targets, t_bounds, sigma_bounds);
                times.optimize += clock.elapsed().as_secs_f64();
                selection.offer(Some(eps), Some(opt), Some(sp), eps * eps);
            }
            Err(e) => {
                log::warn!("Nyström candidate ε = {eps} failed: {e}");
                last_error = Some(e);
                selection.offer(Some(eps), None, None, 1.0);
            }
        }
    }
    finish(ds, &targets, selection, times, solves, last_error)
}

/// Dispatch on the method.
pub fn fit_method(method: Method, ds: &Dataset, config: &FlgpConfig) -> Result<FitReport> {
    match method {
        Method::Egp => fit_egp_baseline(ds, config),
        Method::Glgp => fit_glgp_baseline(ds, config),
        Method::GlgpNystrom => fit_nystrom_baseline(ds, config),
        _ => fit_flgp(ds, &config.for_method(method)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_concentric_circles, generate_spiral};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("flgp".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = FlgpConfig::default();
        assert!(c.validate().is_ok());
        c.r = 700;
        assert!(c.validate().is_err());
        let c = FlgpConfig { t_bounds: Some([2.0, 1.0]), ..FlgpConfig::default() };
        assert!(c.validate().is_err());
        let parsed: FlgpConfig = serde_json::from_str(r#"{"s": 40, "eigenpairs": 10}"#).unwrap();
        assert_eq!((parsed.s, parsed.m, parsed.r), (40, 10, 3));
        assert!(serde_json::from_str::<FlgpConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn optimizer_recovers_quadratic_maximum() {
        for target in [0.01f64, 0.37, 5.0] {
            let opt = optimize_t_sigma(|t, _| Some(-(t.ln() - target.ln()).powi(2)), [1e-3, 10.0], None);
            assert!((opt.t.ln() - target.ln()).abs() < 1e-3, "{target}: {}", opt.t);
        }
        let opt = optimize_t_sigma(
            |t, s| Some(-(t.ln() - 1.0).powi(2) - 2.0 * (s.unwrap().ln() + 2.0).powi(2)),
            [1e-2, 1e2],
            Some([1e-3, 1.0]),
        );
        assert!((opt.t.ln() - 1.0).abs() < 1e-3 && (opt.sigma.unwrap().ln() + 2.0).abs() < 1e-3);
    }

    #[test]
    fn optimizer_contracts() {
        let opt = optimize_t_sigma(|t, _| Some(t), [2.0, 2.0], None);
        assert_eq!(opt.t, 2.0);
        let f = |t: f64| (t.ln() * 3.0).sin() + 0.1 * t;
        let opt = optimize_t_sigma(|t, _| Some(f(t)), [0.1, 20.0], None);
        assert!(opt.loglik >= f(0.1) && opt.loglik >= f(20.0));
        let opt = optimize_t_sigma(|_, _| None, [0.1, 20.0], None);
        assert_eq!(opt.loglik, f64::NEG_INFINITY);
    }

    fn small_circles() -> Dataset {
        generate_concentric_circles(600, 40, 5).unwrap()
    }

    fn small_config() -> FlgpConfig {
        FlgpConfig { s: 300, r: 3, m: 60, ..FlgpConfig::default() }
    }

    #[test]
    fn flgp_fits_small_circles() {
        let ds = small_circles();
        let report = fit_method(Method::Skflgp, &ds, &small_config()).unwrap();
        assert_eq!(report.candidates.len(), 5);
        assert_eq!(report.spectral_solves, 5);
        let err = report.metrics.unwrap().error_rate.unwrap();
        assert!(err < 0.1, "{err}");
        assert!(report.laplace_gradient.unwrap() < 1e-6);
        for c in &report.candidates {
            if let Some(o) = c.optimum {
                assert!(report.log_marginal >= o.loglik);
            }
        }
        let again = fit_method(Method::Skflgp, &ds, &small_config()).unwrap();
        assert_eq!(again.posterior, report.posterior);
    }

    #[test]
    fn lae_path_solves_once() {
        let report = fit_method(Method::Lrflgp, &small_circles(), &small_config()).unwrap();
        assert_eq!(report.spectral_solves, 1);
        assert_eq!(report.candidates.len(), 1);
        assert!(report.epsilon.is_none());
    }

    #[test]
    fn baselines_run() {
        let ds = small_circles();
        let cfg = small_config();
        for m in [Method::Egp, Method::Glgp, Method::GlgpNystrom] {
            let r = fit_method(m, &ds, &cfg).unwrap();
            let metrics = r.metrics.unwrap();
            assert!(metrics.error_rate.unwrap() <= 1.0 && metrics.nll > 0.0, "{m}");
        }
    }

    #[test]
    fn regression_on_spiral() {
        let ds = generate_spiral(400, 60, 0.1, 2).unwrap();
        let cfg = FlgpConfig { s: 100, m: 40, ..FlgpConfig::default() };
        let r = fit_method(Method::Skflgp, &ds, &cfg).unwrap();
        assert!(r.noise_sd.is_some());
        assert!(r.metrics.unwrap().rmse.unwrap().is_finite());
    }

    #[test]
    fn egp_fits_linear_target() {
        // y = 2·x₁ + noise on a dense grid.
        let n = 400;
        let noise = 0.05;
        let mut rng = crate::rng_from_seed(1);
        let normal = rand_distr::Normal::new(0.0, noise).unwrap();
        let mut pts = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x = (i as f64 * 0.618_033_988_75).fract();
            let z = (i as f64 * 0.414_213_562_37).fract();
            pts.extend_from_slice(&[x, z]);
            y.push(2.0 * x + rand_distr::Distribution::sample(&normal, &mut rng));
        }
        let cloud = PointCloud::new(pts, 2).unwrap();
        let ds = Dataset::new(cloud, y, Task::Regression).unwrap().hide_labels_after(150).unwrap();
        let r = fit_egp_baseline(&ds, &FlgpConfig::default()).unwrap();
        let rmse = r.metrics.unwrap().rmse.unwrap();
        assert!(rmse < 1.5 * noise, "{rmse}");
    }
}
