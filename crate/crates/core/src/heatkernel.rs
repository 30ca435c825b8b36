//! Heat-kernel covariance built from a Laplacian spectrum, materialized
//! blockwise, plus the squared-exponential covariance used by EGP.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::basekernel::se_value;
use crate::data::PointCloud;
use crate::error::{invalid, Result};
use crate::spectral::LaplacianSpectrum;

/// Anything that can produce covariance blocks over the point cloud.
pub trait CovarianceSource: Sync {
    fn n(&self) -> usize;

    fn entry(&self, i: usize, j: usize) -> f64;

    /// Dense block `C[rows, cols]`.
    fn block(&self, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
        check_indices(self.n(), rows)?;
        check_indices(self.n(), cols)?;
        Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.entry(rows[a], cols[b])))
    }

    fn diag(&self, idx: &[usize]) -> Result<Vec<f64>> {
        check_indices(self.n(), idx)?;
        Ok(idx.iter().map(|&i| self.entry(i, i)).collect())
    }
}

fn check_indices(n: usize, idx: &[usize]) -> Result<()> {
    match idx.iter().find(|&&i| i >= n) {
        Some(i) => Err(invalid(format!("index {i} out of range for {n} points"))),
        None => Ok(()),
    }
}

/// `C = n Σ_i exp(−t λ_i / divisor) v_i v_iᵀ`.
#[derive(Debug, Clone)]
pub struct HeatKernelCovariance {
    spectrum: Arc<LaplacianSpectrum>,
    t: f64,
    scale_divisor: f64,
    weights: Vec<f64>,
}

impl HeatKernelCovariance {
    pub fn new(spectrum: Arc<LaplacianSpectrum>, t: f64, scale_divisor: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!("diffusion time {t} must be positive")));
        }
        if !(scale_divisor > 0.0 && scale_divisor.is_finite()) {
            return Err(invalid(format!("scale divisor {scale_divisor} must be positive")));
        }
        let n = spectrum.n() as f64;
        let weights = spectrum.eigenvalues().iter().map(|l| n * (-t * l / scale_divisor).exp()).collect();
        Ok(Self { spectrum, t, scale_divisor, weights })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn scale_divisor(&self) -> f64 {
        self.scale_divisor
    }

    pub fn spectrum(&self) -> &Arc<LaplacianSpectrum> {
        &self.spectrum
    }

    /// Same spectrum, different diffusion time.
    pub fn with_t(&self, t: f64) -> Result<Self> {
        Self::new(self.spectrum.clone(), t, self.scale_divisor)
    }
}

impl CovarianceSource for HeatKernelCovariance {
    fn n(&self) -> usize {
        self.spectrum.n()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        // w_k · (v_ik v_jk) keeps C_ij and C_ji bitwise equal.
        let (a, b) = (self.spectrum.row(i), self.spectrum.row(j));
        a.iter().zip(b).zip(&self.weights).map(|((x, y), w)| w * (x * y)).sum()
    }
}

/// `amplitude · exp(−‖x − x'‖² / 4ε²)` over the cloud.
#[derive(Debug, Clone)]
pub struct SquaredExponentialCovariance<'a> {
    pub cloud: &'a PointCloud,
    pub epsilon: f64,
    pub amplitude: f64,
}

impl CovarianceSource for SquaredExponentialCovariance<'_> {
    fn n(&self) -> usize {
        self.cloud.n()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.amplitude * se_value(self.cloud.point(i), self.cloud.point(j), self.epsilon)
    }
}

/// An explicit symmetric covariance matrix.
#[derive(Debug, Clone)]
pub struct DenseCovariance(pub DMatrix<f64>);

impl CovarianceSource for DenseCovariance {
    fn n(&self) -> usize {
        self.0.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// `block + level · (trace/m) · I`.
pub fn add_jitter(block: &DMatrix<f64>, level: f64) -> Result<DMatrix<f64>> {
    if !block.is_square() {
        return Err(invalid("jitter needs a square block"));
    }
    let mut out = block.clone();
    let m = block.nrows();
    if m == 0 || level == 0.0 {
        return Ok(out);
    }
    let shift = level * block.trace() / m as f64;
    for i in 0..m {
        out[(i, i)] += shift;
    }
    Ok(out)
}

/// Default jitter level for the training block.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Debug dump of a block as `row,col,value` lines.
pub fn write_block_csv<W: Write>(block: &DMatrix<f64>, rows: &[usize], cols: &[usize], mut out: W) -> Result<()> {
    writeln!(out, "row,col,value")?;
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            writeln!(out, "{i},{j},{:.17e}", block[(a, b)])?;
        }
    }
    Ok(())
}
