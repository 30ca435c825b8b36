//! Point clouds, labeled datasets, CSV ingestion and synthetic generators.
//!
//! Every dataset keeps its labeled points as a prefix: indices `0..m` carry
//! observed labels, indices `m..n` are unlabeled.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng_from_seed;

/// Radii of the six concentric circles, innermost first.
pub const CIRCLE_RADII: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];

/// Angular range of the spiral generator.
pub const SPIRAL_THETA_MIN: f64 = PI;
pub const SPIRAL_THETA_MAX: f64 = 6.0 * PI;

/// `n` points in `R^p`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    n: usize,
    p: usize,
}

impl PointCloud {
    pub fn new(points: Vec<f64>, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(invalid("ambient dimension must be at least 1"));
        }
        if points.is_empty() || points.len() % p != 0 {
            return Err(invalid(format!(
                "{} coordinates do not form rows of dimension {p}",
                points.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite coordinate in point {}", pos / p)));
        }
        let n = points.len() / p;
        Ok(Self { points, n, p })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let p = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut points = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.as_ref().len() != p {
                return Err(invalid(format!("row {i} has {} coordinates, expected {p}", row.as_ref().len())));
            }
            points.extend_from_slice(row.as_ref());
        }
        Self::new(points, p)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.p..(i + 1) * self.p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.p)
    }

    /// Sub-cloud made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut points = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        PointCloud { points, n: indices.len(), p: self.p }
    }

    /// Length of the bounding-box diagonal, an upper bound on the diameter
    /// within a factor `√p`. Exact for points on a segment.
    pub fn diameter(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.p];
        let mut hi = vec![f64::NEG_INFINITY; self.p];
        for row in self.rows() {
            for (d, &v) in row.iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    #[serde(alias = "classification")]
    BinaryClassification,
}

/// A point cloud whose first `m` points carry observed labels.
///
/// `truth`, when present, holds a label for every point and is used only to
/// score predictions on the unlabeled suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cloud: PointCloud,
    labels: Vec<f64>,
    truth: Option<Vec<f64>>,
    pub task: Task,
}

impl Dataset {
    pub fn new(cloud: PointCloud, labels: Vec<f64>, task: Task) -> Result<Self> {
        Self::with_truth(cloud, labels, None, task)
    }

    pub fn with_truth(
        cloud: PointCloud,
        labels: Vec<f64>,
        truth: Option<Vec<f64>>,
        task: Task,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabels);
        }
        if labels.len() > cloud.n() {
            return Err(invalid(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.n()
            )));
        }
        check_labels(&labels, task)?;
        if let Some(t) = &truth {
            if t.len() != cloud.n() {
                return Err(invalid("truth must cover every point"));
            }
            check_labels(t, task)?;
        }
        Ok(Self { cloud, labels, truth, task })
    }

    pub fn n(&self) -> usize {
        self.cloud.n()
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    /// Ground truth on the unlabeled suffix, if known.
    pub fn unlabeled_truth(&self) -> Option<&[f64]> {
        self.truth.as_deref().map(|t| &t[self.m()..])
    }

    /// Keep only the first `m` labels observed; the rest become held-out truth.
    /// Requires a fully labeled dataset.
    pub fn hide_labels_after(self, m: usize) -> Result<Self> {
        if self.m() != self.n() {
            return Err(invalid("hiding labels requires a fully labeled dataset"));
        }
        if m == 0 || m > self.n() {
            return Err(invalid(format!("labeled count {m} outside 1..={}", self.n())));
        }
        let truth = self.labels.clone();
        Self::with_truth(self.cloud, truth[..m].to_vec(), Some(truth), self.task)
    }
}

fn check_labels(labels: &[f64], task: Task) -> Result<()> {
    for (i, &y) in labels.iter().enumerate() {
        if !y.is_finite() {
            return Err(invalid(format!("non-finite label at point {i}")));
        }
        if task == Task::BinaryClassification && y != 0.0 && y != 1.0 {
            return Err(invalid(format!("classification label {y} at point {i} is not 0 or 1")));
        }
    }
    Ok(())
}

/// Index ranges of the labeled prefix and the unlabeled suffix.
pub fn split_labeled(dataset: &Dataset) -> (Range<usize>, Range<usize>) {
    (0..dataset.m(), dataset.m()..dataset.n())
}

pub fn load_csv_dataset(path: impl AsRef<Path>, task: Task) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_csv_dataset(std::io::BufReader::new(file), task)
}

/// Parse `x1,...,xp,label` rows. Rows with an empty label are unlabeled and
/// must follow every labeled row. Row numbers in errors count data rows from 1.
pub fn parse_csv_dataset<R: Read>(reader: R, task: Task) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { row: 0, message: e.to_string() })?;
    let width = header.len();
    if width < 2 {
        return Err(Error::Parse {
            row: 0,
            message: "header needs at least one coordinate and a label column".into(),
        });
    }
    let p = width - 1;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut seen_unlabeled = false;
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for field in record.iter().take(p) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric coordinate {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("non-finite coordinate {field:?}") });
            }
            points.push(v);
        }
        let label = record[p].trim();
        if label.is_empty() {
            seen_unlabeled = true;
            continue;
        }
        if seen_unlabeled {
            return Err(Error::Parse {
                row,
                message: "labeled row after an unlabeled row".into(),
            });
        }
        let y: f64 = label.parse().map_err(|_| Error::Parse {
            row,
            message: format!("non-numeric label {label:?}"),
        })?;
        if !y.is_finite() || (task == Task::BinaryClassification && y != 0.0 && y != 1.0) {
            return Err(Error::Parse { row, message: format!("invalid label {label:?}") });
        }
        labels.push(y);
    }
    if points.is_empty() {
        return Err(Error::Parse { row: 1, message: "no data rows".into() });
    }
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let cloud = PointCloud::new(points, p)?;
    Dataset::new(cloud, labels, task)
}

/// Write the dataset in the format read by [`parse_csv_dataset`]; coordinates
/// use 17 significant digits so they reload bit-exactly.
pub fn write_csv_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = dataset.cloud.p();
    let mut header: Vec<String> = (1..=p).map(|d| format!("x{d}")).collect();
    header.push("label".into());
    wtr.write_record(&header)?;
    for (i, row) in dataset.cloud.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(dataset.labels.get(i).map(|y| format!("{y}")).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn check_generator_counts(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(invalid(format!("labeled count {m} outside 1..={n}")));
    }
    Ok(())
}

/// Shuffle all points so that a uniformly random subset of size `m` lands in
/// the labeled prefix.
fn shuffled_dataset(
    rows: Vec<[f64; 2]>,
    truth: Vec<f64>,
    m: usize,
    task: Task,
    rng: &mut crate::Rng,
) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let mut points = Vec::with_capacity(rows.len() * 2);
    let mut full = Vec::with_capacity(rows.len());
    for &i in &order {
        points.extend_from_slice(&rows[i]);
        full.push(truth[i]);
    }
    let cloud = PointCloud::new(points, 2)?;
    Dataset::with_truth(cloud, full[..m].to_vec(), Some(full), task)
}

/// Six concentric circles with `n/6` points each, angles uniform on
/// `[0, 2π)`. Circles 1, 3, 5 (radii 1, 3, 5) are class 1.
pub fn generate_concentric_circles(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 6 != 0 {
        return Err(invalid(format!("n = {n} is not a positive multiple of 6")));
    }
    check_generator_counts(n, m)?;
    let mut rng = rng_from_seed(seed);
    let per = n / 6;
    let mut rows = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (c, &radius) in CIRCLE_RADII.iter().enumerate() {
        let label = if c % 2 == 0 { 1.0 } else { 0.0 };
        for _ in 0..per {
            let angle = rng.random_range(0.0..2.0 * PI);
            rows.push([radius * angle.cos(), radius * angle.sin()]);
            truth.push(label);
        }
    }
    shuffled_dataset(rows, truth, m, Task::BinaryClassification, &mut rng)
}

/// Point of the Archimedean spiral at angle `theta`.
pub fn spiral_point(theta: f64) -> [f64; 2] {
    let radius = theta / SPIRAL_THETA_MAX;
    [radius * theta.cos(), radius * theta.sin()]
}

/// Spiral regression: θ uniform on `[π, 6π]`, response θ plus Gaussian noise.
pub fn generate_spiral(n: usize, m: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("spiral needs at least 2 points"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(invalid("noise_sd must be finite and non-negative"));
    }
    check_generator_counts(n, m)?;
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| invalid(e.to_string()))?;
    let mut rows = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.random_range(SPIRAL_THETA_MIN..=SPIRAL_THETA_MAX);
        rows.push(spiral_point(theta));
        let eps = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        truth.push(theta + eps);
    }
    shuffled_dataset(rows, truth, m, Task::Regression, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_three_rows_two_labeled() {
        let text = "x1,x2,label\n0,1,1\n2,3,0\n4,5,\n";
        let ds = parse_csv_dataset(text.as_bytes(), Task::BinaryClassification).unwrap();
        assert_eq!((ds.n(), ds.cloud.p(), ds.m()), (3, 2, 2));
        assert_eq!(ds.labels(), &[1.0, 0.0]);
        assert_eq!(ds.cloud.point(2), &[4.0, 5.0]);
    }

    #[test]
    fn csv_non_numeric_coordinate_names_row() {
        let mut text = String::from("x1,x2,label\n");
        for i in 1..=10 {
            if i == 7 {
                text.push_str("1.0,abc,\n");
            } else {
                text.push_str(&format!("{i},{i},{}\n", if i < 3 { "1" } else { "" }));
            }
        }
        match parse_csv_dataset(text.as_bytes(), Task::Regression) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_all_labeled() {
        let text = "x1,label\n0.5,1.5\n1.5,2.5\n";
        let ds = parse_csv_dataset(text.as_bytes(), Task::Regression).unwrap();
        assert_eq!(ds.m(), ds.n());
    }

    #[test]
    fn csv_errors() {
        let no_labels = "x1,label\n0.5,\n";
        assert!(matches!(
            parse_csv_dataset(no_labels.as_bytes(), Task::Regression),
            Err(Error::EmptyLabels)
        ));
        let wrong_width = "x1,x2,label\n1,2,1\n1,2\n";
        assert!(matches!(
            parse_csv_dataset(wrong_width.as_bytes(), Task::Regression),
            Err(Error::Parse { row: 2, .. })
        ));
        let out_of_order = "x1,label\n1,\n2,1\n";
        assert!(matches!(
            parse_csv_dataset(out_of_order.as_bytes(), Task::Regression),
            Err(Error::Parse { row: 2, .. })
        ));
        let bad_class = "x1,label\n1,2\n";
        assert!(parse_csv_dataset(bad_class.as_bytes(), Task::BinaryClassification).is_err());
    }

    #[test]
    fn circles_six_points() {
        let ds = generate_concentric_circles(6, 6, 3).unwrap();
        let mut by_circle: Vec<(usize, f64)> = (0..6)
            .map(|i| {
                let r = ds.cloud.point(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                (r.round() as usize, ds.labels()[i])
            })
            .collect();
        by_circle.sort_by_key(|&(c, _)| c);
        let labels: Vec<f64> = by_circle.iter().map(|&(_, y)| y).collect();
        assert_eq!(labels, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(by_circle.iter().map(|&(c, _)| c).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn circles_balance_and_radii() {
        let ds = generate_concentric_circles(3000, 50, 11).unwrap();
        let truth = ds.truth().unwrap();
        assert_eq!(truth.iter().filter(|&&y| y == 1.0).count(), 1500);
        assert_eq!(ds.m(), 50);
        assert_eq!(&truth[..50], ds.labels());
        for (i, row) in ds.cloud.rows().enumerate() {
            let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
            let circle = norm.round() as usize;
            assert!((norm - CIRCLE_RADII[circle - 1]).abs() < 1e-12);
            let expected = if circle % 2 == 1 { 1.0 } else { 0.0 };
            assert_eq!(truth[i], expected);
        }
    }

    #[test]
    fn circles_reject_bad_n() {
        assert!(generate_concentric_circles(100, 10, 0).is_err());
        assert!(generate_concentric_circles(12, 13, 0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            generate_concentric_circles(600, 30, 5).unwrap(),
            generate_concentric_circles(600, 30, 5).unwrap()
        );
        assert_eq!(generate_spiral(100, 10, 0.1, 9).unwrap(), generate_spiral(100, 10, 0.1, 9).unwrap());
        assert_ne!(generate_spiral(100, 10, 0.1, 9).unwrap(), generate_spiral(100, 10, 0.1, 10).unwrap());
    }

    #[test]
    fn noiseless_spiral_response_is_theta() {
        let ds = generate_spiral(200, 20, 0.0, 4).unwrap();
        for (i, row) in ds.cloud.rows().enumerate() {
            let theta = ds.truth().unwrap()[i];
            let expected = spiral_point(theta);
            assert!((row[0] - expected[0]).abs() < 1e-15 && (row[1] - expected[1]).abs() < 1e-15);
            assert!((SPIRAL_THETA_MIN..=SPIRAL_THETA_MAX).contains(&theta));
        }
    }

    #[test]
    fn spiral_turns_are_far_apart_along_the_curve() {
        let a = spiral_point(PI);
        let b = spiral_point(3.0 * PI);
        // Both lie on the negative x-axis.
        assert!(a[1].abs() < 1e-15 && b[1].abs() < 1e-15 && a[0] < 0.0 && b[0] < 0.0);
        let euclid = sq_dist(&a, &b).sqrt();
        // Arc length of r = θ/(6π): (1/(12π)) [θ√(θ²+1) + asinh θ].
        let prim = |t: f64| (t * (t * t + 1.0).sqrt() + t.asinh()) / (2.0 * SPIRAL_THETA_MAX);
        let arc = prim(3.0 * PI) - prim(PI);
        // Midpoint-rule check of the closed form.
        let steps = 100_000;
        let h = 2.0 * PI / steps as f64;
        let quad: f64 = (0..steps)
            .map(|k| {
                let t = PI + (k as f64 + 0.5) * h;
                (t * t + 1.0).sqrt() / SPIRAL_THETA_MAX * h
            })
            .sum();
        assert!((arc - quad).abs() < 1e-8);
        let mean_radius = (PI + 3.0 * PI) / 2.0 / SPIRAL_THETA_MAX;
        assert!((euclid - 1.0 / 3.0).abs() < 1e-15);
        assert!(arc >= 2.0 * PI * mean_radius);
        assert!(arc > 6.0 * euclid);
    }

    #[test]
    fn spiral_two_points() {
        let ds = generate_spiral(2, 2, 0.1, 0).unwrap();
        assert_eq!((ds.n(), ds.m()), (2, 2));
        assert!(generate_spiral(1, 1, 0.1, 0).is_err());
    }

    #[test]
    fn split_ranges() {
        let cloud = PointCloud::new((0..10).map(f64::from).collect(), 1).unwrap();
        let ds = Dataset::new(cloud.clone(), vec![0.0; 4], Task::Regression).unwrap();
        assert_eq!(split_labeled(&ds), (0..4, 4..10));
        let full = Dataset::new(cloud.clone(), vec![0.0; 10], Task::Regression).unwrap();
        assert!(split_labeled(&full).1.is_empty());
        let one = Dataset::new(cloud, vec![0.0], Task::Regression).unwrap();
        assert_eq!(split_labeled(&one).0.len(), 1);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate_spiral(50, 10, 0.3, 2).unwrap();
        let mut buf = Vec::new();
        write_csv_dataset(&ds, &mut buf).unwrap();
        let back = parse_csv_dataset(buf.as_slice(), Task::Regression).unwrap();
        assert_eq!(back.cloud, ds.cloud);
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn point_cloud_validation() {
        assert!(PointCloud::new(vec![], 2).is_err());
        assert!(PointCloud::new(vec![1.0, 2.0, 3.0], 2).is_err());
        assert!(PointCloud::new(vec![1.0, f64::NAN], 2).is_err());
        let c = PointCloud::new(vec![0.0, 0.0, 3.0, 4.0], 2).unwrap();
        assert!((c.diameter() - 5.0).abs() < 1e-15);
    }
}
