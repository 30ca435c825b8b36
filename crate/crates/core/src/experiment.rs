//! Seeded, repeated experiments over several methods and their reports.
//!
//! Repetition `i` uses seed `base + i` for both the dataset and the fit, so
//! every method sees the same datasets. Results are gathered in
//! (method, repetition) order regardless of the thread count.
//!
//! Report files:
//!
//! * `runs.csv`: `method,repetition,seed,status,error_rate,rmse,nll,epsilon,t,noise_sd,log_marginal,message`
//! * `timings.csv`: `method,repetition,seed,subsample,kernel,graph,spectral,optimize,predict,total` (seconds)
//! * `summary.csv`: `method,metric,mean,sd,n_runs`
//! * `summary.md`: the summary as a `mean(sd)` table.
//!
//! `runs.csv` holds only deterministic quantities; wall-clock times live in
//! `timings.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_concentric_circles, generate_spiral, load_csv_dataset, Dataset, Task};
use crate::error::{invalid, Error, Result};
use crate::train::{fit_method, FlgpConfig, Method, Metrics, StageTimes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Circles,
    Spiral,
    Csv,
}

/// JSON experiment description. Unknown fields are rejected.
///
/// ```json
/// {
///   "experiment": "circles",
///   "methods": ["egp", "glgp", "skflgp", "lkflgp"],
///   "n": 3000, "m": 50, "repetitions": 20, "seed": 1,
///   "flgp": { "s": 600, "r": 3, "eigenpairs": 100 },
///   "overrides": { "lkflgp": { "s": 300 } },
///   "out": "results", "threads": 4
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub methods: Vec<Method>,
    pub n: usize,
    /// Labeled points.
    pub m: usize,
    pub repetitions: usize,
    /// Base seed.
    pub seed: u64,
    /// Response noise of the spiral generator.
    pub noise_sd: f64,
    pub csv_path: Option<PathBuf>,
    /// Task of a CSV dataset (default binary classification).
    pub task: Option<Task>,
    /// Settings shared by every method.
    pub flgp: FlgpConfig,
    /// Per-method field overrides on top of `flgp`.
    pub overrides: BTreeMap<Method, Value>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Circles,
            methods: vec![Method::Skflgp],
            n: 3000,
            m: 50,
            repetitions: 1,
            seed: 0,
            noise_sd: 0.1,
            csv_path: None,
            task: None,
            flgp: FlgpConfig::default(),
            overrides: BTreeMap::new(),
            out: None,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        for (i, a) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(a) {
                return Err(invalid(format!("method {a} listed twice")));
            }
        }
        match self.experiment {
            ExperimentKind::Circles | ExperimentKind::Spiral => {
                if self.m == 0 || self.m > self.n {
                    return Err(invalid(format!("need 1 ≤ m ≤ n, got m = {} and n = {}", self.m, self.n)));
                }
                if self.experiment == ExperimentKind::Circles && self.n % 6 != 0 {
                    return Err(invalid(format!("circles need n divisible by 6, got {}", self.n)));
                }
                if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
                    return Err(invalid("noise_sd must be finite and non-negative"));
                }
            }
            ExperimentKind::Csv => {
                if self.csv_path.is_none() {
                    return Err(invalid("csv experiments need csv_path"));
                }
            }
        }
        if self.threads == Some(0) {
            return Err(invalid("threads must be positive"));
        }
        for &method in &self.methods {
            self.method_config(method, self.seed)?.validate()?;
        }
        Ok(())
    }

    /// Settings for one method and repetition seed.
    pub fn method_config(&self, method: Method, seed: u64) -> Result<FlgpConfig> {
        let mut base = serde_json::to_value(&self.flgp)?;
        if let Some(over) = self.overrides.get(&method) {
            let Value::Object(fields) = over else {
                return Err(invalid(format!("override for {method} must be an object")));
            };
            let target = base.as_object_mut().expect("config serializes to an object");
            for (k, v) in fields {
                let key = if k == "M" { "eigenpairs" } else { k.as_str() };
                target.insert(key.to_string(), v.clone());
            }
        }
        let mut config: FlgpConfig = serde_json::from_value(base)?;
        config = config.for_method(method);
        config.seed = seed;
        Ok(config)
    }

    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        self.seed.wrapping_add(repetition as u64)
    }

    fn dataset(&self, seed: u64, csv: Option<&Dataset>) -> Result<Dataset> {
        match self.experiment {
            ExperimentKind::Circles => generate_concentric_circles(self.n, self.m, seed),
            ExperimentKind::Spiral => generate_spiral(self.n, self.m, self.noise_sd, seed),
            ExperimentKind::Csv => Ok(csv.expect("csv dataset loaded").clone()),
        }
    }
}

/// Outcome of one successful fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: Option<Metrics>,
    pub epsilon: Option<f64>,
    pub t: f64,
    pub noise_sd: Option<f64>,
    pub log_marginal: f64,
    pub times: StageTimes,
    /// Gradient ∞-norm at the Laplace mode (classification).
    pub laplace_gradient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub repetition: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunResult, String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.outcome.is_ok()
    }
}

/// Fit every method on every repetition. Fit failures are recorded per run;
/// only configuration and I/O problems abort.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let csv = match (&config.experiment, &config.csv_path) {
        (ExperimentKind::Csv, Some(path)) => {
            Some(load_csv_dataset(path, config.task.unwrap_or(Task::BinaryClassification))?)
        }
        _ => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Fit(format!("thread pool: {e}")))?;

    let records = pool.install(|| {
        let datasets: Vec<Arc<std::result::Result<Dataset, String>>> = (0..config.repetitions)
            .into_par_iter()
            .map(|rep| Arc::new(config.dataset(config.repetition_seed(rep), csv.as_ref()).map_err(|e| e.to_string())))
            .collect();
        let jobs: Vec<(Method, usize)> = config
            .methods
            .iter()
            .flat_map(|&m| (0..config.repetitions).map(move |rep| (m, rep)))
            .collect();
        jobs.into_par_iter()
            .map(|(method, rep)| {
                let seed = config.repetition_seed(rep);
                let outcome = match datasets[rep].as_ref() {
                    Err(e) => Err(e.clone()),
                    Ok(ds) => run_one(config, method, ds, seed),
                };
                match &outcome {
                    Ok(r) => log::info!("{method} rep {rep}: {:?} in {:.2}s", r.metrics, r.times.total()),
                    Err(e) => log::warn!("{method} rep {rep} failed: {e}"),
                }
                RunRecord { method, repetition: rep, seed, outcome }
            })
            .collect()
    });
    Ok(records)
}

fn run_one(
    config: &ExperimentConfig,
    method: Method,
    ds: &Dataset,
    seed: u64,
) -> std::result::Result<RunResult, String> {
    let fc = config.method_config(method, seed).map_err(|e| e.to_string())?;
    let report = fit_method(method, ds, &fc).map_err(|e| e.to_string())?;
    Ok(RunResult {
        metrics: report.metrics,
        epsilon: report.epsilon,
        t: report.t,
        noise_sd: report.noise_sd,
        log_marginal: report.log_marginal,
        times: report.times,
        laplace_gradient: report.laplace_gradient,
    })
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: &'static str,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub n_runs: usize,
}

pub const SUMMARY_METRICS: [&str; 4] = ["error_rate", "nll", "rmse", "time_total"];

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn metric_value(r: &RunResult, metric: &str) -> Option<f64> {
    match metric {
        "error_rate" => r.metrics.and_then(|m| m.error_rate),
        "nll" => r.metrics.map(|m| m.nll),
        "rmse" => r.metrics.and_then(|m| m.rmse),
        "time_total" => Some(r.times.total()),
        _ => None,
    }
}

/// Mean and sd per method (in first-seen order) and metric.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    if !records.iter().any(RunRecord::succeeded) {
        return Err(Error::NoSuccessfulRuns);
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut rows = Vec::new();
    for method in methods {
        for metric in SUMMARY_METRICS {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.outcome.as_ref().ok())
                .filter_map(|r| metric_value(r, metric))
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&values);
            rows.push(SummaryRow { method, metric, mean, sd, n_runs: values.len() });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_runs_csv<W: std::io::Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "method",
        "repetition",
        "seed",
        "status",
        "error_rate",
        "rmse",
        "nll",
        "epsilon",
        "t",
        "noise_sd",
        "log_marginal",
        "message",
    ])?;
    for r in records {
        let head = [r.method.to_string(), r.repetition.to_string(), r.seed.to_string()];
        let rest: Vec<String> = match &r.outcome {
            Ok(res) => vec![
                "ok".into(),
                opt(res.metrics.and_then(|m| m.error_rate)),
                opt(res.metrics.and_then(|m| m.rmse)),
                opt(res.metrics.map(|m| m.nll)),
                opt(res.epsilon),
                res.t.to_string(),
                opt(res.noise_sd),
                res.log_marginal.to_string(),
                String::new(),
            ],
            Err(msg) => {
                let mut v = vec!["failed".to_string()];
                v.extend(std::iter::repeat_n(String::new(), 7));
                v.push(msg.clone());
                v
            }
        };
        out.write_record(head.iter().chain(&rest))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: std::io::Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "method",
        "repetition",
        "seed",
        "subsample",
        "kernel",
        "graph",
        "spectral",
        "optimize",
        "predict",
        "total",
    ])?;
    for r in records {
        let Ok(res) = &r.outcome else { continue };
        let t = res.times;
        let cells = [
            r.method.to_string(),
            r.repetition.to_string(),
            r.seed.to_string(),
            t.subsample.to_string(),
            t.kernel.to_string(),
            t.graph.to_string(),
            t.spectral.to_string(),
            t.optimize.to_string(),
            t.predict.to_string(),
            t.total().to_string(),
        ];
        out.write_record(&cells)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "metric", "mean", "sd", "n_runs"])?;
    for r in rows {
        out.write_record([
            r.method.to_string(),
            r.metric.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.n_runs.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Markdown table with error rates in percent and `mean(sd)` cells.
pub fn summary_markdown(rows: &[SummaryRow], records: &[RunRecord]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut s = String::from("| method | error (%) | NLL | RMSE | time (s) | runs ok |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for method in methods {
        let cell = |metric: &str, scale: f64, digits: usize| {
            rows.iter()
                .find(|r| r.method == method && r.metric == metric)
                .map(|r| format!("{:.*}({:.*})", digits, r.mean * scale, digits, r.sd * scale))
                .unwrap_or_else(|| "-".into())
        };
        let total = records.iter().filter(|r| r.method == method).count();
        let ok = records.iter().filter(|r| r.method == method && r.succeeded()).count();
        let _ = writeln!(
            s,
            "| {method} | {} | {} | {} | {} | {ok}/{total} |",
            cell("error_rate", 100.0, 1),
            cell("nll", 1.0, 2),
            cell("rmse", 1.0, 3),
            cell("time_total", 1.0, 2),
        );
    }
    s
}

/// Write all report files into `dir`. `runs.csv` and `timings.csv` are
/// always written; the summaries need at least one successful run.
pub fn emit_report(records: &[RunRecord], dir: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_runs_csv(records, fs::File::create(dir.join("runs.csv"))?)?;
    write_timings_csv(records, fs::File::create(dir.join("timings.csv"))?)?;
    let rows = summarize(records)?;
    write_summary_csv(&rows, fs::File::create(dir.join("summary.csv"))?)?;
    fs::write(dir.join("summary.md"), summary_markdown(&rows, records))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, rep: usize, err: Option<f64>) -> RunRecord {
        let outcome = match err {
            Some(e) => Ok(RunResult {
                metrics: Some(Metrics { error_rate: Some(e), rmse: None, nll: 0.5 + e }),
                epsilon: Some(0.1),
                t: 2.0,
                noise_sd: None,
                log_marginal: -3.0,
                times: StageTimes { optimize: 1.0, ..StageTimes::default() },
                laplace_gradient: None,
            }),
            None => Err("boom".into()),
        };
        RunRecord { method, repetition: rep, seed: rep as u64, outcome }
    }

    #[test]
    fn sample_sd_of_three_runs() {
        let recs: Vec<_> = [0.1, 0.2, 0.6].iter().enumerate().map(|(i, &e)| record(Method::Egp, i, Some(e))).collect();
        let rows = summarize(&recs).unwrap();
        let err = rows.iter().find(|r| r.metric == "error_rate").unwrap();
        assert!((err.mean - 0.3).abs() < 1e-15);
        let sd = ((0.04 + 0.01 + 0.09) / 2.0f64).sqrt();
        assert!((err.sd - sd).abs() < 1e-15);
        assert_eq!(err.n_runs, 3);
    }

    #[test]
    fn zero_successes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(Method::Egp, 0, None)];
        assert!(matches!(emit_report(&recs, dir.path()), Err(Error::NoSuccessfulRuns)));
        assert!(dir.path().join("runs.csv").exists());
        assert!(!dir.path().join("summary.csv").exists());
    }

    #[test]
    fn runs_csv_columns_are_fixed() {
        let mut buf = Vec::new();
        write_runs_csv(&[record(Method::Skflgp, 0, Some(0.25)), record(Method::Skflgp, 1, None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,repetition,seed,status,error_rate,rmse,nll,epsilon,t,noise_sd,log_marginal,message");
        assert_eq!(lines[1], "skflgp,0,0,ok,0.25,,0.75,0.1,2,,-3,");
        assert_eq!(lines[2], "skflgp,1,1,failed,,,,,,,,boom");
    }

    #[test]
    fn markdown_uses_mean_sd_cells() {
        let recs = vec![record(Method::Egp, 0, Some(0.4)), record(Method::Egp, 1, Some(0.5)), record(Method::Egp, 2, None)];
        let rows = summarize(&recs).unwrap();
        let md = summary_markdown(&rows, &recs);
        assert!(md.contains("| egp | 45.0(7.1) | 0.95(0.07) | - | 1.00(0.00) | 2/3 |"), "{md}");
    }

    #[test]
    fn config_parsing_and_overrides() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment":"circles","methods":["skflgp","lkflgp"],"n":600,"m":20,
                "flgp":{"s":100,"r":3,"M":20},"overrides":{"lkflgp":{"s":50,"M":10}}}"#,
        )
        .unwrap();
        let sk = c.method_config(Method::Skflgp, 7).unwrap();
        assert_eq!((sk.s, sk.m, sk.seed), (100, 20, 7));
        let lk = c.method_config(Method::Lkflgp, 7).unwrap();
        assert_eq!((lk.s, lk.m), (50, 10));
        assert_eq!(lk.kernel, crate::basekernel::BaseKernelKind::Lae);

        for bad in [
            r#"{"methods":["nope"]}"#,
            r#"{"repetitions":0}"#,
            r#"{"n":601}"#,
            r#"{"experiment":"csv"}"#,
            r#"{"bogus":1}"#,
            r#"{"methods":["egp","egp"]}"#,
            r#"{"overrides":{"skflgp":{"s":0}}}"#,
            r#"{"overrides":{"skflgp":{"unknown":0}}}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn single_egp_run_on_small_circles() {
        let c = ExperimentConfig { methods: vec![Method::Egp], n: 600, m: 50, seed: 3, ..Default::default() };
        let recs = run_experiment(&c).unwrap();
        assert_eq!(recs.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&recs, dir.path()).unwrap();
        let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 2);
        assert!(runs.lines().nth(1).unwrap().starts_with("egp,0,3,ok,"));
        for f in ["timings.csv", "summary.csv", "summary.md"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
