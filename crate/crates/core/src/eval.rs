//! Point metrics and uncertainty diagnostics over a prediction dump.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Metric;
use crate::error::{Error, Result};
use crate::stats::z_value;

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: u32,
    pub service_id: u32,
    pub mu: f64,
    pub var: f64,
    pub var_cal: f64,
    pub target: f64,
}

impl PredictionRecord {
    pub fn std(&self, use_raw_var: bool) -> f64 {
        if use_raw_var { self.var } else { self.var_cal }.max(0.0).sqrt()
    }

    pub fn abs_err(&self) -> f64 {
        (self.target - self.mu).abs()
    }
}

fn check_pair(y: &[f64], p: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != p.len() {
        return Err(Error::Input(format!(
            "metric inputs have lengths {} and {}",
            y.len(),
            p.len()
        )));
    }
    Ok(())
}

pub fn mae(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    check_pair(targets, predictions)?;
    Ok(targets.iter().zip(predictions).map(|(y, p)| (y - p).abs()).sum::<f64>() / targets.len() as f64)
}

pub fn rmse(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    check_pair(targets, predictions)?;
    let mse = targets
        .iter()
        .zip(predictions)
        .map(|(y, p)| (y - p).powi(2))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(mse.sqrt())
}

/// Standard deviations sorted in descending order.
pub fn topk_uncertainty_curve(stds: &[f64]) -> Vec<f64> {
    let mut out = stds.to_vec();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// Fraction of samples whose std is strictly below `threshold`.
pub fn fraction_below(stds: &[f64], threshold: f64) -> f64 {
    if stds.is_empty() {
        return 0.0;
    }
    stds.iter().filter(|s| **s < threshold).count() as f64 / stds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bucket_lo: f64,
    pub bucket_hi: f64,
    pub mean_std: f64,
    pub mean_abs_err: f64,
    pub count: usize,
}

/// Equal-width std buckets over `[min, max]`; the last bucket is closed on
/// the right. A zero-width range collapses into a single bucket. Empty
/// buckets report zero means.
pub fn uncertainty_buckets(stds: &[f64], abs_errs: &[f64], n_buckets: usize) -> Result<Vec<Bucket>> {
    check_pair(stds, abs_errs)?;
    if n_buckets == 0 {
        return Err(Error::Config("n_buckets must be at least 1".into()));
    }
    let lo = stds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = if hi > lo { n_buckets } else { 1 };
    let width = (hi - lo) / n as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); n];
    for (s, e) in stds.iter().zip(abs_errs) {
        let idx = if width > 0.0 {
            (((s - lo) / width).floor() as usize).min(n - 1)
        } else {
            0
        };
        sums[idx].0 += s;
        sums[idx].1 += e;
        sums[idx].2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (s, e, c))| Bucket {
            bucket_lo: lo + width * i as f64,
            bucket_hi: if i + 1 == n { hi } else { lo + width * (i + 1) as f64 },
            mean_std: if c > 0 { s / c as f64 } else { 0.0 },
            mean_abs_err: if c > 0 { e / c as f64 } else { 0.0 },
            count: c,
        })
        .collect())
}

/// `0.05, 0.07, ..., 0.99`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=47).map(|i| ((5 + 2 * i) as f64) / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub alpha: f64,
    pub empirical_coverage: f64,
}

/// Fraction of targets inside `mu +- z_alpha * std` for each `alpha`.
pub fn coverage_curve(mus: &[f64], stds: &[f64], targets: &[f64], alphas: &[f64]) -> Result<Vec<CoveragePoint>> {
    check_pair(targets, mus)?;
    check_pair(targets, stds)?;
    alphas
        .iter()
        .map(|&alpha| {
            let z = z_value(alpha)?;
            let inside = mus
                .iter()
                .zip(stds)
                .zip(targets)
                .filter(|((m, s), y)| (*y - *m).abs() <= z * *s)
                .count();
            Ok(CoveragePoint {
                alpha,
                empirical_coverage: inside as f64 / targets.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub std: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    pub density: Option<f64>,
    pub metric: Option<Metric>,
    pub calibrated: bool,
    /// Head variant that produced the predictions, when known.
    pub head: Option<String>,
    pub per_bucket: Vec<Bucket>,
    pub coverage: Vec<CoveragePoint>,
    pub topk_curve: Vec<f64>,
    pub scatter: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_buckets: usize,
    pub alphas: Vec<f64>,
    /// Use the uncalibrated variance for every diagnostic.
    pub use_raw_var: bool,
    pub density: Option<f64>,
    pub metric: Option<Metric>,
    pub head: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_buckets: 8,
            alphas: default_alpha_grid(),
            use_raw_var: false,
            density: None,
            metric: None,
            head: None,
        }
    }
}

pub fn evaluate(records: &[PredictionRecord], opts: &EvalOptions) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Input("prediction dump is empty".into()));
    }
    let ys: Vec<f64> = records.iter().map(|r| r.target).collect();
    let mus: Vec<f64> = records.iter().map(|r| r.mu).collect();
    let stds: Vec<f64> = records.iter().map(|r| r.std(opts.use_raw_var)).collect();
    let errs: Vec<f64> = records.iter().map(|r| r.abs_err()).collect();
    Ok(EvalReport {
        mae: mae(&ys, &mus)?,
        rmse: rmse(&ys, &mus)?,
        n: records.len(),
        density: opts.density,
        metric: opts.metric,
        calibrated: !opts.use_raw_var,
        head: opts.head.clone(),
        per_bucket: uncertainty_buckets(&stds, &errs, opts.n_buckets)?,
        coverage: coverage_curve(&mus, &stds, &ys, &opts.alphas)?,
        topk_curve: topk_uncertainty_curve(&stds),
        scatter: stds
            .iter()
            .zip(&errs)
            .map(|(&std, &abs_err)| ScatterPoint { std, abs_err })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsFile {
    mae: f64,
    rmse: f64,
    n: usize,
    density: Option<f64>,
    metric: Option<Metric>,
    calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TopkRow {
    rank: usize,
    std: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let ctx = path.display().to_string();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(ctx.clone(), e))?;
    w.write_record(header).map_err(|e| Error::csv(ctx.clone(), e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(ctx.clone(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let ctx = path.display().to_string();
    csv::Reader::from_path(path)
        .map_err(|e| Error::csv(ctx.clone(), e))?
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(ctx, e))
}

pub const BUCKETS_HEADER: [&str; 5] = ["bucket_lo", "bucket_hi", "mean_std", "mean_abs_err", "count"];
pub const COVERAGE_HEADER: [&str; 2] = ["alpha", "empirical_coverage"];
pub const TOPK_HEADER: [&str; 2] = ["rank", "std"];
pub const SCATTER_HEADER: [&str; 2] = ["std", "abs_err"];

/// Writes metrics.json, buckets.csv, coverage.csv, topk.csv and scatter.csv.
pub fn export_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = MetricsFile {
        mae: report.mae,
        rmse: report.rmse,
        n: report.n,
        density: report.density,
        metric: report.metric,
        calibrated: report.calibrated,
        head: report.head.clone(),
    };
    let path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::json("metrics.json", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_rows(&out_dir.join("buckets.csv"), &report.per_bucket, &BUCKETS_HEADER)?;
    write_rows(&out_dir.join("coverage.csv"), &report.coverage, &COVERAGE_HEADER)?;
    write_rows(
        &out_dir.join("topk.csv"),
        report
            .topk_curve
            .iter()
            .enumerate()
            .map(|(i, &std)| TopkRow { rank: i + 1, std }),
        &TOPK_HEADER,
    )?;
    write_rows(&out_dir.join("scatter.csv"), &report.scatter, &SCATTER_HEADER)
}

/// Reads back a directory written by [`export_report`].
pub fn import_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: MetricsFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let topk: Vec<TopkRow> = read_rows(&dir.join("topk.csv"))?;
    Ok(EvalReport {
        mae: m.mae,
        rmse: m.rmse,
        n: m.n,
        density: m.density,
        metric: m.metric,
        calibrated: m.calibrated,
        head: m.head,
        per_bucket: read_rows(&dir.join("buckets.csv"))?,
        coverage: read_rows(&dir.join("coverage.csv"))?,
        topk_curve: topk.into_iter().map(|r| r.std).collect(),
        scatter: read_rows(&dir.join("scatter.csv"))?,
    })
}

/// Predicts the train mean with the train residual variance for every input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantMeanBaseline {
    pub mean: f64,
    pub var: f64,
}

impl ConstantMeanBaseline {
    pub fn fit(train_targets: &[f64]) -> Result<Self> {
        if train_targets.is_empty() {
            return Err(Error::Input("baseline needs at least one target".into()));
        }
        let n = train_targets.len() as f64;
        let mean = train_targets.iter().sum::<f64>() / n;
        let var = train_targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        Ok(ConstantMeanBaseline { mean, var })
    }

    pub fn predict(&self, user_id: u32, service_id: u32, target: f64) -> PredictionRecord {
        PredictionRecord {
            user_id,
            service_id,
            mu: self.mean,
            var: self.var,
            var_cal: self.var,
            target,
        }
    }
}
