//! Metrics, per-region reports, analytic error-bound curves and empirical
//! error-versus-k curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{region_of_label, BinStats, Dataset, ShotRegion};
use crate::error::{Error, Result};
use crate::par;
use crate::predict::{ols_fit, ContextPredictor, Prompt};
use crate::retrieval::{augmented_retrieve, FeatureTransform, RetrievalIndex};

/// Absolute errors below this are floored before taking logs in [`metric_gm`].
pub const GM_FLOOR: f64 = 1e-10;

/// Reporting regions: everything, then the three shot regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    All,
    Many,
    Medium,
    Few,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::All, Region::Many, Region::Medium, Region::Few];

    pub fn name(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Many => "many",
            Region::Medium => "medium",
            Region::Few => "few",
        }
    }

    pub fn shot(self) -> Option<ShotRegion> {
        match self {
            Region::All => None,
            Region::Many => Some(ShotRegion::Many),
            Region::Medium => Some(ShotRegion::Medium),
            Region::Few => Some(ShotRegion::Few),
        }
    }

    pub fn contains(self, shot: ShotRegion) -> bool {
        self.shot().is_none_or(|s| s == shot)
    }
}

impl From<ShotRegion> for Region {
    fn from(s: ShotRegion) -> Self {
        match s {
            ShotRegion::Many => Region::Many,
            ShotRegion::Medium => Region::Medium,
            ShotRegion::Few => Region::Few,
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn residuals(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            found: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidConfig("metrics need at least one prediction".into()));
    }
    y.iter()
        .zip(yhat)
        .enumerate()
        .map(|(i, (a, b))| {
            if a.is_finite() && b.is_finite() {
                Ok(a - b)
            } else {
                Err(Error::NonFinite { row: i + 1, col: 0 })
            }
        })
        .collect()
}

pub fn metric_mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let e = residuals(y, yhat)?;
    Ok(e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64)
}

pub fn metric_mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let e = residuals(y, yhat)?;
    Ok(e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64)
}

pub fn metric_rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    metric_mse(y, yhat).map(f64::sqrt)
}

/// Geometric mean of absolute errors, each floored at [`GM_FLOOR`].
///
/// The log-sum is carried as a binary exponent plus a mantissa product of
/// ratios to the largest error, which cannot underflow and keeps hand
/// values such as `sqrt(2 * 1e-10)` exact.
pub fn metric_gm(y: &[f64], yhat: &[f64]) -> Result<f64> {
    const RESCALE: i32 = 500;
    let e: Vec<f64> = residuals(y, yhat)?
        .iter()
        .map(|v| v.abs().max(GM_FLOOR))
        .collect();
    let top = e.iter().cloned().fold(GM_FLOOR, f64::max);
    let tiny = 2f64.powi(-RESCALE);
    let mut mantissa = 1.0;
    let mut exp2: i64 = 0;
    for v in &e {
        mantissa *= v / top;
        if mantissa < tiny {
            mantissa *= 2f64.powi(RESCALE);
            exp2 -= RESCALE as i64;
        }
    }
    let n = e.len() as f64;
    Ok(top * mantissa.powf(1.0 / n) * (exp2 as f64 / n).exp2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Mae,
    Mse,
    Rmse,
    Gm,
}

impl MetricName {
    pub const ALL: [MetricName; 4] = [MetricName::Mae, MetricName::Mse, MetricName::Rmse, MetricName::Gm];

    pub fn name(self) -> &'static str {
        match self {
            MetricName::Mae => "mae",
            MetricName::Mse => "mse",
            MetricName::Rmse => "rmse",
            MetricName::Gm => "gm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub gm: f64,
}

impl Metrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: metric_mae(y, yhat)?,
            mse: metric_mse(y, yhat)?,
            rmse: metric_rmse(y, yhat)?,
            gm: metric_gm(y, yhat)?,
        })
    }

    pub fn get(&self, m: MetricName) -> f64 {
        match m {
            MetricName::Mae => self.mae,
            MetricName::Mse => self.mse,
            MetricName::Rmse => self.rmse,
            MetricName::Gm => self.gm,
        }
    }

    fn from_fn(f: impl Fn(MetricName) -> f64) -> Self {
        Self {
            mae: f(MetricName::Mae),
            mse: f(MetricName::Mse),
            rmse: f(MetricName::Rmse),
            gm: f(MetricName::Gm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub region: Region,
    pub count: usize,
    /// `None` when no test sample falls in the region.
    pub metrics: Option<Metrics>,
}

/// Metrics for All, Many, Medium and Few, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub entries: Vec<RegionEntry>,
}

impl RegionMetrics {
    pub fn get(&self, region: Region) -> &RegionEntry {
        self.entries
            .iter()
            .find(|e| e.region == region)
            .expect("every region has an entry")
    }
}

/// Splits test predictions by the shot region of each true label under the
/// training bins, and scores each region and the whole set.
pub fn per_region_report(y: &[f64], yhat: &[f64], bins: &BinStats) -> Result<RegionMetrics> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            found: yhat.len(),
        });
    }
    let shots: Vec<ShotRegion> = y.iter().map(|&v| region_of_label(v, bins)).collect();
    let entries = Region::ALL
        .iter()
        .map(|&region| {
            let (ys, ps): (Vec<f64>, Vec<f64>) = y
                .iter()
                .zip(yhat)
                .zip(&shots)
                .filter(|(_, s)| region.contains(**s))
                .map(|((a, b), _)| (*a, *b))
                .unzip();
            let metrics = if ys.is_empty() {
                None
            } else {
                Some(Metrics::compute(&ys, &ps)?)
            };
            Ok(RegionEntry {
                region,
                count: ys.len(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionMetrics { entries })
}

/// Squared-bias, variance and total error of the averaging estimator as a
/// function of the number of neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub sigma: f64,
    pub ks: Vec<usize>,
    pub bias2: Vec<f64>,
    pub variance: Vec<f64>,
    pub total: Vec<f64>,
}

impl BoundCurve {
    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }

    /// The `k` with the smallest total; the first one on ties.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for i in 1..self.total.len() {
            if self.total[i] < self.total[best] {
                best = i;
            }
        }
        self.ks[best]
    }

    pub fn min_total(&self) -> f64 {
        self.total.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn total_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.total[i])
    }
}

/// Labels reordered by ascending distance to `y`; ties keep input order.
pub fn ideal_order(y: f64, labels: &[f64]) -> Vec<f64> {
    let mut v = labels.to_vec();
    v.sort_by(|a, b| (a - y).abs().total_cmp(&(b - y).abs()));
    v
}

/// For `k = 1..=k_max`: `bias2 = (y - mean of the first k candidates)^2`,
/// `variance = sigma^2 / k`, `total = bias2 + variance + sigma^2`.
pub fn bound_curve(y: f64, candidates: &[f64], sigma: f64, k_max: usize) -> Result<BoundCurve> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("bound curve needs candidate labels".into()));
    }
    if k_max == 0 || k_max > candidates.len() {
        return Err(Error::InvalidConfig(format!(
            "k_max {k_max} must be in 1..={}",
            candidates.len()
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) || !y.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma {sigma} must be finite and nonnegative")));
    }
    let s2 = sigma * sigma;
    let mut curve = BoundCurve {
        sigma,
        ks: Vec::with_capacity(k_max),
        bias2: Vec::with_capacity(k_max),
        variance: Vec::with_capacity(k_max),
        total: Vec::with_capacity(k_max),
    };
    let mut sum = 0.0;
    for (i, c) in candidates[..k_max].iter().enumerate() {
        let k = i + 1;
        sum += c;
        let bias = y - sum / k as f64;
        let b2 = bias * bias;
        let var = s2 / k as f64;
        curve.ks.push(k);
        curve.bias2.push(b2);
        curve.variance.push(var);
        curve.total.push(b2 + var + s2);
    }
    Ok(curve)
}

/// Standard deviation of the residuals of a global least-squares fit on
/// `train`, or `override_sigma` when given.
pub fn estimate_sigma(train: &Dataset, override_sigma: Option<f64>) -> Result<f64> {
    if let Some(s) = override_sigma {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma override {s} must be finite and nonnegative")));
        }
        return Ok(s);
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs: Vec<&[f64]> = train.samples().iter().map(|s| s.features.as_slice()).collect();
    let ys = train.labels();
    let fit = ols_fit(&xs, &ys)?;
    let res: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - fit.eval(x)).collect();
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    Ok((res.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt())
}

/// Retrieves context for every test sample and predicts its label, in test
/// order. Work is spread over [`par::workers`] threads.
pub fn predict_test(
    test: &Dataset,
    train_index: &RetrievalIndex,
    inverse_index: Option<&RetrievalIndex>,
    transform: &FeatureTransform,
    predictor: &dyn ContextPredictor,
    k_train: usize,
    k_inverse: usize,
) -> Result<Vec<f64>> {
    if k_train + k_inverse == 0 {
        return Err(Error::InvalidConfig("at least one neighbor must be retrieved".into()));
    }
    let repr = predictor.representation();
    par::map_chunks(test.samples(), |chunk| {
        let prompts = chunk
            .iter()
            .map(|s| {
                let ctx = augmented_retrieve(
                    train_index,
                    inverse_index,
                    &s.features,
                    k_train,
                    k_inverse,
                    transform,
                )?;
                Ok(Prompt::from_context(&ctx, repr))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(predictor
            .predict_batch(&prompts)?
            .into_iter()
            .map(|p| p.value)
            .collect())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// `k` neighbors from the training pool.
    Vanilla,
    /// `k / 2` from the training pool and the rest from the inverse pool.
    Augmented,
}

impl RetrievalMode {
    pub fn split_k(self, k: usize) -> (usize, usize) {
        match self {
            RetrievalMode::Vanilla => (k, 0),
            RetrievalMode::Augmented => (k / 2, k - k / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub region: Region,
    pub count: usize,
    pub mse: Option<f64>,
}

/// Per-region test MSE at each `k`. Rows come out k-major, regions in
/// [`Region::ALL`] order.
#[allow(clippy::too_many_arguments)]
pub fn empirical_error_curve(
    test: &Dataset,
    train_index: &RetrievalIndex,
    inverse_index: Option<&RetrievalIndex>,
    transform: &FeatureTransform,
    predictor: &dyn ContextPredictor,
    ks: &[usize],
    bins: &BinStats,
    mode: RetrievalMode,
) -> Result<Vec<CurvePoint>> {
    if mode == RetrievalMode::Augmented && inverse_index.is_none() {
        return Err(Error::InvalidConfig("augmented curves need an inverse-density index".into()));
    }
    let y = test.labels();
    let mut out = Vec::with_capacity(ks.len() * Region::ALL.len());
    for &k in ks {
        let (kt, ki) = mode.split_k(k);
        let preds = predict_test(test, train_index, inverse_index, transform, predictor, kt, ki)?;
        let report = per_region_report(&y, &preds, bins)?;
        out.extend(report.entries.iter().map(|e| CurvePoint {
            k,
            region: e.region,
            count: e.count,
            mse: e.metrics.map(|m| m.mse),
        }));
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("rank correlation of a constant sequence".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInfo {
    pub strategy: String,
    pub k_train: usize,
    pub k_inverse: usize,
    pub predictor: String,
    pub dataset: String,
    pub bins: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub region: Region,
    /// Seeds in which the region had test samples.
    pub seeds_present: usize,
    pub mean_count: f64,
    pub mean: Option<Metrics>,
    /// Population standard deviation over the seeds present.
    pub std: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub info: ReportInfo,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RegionMetrics>,
    pub summary: Vec<SummaryEntry>,
}

impl EvalReport {
    pub fn new(info: ReportInfo, seeds: Vec<u64>, per_seed: Vec<RegionMetrics>) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != per_seed.len() {
            return Err(Error::InvalidConfig(
                "a report needs one region table per declared seed".into(),
            ));
        }
        let summary = Region::ALL
            .iter()
            .map(|&region| {
                let entries: Vec<&RegionEntry> = per_seed.iter().map(|r| r.get(region)).collect();
                let mean_count =
                    entries.iter().map(|e| e.count as f64).sum::<f64>() / entries.len() as f64;
                let present: Vec<Metrics> = entries.iter().filter_map(|e| e.metrics).collect();
                let (mean, std) = if present.is_empty() {
                    (None, None)
                } else {
                    let n = present.len() as f64;
                    let mean = Metrics::from_fn(|m| present.iter().map(|x| x.get(m)).sum::<f64>() / n);
                    let std = Metrics::from_fn(|m| {
                        let mu = mean.get(m);
                        (present.iter().map(|x| (x.get(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
                    });
                    (Some(mean), Some(std))
                };
                SummaryEntry {
                    region,
                    seeds_present: present.len(),
                    mean_count,
                    mean,
                    std,
                }
            })
            .collect();
        Ok(Self {
            info,
            seeds,
            per_seed,
            summary,
        })
    }

    pub fn summary_of(&self, region: Region) -> &SummaryEntry {
        self.summary
            .iter()
            .find(|s| s.region == region)
            .expect("every region has a summary")
    }

    /// One row per region per seed, then `mean` and `std` rows per region.
    /// Absent regions leave their metric cells empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,seed,region,count,mae,mse,rmse,gm\n");
        let cells = |m: Option<Metrics>| match m {
            Some(m) => MetricName::ALL
                .iter()
                .map(|&k| m.get(k).to_string())
                .collect::<Vec<_>>()
                .join(","),
            None => ",,,".to_string(),
        };
        for (seed, table) in self.seeds.iter().zip(&self.per_seed) {
            for e in &table.entries {
                let _ = writeln!(s, "seed,{seed},{},{},{}", e.region, e.count, cells(e.metrics));
            }
        }
        for e in &self.summary {
            let _ = writeln!(s, "mean,all,{},{},{}", e.region, e.mean_count, cells(e.mean));
            let _ = writeln!(s, "std,all,{},{},{}", e.region, e.mean_count, cells(e.std));
        }
        s
    }

    /// Aligned plain-text summary table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let i = &self.info;
        let _ = writeln!(
            s,
            "strategy {}  predictor {}  k_train {}  k_inverse {}  dataset {}  bins {}",
            i.strategy, i.predictor, i.k_train, i.k_inverse, i.dataset, i.bins
        );
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds {}", seeds.join(","));
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>21} {:>21} {:>21} {:>21}",
            "region", "count", "mae", "mse", "rmse", "gm"
        );
        for e in &self.summary {
            let _ = write!(s, "{:<8} {:>8.1}", e.region.name(), e.mean_count);
            for m in MetricName::ALL {
                let cell = match (e.mean, e.std) {
                    (Some(mu), Some(sd)) => format!("{:.4} ± {:.4}", mu.get(m), sd.get(m)),
                    _ => "-".to_string(),
                };
                let _ = write!(s, " {cell:>21}");
            }
            s.push('\n');
        }
        s
    }
}

/// `k,region,query_label,bias2,variance,total` rows.
pub fn bound_curves_csv(curves: &[(Region, f64, BoundCurve)]) -> String {
    let mut s = String::from("k,region,query_label,bias2,variance,total\n");
    for (region, y, c) in curves {
        for i in 0..c.len() {
            let _ = writeln!(
                s,
                "{},{region},{y},{},{},{}",
                c.ks[i], c.bias2[i], c.variance[i], c.total[i]
            );
        }
    }
    s
}

/// `k,region,count,mse` rows; absent regions leave `mse` empty.
pub fn error_curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("k,region,count,mse\n");
    for p in points {
        let mse = p.mse.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{mse}", p.k, p.region, p.count);
    }
    s
}
