//! Feature preprocessing and exact nearest-neighbor retrieval.
//!
//! Features are mapped to a `2d` representation: the standardized features
//! followed by the standardized Yeo-Johnson transformed features. Indexes
//! store that representation for a pool and answer brute-force top-k
//! queries under cosine similarity (or Euclidean distance).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil;

pub const LAMBDA_MIN: f64 = -5.0;
pub const LAMBDA_MAX: f64 = 5.0;
pub const LAMBDA_TOL: f64 = 1e-4;

/// Yeo-Johnson transform of a single value.
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if x >= 0.0 {
        let l = x.ln_1p();
        if lambda.abs() < EPS {
            l
        } else {
            (lambda * l).exp_m1() / lambda
        }
    } else {
        let l = (-x).ln_1p();
        let p = 2.0 - lambda;
        if p.abs() < EPS {
            -l
        } else {
            -(p * l).exp_m1() / p
        }
    }
}

/// Profile log-likelihood of `lambda` for a Gaussian fit to the transformed
/// column (constants dropped).
pub fn yeo_johnson_log_likelihood(column: &[f64], lambda: f64) -> f64 {
    let n = column.len() as f64;
    let t: Vec<f64> = column.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let jacobian: f64 = column.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// Golden-section maximization of `f` on `[lo, hi]` down to bracket width `tol`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

pub fn fit_yeo_johnson_lambda(column: &[f64]) -> f64 {
    golden_section_max(
        |l| yeo_johnson_log_likelihood(column, l),
        LAMBDA_MIN,
        LAMBDA_MAX,
        LAMBDA_TOL,
    )
}

fn mean_std(column: &[f64]) -> (f64, f64) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fitted scaling plus power transform, applied per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Set where the raw column had zero variance (its std is stored as 1).
    pub constant: Vec<bool>,
    pub lambdas: Vec<f64>,
    pub power_means: Vec<f64>,
    pub power_stds: Vec<f64>,
}

impl FeatureTransform {
    /// Fits on the rows of a feature matrix. Needs at least two rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidConfig(
                "feature transform needs at least two rows".into(),
            ));
        }
        let d = rows[0].len();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        let mut t = FeatureTransform {
            means: Vec::with_capacity(d),
            stds: Vec::with_capacity(d),
            constant: Vec::with_capacity(d),
            lambdas: Vec::with_capacity(d),
            power_means: Vec::with_capacity(d),
            power_stds: Vec::with_capacity(d),
        };
        for j in 0..d {
            let column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (mean, std) = mean_std(&column);
            let constant = !(std > 0.0);
            t.means.push(mean);
            t.stds.push(if constant { 1.0 } else { std });
            t.constant.push(constant);

            let lambda = if constant { 1.0 } else { fit_yeo_johnson_lambda(&column) };
            let powered: Vec<f64> = column.iter().map(|&x| yeo_johnson(x, lambda)).collect();
            let (pm, ps) = mean_std(&powered);
            t.lambdas.push(lambda);
            t.power_means.push(pm);
            t.power_stds.push(if ps > 0.0 && ps.is_finite() { ps } else { 1.0 });
        }
        Ok(t)
    }

    pub fn input_dim(&self) -> usize {
        self.means.len()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.means.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        if let Some(c) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: c });
        }
        let mut out = Vec::with_capacity(2 * d);
        out.extend((0..d).map(|j| (x[j] - self.means[j]) / self.stds[j]));
        out.extend((0..d).map(|j| {
            (yeo_johnson(x[j], self.lambdas[j]) - self.power_means[j]) / self.power_stds[j]
        }));
        Ok(out)
    }

    /// TOML with every float at 17 significant digits, so a reload is
    /// bit-exact.
    pub fn to_toml(&self) -> String {
        let floats = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(", ");
        let flags: Vec<&str> = self.constant.iter().map(|&c| if c { "true" } else { "false" }).collect();
        format!(
            "means = [{}]\nstds = [{}]\nconstant = [{}]\nlambdas = [{}]\npower_means = [{}]\npower_stds = [{}]\n",
            floats(&self.means),
            floats(&self.stds),
            flags.join(", "),
            floats(&self.lambdas),
            floats(&self.power_means),
            floats(&self.power_stds),
        )
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            row: e.span().map(|s| s.start).unwrap_or(0),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_to_string(path)?)
    }
}

pub fn fit_transform(train: &Dataset) -> Result<FeatureTransform> {
    FeatureTransform::fit(&train.features())
}

pub fn apply_transform(t: &FeatureTransform, x: &[f64]) -> Result<Vec<f64>> {
    t.apply(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Where a pool came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Train,
    Inverse,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Train => "train",
            Source::Inverse => "inverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    /// Higher is closer: cosine similarity, or negated squared distance.
    pub score: f64,
}

/// Immutable brute-force index over a pool's transformed features.
#[derive(Debug)]
pub struct RetrievalIndex {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
    labels: Vec<f64>,
    raw: Vec<Vec<f64>>,
    metric: Metric,
    source: Source,
    clamp_warnings: AtomicUsize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalIndex {
    /// Indexes arbitrary rows as-is (no transform, no labels).
    pub fn from_rows(rows: Vec<Vec<f64>>, metric: Metric) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = rows[0].len();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        let norms = rows.iter().map(|r| dot(r, r).sqrt()).collect();
        let n = rows.len();
        Ok(Self {
            rows,
            norms,
            labels: vec![0.0; n],
            raw: Vec::new(),
            metric,
            source: Source::Train,
            clamp_warnings: AtomicUsize::new(0),
        })
    }

    pub fn build(
        pool: &Dataset,
        transform: &FeatureTransform,
        metric: Metric,
        source: Source,
    ) -> Result<Self> {
        let rows = pool
            .samples()
            .iter()
            .map(|s| transform.apply(&s.features))
            .collect::<Result<Vec<_>>>()?;
        let mut idx = Self::from_rows(rows, metric)?;
        idx.labels = pool.labels();
        idx.raw = pool.features();
        idx.source = source;
        let zero = idx.norms.iter().filter(|&&n| n == 0.0).count();
        if zero > 0 && metric == Metric::Cosine {
            log::warn!("{zero} pool row(s) have zero norm; their cosine similarity is -1");
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn raw_row(&self, i: usize) -> Option<&[f64]> {
        self.raw.get(i).map(Vec::as_slice)
    }

    /// Number of queries whose `k` exceeded the index size.
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    fn score(&self, i: usize, query: &[f64], query_norm: f64) -> f64 {
        match self.metric {
            Metric::Cosine => {
                let n = self.norms[i];
                if n == 0.0 || query_norm == 0.0 {
                    -1.0
                } else {
                    dot(&self.rows[i], query) / (n * query_norm)
                }
            }
            Metric::Euclidean => -self.rows[i]
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        }
    }

    /// Exact top-k for a query already in the index representation. Ties go
    /// to the lower row index.
    pub fn search_raw(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        let k = if k > self.len() {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
            log::warn!("k = {k} exceeds index size {}; clamped", self.len());
            self.len()
        } else {
            k
        };
        let qn = dot(query, query).sqrt();
        let mut hits: Vec<Neighbor> = (0..self.len())
            .map(|row| Neighbor {
                row,
                score: self.score(row, query, qn),
            })
            .collect();
        let order = |a: &Neighbor, b: &Neighbor| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row));
        if k < hits.len() && k > 0 {
            hits.select_nth_unstable_by(k - 1, order);
        }
        hits.truncate(k);
        hits.sort_unstable_by(order);
        hits
    }

    pub fn knn(&self, query: &[f64], k: usize, transform: &FeatureTransform) -> Result<Vec<Neighbor>> {
        let q = transform.apply(query)?;
        if q.len() != self.rows[0].len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows[0].len(),
                found: q.len(),
            });
        }
        Ok(self.search_raw(&q, k))
    }
}

pub fn build_index(
    pool: &Dataset,
    transform: &FeatureTransform,
    metric: Metric,
    source: Source,
) -> Result<RetrievalIndex> {
    RetrievalIndex::build(pool, transform, metric, source)
}

pub fn knn(
    index: &RetrievalIndex,
    query: &[f64],
    k: usize,
    transform: &FeatureTransform,
) -> Result<Vec<Neighbor>> {
    index.knn(query, k, transform)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextItem {
    /// Transformed (`2d`) features.
    pub features: Vec<f64>,
    pub raw: Vec<f64>,
    pub label: f64,
    pub source: Source,
    pub row: usize,
    pub score: f64,
}

/// Retrieved neighbors for one query, train block first, each block in
/// descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub items: Vec<ContextItem>,
    pub query: Vec<f64>,
    pub query_raw: Vec<f64>,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.label).collect()
    }
}

fn collect_items(index: &RetrievalIndex, hits: Vec<Neighbor>, out: &mut Vec<ContextItem>) {
    out.extend(hits.into_iter().map(|h| ContextItem {
        features: index.rows[h.row].clone(),
        raw: index.raw.get(h.row).cloned().unwrap_or_default(),
        label: index.labels[h.row],
        source: index.source,
        row: h.row,
        score: h.score,
    }));
}

/// Top `k_train` neighbors from the training index, then top `k_inverse`
/// from the second index (when given). Duplicates across pools are kept.
pub fn augmented_retrieve(
    train: &RetrievalIndex,
    inverse: Option<&RetrievalIndex>,
    query: &[f64],
    k_train: usize,
    k_inverse: usize,
    transform: &FeatureTransform,
) -> Result<ContextSet> {
    let q = transform.apply(query)?;
    let mut items = Vec::with_capacity(k_train + k_inverse);
    collect_items(train, train.search_raw(&q, k_train), &mut items);
    if let (Some(inv), true) = (inverse, k_inverse > 0) {
        collect_items(inv, inv.search_raw(&q, k_inverse), &mut items);
    }
    Ok(ContextSet {
        items,
        query: q,
        query_raw: query.to_vec(),
    })
}

/// Plain retrieval from one index.
pub fn vanilla_retrieve(
    index: &RetrievalIndex,
    query: &[f64],
    k: usize,
    transform: &FeatureTransform,
) -> Result<ContextSet> {
    augmented_retrieve(index, None, query, k, 0, transform)
}
