//! Dataset ingestion, label binning, shot regions, and balanced splitting.
//!
//! Labels are discretized into equal-width bins. A bin's training count puts
//! it in one of three shot regions, and test samples inherit the region of
//! the training bin their label falls into.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{self, stream};

/// Bins with fewer training samples than this are Few-shot.
pub const FEW_BELOW: usize = 20;
/// Bins with more training samples than this are Many-shot.
pub const MANY_ABOVE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_dim: usize,
    feature_names: Vec<String>,
    label_name: String,
}

impl Dataset {
    /// Builds a dataset, checking the shared dimension and finiteness of
    /// every value.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        for (row, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    found: s.features.len(),
                });
            }
            if let Some(col) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
            if !s.label.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    col: feature_dim,
                });
            }
        }
        Ok(Self {
            samples,
            feature_dim,
            feature_names: (0..feature_dim).map(|i| format!("x{i}")).collect(),
            label_name: "y".to_string(),
        })
    }

    pub fn from_parts(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                found: labels.len(),
            });
        }
        Self::new(
            features
                .into_iter()
                .zip(labels)
                .map(|(f, y)| Sample::new(f, y))
                .collect(),
        )
    }

    pub fn with_names(mut self, feature_names: Vec<String>, label_name: String) -> Result<Self> {
        if feature_names.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                found: feature_names.len(),
            });
        }
        self.feature_names = feature_names;
        self.label_name = label_name;
        Ok(self)
    }

    /// Subset by row index, keeping names. Indices may repeat.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let samples = rows.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples)?.with_names(self.feature_names.clone(), self.label_name.clone())
    }

    /// Appends samples of the same dimension.
    pub fn extend(&mut self, extra: impl IntoIterator<Item = Sample>) -> Result<()> {
        for s in extra {
            if s.features.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    found: s.features.len(),
                });
            }
            self.samples.push(s);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    /// Serializes as CSV with a header row; floats use the shortest decimal
    /// representation that parses back to the same bits.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.feature_names.join(","));
        out.push(',');
        out.push_str(&self.label_name);
        out.push('\n');
        for s in &self.samples {
            for v in &s.features {
                out.push_str(&format_float(*v));
                out.push(',');
            }
            out.push_str(&format_float(s.label));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv_string().as_bytes())
    }
}

pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
    Last,
}

impl LabelColumn {
    /// Parses `last`, a zero-based integer index, or a column name.
    pub fn parse(s: &str) -> Self {
        if s.eq_ignore_ascii_case("last") {
            LabelColumn::Last
        } else if let Ok(i) = s.parse::<usize>() {
            LabelColumn::Index(i)
        } else {
            LabelColumn::Name(s.to_string())
        }
    }
}

impl fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelColumn::Name(n) => write!(f, "{n}"),
            LabelColumn::Index(i) => write!(f, "{i}"),
            LabelColumn::Last => write!(f, "last"),
        }
    }
}

pub fn load_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label, has_header)
}

/// Parses delimited text into a dataset. Lines starting with `#` are
/// skipped. Row numbers in errors are 1-based physical line numbers.
pub fn read_csv<R: Read>(reader: R, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);

    let mut header: Option<Vec<String>> = None;
    let mut expected: Option<usize> = None;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        match expected {
            None => expected = Some(record.len()),
            Some(n) if n != record.len() => {
                return Err(Error::RaggedRow {
                    row: line,
                    expected: n,
                    found: record.len(),
                })
            }
            _ => {}
        }
        if has_header && header.is_none() {
            header = Some(record.iter().map(str::to_string).collect());
            continue;
        }
        let mut values = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                msg: format!("non-numeric cell `{cell}` in column {col}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: line, col });
            }
            values.push(v);
        }
        rows.push((line, values));
    }

    let ncols = expected.ok_or(Error::EmptyDataset)?;
    if ncols < 2 {
        return Err(Error::Parse {
            row: 1,
            msg: "need at least one feature column and a label column".into(),
        });
    }
    let label_idx = match label {
        LabelColumn::Last => ncols - 1,
        LabelColumn::Index(i) if *i < ncols => *i,
        LabelColumn::Index(i) => return Err(Error::MissingColumn(i.to_string())),
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::MissingColumn(name.clone()))?,
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let samples = rows
        .into_iter()
        .map(|(_, mut values)| {
            let y = values.remove(label_idx);
            Sample::new(values, y)
        })
        .collect();
    let ds = Dataset::new(samples)?;
    match header {
        Some(mut h) => {
            let label_name = h.remove(label_idx);
            ds.with_names(h, label_name)
        }
        None => Ok(ds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BinMode {
    Count { num_bins: usize },
    Width { bin_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    #[serde(flatten)]
    pub mode: BinMode,
    /// Inclusive label range; taken from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
}

impl BinConfig {
    pub fn count(num_bins: usize) -> Self {
        Self {
            mode: BinMode::Count { num_bins },
            range: None,
        }
    }

    pub fn width(bin_width: f64) -> Self {
        Self {
            mode: BinMode::Width { bin_width },
            range: None,
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.range = Some((min, max));
        self
    }

    fn validate(&self) -> Result<()> {
        match self.mode {
            BinMode::Count { num_bins: 0 } => {
                Err(Error::InvalidConfig("num_bins must be at least 1".into()))
            }
            BinMode::Width { bin_width } if !(bin_width > 0.0 && bin_width.is_finite()) => {
                Err(Error::InvalidConfig("bin_width must be positive".into()))
            }
            _ => match self.range {
                Some((lo, hi)) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => Err(
                    Error::InvalidConfig(format!("bin range [{lo}, {hi}] is not a valid interval")),
                ),
                _ => Ok(()),
            },
        }
    }
}

/// Equal-width bin edges. Bin `i` covers `[edges[i], edges[i+1])`, and the
/// last bin also includes its top edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    pub fn fit(labels: &[f64], config: &BinConfig) -> Result<Self> {
        config.validate()?;
        let (mut lo, mut hi) = match config.range {
            Some(r) => r,
            None => {
                if labels.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                labels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
                    (lo.min(y), hi.max(y))
                })
            }
        };
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        if lo == hi {
            // all labels equal: unit-width range starting at the value
            hi = lo + 1.0;
        }
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        let edges = match config.mode {
            BinMode::Count { num_bins } => {
                let width = (hi - lo) / num_bins as f64;
                let mut e: Vec<f64> = (0..num_bins).map(|i| lo + width * i as f64).collect();
                e.push(hi);
                e
            }
            BinMode::Width { bin_width } => {
                let n = ((hi - lo) / bin_width).floor() as usize + 1;
                (0..=n).map(|i| lo + bin_width * i as f64).collect()
            }
        };
        Self::from_edges(edges)
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidConfig("need at least two bin edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("bin edges must be strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Returns the bin of `label` and whether it had to be clamped into range.
    pub fn assign(&self, label: f64) -> (usize, bool) {
        let n = self.num_bins();
        let lo = self.edges[0];
        let hi = self.edges[n];
        if label < lo {
            return (0, true);
        }
        if label > hi {
            return (n - 1, true);
        }
        if label == hi {
            return (n - 1, false);
        }
        let i = self.edges.partition_point(|&e| e <= label) - 1;
        (i.min(n - 1), false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub indices: Vec<usize>,
    pub edges: BinEdges,
    /// Labels that fell outside the range and were moved to a boundary bin.
    pub clamped: usize,
}

pub fn assign_bins(labels: &[f64], config: &BinConfig) -> Result<BinAssignment> {
    if let Some(i) = labels.iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFinite { row: i, col: 0 });
    }
    let edges = BinEdges::fit(labels, config)?;
    Ok(assign_with_edges(labels, edges))
}

fn assign_with_edges(labels: &[f64], edges: BinEdges) -> BinAssignment {
    let mut clamped = 0;
    let indices = labels
        .iter()
        .map(|&y| {
            let (i, c) = edges.assign(y);
            clamped += c as usize;
            i
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} label(s) outside the bin range were clamped to a boundary bin");
    }
    BinAssignment {
        indices,
        edges,
        clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShotRegion {
    Many,
    Medium,
    Few,
}

impl ShotRegion {
    pub const ALL: [ShotRegion; 3] = [ShotRegion::Many, ShotRegion::Medium, ShotRegion::Few];

    pub fn name(self) -> &'static str {
        match self {
            ShotRegion::Many => "many",
            ShotRegion::Medium => "medium",
            ShotRegion::Few => "few",
        }
    }
}

impl fmt::Display for ShotRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn shot_region(count: usize) -> ShotRegion {
    if count < FEW_BELOW {
        ShotRegion::Few
    } else if count <= MANY_ABOVE {
        ShotRegion::Medium
    } else {
        ShotRegion::Many
    }
}

/// Bin edges together with per-bin training counts and their regions.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub edges: BinEdges,
    pub counts: Vec<usize>,
    pub regions: Vec<ShotRegion>,
}

impl BinStats {
    pub fn from_labels(edges: BinEdges, labels: &[f64]) -> Self {
        let mut counts = vec![0usize; edges.num_bins()];
        for &y in labels {
            counts[edges.assign(y).0] += 1;
        }
        let regions = counts.iter().map(|&c| shot_region(c)).collect();
        Self {
            edges,
            counts,
            regions,
        }
    }

    /// Fits edges on `train`'s labels under `config` and counts them.
    pub fn fit(train: &Dataset, config: &BinConfig) -> Result<Self> {
        let labels = train.labels();
        Ok(Self::from_labels(BinEdges::fit(&labels, config)?, &labels))
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, label: f64) -> usize {
        self.edges.assign(label).0
    }

    /// Row indices of `ds` grouped by bin.
    pub fn members(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_bins()];
        for (i, s) in ds.samples().iter().enumerate() {
            out[self.bin_of(s.label)].push(i);
        }
        out
    }

    /// Per-bin counts of an arbitrary dataset under these edges.
    pub fn counts_of(&self, ds: &Dataset) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_bins()];
        for s in ds.samples() {
            counts[self.bin_of(s.label)] += 1;
        }
        counts
    }
}

pub fn region_of_label(label: f64, bins: &BinStats) -> ShotRegion {
    bins.regions[bins.bin_of(label)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSplitCount {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Original row indices, ascending.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub cap: usize,
    pub per_bin: Vec<BinSplitCount>,
}

/// Holds out an equal number of test samples per nonempty label bin.
///
/// The cap is `floor(round(n * test_fraction) / nonempty_bins)`; each bin
/// gives `min(cap, count - 1)` samples so that it keeps at least one
/// training sample. Selection is uniform without replacement under `seed`.
pub fn balanced_split(
    dataset: &Dataset,
    test_fraction: f64,
    config: &BinConfig,
    seed: u64,
) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let labels = dataset.labels();
    let assignment = assign_bins(&labels, config)?;
    let nb = assignment.edges.num_bins();
    let mut members = vec![Vec::new(); nb];
    for (row, &b) in assignment.indices.iter().enumerate() {
        members[b].push(row);
    }
    let nonempty = members.iter().filter(|m| !m.is_empty()).count();
    let target = (dataset.len() as f64 * test_fraction).round() as usize;
    let cap = target / nonempty;
    if cap == 0 {
        return Err(Error::Split(format!(
            "test fraction {test_fraction} gives {target} test samples over {nonempty} nonempty bins \
             (per-bin cap 0); use a larger fraction or coarser bins"
        )));
    }

    let mut rng = rng::seeded(seed, stream::SPLIT);
    let mut is_test = vec![false; dataset.len()];
    let mut per_bin = Vec::with_capacity(nb);
    for (b, rows) in members.iter().enumerate() {
        let take = if rows.is_empty() {
            0
        } else {
            cap.min(rows.len() - 1)
        };
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        for &r in &shuffled[..take] {
            is_test[r] = true;
        }
        per_bin.push(BinSplitCount {
            bin: b,
            lower: assignment.edges.edges()[b],
            upper: assignment.edges.edges()[b + 1],
            total: rows.len(),
            train: rows.len() - take,
            test: take,
        });
    }

    let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&r| is_test[r]);
    Ok(Split {
        train: dataset.select(&train_rows)?,
        test: dataset.select(&test_rows)?,
        train_rows,
        test_rows,
        cap,
        per_bin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_from_labels(labels: &[f64]) -> Dataset {
        Dataset::from_parts(labels.iter().map(|&y| vec![y, 1.0]).collect(), labels.to_vec())
            .unwrap()
    }

    #[test]
    fn csv_three_rows() {
        let text = "a,b,y\n1,2,3\n4,5,6\n7,8,9\n";
        let ds = read_csv(text.as_bytes(), &LabelColumn::Name("y".into()), true).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.samples()[1].features, vec![4.0, 5.0]);
        assert_eq!(ds.samples()[2].label, 9.0);
        assert_eq!(ds.feature_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_label_in_middle_is_removed() {
        let text = "1,2,3\n4,5,6\n";
        let ds = read_csv(text.as_bytes(), &LabelColumn::Index(1), false).unwrap();
        assert_eq!(ds.samples()[0].features, vec![1.0, 3.0]);
        assert_eq!(ds.samples()[0].label, 2.0);
    }

    #[test]
    fn csv_ragged_row_reports_row_two() {
        let text = "1,2,3\n4,5\n";
        let err = read_csv(text.as_bytes(), &LabelColumn::Last, false).unwrap_err();
        match err {
            Error::RaggedRow { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_non_numeric_and_nan() {
        let err = read_csv("1,x,3\n".as_bytes(), &LabelColumn::Last, false).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
        let err = read_csv("1,2\n1,NaN\n".as_bytes(), &LabelColumn::Last, false).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 2, col: 1 }));
        let err = read_csv("1,inf\n".as_bytes(), &LabelColumn::Last, false).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn csv_missing_label_column() {
        let err = read_csv("a,b\n1,2\n".as_bytes(), &LabelColumn::Name("z".into()), true)
            .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = Dataset::from_parts(
            vec![vec![0.1 + 0.2, -1e-300], vec![std::f64::consts::PI, 12345.678901234567]],
            vec![1.0 / 3.0, -7.25],
        )
        .unwrap();
        let text = ds.to_csv_string();
        let back = read_csv(text.as_bytes(), &LabelColumn::Last, true).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn top_edge_inclusive() {
        let cfg = BinConfig::count(2).with_range(0.0, 10.0);
        let a = assign_bins(&[0.0, 5.0, 10.0], &cfg).unwrap();
        assert_eq!(a.indices, vec![0, 1, 1]);
        assert_eq!(a.clamped, 0);
    }

    #[test]
    fn unit_width_ages() {
        let labels: Vec<f64> = (0..=100).map(f64::from).collect();
        let a = assign_bins(&labels, &BinConfig::width(1.0)).unwrap();
        assert_eq!(a.edges.num_bins(), 101);
        assert_eq!(a.edges.edges()[101], 101.0);
        assert_eq!(a.indices, (0..=100).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_range() {
        let a = assign_bins(&[3.0; 5], &BinConfig::count(4)).unwrap();
        assert_eq!(a.indices, vec![0; 5]);
        assert_eq!(a.edges.edges()[0], 3.0);
        assert_eq!(a.edges.edges()[4], 4.0);
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let cfg = BinConfig::count(2).with_range(0.0, 10.0);
        let a = assign_bins(&[-1.0, 11.0, 4.0], &cfg).unwrap();
        assert_eq!(a.indices, vec![0, 1, 0]);
        assert_eq!(a.clamped, 2);
    }

    #[test]
    fn invalid_bin_configs() {
        assert!(assign_bins(&[1.0], &BinConfig::count(0)).is_err());
        assert!(assign_bins(&[1.0], &BinConfig::width(0.0)).is_err());
        assert!(assign_bins(&[1.0], &BinConfig::width(-1.0)).is_err());
    }

    #[test]
    fn region_thresholds() {
        assert_eq!(shot_region(0), ShotRegion::Few);
        assert_eq!(shot_region(19), ShotRegion::Few);
        assert_eq!(shot_region(20), ShotRegion::Medium);
        assert_eq!(shot_region(100), ShotRegion::Medium);
        assert_eq!(shot_region(101), ShotRegion::Many);
    }

    #[test]
    fn region_of_label_cases() {
        let edges = BinEdges::from_edges(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut labels = vec![0.5; 150];
        labels.extend(vec![2.5; 30]);
        let bins = BinStats::from_labels(edges, &labels);
        assert_eq!(region_of_label(0.2, &bins), ShotRegion::Many);
        // empty middle bin
        assert_eq!(region_of_label(1.5, &bins), ShotRegion::Few);
        // exact edge goes right
        assert_eq!(region_of_label(1.0, &bins), ShotRegion::Few);
        assert_eq!(region_of_label(2.0, &bins), ShotRegion::Medium);
        // top edge stays in the last bin
        assert_eq!(region_of_label(3.0, &bins), ShotRegion::Medium);
    }

    #[test]
    fn split_uniform_counts() {
        let mut labels = vec![0.25; 100];
        labels.extend(vec![0.75; 100]);
        let ds = ds_from_labels(&labels);
        let cfg = BinConfig::count(2).with_range(0.0, 1.0);
        let s = balanced_split(&ds, 0.2, &cfg, 0).unwrap();
        assert_eq!(s.cap, 20);
        assert_eq!(s.test.len(), 40);
        assert_eq!(s.per_bin.iter().map(|b| b.test).collect::<Vec<_>>(), vec![20, 20]);
    }

    #[test]
    fn split_cap_rule_toy_instance() {
        // counts [97, 2, 1], n = 100, fraction 0.3:
        // round(30) / 3 nonempty = cap 10; test = [min(10,96), min(10,1), min(10,0)]
        let mut labels = vec![0.5; 97];
        labels.extend([1.5, 1.5, 2.5]);
        let ds = ds_from_labels(&labels);
        let cfg = BinConfig::count(3).with_range(0.0, 3.0);
        let s = balanced_split(&ds, 0.3, &cfg, 7).unwrap();
        assert_eq!(s.cap, 10);
        let tests: Vec<usize> = s.per_bin.iter().map(|b| b.test).collect();
        assert_eq!(tests, vec![10, 1, 0]);
        assert!(s.per_bin.iter().all(|b| b.total == 0 || b.train >= 1));
    }

    #[test]
    fn split_zero_cap_errors() {
        let ds = ds_from_labels(&[0.0, 1.0, 2.0, 3.0]);
        let err = balanced_split(&ds, 0.1, &BinConfig::count(4), 0).unwrap_err();
        assert!(err.to_string().contains("larger fraction"));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = ds_from_labels(&[0.0, 1.0]);
        assert!(balanced_split(&ds, 0.0, &BinConfig::count(1), 0).is_err());
        assert!(balanced_split(&ds, 1.0, &BinConfig::count(1), 0).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_dims() {
        let err = Dataset::new(vec![Sample::new(vec![1.0], 0.0), Sample::new(vec![1.0, 2.0], 0.0)])
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(matches!(Dataset::new(vec![]), Err(Error::EmptyDataset)));
    }
}
