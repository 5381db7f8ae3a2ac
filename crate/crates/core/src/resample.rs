//! Retrieval pools built from the training split.
//!
//! Each sampling strategy sits behind [`SamplingStrategy`] and is looked up
//! by name in a [`StrategyRegistry`]. The built-in set covers the original
//! pool, a downsampled balanced pool, the inverse-density pool, a
//! SMOTER-style interpolated pool, and the augmented pair (original plus
//! inverse-density).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinStats, Dataset, Sample, ShotRegion, FEW_BELOW};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::retrieval::{Metric, RetrievalIndex};
use crate::rng::{self, stream};

/// SMOTER grows each Few bin by at most this multiple of its original size.
pub const SMOTER_BUDGET_FACTOR: usize = 5;
pub const SMOTER_DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Downsample,
    Inverse,
    Smoter,
    Augmented,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Vanilla,
        Strategy::Downsample,
        Strategy::Inverse,
        Strategy::Smoter,
        Strategy::Augmented,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Downsample => "downsample",
            Strategy::Inverse => "inverse",
            Strategy::Smoter => "smoter",
            Strategy::Augmented => "augmented",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownName {
                kind: "strategy",
                name: s.to_string(),
                available: Strategy::ALL.map(Strategy::name).join(", "),
            })
    }
}

/// Per-bin sizes a resampler aimed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub strategy: Strategy,
    pub seed: u64,
    pub targets: Vec<usize>,
}

/// One or two retrieval pools. `secondary` is only set for the augmented
/// strategy, where it holds the inverse-density pool.
#[derive(Debug, Clone)]
pub struct Pools {
    pub primary: Dataset,
    pub secondary: Option<Dataset>,
    pub plan: ResamplePlan,
}

impl Pools {
    /// `(file name, csv body)` for each pool.
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut files = vec![("primary.csv".to_string(), self.primary.to_csv_string())];
        if let Some(sec) = &self.secondary {
            files.push(("secondary.csv".to_string(), sec.to_csv_string()));
        }
        files
    }

    /// Strategy, seed, per-bin targets and the realized per-bin counts of
    /// each pool, as TOML.
    pub fn manifest_toml(&self, bins: &BinStats) -> String {
        #[derive(Serialize)]
        struct PoolManifest<'a> {
            strategy: Strategy,
            seed: u64,
            targets: &'a [usize],
            primary_counts: Vec<usize>,
            #[serde(skip_serializing_if = "Option::is_none")]
            secondary_counts: Option<Vec<usize>>,
        }
        let m = PoolManifest {
            strategy: self.plan.strategy,
            seed: self.plan.seed,
            targets: &self.plan.targets,
            primary_counts: bins.counts_of(&self.primary),
            secondary_counts: self.secondary.as_ref().map(|d| bins.counts_of(d)),
        };
        toml::to_string(&m).expect("pool manifest serializes")
    }

    /// Writes the pool CSVs and `pools.toml` into `dir`, each prefixed by
    /// `header` when given.
    pub fn export(&self, bins: &BinStats, dir: &Path, header: Option<&str>) -> Result<Vec<PathBuf>> {
        let stamp = |body: &str| match header {
            Some(h) => format!("{h}\n{body}"),
            None => body.to_string(),
        };
        let mut written = Vec::new();
        for (name, body) in self.csv_files() {
            let path = dir.join(name);
            fsutil::write_atomic(&path, stamp(&body).as_bytes())?;
            written.push(path);
        }
        let path = dir.join("pools.toml");
        fsutil::write_atomic(&path, stamp(&self.manifest_toml(bins)).as_bytes())?;
        written.push(path);
        Ok(written)
    }
}

pub trait SamplingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools>;
}

struct Vanilla;
struct Downsample;
struct Inverse;
struct Smoter {
    neighbors_k: usize,
}
struct Augmented;

impl SamplingStrategy for Vanilla {
    fn name(&self) -> &'static str {
        Strategy::Vanilla.name()
    }

    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools> {
        Ok(Pools {
            primary: train.clone(),
            secondary: None,
            plan: ResamplePlan {
                strategy: Strategy::Vanilla,
                seed,
                targets: bins.counts_of(train),
            },
        })
    }
}

impl SamplingStrategy for Downsample {
    fn name(&self) -> &'static str {
        Strategy::Downsample.name()
    }

    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools> {
        let primary = downsample_balanced(train, bins, seed)?;
        let targets = bins.counts_of(&primary);
        Ok(Pools {
            primary,
            secondary: None,
            plan: ResamplePlan {
                strategy: Strategy::Downsample,
                seed,
                targets,
            },
        })
    }
}

impl SamplingStrategy for Inverse {
    fn name(&self) -> &'static str {
        Strategy::Inverse.name()
    }

    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools> {
        Ok(Pools {
            primary: inverse_density_dataset(train, bins, seed)?,
            secondary: None,
            plan: ResamplePlan {
                strategy: Strategy::Inverse,
                seed,
                targets: inverse_targets(&bins.counts_of(train), train.len()),
            },
        })
    }
}

impl SamplingStrategy for Smoter {
    fn name(&self) -> &'static str {
        Strategy::Smoter.name()
    }

    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools> {
        let primary = smoter_augment(train, bins, seed, self.neighbors_k)?;
        let targets = bins.counts_of(&primary);
        Ok(Pools {
            primary,
            secondary: None,
            plan: ResamplePlan {
                strategy: Strategy::Smoter,
                seed,
                targets,
            },
        })
    }
}

impl SamplingStrategy for Augmented {
    fn name(&self) -> &'static str {
        Strategy::Augmented.name()
    }

    fn build(&self, train: &Dataset, bins: &BinStats, seed: u64) -> Result<Pools> {
        Ok(Pools {
            primary: train.clone(),
            secondary: Some(inverse_density_dataset(train, bins, seed)?),
            plan: ResamplePlan {
                strategy: Strategy::Augmented,
                seed,
                targets: inverse_targets(&bins.counts_of(train), train.len()),
            },
        })
    }
}

/// Name-keyed set of sampling strategies, kept in registration order.
pub struct StrategyRegistry {
    entries: Vec<Arc<dyn SamplingStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(Vanilla));
        reg.register(Arc::new(Downsample));
        reg.register(Arc::new(Inverse));
        reg.register(Arc::new(Smoter {
            neighbors_k: SMOTER_DEFAULT_K,
        }));
        reg.register(Arc::new(Augmented));
        reg
    }

    /// Adds a strategy, replacing any existing one with the same name.
    pub fn register(&mut self, strategy: Arc<dyn SamplingStrategy>) {
        match self.entries.iter().position(|s| s.name() == strategy.name()) {
            Some(i) => self.entries[i] = strategy,
            None => self.entries.push(strategy),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SamplingStrategy>> {
        self.entries
            .iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: "strategy",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn build_pools(
    train: &Dataset,
    strategy: Strategy,
    bins: &BinStats,
    seed: u64,
) -> Result<Pools> {
    StrategyRegistry::builtin()
        .get(strategy.name())?
        .build(train, bins, seed)
}

/// Target per-bin sizes proportional to `1 / count` over nonempty bins,
/// normalized to `total` and rounded to the nearest integer.
pub fn inverse_targets(counts: &[usize], total: usize) -> Vec<usize> {
    let inv_sum: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| 1.0 / c as f64)
        .sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0
            } else {
                ((1.0 / c as f64) / inv_sum * total as f64).round() as usize
            }
        })
        .collect()
}

/// Resamples `train` so that each bin's share is inversely proportional to
/// its original count. Bins that must grow are drawn with replacement; bins
/// that shrink are drawn without.
pub fn inverse_density_dataset(train: &Dataset, bins: &BinStats, seed: u64) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let members = bins.members(train);
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let targets = inverse_targets(&counts, train.len());
    let mut rng = rng::seeded(seed, stream::INVERSE);
    let mut rows = Vec::with_capacity(train.len() + counts.len());
    for (m, &t) in members.iter().zip(&targets) {
        if t > m.len() {
            rows.extend((0..t).map(|_| m[rng.random_range(0..m.len())]));
        } else {
            rows.extend(m.choose_multiple(&mut rng, t).copied());
        }
    }
    if rows.is_empty() {
        // every target rounded to zero; keep the rarest bin's samples
        let rarest = members
            .iter()
            .filter(|m| !m.is_empty())
            .min_by_key(|m| m.len())
            .ok_or(Error::EmptyDataset)?;
        rows.extend(rarest);
    }
    train.select(&rows)
}

/// Caps every nonempty bin at the smallest nonempty bin count. Rows keep
/// their original order.
pub fn downsample_balanced(train: &Dataset, bins: &BinStats, seed: u64) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let members = bins.members(train);
    let c_min = members
        .iter()
        .map(Vec::len)
        .filter(|&c| c > 0)
        .min()
        .ok_or(Error::EmptyDataset)?;
    let mut rng = rng::seeded(seed, stream::DOWNSAMPLE);
    let mut rows: Vec<usize> = Vec::with_capacity(c_min * members.len());
    for m in &members {
        if m.is_empty() {
            continue;
        }
        let mut picked = m.clone();
        picked.shuffle(&mut rng);
        picked.truncate(c_min);
        rows.extend(picked);
    }
    rows.sort_unstable();
    train.select(&rows)
}

/// Number of synthetic samples SMOTER adds to a Few bin of `count` samples.
pub fn smoter_budget(count: usize) -> usize {
    FEW_BELOW
        .saturating_sub(count)
        .min(SMOTER_BUDGET_FACTOR * count)
}

/// SMOTER-style oversampling of the Few region.
///
/// Each Few bin receives `min(20 - c, 5c)` synthetic samples, generated
/// round-robin over its members. A synthetic sample interpolates features
/// and label between a member and one of its `neighbors_k` nearest Few
/// samples (Euclidean, raw features) at a uniform random position.
pub fn smoter_augment(
    train: &Dataset,
    bins: &BinStats,
    seed: u64,
    neighbors_k: usize,
) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if neighbors_k == 0 {
        return Err(Error::InvalidConfig("SMOTER needs neighbors_k >= 1".into()));
    }
    let members = bins.members(train);
    let few_bins: Vec<usize> = (0..members.len())
        .filter(|&b| !members[b].is_empty() && bins.regions[b] == ShotRegion::Few)
        .collect();
    let mut out = train.clone();
    if few_bins.is_empty() {
        return Ok(out);
    }

    let few_rows: Vec<usize> = few_bins.iter().flat_map(|&b| members[b].iter().copied()).collect();
    let samples = train.samples();
    let index = RetrievalIndex::from_rows(
        few_rows.iter().map(|&r| samples[r].features.clone()).collect(),
        Metric::Euclidean,
    )?;
    // k + 1 so the sample itself can be dropped from its own neighbor list
    let probe_k = (neighbors_k + 1).min(few_rows.len());

    let mut rng = rng::seeded(seed, stream::SMOTER);
    let mut synthetic = Vec::new();
    let mut duplicated = 0usize;
    for &b in &few_bins {
        let m = &members[b];
        let budget = smoter_budget(m.len());
        for j in 0..budget {
            let row = m[j % m.len()];
            let s = &samples[row];
            let neighbors: Vec<usize> = index
                .search_raw(&s.features, probe_k)
                .into_iter()
                .map(|n| few_rows[n.row])
                .filter(|&r| r != row)
                .take(neighbors_k)
                .collect();
            let Some(&other) = neighbors.choose(&mut rng) else {
                duplicated += 1;
                synthetic.push(s.clone());
                continue;
            };
            let t = &samples[other];
            let u: f64 = rng.random();
            let features = s
                .features
                .iter()
                .zip(&t.features)
                .map(|(a, c)| (1.0 - u) * a + u * c)
                .collect();
            synthetic.push(Sample::new(features, (1.0 - u) * s.label + u * t.label));
        }
    }
    if duplicated > 0 {
        log::warn!("SMOTER: {duplicated} synthetic sample(s) duplicated a lone Few sample");
    }
    out.extend(synthetic)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BinEdges;

    fn skewed(counts: &[usize]) -> (Dataset, BinStats) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (b, &c) in counts.iter().enumerate() {
            for i in 0..c {
                feats.push(vec![b as f64 + 0.01 * i as f64, 1.0]);
                labels.push(b as f64 + 0.5);
            }
        }
        let ds = Dataset::from_parts(feats, labels).unwrap();
        let edges =
            BinEdges::from_edges((0..=counts.len()).map(|i| i as f64).collect()).unwrap();
        let bins = BinStats::from_labels(edges, &ds.labels());
        (ds, bins)
    }

    #[test]
    fn inverse_targets_hand_computed() {
        // 1/90 : 1/9 : 1 normalizes to 1/101 : 10/101 : 90/101; times 100
        // gives 0.990, 9.901, 89.109
        assert_eq!(inverse_targets(&[90, 9, 1], 100), vec![1, 10, 89]);
        assert_eq!(inverse_targets(&[10, 10, 10], 30), vec![10, 10, 10]);
        assert_eq!(inverse_targets(&[0, 42, 0], 42), vec![0, 42, 0]);
    }

    #[test]
    fn inverse_dataset_counts() {
        let (ds, bins) = skewed(&[90, 9, 1]);
        let inv = inverse_density_dataset(&ds, &bins, 3).unwrap();
        assert_eq!(bins.counts_of(&inv), vec![1, 10, 89]);
        let (ds, bins) = skewed(&[10, 10, 10]);
        let inv = inverse_density_dataset(&ds, &bins, 3).unwrap();
        let mut a = inv.labels();
        let mut b = ds.labels();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_single_bin_takes_everything() {
        let (ds, bins) = skewed(&[0, 7, 0]);
        let inv = inverse_density_dataset(&ds, &bins, 0).unwrap();
        assert_eq!(bins.counts_of(&inv), vec![0, 7, 0]);
    }

    #[test]
    fn downsample_cases() {
        for (counts, want) in [
            (vec![100, 20, 5], vec![5, 5, 5]),
            (vec![4, 4], vec![4, 4]),
            (vec![50, 1], vec![1, 1]),
            (vec![50, 0, 3], vec![3, 0, 3]),
        ] {
            let (ds, bins) = skewed(&counts);
            let out = downsample_balanced(&ds, &bins, 1).unwrap();
            assert_eq!(bins.counts_of(&out), want);
        }
    }

    #[test]
    fn downsample_uniform_is_identity() {
        let (ds, bins) = skewed(&[4, 4, 4]);
        let out = downsample_balanced(&ds, &bins, 9).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn smoter_budget_rule() {
        assert_eq!(smoter_budget(3), 15);
        assert_eq!(smoter_budget(10), 10);
        assert_eq!(smoter_budget(19), 1);
        assert_eq!(smoter_budget(25), 0);
    }

    #[test]
    fn smoter_midpoint_interpolation() {
        let ds = Dataset::from_parts(vec![vec![0.0], vec![2.0]], vec![0.0, 2.0]).unwrap();
        let bins = BinStats::from_labels(BinEdges::from_edges(vec![0.0, 2.0]).unwrap(), &ds.labels());
        let out = smoter_augment(&ds, &bins, 0, 5).unwrap();
        // bin of 2 grows by min(18, 10)
        assert_eq!(out.len(), 12);
        for s in &out.samples()[2..] {
            // label follows the features along the segment
            assert!((s.features[0] - s.label).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&s.label));
        }
    }

    #[test]
    fn smoter_no_few_bins_is_noop() {
        let (ds, bins) = skewed(&[25, 30]);
        let out = smoter_augment(&ds, &bins, 0, 5).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn smoter_grows_bin_of_three_by_fifteen() {
        let (ds, bins) = skewed(&[150, 3]);
        let out = smoter_augment(&ds, &bins, 4, 5).unwrap();
        assert_eq!(out.len(), 153 + 15);
    }

    #[test]
    fn smoter_lone_sample_is_duplicated() {
        let (ds, bins) = skewed(&[150, 1]);
        let out = smoter_augment(&ds, &bins, 4, 5).unwrap();
        assert_eq!(out.len(), 151 + 5);
        for s in &out.samples()[151..] {
            assert_eq!(s, &ds.samples()[150]);
        }
    }

    #[test]
    fn pools_per_strategy() {
        let (ds, bins) = skewed(&[120, 30, 4]);
        let p = build_pools(&ds, Strategy::Vanilla, &bins, 0).unwrap();
        assert_eq!(p.primary, ds);
        assert!(p.secondary.is_none());
        let p = build_pools(&ds, Strategy::Augmented, &bins, 0).unwrap();
        assert_eq!(p.primary, ds);
        let inv = p.secondary.unwrap();
        assert_eq!(bins.counts_of(&inv), inverse_targets(&[120, 30, 4], 154));
    }

    #[test]
    fn export_writes_pools_and_targets() {
        let (ds, bins) = skewed(&[120, 30, 4]);
        let p = build_pools(&ds, Strategy::Augmented, &bins, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = p.export(&bins, dir.path(), Some("# manifest x")).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("pools.toml")).unwrap();
        assert!(text.starts_with("# manifest x\n"));
        let m: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(m["strategy"].as_str(), Some("augmented"));
        assert_eq!(m["seed"].as_integer(), Some(7));
        let targets: Vec<i64> = m["targets"].as_array().unwrap().iter().map(|v| v.as_integer().unwrap()).collect();
        let want: Vec<i64> = inverse_targets(&[120, 30, 4], 154).iter().map(|&t| t as i64).collect();
        assert_eq!(targets, want);
        let back = crate::data::read_csv(
            std::fs::File::open(dir.path().join("secondary.csv")).unwrap(),
            &crate::data::LabelColumn::Last,
            true,
        )
        .unwrap();
        assert_eq!(back.len(), p.secondary.as_ref().unwrap().len());
    }

    #[test]
    fn registry_lookup() {
        let reg = StrategyRegistry::builtin();
        assert_eq!(reg.names(), vec!["vanilla", "downsample", "inverse", "smoter", "augmented"]);
        assert!(reg.get("Augmented").is_ok());
        assert!(matches!(reg.get("nope"), Err(Error::UnknownName { .. })));
        assert_eq!("smoter".parse::<Strategy>().unwrap(), Strategy::Smoter);
    }
}
