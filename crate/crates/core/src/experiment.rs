//! Config-driven experiments behind the command-line tool.
//!
//! Each `cmd_*` function resolves its inputs from an [`ExperimentConfig`],
//! writes its artifacts atomically under `run.out_dir`, and returns what it
//! computed. Every CSV and text artifact starts with a `# manifest` line
//! carrying the config hash and seed list, and every command also writes a
//! `manifest.toml` listing the resolved config and the files it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    bound_curve, bound_curves_csv, empirical_error_curve, estimate_sigma, ideal_order,
    per_region_report, predict_test, BoundCurve, CurvePoint, EvalReport, MetricName, Region,
    RegionMetrics, ReportInfo, RetrievalMode,
};
use crate::bench::{self, BenchConfig};
use crate::data::{
    balanced_split, load_csv, region_of_label, BinConfig, BinMode, BinSplitCount, BinStats,
    Dataset, LabelColumn, ShotRegion,
};
use crate::error::{Error, Result, ResultExt};
use crate::fsutil;
use crate::icl::{
    self, evaluate_incontext, load_checkpoint, save_checkpoint_with_manifest, FunctionClass,
    IclConfig, IclModel, IncontextPoint, TaskSampler,
};
use crate::plot;
use crate::predict::{PredictorEnv, PredictorRegistry, PredictorSpec};
use crate::resample::{inverse_density_dataset, Pools, Strategy, StrategyRegistry};
use crate::retrieval::{fit_transform, Metric, RetrievalIndex, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV file; when absent the `[bench]` generator supplies the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Column name, zero-based index, or `last`.
    pub label: String,
    pub has_header: bool,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            label: "last".into(),
            has_header: true,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub strategy: Strategy,
    /// Neighbors from the training pool.
    pub k_train: usize,
    /// Neighbors from the inverse-density pool. Single-pool strategies
    /// retrieve `k_train + k_inverse` from their one pool instead.
    pub k_inverse: usize,
    pub metric: Metric,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Augmented,
            k_train: 10,
            k_inverse: 10,
            metric: Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Replaces the residual-based noise estimate in bound curves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub k_max: usize,
    /// Neighbor counts for empirical error curves; empty disables them.
    pub curve_ks: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            sigma: None,
            k_max: 50,
            curve_ks: vec![1, 2, 5, 10, 20, 30, 40, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclSection {
    #[serde(flatten)]
    pub model: IclConfig,
    pub function_class: FunctionClass,
    pub noise_std: f64,
    pub eval_ks: Vec<usize>,
    pub eval_tasks: usize,
    pub eval_seed: u64,
}

impl Default for IclSection {
    fn default() -> Self {
        Self {
            model: IclConfig::default(),
            function_class: FunctionClass::Linear,
            noise_std: 0.0,
            eval_ks: vec![0, 1, 2, 5, 10, 15, 20],
            eval_tasks: 500,
            eval_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Also write each seed's retrieval pools under `pools_seed{N}/`.
    pub export_pools: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            export_pools: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub bins: BinConfig,
    pub retrieval: RetrievalSection,
    pub predictor: PredictorSpec,
    pub analysis: AnalysisSection,
    pub run: RunSection,
    pub icl: IclSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            bins: BinConfig::count(15),
            retrieval: RetrievalSection::default(),
            predictor: PredictorSpec::default(),
            analysis: AnalysisSection::default(),
            run: RunSection::default(),
            icl: IclSection::default(),
            bench: None,
        }
    }
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("config: {e}"))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets a dotted `section.key` in `table`, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(toml_err)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        // `[bins]` with only `bin_width` means width mode, otherwise count
        if let Some(bins) = table.get_mut("bins").and_then(toml::Value::as_table_mut) {
            if !bins.contains_key("mode") {
                let mode = if bins.contains_key("bin_width") && !bins.contains_key("num_bins") {
                    "width"
                } else {
                    "count"
                };
                bins.insert("mode".into(), toml::Value::String(mode.into()));
            }
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(toml_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Reads an optional config file and applies overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fsutil::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides).map_err(|e| match path {
            Some(p) => e.context(format!("config {}", p.display())),
            None => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized config with the output directory cleared,
    /// so moving outputs does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".into()));
        }
        let f = self.data.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data.test_fraction {f} must lie in (0, 1)"
            )));
        }
        if self.retrieval.k_train + self.retrieval.k_inverse == 0 {
            return Err(Error::InvalidConfig(
                "retrieval.k_train + retrieval.k_inverse must be positive".into(),
            ));
        }
        match self.bins.mode {
            BinMode::Count { num_bins: 0 } => {
                return Err(Error::InvalidConfig("bins.num_bins must be at least 1".into()))
            }
            BinMode::Width { bin_width } if !(bin_width > 0.0 && bin_width.is_finite()) => {
                return Err(Error::InvalidConfig("bins.bin_width must be positive".into()))
            }
            _ => {}
        }
        if self.analysis.k_max == 0 {
            return Err(Error::InvalidConfig("analysis.k_max must be at least 1".into()));
        }
        self.icl.model.validate()
    }

    fn bins_label(&self) -> String {
        match self.bins.mode {
            BinMode::Count { num_bins } => format!("count({num_bins})"),
            BinMode::Width { bin_width } => format!("width({bin_width})"),
        }
    }

    fn dataset_label(&self) -> String {
        match &self.data.path {
            Some(p) => p.display().to_string(),
            None => "bench".to_string(),
        }
    }
}

/// The line stamped at the top of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seeds,
        }
    }

    pub fn line(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "# manifest command={} config_hash={} seeds={}",
            self.command,
            self.config_hash,
            seeds.join(",")
        )
    }

    /// Reads a manifest line back.
    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("# manifest ")?;
        let mut command = None;
        let mut hash = None;
        let mut seeds = None;
        for part in rest.split_whitespace() {
            let (k, v) = part.split_once('=')?;
            match k {
                "command" => command = Some(v.to_string()),
                "config_hash" => hash = Some(v.to_string()),
                "seeds" => {
                    seeds = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(str::parse).collect::<std::result::Result<_, _>>().ok()?
                    })
                }
                _ => {}
            }
        }
        Some(Self::new(&command?, hash?, seeds?))
    }
}

#[derive(Debug, Serialize)]
struct ManifestFile<'a> {
    command: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    split_bins: Vec<BinSplitCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ExperimentConfig>,
}

/// Collects artifacts written by one command.
struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
    written: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path, manifest: Manifest) -> Self {
        Self {
            dir: dir.to_path_buf(),
            manifest,
            written: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn stamped(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}\n{body}", self.manifest.line());
        self.raw(name, text.as_bytes())
    }

    fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fsutil::write_atomic(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn finish(mut self, cfg: Option<&ExperimentConfig>, split_bins: Vec<BinSplitCount>) -> Result<Vec<PathBuf>> {
        let artifacts = self
            .written
            .iter()
            .map(|p| {
                p.strip_prefix(&self.dir)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect();
        let file = ManifestFile {
            command: &self.manifest.command,
            config_hash: &self.manifest.config_hash,
            seeds: &self.manifest.seeds,
            artifacts,
            notes: std::mem::take(&mut self.notes),
            split_bins,
            config: cfg,
        };
        let text = toml::to_string(&file).map_err(toml_err)?;
        let path = self.dir.join("manifest.toml");
        fsutil::write_atomic(&path, format!("{}\n{text}", self.manifest.line()).as_bytes())?;
        self.written.push(path);
        Ok(self.written)
    }
}

/// Loads the configured CSV or generates the benchmark.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.data.path, &cfg.bench) {
        (Some(p), _) => load_csv(p, &LabelColumn::parse(&cfg.data.label), cfg.data.has_header),
        (None, Some(b)) => bench::generate(b),
        (None, None) => Err(Error::InvalidConfig(
            "no data: set data.path or add a [bench] section".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Clone)]
pub struct SplitOutput {
    pub seed: u64,
    pub train_len: usize,
    pub test_len: usize,
    pub per_bin: Vec<BinSplitCount>,
    pub files: Vec<PathBuf>,
}

/// Balanced train/test split with the first configured seed.
pub fn cmd_split(cfg: &ExperimentConfig) -> Result<SplitOutput> {
    let data = load_dataset(cfg)?;
    let seed = cfg.run.seeds[0];
    if cfg.run.seeds.len() > 1 {
        log::info!("split uses the first seed ({seed}) of {:?}", cfg.run.seeds);
    }
    let split = balanced_split(&data, cfg.data.test_fraction, &cfg.bins, seed)?;
    let mut out = Outputs::new(
        &cfg.run.out_dir,
        Manifest::new("split", cfg.hash(), vec![seed]),
    );
    out.stamped("train.csv", &split.train.to_csv_string())?;
    out.stamped("test.csv", &split.test.to_csv_string())?;
    let files = out.finish(Some(cfg), split.per_bin.clone())?;
    Ok(SplitOutput {
        seed,
        train_len: split.train.len(),
        test_len: split.test.len(),
        per_bin: split.per_bin,
        files,
    })
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// Row numbers of the test samples in the loaded dataset.
    pub test_rows: Vec<usize>,
    pub labels: Vec<f64>,
    pub predictions: Vec<f64>,
    pub regions: Vec<ShotRegion>,
    pub metrics: RegionMetrics,
    pub bins: BinStats,
    pub pools: Pools,
}

/// Split, resample, index, retrieve and predict for one seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    strategies: &StrategyRegistry,
    predictors: &PredictorRegistry,
) -> Result<SeedRun> {
    let stage = |s: &'static str| move || format!("seed {seed}: {s}");
    let split = balanced_split(data, cfg.data.test_fraction, &cfg.bins, seed).context(stage("split"))?;
    let bins = BinStats::fit(&split.train, &cfg.bins).context(stage("binning"))?;
    let pools = strategies
        .get(cfg.retrieval.strategy.name())?
        .build(&split.train, &bins, seed)
        .context(stage("resampling"))?;
    let transform = fit_transform(&split.train).context(stage("feature transform"))?;
    let metric = cfg.retrieval.metric;
    let primary = RetrievalIndex::build(&pools.primary, &transform, metric, Source::Train)
        .context(stage("indexing"))?;
    let secondary = pools
        .secondary
        .as_ref()
        .map(|p| RetrievalIndex::build(p, &transform, metric, Source::Inverse))
        .transpose()
        .context(stage("indexing"))?;
    let (k_train, k_inverse) = if secondary.is_some() {
        (cfg.retrieval.k_train, cfg.retrieval.k_inverse)
    } else {
        (cfg.retrieval.k_train + cfg.retrieval.k_inverse, 0)
    };
    let predictor = predictors
        .build(&cfg.predictor, &PredictorEnv { train: &split.train })
        .context(stage("predictor"))?;
    let predictions = predict_test(
        &split.test,
        &primary,
        secondary.as_ref(),
        &transform,
        predictor.as_ref(),
        k_train,
        k_inverse,
    )
    .context(stage("prediction"))?;
    let clamped = primary.clamp_warnings() + secondary.as_ref().map_or(0, |s| s.clamp_warnings());
    if clamped > 0 {
        log::warn!("seed {seed}: {clamped} queries asked for more neighbors than a pool holds");
    }
    let labels = split.test.labels();
    let metrics = per_region_report(&labels, &predictions, &bins).context(stage("metrics"))?;
    let regions = labels.iter().map(|&y| region_of_label(y, &bins)).collect();
    Ok(SeedRun {
        seed,
        test_rows: split.test_rows,
        labels,
        predictions,
        regions,
        metrics,
        bins,
        pools,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub seeds: Vec<SeedRun>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cmd_run_with(cfg, &StrategyRegistry::builtin(), &PredictorRegistry::builtin())
}

/// [`cmd_run`] with caller-supplied registries.
pub fn cmd_run_with(
    cfg: &ExperimentConfig,
    strategies: &StrategyRegistry,
    predictors: &PredictorRegistry,
) -> Result<RunOutput> {
    let data = load_dataset(cfg)?;
    let runs = cfg
        .run
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, &data, s, strategies, predictors))
        .collect::<Result<Vec<_>>>()?;
    let two_pools = cfg.retrieval.strategy == Strategy::Augmented;
    let info = ReportInfo {
        strategy: cfg.retrieval.strategy.name().to_string(),
        k_train: if two_pools {
            cfg.retrieval.k_train
        } else {
            cfg.retrieval.k_train + cfg.retrieval.k_inverse
        },
        k_inverse: if two_pools { cfg.retrieval.k_inverse } else { 0 },
        predictor: cfg.predictor.name.clone(),
        dataset: cfg.dataset_label(),
        bins: cfg.bins_label(),
    };
    let report = EvalReport::new(
        info,
        cfg.run.seeds.clone(),
        runs.iter().map(|r| r.metrics.clone()).collect(),
    )?;
    let mut out = Outputs::new(
        &cfg.run.out_dir,
        Manifest::new("run", cfg.hash(), cfg.run.seeds.clone()),
    );
    out.stamped("report.csv", &report.to_csv())?;
    out.stamped("report.txt", &report.to_text())?;
    for r in &runs {
        let mut s = String::from("row,label,prediction,region\n");
        for i in 0..r.labels.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.test_rows[i], r.labels[i], r.predictions[i], r.regions[i]
            );
        }
        out.stamped(&format!("predictions_seed{}.csv", r.seed), &s)?;
        if cfg.run.export_pools {
            let dir = format!("pools_seed{}", r.seed);
            for (name, body) in r.pools.csv_files() {
                out.stamped(&format!("{dir}/{name}"), &body)?;
            }
            out.stamped(&format!("{dir}/pools.toml"), &r.pools.manifest_toml(&r.bins))?;
        }
    }
    let files = out.finish(Some(cfg), Vec::new())?;
    Ok(RunOutput {
        report,
        seeds: runs,
        files,
    })
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub region: Region,
    pub metric: MetricName,
    pub strategy: String,
    pub mean: f64,
    pub std: f64,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct AblateOutput {
    pub reports: Vec<(String, EvalReport)>,
    pub ranking: Vec<RankRow>,
    pub files: Vec<PathBuf>,
}

/// Per region and metric, strategies ordered by mean (ties by listing
/// order) and ranked from 1.
pub fn rank_strategies(reports: &[(String, EvalReport)]) -> Vec<RankRow> {
    let mut rows = Vec::new();
    for region in Region::ALL {
        for metric in MetricName::ALL {
            let mut present: Vec<(usize, f64, f64)> = reports
                .iter()
                .enumerate()
                .filter_map(|(i, (_, r))| {
                    let s = r.summary_of(region);
                    Some((i, s.mean?.get(metric), s.std?.get(metric)))
                })
                .collect();
            present.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for (rank, (i, mean, std)) in present.into_iter().enumerate() {
                rows.push(RankRow {
                    region,
                    metric,
                    strategy: reports[i].0.clone(),
                    mean,
                    std,
                    rank: rank + 1,
                });
            }
        }
    }
    rows
}

/// Runs every registered strategy under the same seeds, each into its own
/// subdirectory, and ranks them.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblateOutput> {
    let strategies = StrategyRegistry::builtin();
    let predictors = PredictorRegistry::builtin();
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for name in strategies.names() {
        let mut sub = cfg.clone();
        sub.retrieval.strategy = name.parse()?;
        sub.run.out_dir = cfg.run.out_dir.join(name);
        let run = cmd_run_with(&sub, &strategies, &predictors)
            .map_err(|e| e.context(format!("strategy {name}")))?;
        files.extend(run.files);
        reports.push((name.to_string(), run.report));
    }
    let ranking = rank_strategies(&reports);
    let mut s = String::from("region,metric,strategy,mean,std,rank\n");
    for r in &ranking {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.region,
            r.metric.name(),
            r.strategy,
            r.mean,
            r.std,
            r.rank
        );
    }
    let mut out = Outputs::new(
        &cfg.run.out_dir,
        Manifest::new("ablate", cfg.hash(), cfg.run.seeds.clone()),
    );
    out.stamped("comparison.csv", &s)?;
    files.extend(out.finish(Some(cfg), Vec::new())?);
    Ok(AblateOutput {
        reports,
        ranking,
        files,
    })
}

// ---------------------------------------------------------------------------
// bound

#[derive(Debug, Clone)]
pub struct RegionCurve {
    pub region: Region,
    pub query_label: f64,
    pub curve: BoundCurve,
}

#[derive(Debug, Clone)]
pub struct BoundOutput {
    pub seed: u64,
    pub sigma: f64,
    pub curves: Vec<RegionCurve>,
    pub skipped: Vec<Region>,
    /// `(mode, point)` rows of the empirical curves, when requested.
    pub empirical: Vec<(RetrievalMode, CurvePoint)>,
    pub files: Vec<PathBuf>,
}

/// Test rows of one shot region, ordered by the training count of their
/// label bin (then by row).
pub fn region_queries(test: &Dataset, bins: &BinStats, region: ShotRegion) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..test.len())
        .filter(|&i| region_of_label(test.samples()[i].label, bins) == region)
        .collect();
    rows.sort_by_key(|&i| (bins.counts[bins.bin_of(test.samples()[i].label)], i));
    rows
}

/// The query whose bin count is the region median (lower median).
pub fn representative_query(test: &Dataset, bins: &BinStats, region: ShotRegion) -> Option<usize> {
    let rows = region_queries(test, bins, region);
    (!rows.is_empty()).then(|| rows[(rows.len() - 1) / 2])
}

/// Bound curves for one representative query per shot region, using the
/// first configured seed, and optional empirical error curves.
pub fn cmd_bound(cfg: &ExperimentConfig) -> Result<BoundOutput> {
    let data = load_dataset(cfg)?;
    let seed = cfg.run.seeds[0];
    let split = balanced_split(&data, cfg.data.test_fraction, &cfg.bins, seed)?;
    let bins = BinStats::fit(&split.train, &cfg.bins)?;
    let sigma = estimate_sigma(&split.train, cfg.analysis.sigma)?;
    let train_labels = split.train.labels();
    let k_max = cfg.analysis.k_max.min(train_labels.len());
    let mut out = Outputs::new(&cfg.run.out_dir, Manifest::new("bound", cfg.hash(), vec![seed]));

    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    for shot in ShotRegion::ALL {
        let region = Region::from(shot);
        match representative_query(&split.test, &bins, shot) {
            Some(row) => {
                let y = split.test.samples()[row].label;
                let curve = bound_curve(y, &ideal_order(y, &train_labels), sigma, k_max)?;
                curves.push(RegionCurve {
                    region,
                    query_label: y,
                    curve,
                });
            }
            None => {
                log::info!("no {region} test queries; skipping its bound curve");
                out.notes.push(format!("region {region} has no test queries; skipped"));
                skipped.push(region);
            }
        }
    }
    let rows: Vec<(Region, f64, BoundCurve)> = curves
        .iter()
        .map(|c| (c.region, c.query_label, c.curve.clone()))
        .collect();
    out.stamped(
        "bound_curves.csv",
        &format!("# sigma={sigma}\n{}", bound_curves_csv(&rows)),
    )?;

    let mut empirical = Vec::new();
    if !cfg.analysis.curve_ks.is_empty() {
        let transform = fit_transform(&split.train)?;
        let metric = cfg.retrieval.metric;
        let train_idx = RetrievalIndex::build(&split.train, &transform, metric, Source::Train)?;
        let inverse = inverse_density_dataset(&split.train, &bins, seed)?;
        let inv_idx = RetrievalIndex::build(&inverse, &transform, metric, Source::Inverse)?;
        let predictor = PredictorRegistry::builtin()
            .build(&cfg.predictor, &PredictorEnv { train: &split.train })?;
        let mut s = String::from("k,mode,region,count,mse\n");
        for mode in [RetrievalMode::Vanilla, RetrievalMode::Augmented] {
            let pts = empirical_error_curve(
                &split.test,
                &train_idx,
                Some(&inv_idx),
                &transform,
                predictor.as_ref(),
                &cfg.analysis.curve_ks,
                &bins,
                mode,
            )?;
            let mode_name = match mode {
                RetrievalMode::Vanilla => "vanilla",
                RetrievalMode::Augmented => "augmented",
            };
            for p in pts {
                let mse = p.mse.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{mode_name},{},{},{mse}", p.k, p.region, p.count);
                empirical.push((mode, p));
            }
        }
        out.stamped("error_curves.csv", &s)?;
    }
    let files = out.finish(Some(cfg), Vec::new())?;
    Ok(BoundOutput {
        seed,
        sigma,
        curves,
        skipped,
        empirical,
        files,
    })
}

// ---------------------------------------------------------------------------
// transformer

#[derive(Debug, Clone)]
pub struct TrainIclOutput {
    pub model: IclModel,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub files: Vec<PathBuf>,
}

pub fn cmd_train_icl(cfg: &ExperimentConfig) -> Result<TrainIclOutput> {
    let m = &cfg.icl.model;
    let manifest = Manifest::new("train-icl", cfg.hash(), vec![m.seed]);
    let mut sampler = TaskSampler::new(cfg.icl.function_class, m.input_dim, cfg.icl.noise_std, m.seed);
    let every = (m.steps / 20).max(1);
    let outcome = icl::train_with_progress(m, &mut sampler, |step, loss| {
        if step % every == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
    })?;
    let mut out = Outputs::new(&cfg.run.out_dir, manifest.clone());
    let checkpoint = cfg.run.out_dir.join("checkpoint.bin");
    save_checkpoint_with_manifest(&outcome.model, true, Some(&manifest.line()), &checkpoint)?;
    out.written.push(checkpoint.clone());
    for (step, params) in &outcome.checkpoints {
        let snap = IclModel::from_parts(m.clone(), params.clone(), None)?;
        let path = cfg.run.out_dir.join(format!("snapshots/step_{step}.bin"));
        save_checkpoint_with_manifest(&snap, false, Some(&manifest.line()), &path)?;
        out.written.push(path);
    }
    let mut s = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    out.stamped("losses.csv", &s)?;
    let files = out.finish(Some(cfg), Vec::new())?;
    Ok(TrainIclOutput {
        model: outcome.model,
        losses: outcome.losses,
        checkpoint,
        files,
    })
}

#[derive(Debug, Clone)]
pub struct EvalIclOutput {
    pub points: Vec<IncontextPoint>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_eval_icl(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalIclOutput> {
    let model = load_checkpoint(checkpoint)?;
    let seed = cfg.icl.eval_seed;
    let mut sampler = TaskSampler::new(
        cfg.icl.function_class,
        model.config.input_dim,
        cfg.icl.noise_std,
        seed,
    );
    let points = evaluate_incontext(&model, &mut sampler, &cfg.icl.eval_ks, cfg.icl.eval_tasks)?;
    let mut s = String::from("k,model_mse,average_mse,ridge_mse\n");
    for p in &points {
        let _ = writeln!(s, "{},{},{},{}", p.k, p.model_mse, p.average_mse, p.ridge_mse);
    }
    let mut out = Outputs::new(&cfg.run.out_dir, Manifest::new("eval-icl", cfg.hash(), vec![seed]));
    out.notes.push(format!("checkpoint {}", checkpoint.display()));
    out.stamped("eval_icl.csv", &s)?;
    let files = out.finish(Some(cfg), Vec::new())?;
    Ok(EvalIclOutput { points, files })
}

// ---------------------------------------------------------------------------
// plot, bench

/// Renders a curve CSV to SVG. The manifest hashes the input file and
/// carries over its seed list.
pub fn cmd_plot(input: &Path, output: &Path, y_column: Option<&str>) -> Result<PathBuf> {
    let text = fsutil::read_to_string(input)?;
    let table = plot::parse_curve_csv(&text, y_column).map_err(|e| e.context(input.display().to_string()))?;
    let seeds = text
        .lines()
        .find_map(Manifest::parse)
        .map(|m| m.seeds)
        .unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    let hash = digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let manifest = Manifest::new("plot", hash, seeds);
    let line = manifest.line();
    let svg = plot::render_svg(&table, Some(line.trim_start_matches("# ")));
    fsutil::write_atomic(output, svg.as_bytes())?;
    Ok(output.to_path_buf())
}

pub fn cmd_gen_bench(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let b = cfg.bench.clone().unwrap_or_default();
    let data = bench::generate(&b)?;
    let mut out = Outputs::new(&cfg.run.out_dir, Manifest::new("gen-bench", cfg.hash(), vec![b.seed]));
    let counts: Vec<String> = b.counts().iter().map(usize::to_string).collect();
    out.notes.push(format!("bin counts {}", counts.join(",")));
    let path = out.stamped("bench.csv", &data.to_csv_string())?;
    out.finish(Some(cfg), Vec::new())?;
    Ok(path)
}
