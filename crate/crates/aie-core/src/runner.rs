//! Experiment orchestration: JSON run configs, seeded end-to-end pipelines
//! (generate -> train -> evaluate), multi-seed aggregation, relative
//! improvement reporting, and hyperparameter sweeps.
//!
//! Run directories are keyed by a hash of the full config; re-running an
//! unchanged config returns the stored result unless forced. All randomness
//! derives from the configured seeds.

use crate::am2::Am2Config;
use crate::bcm::{self, BcmConfig};
use crate::data::{Dataset, FeatureSchema, SplitTag};
use crate::error::{AieError, Result};
use crate::metrics::{
    self, relaimpr, MetricsReport, MetricsToggles, RelaImprKind, ScoredSample,
};
use crate::model::{
    predict_all, train_epoch, BackboneConfig, Checkpoint, EpochStats, LossSpec, ModelConfig,
    ModelParams, Optimizer,
};
use crate::synth::{World, WorldConfig};
use crate::tensor::AdamHyper;
use crate::util::{derive_seed_str, fnv1a64};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_ROOT_ENV: &str = "AIE_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generate data from the auction simulator, split 6:1:1 by default.
    Synth {
        world: WorldConfig,
        #[serde(default = "default_n_unbiased")]
        n_unbiased: usize,
        #[serde(default = "default_split")]
        split: Vec<f64>,
    },
    /// Load pre-joined impression logs.
    Tsv {
        schema: FeatureSchema,
        train: PathBuf,
        #[serde(default)]
        valid: Option<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        unbiased_test: Option<PathBuf>,
    },
}

fn default_n_unbiased() -> usize {
    50_000
}
fn default_split() -> Vec<f64> {
    vec![0.75, 0.125, 0.125]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
}

fn default_head_hidden() -> Vec<usize> {
    vec![16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            l2: 0.0,
            batch_size: 2000,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub am2: Am2Config,
    #[serde(default)]
    pub bcm: BcmConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metrics: MetricsToggles,
    #[serde(default)]
    pub sweep: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default)]
    pub run_root: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_str(body: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(body).map_err(|e| AieError::Json {
            context: "parse run config".to_string(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path)
            .map_err(|e| AieError::io(path.display().to_string(), e))?;
        RunConfig::from_str(&body)
    }

    /// Collects every semantic problem before failing.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.version != CONFIG_VERSION {
            issues.push(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.seeds.is_empty() {
            issues.push("seeds must not be empty".to_string());
        }
        if self.optimizer.batch_size == 0 {
            issues.push("optimizer.batch_size must be >= 1".to_string());
        }
        if self.optimizer.epochs == 0 {
            issues.push("optimizer.epochs must be >= 1".to_string());
        }
        if self.optimizer.lr < 0.0 {
            issues.push("optimizer.lr must be >= 0".to_string());
        }
        if self.optimizer.l2 < 0.0 {
            issues.push("optimizer.l2 must be >= 0".to_string());
        }
        match &self.data {
            DataConfig::Synth { world, split, n_unbiased } => {
                if let Err(AieError::InvalidConfig { issues: more }) = world.validate() {
                    issues.extend(more);
                }
                if split.len() != 3 {
                    issues.push("data.split must have exactly 3 fractions".to_string());
                } else {
                    if split.iter().any(|&f| f <= 0.0) {
                        issues.push("data.split fractions must be positive".to_string());
                    }
                    if (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        issues.push("data.split fractions must sum to 1".to_string());
                    }
                }
                if *n_unbiased == 0 {
                    issues.push("data.n_unbiased must be >= 1".to_string());
                }
            }
            DataConfig::Tsv { schema, .. } => {
                if let Err(AieError::InvalidConfig { issues: more }) = schema.validate() {
                    issues.extend(more);
                }
            }
        }
        if let Err(AieError::InvalidConfig { issues: more }) = self.bcm.validate() {
            issues.extend(more);
        }
        let model_config = self.model_config();
        if let Err(AieError::InvalidConfig { issues: more }) = model_config.validate() {
            issues.extend(more);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(AieError::InvalidConfig { issues })
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone.clone(),
            head_hidden: self.model.head_hidden.clone(),
            am2: self.am2.clone(),
        }
    }

    /// Stable hash of the full config, used to key run directories.
    pub fn hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(body.as_bytes()))
    }

    pub fn run_root(&self) -> PathBuf {
        if let Ok(root) = std::env::var(RUN_ROOT_ENV) {
            return PathBuf::from(root);
        }
        self.run_root.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Splits and holdouts, consistently encoded with the training dictionaries.
pub struct PreparedData {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Option<Dataset>,
    pub unbiased: Option<Dataset>,
}

pub fn prepare_data(config: &RunConfig, seed: u64) -> Result<PreparedData> {
    match &config.data {
        DataConfig::Synth {
            world,
            n_unbiased,
            split,
        } => {
            let world = World::new(world)?;
            let biased = world.generate_biased_log(derive_seed_str(seed, "gen"))?;
            let mut parts = biased.split_by_fraction(split, true, 0)?;
            let test = parts.pop().map(|d| d.with_tag(SplitTag::Test));
            let valid = parts.pop().map(|d| d.with_tag(SplitTag::Valid));
            let train = parts.pop().expect("three-way split").with_tag(SplitTag::Train);
            let unbiased = world
                .generate_unbiased_log(*n_unbiased, derive_seed_str(seed, "unbiased"))?
                .reencode_with(&train.encoders)?
                .with_tag(SplitTag::UnbiasedTest);
            Ok(PreparedData {
                schema: train.schema.clone(),
                train,
                valid,
                test,
                unbiased: Some(unbiased),
            })
        }
        DataConfig::Tsv {
            schema,
            train,
            valid,
            test,
            unbiased_test,
        } => {
            let train = Dataset::load_tsv(train, schema)?;
            let frozen = |path: &Option<PathBuf>, tag: SplitTag| -> Result<Option<Dataset>> {
                match path {
                    None => Ok(None),
                    Some(p) => Ok(Some(
                        Dataset::load_tsv_frozen(p, schema, &train.encoders)?.with_tag(tag),
                    )),
                }
            };
            let valid = frozen(valid, SplitTag::Valid)?;
            let test = frozen(test, SplitTag::Test)?;
            let unbiased = frozen(unbiased_test, SplitTag::UnbiasedTest)?;
            Ok(PreparedData {
                schema: train.schema.clone(),
                train,
                valid,
                test,
                unbiased,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub stats: EpochStats,
    pub valid_auc: Option<f64>,
    pub selected: bool,
}

pub struct TrainedSeed {
    pub params: ModelParams,
    pub valid_auc: Option<f64>,
    pub selected_epoch: usize,
    pub log: Vec<EpochRow>,
    pub bcm_stats: Option<bcm::BcmStats>,
}

/// Trains one seed: fits BCM weights on the training split, runs the epochs,
/// and keeps the parameters of the best validation-AUC epoch (price loss is
/// never used for selection).
pub fn train_seed(config: &RunConfig, data: &PreparedData, seed: u64) -> Result<TrainedSeed> {
    let train_seed = derive_seed_str(seed, "train");
    let model_config = config.model_config();
    let mut params = ModelParams::init(&model_config, &data.schema, train_seed)?;
    let hyper = AdamHyper {
        lr: config.optimizer.lr,
        ..AdamHyper::default()
    };
    let mut optimizer = Optimizer::new(&params, hyper, config.optimizer.l2);

    let (weights, bcm_stats) = if config.bcm.enabled {
        let stats = bcm::fit_stats(&data.train, &config.bcm)?;
        let wv = bcm::apply(&data.train, &stats);
        (Some(wv.weights), Some(stats))
    } else {
        (None, None)
    };
    let price_weight = if config.am2.enabled { config.am2.w } else { 0.0 };
    let spec = LossSpec {
        weights: weights.as_deref(),
        price_weight,
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..config.optimizer.epochs {
        let stats = train_epoch(
            &mut params,
            &mut optimizer,
            &data.train,
            &spec,
            config.optimizer.batch_size,
            train_seed,
            epoch as u64,
        )?;
        let valid_auc = match &data.valid {
            Some(valid) => {
                let scored = score_dataset(&params, valid)?;
                metrics::auc(&scored).ok()
            }
            None => None,
        };
        if let Some(auc) = valid_auc {
            if best.as_ref().map_or(true, |(b, _, _)| auc > *b) {
                best = Some((auc, epoch, params.clone()));
            }
        }
        log.push(EpochRow {
            epoch,
            stats,
            valid_auc,
            selected: false,
        });
    }
    let (valid_auc, selected_epoch, params) = match best {
        Some((auc, epoch, p)) => (Some(auc), epoch, p),
        None => (None, config.optimizer.epochs - 1, params),
    };
    if let Some(row) = log.get_mut(selected_epoch) {
        row.selected = true;
    }
    Ok(TrainedSeed {
        params,
        valid_auc,
        selected_epoch,
        log,
        bcm_stats,
    })
}

/// Serving predictions joined with labels and auction fields.
pub fn score_dataset(params: &ModelParams, dataset: &Dataset) -> Result<Vec<ScoredSample>> {
    let pctr = predict_all(params, dataset)?;
    Ok(dataset
        .samples
        .iter()
        .zip(pctr)
        .map(|(s, p)| ScoredSample {
            pctr: p,
            y: s.y,
            bid: s.bid,
            payprice: s.payprice,
            group: s.group,
        })
        .collect())
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    toggles: &MetricsToggles,
) -> Result<MetricsReport> {
    let scored = score_dataset(params, dataset)?;
    Ok(metrics::compute_report(&scored, toggles))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub valid_auc: Option<f64>,
    pub selected_epoch: usize,
    pub test: Option<MetricsReport>,
    pub unbiased: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedOutcome>,
    /// Per-metric mean and standard deviation across seeds.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl RunResult {
    pub fn load(path: impl AsRef<Path>) -> Result<RunResult> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path)
            .map_err(|e| AieError::io(path.display().to_string(), e))?;
        serde_json::from_str(&body).map_err(|e| AieError::Json {
            context: format!("parse run result {}", path.display()),
            msg: e.to_string(),
        })
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|m| m.mean)
    }
}

fn aggregate(outcomes: &[SeedOutcome]) -> BTreeMap<String, MeanStd> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |key: &str, v: Option<f64>| {
        if let Some(v) = v {
            columns.entry(key.to_string()).or_default().push(v);
        }
    };
    for o in outcomes {
        push("valid_auc", o.valid_auc);
        if let Some(t) = &o.test {
            push("auc", t.auc);
            push("cs_auc", t.cs_auc);
            push("rev", t.rev_scaled);
            push("rev_ndcg", t.rev_ndcg);
            push("predicted_bias", t.predicted_bias);
            push("tercile_high", t.tercile.map(|x| x.high));
        }
        if let Some(u) = &o.unbiased {
            push("unbiased_auc", u.auc);
            push("unbiased_predicted_bias", u.predicted_bias);
        }
    }
    columns
        .into_iter()
        .map(|(k, vs)| (k, mean_std(&vs)))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| AieError::Json {
        context: "serialize artifact".to_string(),
        msg: e.to_string(),
    })?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body).map_err(|e| AieError::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| AieError::io(path.display().to_string(), e))
}

fn write_train_log(path: &Path, log: &[EpochRow]) -> Result<()> {
    let mut body = String::from("epoch\ttotal_loss\tctr_loss\tprice_loss\tvalid_auc\tselected\n");
    for row in log {
        let _ = writeln!(
            body,
            "{}\t{}\t{}\t{}\t{}\t{}",
            row.epoch,
            row.stats.mean_total,
            row.stats.mean_ctr,
            row.stats.mean_price,
            row.valid_auc.map_or("-".to_string(), |v| v.to_string()),
            row.selected as u8,
        );
    }
    std::fs::write(path, body).map_err(|e| AieError::io(path.display().to_string(), e))
}

/// Full pipeline: per seed, prepare data, train, evaluate, and persist the
/// artifacts under `run_root/<config-hash>/`. A completed run is returned
/// as-is unless `force` is set.
pub fn run(config: &RunConfig, force: bool) -> Result<RunResult> {
    config.validate()?;
    let hash = config.hash();
    let dir = config.run_root().join(&hash);
    let result_path = dir.join("result.json");
    if !force && result_path.exists() {
        return RunResult::load(&result_path);
    }
    std::fs::create_dir_all(&dir).map_err(|e| AieError::io(dir.display().to_string(), e))?;
    write_json(&dir.join("config.json"), config)?;

    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let data = prepare_data(config, seed)?;
        let trained = train_seed(config, &data, seed)?;
        let seed_dir = dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| AieError::io(seed_dir.display().to_string(), e))?;
        let ck = Checkpoint::capture(
            &trained.params,
            &data.schema,
            &data.train.encoders,
            derive_seed_str(seed, "train"),
            trained.selected_epoch,
        );
        ck.save(seed_dir.join("checkpoint.json"))?;
        write_train_log(&seed_dir.join("train_log.tsv"), &trained.log)?;
        if let Some(stats) = &trained.bcm_stats {
            write_json(&seed_dir.join("bcm_stats.json"), stats)?;
        }

        let test = match &data.test {
            Some(ds) => Some(evaluate(&trained.params, ds, &config.metrics)?),
            None => None,
        };
        let unbiased = match &data.unbiased {
            Some(ds) => Some(evaluate(&trained.params, ds, &config.metrics)?),
            None => None,
        };
        let outcome = SeedOutcome {
            seed,
            valid_auc: trained.valid_auc,
            selected_epoch: trained.selected_epoch,
            test,
            unbiased,
        };
        write_json(&seed_dir.join("metrics.json"), &outcome)?;
        per_seed.push(outcome);
    }

    let result = RunResult {
        config_hash: hash,
        seeds: config.seeds.clone(),
        per_seed: per_seed.clone(),
        aggregate: aggregate(&per_seed),
    };
    write_json(&result_path, &result)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub seed: u64,
    pub rows: BTreeMap<String, usize>,
}

/// Writes train/valid/test TSVs plus the unbiased holdout and a manifest
/// into `out`, using the config's synth source.
pub fn generate_to_dir(
    config: &RunConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<GenSummary> {
    config.validate()?;
    let DataConfig::Synth {
        world,
        n_unbiased,
        split,
    } = &config.data
    else {
        return Err(AieError::invalid(
            "gen needs a config with a synth data source",
        ));
    };
    let seed = seed_override.unwrap_or(config.seeds[0]);
    let world = World::new(world)?;
    let biased = world.generate_biased_log(derive_seed_str(seed, "gen"))?;
    let mut parts = biased.split_by_fraction(split, true, 0)?;
    let test = parts.pop().expect("three-way split");
    let valid = parts.pop().expect("three-way split");
    let train = parts.pop().expect("three-way split");
    let unbiased = world.generate_unbiased_log(*n_unbiased, derive_seed_str(seed, "unbiased"))?;

    std::fs::create_dir_all(out).map_err(|e| AieError::io(out.display().to_string(), e))?;
    train.save_tsv(out.join("train.tsv"))?;
    valid.save_tsv(out.join("valid.tsv"))?;
    test.save_tsv(out.join("test.tsv"))?;
    unbiased.save_tsv(out.join("unbiased_test.tsv"))?;

    let rows: BTreeMap<String, usize> = BTreeMap::from([
        ("train".to_string(), train.len()),
        ("valid".to_string(), valid.len()),
        ("test".to_string(), test.len()),
        ("unbiased_test".to_string(), unbiased.len()),
    ]);
    let manifest = serde_json::json!({
        "schema": world.schema(),
        "world": world.config(),
        "seed": seed,
        "rows": rows,
    });
    let path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| AieError::Json {
        context: "serialize manifest".to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(&path, body).map_err(|e| AieError::io(path.display().to_string(), e))?;
    Ok(GenSummary { seed, rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummaryRow {
    pub seed: u64,
    pub valid_auc: Option<f64>,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub skipped: bool,
}

/// Trains every configured seed and writes checkpoint + train log, without
/// evaluating; existing checkpoints are kept unless `force` is set.
pub fn train_only(config: &RunConfig, force: bool) -> Result<Vec<TrainSummaryRow>> {
    config.validate()?;
    let dir = config.run_root().join(config.hash());
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        let ck_path = seed_dir.join("checkpoint.json");
        if ck_path.exists() && !force {
            rows.push(TrainSummaryRow {
                seed,
                valid_auc: None,
                epochs: 0,
                checkpoint: ck_path,
                skipped: true,
            });
            continue;
        }
        let data = prepare_data(config, seed)?;
        let trained = train_seed(config, &data, seed)?;
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| AieError::io(seed_dir.display().to_string(), e))?;
        let ck = Checkpoint::capture(
            &trained.params,
            &data.schema,
            &data.train.encoders,
            derive_seed_str(seed, "train"),
            trained.selected_epoch,
        );
        ck.save(&ck_path)?;
        write_train_log(&seed_dir.join("train_log.tsv"), &trained.log)?;
        rows.push(TrainSummaryRow {
            seed,
            valid_auc: trained.valid_auc,
            epochs: trained.log.len(),
            checkpoint: ck_path,
            skipped: false,
        });
    }
    Ok(rows)
}

/// Metric kind used for relative-improvement reporting.
pub fn metric_kind(metric: &str) -> Option<RelaImprKind> {
    match metric {
        "auc" | "cs_auc" | "unbiased_auc" | "valid_auc" => Some(RelaImprKind::AucLike),
        "rev" | "rev_ndcg" => Some(RelaImprKind::RevenueLike),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub base: f64,
    pub measured: f64,
    pub delta: f64,
    pub relaimpr_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn relaimpr(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric)
            .and_then(|r| r.relaimpr_pct)
    }

    /// Fixed-width text table mirroring a metric x model grid.
    pub fn table(&self, base_name: &str, measured_name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>12} {:>10}",
            "metric", base_name, measured_name, "RelaImpr"
        );
        for row in &self.rows {
            let ri = row
                .relaimpr_pct
                .map_or("-".to_string(), |v| format!("{v:+.2}%"));
            let _ = writeln!(
                out,
                "{:<24} {:>12.5} {:>12.5} {:>10}",
                row.metric, row.base, row.measured, ri
            );
        }
        out
    }
}

/// Per-metric relative improvement of `measured` over `baseline`, computed
/// on the cross-seed means.
pub fn compare(measured: &RunResult, baseline: &RunResult) -> Result<CompareReport> {
    let mut rows = Vec::new();
    for (metric, base) in &baseline.aggregate {
        let Some(meas) = measured.aggregate.get(metric) else {
            continue;
        };
        let kind = metric_kind(metric);
        let relaimpr_pct = kind.and_then(|k| relaimpr(meas.mean, base.mean, k).ok());
        rows.push(CompareRow {
            metric: metric.clone(),
            base: base.mean,
            measured: meas.mean,
            delta: meas.mean - base.mean,
            relaimpr_pct,
        });
    }
    if rows.is_empty() {
        return Err(AieError::invalid(
            "compared runs share no aggregated metrics",
        ));
    }
    Ok(CompareReport { rows })
}

/// Mean relative improvement over a list of (measured, base) pairs, one per
/// backbone, as used in cross-model summary columns.
pub fn mean_relaimpr(pairs: &[(f64, f64)], kind: RelaImprKind) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AieError::invalid("mean_relaimpr needs at least one pair"));
    }
    let mut acc = 0.0;
    for &(measured, base) in pairs {
        acc += relaimpr(measured, base, kind)?;
    }
    Ok(acc / pairs.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub assignment: BTreeMap<String, f64>,
    pub config_hash: String,
    pub valid_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    /// Index of the best point by mean validation AUC.
    pub best: usize,
}

fn set_json_path(root: &mut serde_json::Value, path: &str, value: f64) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            AieError::invalid(format!("sweep path {path:?} does not address an object"))
        })?;
        let entry = obj
            .get_mut(*part)
            .ok_or_else(|| AieError::invalid(format!("sweep path {path:?} not found in config")))?;
        if i + 1 == parts.len() {
            // Preserve the original JSON number type so integer fields stay
            // integers.
            *entry = if entry.is_u64() || entry.is_i64() {
                serde_json::Value::from(value.round() as i64)
            } else {
                serde_json::Value::from(value)
            };
            return Ok(());
        }
        cursor = entry;
    }
    unreachable!()
}

/// Grid search over the config's `sweep` map (cartesian product). Every
/// point becomes an ordinary hashed run; the best point is chosen by mean
/// validation AUC.
pub fn sweep(config: &RunConfig, force: bool) -> Result<SweepSummary> {
    let grid = config
        .sweep
        .clone()
        .ok_or_else(|| AieError::invalid("config has no sweep section"))?;
    if grid.is_empty() || grid.values().any(|v| v.is_empty()) {
        return Err(AieError::invalid("sweep grid must be non-empty"));
    }
    let keys: Vec<&String> = grid.keys().collect();
    let mut combos: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    for key in &keys {
        let mut next = Vec::new();
        for combo in &combos {
            for &v in &grid[*key] {
                let mut c = combo.clone();
                c.insert((*key).clone(), v);
                next.push(c);
            }
        }
        combos = next;
    }

    let mut base = serde_json::to_value(config).map_err(|e| AieError::Json {
        context: "serialize config for sweep".to_string(),
        msg: e.to_string(),
    })?;
    // Child runs must not recurse into the sweep themselves.
    base.as_object_mut().unwrap().remove("sweep");

    let mut points = Vec::new();
    for combo in combos {
        let mut patched = base.clone();
        for (path, value) in &combo {
            set_json_path(&mut patched, path, *value)?;
        }
        let child: RunConfig = serde_json::from_value(patched).map_err(|e| AieError::Json {
            context: "parse swept config".to_string(),
            msg: e.to_string(),
        })?;
        let result = run(&child, force)?;
        points.push(SweepPoint {
            assignment: combo,
            config_hash: result.config_hash.clone(),
            valid_auc: result.mean("valid_auc"),
            test_auc: result.mean("auc"),
        });
    }
    let best = points
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let av = a.valid_auc.or(a.test_auc).unwrap_or(f64::NEG_INFINITY);
            let bv = b.valid_auc.or(b.test_auc).unwrap_or(f64::NEG_INFINITY);
            av.partial_cmp(&bv).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let summary = SweepSummary { points, best };
    let dir = config.run_root();
    std::fs::create_dir_all(&dir).map_err(|e| AieError::io(dir.display().to_string(), e))?;
    write_json(&dir.join(format!("sweep-{}.json", config.hash())), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            n_ads: 20,
            n_users: 40,
            n_contexts: 10,
            n_scenarios: 3,
            true_model_seed: 5,
            bid_mu: 4.0,
            bid_sigma: 0.4,
            high_bid_fraction: 0.2,
            bid_inflation_factor: 8.0,
            competitor_mu: 2.6,
            competitor_sigma: 0.8,
            scenario_spread: 0.4,
            price_ctr_correlation: 0.6,
            n_auctions: 400,
            n_candidates: 0,
        }
    }

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            version: 1,
            data: DataConfig::Synth {
                world: tiny_world(),
                n_unbiased: 400,
                split: vec![0.75, 0.125, 0.125],
            },
            model: ModelSection {
                backbone: BackboneConfig {
                    kind: crate::model::BackboneKind::Dnn,
                    hidden_layers: vec![16, 8],
                    n_cross_layers: 0,
                    embed_dim: 4,
                },
                head_hidden: vec![8],
            },
            am2: Am2Config {
                enabled: true,
                w: 0.1,
                tower_widths: vec![8],
                scen_dim: 4,
            },
            bcm: BcmConfig {
                enabled: true,
                a: 0.8,
                b: 1.2,
                ..BcmConfig::default()
            },
            optimizer: OptimizerConfig {
                lr: 1e-2,
                l2: 0.0,
                batch_size: 256,
                epochs: 2,
            },
            seeds: vec![7],
            metrics: MetricsToggles::default(),
            sweep: None,
            run_root: Some(dir.to_path_buf()),
        }
    }

    #[test]
    fn run_is_deterministic_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let a = run(&config, false).unwrap();
        let b = run(&config, false).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = run(&config, true).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap(),
            "forced rerun reproduces the result bit-for-bit"
        );
        assert!(a.aggregate.contains_key("auc"));
        assert!(a.aggregate.contains_key("unbiased_auc"));
    }

    #[test]
    fn plugged_off_modules_reproduce_the_bare_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let mut with_modules = tiny_config(dir.path());
        with_modules.am2.enabled = true;
        with_modules.am2.w = 0.0;
        with_modules.bcm.enabled = false;
        let mut bare = with_modules.clone();
        bare.am2.enabled = false;

        let data_a = prepare_data(&with_modules, 7).unwrap();
        let trained_a = train_seed(&with_modules, &data_a, 7).unwrap();
        let data_b = prepare_data(&bare, 7).unwrap();
        let trained_b = train_seed(&bare, &data_b, 7).unwrap();

        // Shared parameter groups must be bit-identical.
        let a: BTreeMap<String, _> = trained_a.params.named_arrays().into_iter().collect();
        let b: BTreeMap<String, _> = trained_b.params.named_arrays().into_iter().collect();
        for (name, arr) in &b {
            assert_eq!(Some(arr), a.get(name).as_deref(), "{name} diverged");
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let body = r#"{"version": 1, "seeds": [1], "mysterious": true}"#;
        assert!(RunConfig::from_str(body).is_err());
    }

    #[test]
    fn validation_collects_multiple_issues() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.seeds.clear();
        config.optimizer.epochs = 0;
        config.bcm.a = 2.0;
        config.bcm.b = 1.0;
        match config.validate() {
            Err(AieError::InvalidConfig { issues }) => {
                assert!(issues.len() >= 3, "{issues:?}");
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn sweep_runs_every_point_and_picks_the_best() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.optimizer.epochs = 1;
        config.sweep = Some(BTreeMap::from([(
            "am2.w".to_string(),
            vec![1e-5, 1e-4, 1e-3],
        )]));
        let summary = sweep(&config, false).unwrap();
        assert_eq!(summary.points.len(), 3);
        assert!(summary.best < 3);
        let best = &summary.points[summary.best];
        for p in &summary.points {
            assert!(
                best.valid_auc.unwrap_or(0.0) >= p.valid_auc.unwrap_or(0.0),
                "best point must maximize validation AUC"
            );
        }
    }

    #[test]
    fn compare_reports_relative_improvement() {
        let mk = |auc: f64, rev: f64| RunResult {
            config_hash: "x".to_string(),
            seeds: vec![1],
            per_seed: vec![],
            aggregate: BTreeMap::from([
                ("auc".to_string(), MeanStd { mean: auc, std: 0.0, n: 1 }),
                ("rev".to_string(), MeanStd { mean: rev, std: 0.0, n: 1 }),
            ]),
        };
        let report = compare(&mk(0.7792, 28.428), &mk(0.7755, 26.489)).unwrap();
        let auc_ri = report.relaimpr("auc").unwrap();
        let rev_ri = report.relaimpr("rev").unwrap();
        assert!((auc_ri - 1.34).abs() < 0.005);
        assert!((rev_ri - 7.32).abs() < 0.005);
        let same = compare(&mk(0.7, 10.0), &mk(0.7, 10.0)).unwrap();
        assert_eq!(same.relaimpr("auc"), Some(0.0));
        assert_eq!(same.relaimpr("rev"), Some(0.0));
    }
}
