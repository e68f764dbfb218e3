//! Hyper-parameter search, end-to-end experiments, model persistence and
//! report output.
//!
//! An experiment splits the series chronologically, builds one feature set
//! per feature candidate, tunes the learner on the validation rows, refits
//! and scores every model (including the persistence and linear baselines)
//! on the test rows exactly once.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::edrvfl::{self, EdRvflConfig, EdRvflError, EdRvflModel, EnsembleRule, LayerSpec};
use crate::ewt::{self, EwtError};
use crate::metrics::{self, EvalSeries, MetricSet, MetricsError, NemenyiResult, WilcoxonResult};
use crate::rvfl::{self, Activation, RvflConfig, RvflError, RvflModel, SolverBranch};
use crate::series::{self, ColumnSelector, ScalerKind, SeriesError, SplitSpec, TimeSeries, WindowedDataset};
use crate::walkforward::{self, BoundaryMode, WalkForwardConfig, WalkForwardError, WindowPolicy};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Relative validation-RMSE gain a new layer must deliver to be kept.
pub const LAYER_MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    WalkForward(#[from] WalkForwardError),
    #[error(transparent)]
    Ewt(#[from] EwtError),
    #[error(transparent)]
    Rvfl(#[from] RvflError),
    #[error(transparent)]
    EdRvfl(#[from] EdRvflError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed json: {0}")]
    Json(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("every candidate failed ({failures} failures); first: {first}")]
    NoViableCandidate { failures: usize, first: String },
}

impl HarnessError {
    /// True for problems with the experiment definition rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Candidate values for every tunable. Unlisted fields take a single default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub hidden_nodes: Vec<usize>,
    pub c: Vec<f64>,
    pub activation: Vec<Activation>,
    pub input_scale: Vec<f64>,
    pub lags: Vec<usize>,
    pub bands: Vec<usize>,
    pub gamma: Vec<f64>,
    pub direct_link: Vec<bool>,
    pub output_bias: Vec<bool>,
    pub boundary_mode: Vec<BoundaryMode>,
    /// Every candidate is the average of one model per seed.
    pub seeds: Vec<u64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            hidden_nodes: vec![32],
            c: vec![1.0],
            activation: vec![Activation::Sigmoid],
            input_scale: vec![1.0],
            lags: vec![8],
            bands: vec![3],
            gamma: vec![ewt::DEFAULT_GAMMA],
            direct_link: vec![true],
            output_bias: vec![false],
            boundary_mode: vec![BoundaryMode::AdaptivePerStep],
            seeds: vec![0],
        }
    }
}

impl GridSpace {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let lists = [
            ("hidden_nodes", self.hidden_nodes.len()),
            ("c", self.c.len()),
            ("activation", self.activation.len()),
            ("input_scale", self.input_scale.len()),
            ("lags", self.lags.len()),
            ("bands", self.bands.len()),
            ("gamma", self.gamma.len()),
            ("direct_link", self.direct_link.len()),
            ("output_bias", self.output_bias.len()),
            ("boundary_mode", self.boundary_mode.len()),
            ("seeds", self.seeds.len()),
        ];
        for (name, len) in lists {
            if len == 0 {
                return Err(HarnessError::Config(format!("grid list `{name}` is empty")));
            }
        }
        Ok(())
    }

    /// Learner combinations evaluated per feature set.
    pub fn learner_size(&self) -> usize {
        self.hidden_nodes.len()
            * self.c.len()
            * self.activation.len()
            * self.input_scale.len()
            * self.direct_link.len()
            * self.output_bias.len()
    }

    /// Feature sets for `pipeline`; band parameters only count for EWT.
    pub fn feature_size(&self, pipeline: FeaturePipeline) -> usize {
        match pipeline {
            FeaturePipeline::RawLags => self.lags.len(),
            FeaturePipeline::WalkforwardEwt => {
                self.lags.len() * self.bands.len() * self.gamma.len() * self.boundary_mode.len()
            }
            // one whole-series decomposition has no boundary mode
            FeaturePipeline::LeakyEwt => self.lags.len() * self.bands.len() * self.gamma.len(),
        }
    }

    pub fn learner_candidates(&self) -> Vec<LearnerCandidate> {
        let mut out = Vec::with_capacity(self.learner_size());
        for &hidden_nodes in &self.hidden_nodes {
            for &c in &self.c {
                for &activation in &self.activation {
                    for &input_scale in &self.input_scale {
                        for &direct_link in &self.direct_link {
                            for &output_bias in &self.output_bias {
                                out.push(LearnerCandidate {
                                    hidden_nodes,
                                    c,
                                    activation,
                                    input_scale,
                                    direct_link,
                                    output_bias,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn feature_candidates(
        &self,
        pipeline: FeaturePipeline,
        window: impl Fn(usize) -> WindowPolicy,
    ) -> Vec<FeatureCandidate> {
        let mut out = Vec::new();
        for &lags in &self.lags {
            if pipeline == FeaturePipeline::RawLags {
                out.push(FeatureCandidate::raw(lags));
                continue;
            }
            let modes: &[BoundaryMode] = if pipeline == FeaturePipeline::LeakyEwt {
                &[BoundaryMode::AdaptivePerStep]
            } else {
                &self.boundary_mode
            };
            for &bands in &self.bands {
                for &gamma in &self.gamma {
                    for &boundary_mode in modes {
                        out.push(FeatureCandidate {
                            pipeline,
                            lags,
                            ewt: Some(EwtParams {
                                bands,
                                gamma,
                                boundary_mode,
                                window: window(lags),
                            }),
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Rvfl,
    Edrvfl,
    BaselinePersistence,
    BaselineLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePipeline {
    RawLags,
    WalkforwardEwt,
    LeakyEwt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Mae,
    Mse,
    Rmse,
    Mape,
    Mase,
    Dstat,
}

impl MetricName {
    pub const ALL: [MetricName; 6] = [
        MetricName::Mae,
        MetricName::Mse,
        MetricName::Rmse,
        MetricName::Mape,
        MetricName::Mase,
        MetricName::Dstat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Mae => "mae",
            MetricName::Mse => "mse",
            MetricName::Rmse => "rmse",
            MetricName::Mape => "mape",
            MetricName::Mase => "mase",
            MetricName::Dstat => "dstat",
        }
    }

    /// Value as reported: MAPE in percent, everything else unchanged.
    pub fn reported(self, m: &MetricSet) -> Option<f64> {
        match self {
            MetricName::Mae => Some(m.mae),
            MetricName::Mse => Some(m.mse),
            MetricName::Rmse => Some(m.rmse),
            MetricName::Mape => m.mape.map(|v| v * 100.0),
            MetricName::Mase => m.mase,
            MetricName::Dstat => m.dstat,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        column: ColumnSelector,
        #[serde(default = "default_true")]
        has_header: bool,
    },
    Inline {
        name: String,
        values: Vec<f64>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<TimeSeries, HarnessError> {
        match self {
            DataSource::Csv {
                path,
                column,
                has_header,
            } => Ok(series::load_csv(path, column, *has_header)?),
            DataSource::Inline { name, values } => Ok(TimeSeries::new(name.clone(), values.clone())?),
        }
    }
}

fn default_horizon() -> usize {
    1
}

fn default_max_layers() -> usize {
    3
}

fn default_metrics() -> Vec<MetricName> {
    MetricName::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    pub family: ModelFamily,
    pub pipeline: FeaturePipeline,
    #[serde(default)]
    pub grid: GridSpace,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Feature scaler, fitted on the rows each model is trained on.
    #[serde(default)]
    pub scaler: ScalerKind,
    /// Decomposition window; `None` means `default_window(lags, train_end)`.
    #[serde(default)]
    pub window: Option<WindowPolicy>,
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    #[serde(default)]
    pub ensemble_rule: EnsembleRule,
    #[serde(default)]
    pub layer_zscore: bool,
    /// Refit the chosen config on train + validation before testing.
    #[serde(default = "default_true")]
    pub refit: bool,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricName>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |m: String| Err(HarnessError::Config(m));
        self.split.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.grid.validate()?;
        if self.horizon == 0 {
            return cfg_err("horizon must be at least 1".into());
        }
        if self.max_layers == 0 {
            return cfg_err("max_layers must be at least 1".into());
        }
        if self.metrics.is_empty() {
            return cfg_err("metric selection is empty".into());
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return cfg_err(format!("data file {} does not exist", path.display()));
            }
        }
        if let Some(WindowPolicy::Fixed(0)) = self.window {
            return cfg_err("window must be positive".into());
        }
        Ok(())
    }

    /// Make relative data and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        if let DataSource::Csv { path, .. } = &mut self.data {
            fix(path);
        }
        if let Some(dir) = &mut self.output_dir {
            fix(dir);
        }
    }

    /// Candidate count of the primary model's search, known before running.
    /// For edRVFL this is the upper bound reached when no layer stops early.
    pub fn grid_size(&self) -> usize {
        let g = &self.grid;
        let features = g.feature_size(self.pipeline);
        match self.family {
            ModelFamily::Rvfl => features * g.learner_size(),
            ModelFamily::Edrvfl => {
                let outer = g.activation.len() * g.input_scale.len() * g.output_bias.len();
                features * outer * g.hidden_nodes.len() * g.c.len() * self.max_layers
            }
            ModelFamily::BaselinePersistence => 1,
            ModelFamily::BaselineLinear => g.lags.len() * g.c.len(),
        }
    }
}

/// Shallow learner hyper-parameters. Field order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerCandidate {
    pub hidden_nodes: usize,
    pub c: f64,
    pub activation: Activation,
    pub input_scale: f64,
    pub direct_link: bool,
    pub output_bias: bool,
}

impl LearnerCandidate {
    pub fn key_cmp(&self, o: &Self) -> Ordering {
        self.hidden_nodes
            .cmp(&o.hidden_nodes)
            .then(self.c.total_cmp(&o.c))
            .then(self.activation.cmp(&o.activation))
            .then(self.input_scale.total_cmp(&o.input_scale))
            .then(self.direct_link.cmp(&o.direct_link))
            .then(self.output_bias.cmp(&o.output_bias))
    }

    pub fn rvfl_config(&self, seed: u64) -> RvflConfig {
        RvflConfig {
            hidden_nodes: self.hidden_nodes,
            activation: self.activation,
            c: self.c,
            input_scale: self.input_scale,
            direct_link: self.direct_link,
            output_bias: self.output_bias,
            seed,
            solver: SolverBranch::Auto,
        }
    }
}

/// Deep learner: one `(L, C)` per layer plus shared settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdCandidate {
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub input_scale: f64,
    pub output_bias: bool,
}

impl EdCandidate {
    pub fn key_cmp(&self, o: &Self) -> Ordering {
        let layers = self
            .layers
            .iter()
            .zip(&o.layers)
            .map(|(a, b)| a.hidden_nodes.cmp(&b.hidden_nodes).then(a.c.total_cmp(&b.c)))
            .find(|ord| ord.is_ne())
            .unwrap_or_else(|| self.layers.len().cmp(&o.layers.len()));
        layers
            .then(self.activation.cmp(&o.activation))
            .then(self.input_scale.total_cmp(&o.input_scale))
            .then(self.output_bias.cmp(&o.output_bias))
    }

    pub fn edrvfl_config(&self, seed: u64, ctx: &FitContext) -> EdRvflConfig {
        EdRvflConfig {
            layers: self.layers.clone(),
            activation: self.activation,
            input_scale: self.input_scale,
            ensemble_rule: ctx.ensemble_rule,
            output_bias: self.output_bias,
            seed,
            layer_zscore: ctx.layer_zscore,
            solver: SolverBranch::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwtParams {
    pub bands: usize,
    pub gamma: f64,
    pub boundary_mode: BoundaryMode,
    pub window: WindowPolicy,
}

/// One feature set: the pipeline, its lag budget and, for EWT, band settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureCandidate {
    pub pipeline: FeaturePipeline,
    pub lags: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewt: Option<EwtParams>,
}

impl FeatureCandidate {
    pub fn raw(lags: usize) -> Self {
        Self {
            pipeline: FeaturePipeline::RawLags,
            lags,
            ewt: None,
        }
    }

    pub fn key_cmp(&self, o: &Self) -> Ordering {
        let ewt = match (&self.ewt, &o.ewt) {
            (Some(a), Some(b)) => a
                .bands
                .cmp(&b.bands)
                .then(a.gamma.total_cmp(&b.gamma))
                .then(a.boundary_mode.cmp(&b.boundary_mode)),
            (a, b) => a.is_some().cmp(&b.is_some()),
        };
        self.pipeline.cmp(&o.pipeline).then(self.lags.cmp(&o.lags)).then(ewt)
    }

    fn walkforward_config(&self, horizon: usize) -> Option<WalkForwardConfig> {
        self.ewt.map(|p| WalkForwardConfig {
            gamma: p.gamma,
            boundary_mode: p.boundary_mode,
            ..WalkForwardConfig::new(p.bands, self.lags, horizon, p.window)
        })
    }
}

/// Settings shared by every fit in a search.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitContext {
    pub scaler: ScalerKind,
    /// Global seed; combined with each grid seed.
    pub seed: u64,
    pub ensemble_rule: EnsembleRule,
    pub layer_zscore: bool,
}

/// Model seed for grid seed `s` under global seed `global` (SplitMix64 mix).
pub fn derive_seed(global: u64, s: u64) -> u64 {
    let mut z = global.wrapping_add(s.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fitted forecaster, as persisted by [`save_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ForecastModel {
    /// Repeats feature column `column` (the observation at the origin).
    Persistence {
        column: usize,
    },
    /// Mean of the member models' forecasts.
    Rvfl {
        members: Vec<RvflModel>,
    },
    Edrvfl {
        members: Vec<EdRvflModel>,
    },
}

impl ForecastModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, HarnessError> {
        let outputs: Vec<DMatrix<f64>> = match self {
            ForecastModel::Persistence { column } => {
                if *column >= x.ncols() {
                    return Err(RvflError::DimensionMismatch {
                        expected: column + 1,
                        got: x.ncols(),
                    }
                    .into());
                }
                return Ok(x.column(*column).iter().copied().collect());
            }
            ForecastModel::Rvfl { members } => members.iter().map(|m| m.predict(x)).collect::<Result<_, _>>()?,
            ForecastModel::Edrvfl { members } => members.iter().map(|m| m.predict(x)).collect::<Result<_, _>>()?,
        };
        let k = outputs.len() as f64;
        Ok((0..x.nrows())
            .map(|i| outputs.iter().map(|o| o[(i, 0)]).sum::<f64>() / k)
            .collect())
    }
}

fn fit_shallow(
    data: &WindowedDataset,
    cand: &LearnerCandidate,
    seeds: &[u64],
    ctx: &FitContext,
) -> Result<ForecastModel, HarnessError> {
    let members = seeds
        .iter()
        .map(|&s| {
            rvfl::fit_scaled(
                &data.x,
                &data.y,
                &cand.rvfl_config(derive_seed(ctx.seed, s)),
                ctx.scaler,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(ForecastModel::Rvfl { members })
}

fn fit_deep(
    data: &WindowedDataset,
    cand: &EdCandidate,
    seeds: &[u64],
    ctx: &FitContext,
) -> Result<ForecastModel, HarnessError> {
    let members = seeds
        .iter()
        .map(|&s| {
            edrvfl::fit_edrvfl_scaled(
                &data.x,
                &data.y,
                &cand.edrvfl_config(derive_seed(ctx.seed, s), ctx),
                ctx.scaler,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(ForecastModel::Edrvfl { members })
}

fn validation_rmse(model: &ForecastModel, val: &WindowedDataset) -> Result<f64, HarnessError> {
    let pred = model.predict(&val.x)?;
    let r = metrics::rmse(&val.targets(), &pred);
    if !r.is_finite() {
        return Err(MetricsError::NonFinite("validation forecasts").into());
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFailure {
    /// JSON rendering of the failed candidate.
    pub candidate: String,
    pub error: String,
}

impl CandidateFailure {
    fn new(candidate: &impl Serialize, error: impl std::fmt::Display) -> Self {
        Self {
            candidate: serde_json::to_string(candidate).unwrap_or_default(),
            error: error.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub candidate: LearnerCandidate,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: LearnerCandidate,
    pub best_rmse: f64,
    /// Successful candidates in grid order.
    pub leaderboard: Vec<LeaderboardEntry>,
    pub failures: Vec<CandidateFailure>,
    pub grid_size: usize,
}

fn pick_best<T: Clone>(entries: &[(T, f64)], key: impl Fn(&T, &T) -> Ordering) -> Option<(T, f64)> {
    entries
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| key(&a.0, &b.0)))
        .cloned()
}

fn no_viable(failures: &[CandidateFailure]) -> HarnessError {
    HarnessError::NoViableCandidate {
        failures: failures.len(),
        first: failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_else(|| "empty grid".into()),
    }
}

/// Exhaustive search over the learner lists of `space` (feature lists are
/// ignored here; see [`run_experiment`]). Lowest validation RMSE wins, ties go
/// to the lexicographically smallest candidate.
pub fn grid_search(
    space: &GridSpace,
    train: &WindowedDataset,
    val: &WindowedDataset,
    ctx: &FitContext,
) -> Result<SearchResult, HarnessError> {
    space.validate()?;
    let candidates = space.learner_candidates();
    let results: Vec<Result<f64, HarnessError>> = candidates
        .par_iter()
        .map(|c| validation_rmse(&fit_shallow(train, c, &space.seeds, ctx)?, val))
        .collect();
    let mut leaderboard = Vec::new();
    let mut failures = Vec::new();
    for (cand, res) in candidates.iter().zip(results) {
        match res {
            Ok(val_rmse) => leaderboard.push(LeaderboardEntry {
                candidate: *cand,
                val_rmse,
            }),
            Err(e) => failures.push(CandidateFailure::new(cand, e)),
        }
    }
    let scored: Vec<_> = leaderboard.iter().map(|e| (e.candidate, e.val_rmse)).collect();
    let (best, best_rmse) = pick_best(&scored, LearnerCandidate::key_cmp).ok_or_else(|| no_viable(&failures))?;
    Ok(SearchResult {
        best,
        best_rmse,
        leaderboard,
        failures,
        grid_size: candidates.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseEntry {
    pub candidate: EdCandidate,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseResult {
    pub best: EdCandidate,
    pub val_rmse: f64,
    /// Validation RMSE after each accepted layer of `best`.
    pub history: Vec<f64>,
    /// A further layer was tried for `best` and rejected.
    pub stopped_early: bool,
    pub leaderboard: Vec<LayerwiseEntry>,
    pub failures: Vec<CandidateFailure>,
    pub evaluations: usize,
}

struct LayerwiseRun {
    candidate: EdCandidate,
    history: Vec<f64>,
    stopped_early: bool,
}

/// Greedy layer-by-layer search. For every combination of the shared
/// settings (activation, input scale, output bias), layer `l` gets the
/// `(hidden_nodes, c)` pair that minimizes validation RMSE of the `l`-layer
/// ensemble; growth stops once a layer gains less than
/// [`LAYER_MIN_IMPROVEMENT`] relative. `direct_link` is ignored: every deep
/// layer is direct-linked.
pub fn layerwise_grid_search(
    space: &GridSpace,
    train: &WindowedDataset,
    val: &WindowedDataset,
    max_layers: usize,
    ctx: &FitContext,
) -> Result<LayerwiseResult, HarnessError> {
    space.validate()?;
    if max_layers == 0 {
        return Err(HarnessError::Config("max_layers must be at least 1".into()));
    }
    let mut per_layer = Vec::new();
    for &hidden_nodes in &space.hidden_nodes {
        for &c in &space.c {
            per_layer.push(LayerSpec { hidden_nodes, c });
        }
    }
    let mut leaderboard = Vec::new();
    let mut failures = Vec::new();
    let mut runs: Vec<LayerwiseRun> = Vec::new();
    for &activation in &space.activation {
        for &input_scale in &space.input_scale {
            for &output_bias in &space.output_bias {
                let mut run = LayerwiseRun {
                    candidate: EdCandidate {
                        layers: Vec::new(),
                        activation,
                        input_scale,
                        output_bias,
                    },
                    history: Vec::new(),
                    stopped_early: false,
                };
                for _ in 0..max_layers {
                    let trials: Vec<EdCandidate> = per_layer
                        .iter()
                        .map(|spec| {
                            let mut c = run.candidate.clone();
                            c.layers.push(*spec);
                            c
                        })
                        .collect();
                    let results: Vec<Result<f64, HarnessError>> = trials
                        .par_iter()
                        .map(|c| validation_rmse(&fit_deep(train, c, &space.seeds, ctx)?, val))
                        .collect();
                    let mut scored = Vec::new();
                    for (cand, res) in trials.into_iter().zip(results) {
                        match res {
                            Ok(val_rmse) => {
                                leaderboard.push(LayerwiseEntry {
                                    candidate: cand.clone(),
                                    val_rmse,
                                });
                                scored.push((cand, val_rmse));
                            }
                            Err(e) => failures.push(CandidateFailure::new(&cand, e)),
                        }
                    }
                    let Some((cand, r)) = pick_best(&scored, EdCandidate::key_cmp) else {
                        break;
                    };
                    if let Some(&prev) = run.history.last() {
                        if r >= prev - LAYER_MIN_IMPROVEMENT * prev.abs() {
                            run.stopped_early = true;
                            break;
                        }
                    }
                    run.candidate = cand;
                    run.history.push(r);
                }
                if !run.history.is_empty() {
                    runs.push(run);
                }
            }
        }
    }
    let evaluations = leaderboard.len() + failures.len();
    let best = runs
        .into_iter()
        .min_by(|a, b| {
            let (ra, rb) = (a.history.last().unwrap(), b.history.last().unwrap());
            ra.total_cmp(rb).then_with(|| a.candidate.key_cmp(&b.candidate))
        })
        .ok_or_else(|| no_viable(&failures))?;
    Ok(LayerwiseResult {
        val_rmse: *best.history.last().unwrap(),
        best: best.candidate,
        history: best.history,
        stopped_early: best.stopped_early,
        leaderboard,
        failures,
        evaluations,
    })
}

/// Observer for test-segment access; lets tests assert the test rows are
/// read once, after tuning.
pub trait AccessProbe: Sync {
    fn tuning_complete(&self) {}
    fn test_access(&self) {}
}

pub struct NoProbe;

impl AccessProbe for NoProbe {}

/// Test rows, only reachable by consuming [`Sealed::open`].
#[derive(Debug, Clone)]
struct Sealed<T>(T);

impl<T> Sealed<T> {
    fn open(self, probe: &dyn AccessProbe) -> T {
        probe.test_access();
        self.0
    }
}

#[derive(Debug)]
struct SplitData {
    train: WindowedDataset,
    val: WindowedDataset,
    test: Sealed<WindowedDataset>,
    fallback_count: usize,
    clip_count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segments {
    n: usize,
    train_end: usize,
    val_end: usize,
    horizon: usize,
}

/// Rows are assigned by the index of their target.
fn split_rows(ds: &WindowedDataset, seg: Segments) -> (WindowedDataset, WindowedDataset, WindowedDataset) {
    let h = seg.horizon;
    (
        ds.filter_origins(|o| o + h < seg.train_end),
        ds.filter_origins(|o| o + h >= seg.train_end && o + h < seg.val_end),
        ds.filter_origins(|o| o + h >= seg.val_end),
    )
}

fn build_split(ts: &TimeSeries, feature: &FeatureCandidate, seg: Segments) -> Result<SplitData, HarnessError> {
    let h = seg.horizon;
    let (ds, fallback_count, clip_count) = match feature.walkforward_config(h) {
        None => (series::embed(ts, feature.lags, h)?, 0, 0),
        Some(wf) => {
            wf.validate()?;
            let range = wf.valid_origins(ts.len())?;
            let f = if feature.pipeline == FeaturePipeline::LeakyEwt {
                walkforward::leaky_features(ts, &wf, range)?
            } else {
                walkforward::build_walkforward_features(ts, &wf, range)?
            };
            (f.dataset, f.fallback_count, f.clip_count)
        }
    };
    let (train, val, test) = split_rows(&ds, seg);
    if train.is_empty() {
        return Err(HarnessError::Config(format!(
            "feature set {} leaves no training rows",
            serde_json::to_string(feature).unwrap_or_default()
        )));
    }
    if val.len() != seg.val_end - seg.train_end || test.len() != seg.n - seg.val_end {
        return Err(HarnessError::Config(format!(
            "feature set {} does not cover every validation and test target",
            serde_json::to_string(feature).unwrap_or_default()
        )));
    }
    Ok(SplitData {
        train,
        val,
        test: Sealed(test),
        fallback_count,
        clip_count,
    })
}

/// Feature sets built so far, in first-use order.
struct FeatureCache<'a> {
    ts: &'a TimeSeries,
    seg: Segments,
    built: Vec<(FeatureCandidate, Arc<SplitData>)>,
}

impl<'a> FeatureCache<'a> {
    fn get(&mut self, f: &FeatureCandidate) -> Result<Arc<SplitData>, HarnessError> {
        if let Some((_, d)) = self.built.iter().find(|(k, _)| k == f) {
            return Ok(d.clone());
        }
        let d = Arc::new(build_split(self.ts, f, self.seg)?);
        self.built.push((*f, d.clone()));
        Ok(d)
    }
}

/// Learner part of a tuning entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Persistence,
    Shallow(LearnerCandidate),
    Deep(EdCandidate),
}

impl LearnerSpec {
    fn key_cmp(&self, o: &Self) -> Ordering {
        match (self, o) {
            (LearnerSpec::Shallow(a), LearnerSpec::Shallow(b)) => a.key_cmp(b),
            (LearnerSpec::Deep(a), LearnerSpec::Deep(b)) => a.key_cmp(b),
            _ => Ordering::Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    pub model: String,
    pub feature: FeatureCandidate,
    pub learner: LearnerSpec,
    pub val_rmse: f64,
}

/// Final choice for one model, with the per-layer search trace for edRVFL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub feature: FeatureCandidate,
    pub learner: LearnerSpec,
    pub val_rmse: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_history: Vec<f64>,
    #[serde(default)]
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub origin: usize,
    pub target_index: usize,
    pub actual: f64,
    pub forecast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub choice: ModelChoice,
    pub validation: MetricSet,
    pub test: MetricSet,
    pub forecasts: Vec<ForecastPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Excluded from [`ExperimentReport::same_result`].
    pub wall_time_ms: u64,
    pub grid_size: usize,
    pub evaluated: usize,
    pub failed: usize,
    /// Rows of the primary feature set whose slice fell back to uniform bands.
    pub fallback_count: usize,
    pub clip_count: usize,
    /// Model seeds actually used, one per grid seed.
    pub model_seeds: Vec<u64>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    /// Effective config; rerunning it reproduces this report.
    pub config: ExperimentConfig,
    pub series: String,
    pub observations: usize,
    pub train_end: usize,
    pub val_end: usize,
    pub primary: String,
    pub models: Vec<ModelResult>,
    pub leaderboard: Vec<TuningEntry>,
    pub failures: Vec<CandidateFailure>,
    pub metadata: RunMetadata,
}

impl ExperimentReport {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn primary_result(&self) -> &ModelResult {
        self.model(&self.primary).expect("primary model is always reported")
    }

    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &ExperimentReport) -> bool {
        let strip = |r: &ExperimentReport| {
            let mut r = r.clone();
            r.metadata.wall_time_ms = 0;
            r
        };
        strip(self) == strip(other)
    }
}

pub const PERSISTENCE: &str = "persistence";
pub const LINEAR: &str = "linear";

fn family_name(f: ModelFamily) -> &'static str {
    match f {
        ModelFamily::Rvfl => "rvfl",
        ModelFamily::Edrvfl => "edrvfl",
        ModelFamily::BaselinePersistence => PERSISTENCE,
        ModelFamily::BaselineLinear => LINEAR,
    }
}

/// A tuned model waiting for its test rows.
struct Tuned {
    name: String,
    choice: ModelChoice,
    split: Arc<SplitData>,
    val_forecasts: Vec<f64>,
    final_model: ForecastModel,
}

struct Tuner<'a> {
    cfg: &'a ExperimentConfig,
    ctx: FitContext,
    cache: FeatureCache<'a>,
    leaderboard: Vec<TuningEntry>,
    failures: Vec<CandidateFailure>,
}

impl Tuner<'_> {
    fn shallow(
        &mut self,
        name: &str,
        features: &[FeatureCandidate],
        space: &GridSpace,
    ) -> Result<(ModelChoice, Arc<SplitData>), HarnessError> {
        let mut best: Option<(ModelChoice, Arc<SplitData>)> = None;
        for f in features {
            let split = match self.cache.get(f) {
                Ok(s) => s,
                Err(e) => {
                    self.failures.push(CandidateFailure::new(f, &e));
                    continue;
                }
            };
            let res = match grid_search(space, &split.train, &split.val, &self.ctx) {
                Ok(r) => r,
                Err(HarnessError::NoViableCandidate { .. }) => {
                    self.failures.extend(learner_failures(f, space, &split, &self.ctx));
                    continue;
                }
                Err(e) => return Err(e),
            };
            for fail in &res.failures {
                self.failures.push(CandidateFailure {
                    candidate: format!(
                        "{{\"feature\":{},\"learner\":{}}}",
                        serde_json::to_string(f).unwrap_or_default(),
                        fail.candidate
                    ),
                    error: fail.error.clone(),
                });
            }
            self.leaderboard.extend(res.leaderboard.iter().map(|e| TuningEntry {
                model: name.into(),
                feature: *f,
                learner: LearnerSpec::Shallow(e.candidate),
                val_rmse: e.val_rmse,
            }));
            let choice = ModelChoice {
                feature: *f,
                learner: LearnerSpec::Shallow(res.best),
                val_rmse: res.best_rmse,
                layer_history: Vec::new(),
                stopped_early: false,
            };
            if better(&choice, best.as_ref().map(|b| &b.0)) {
                best = Some((choice, split));
            }
        }
        best.ok_or_else(|| no_viable(&self.failures))
    }

    fn deep(
        &mut self,
        name: &str,
        features: &[FeatureCandidate],
    ) -> Result<(ModelChoice, Arc<SplitData>), HarnessError> {
        let mut best: Option<(ModelChoice, Arc<SplitData>)> = None;
        for f in features {
            let split = match self.cache.get(f) {
                Ok(s) => s,
                Err(e) => {
                    self.failures.push(CandidateFailure::new(f, &e));
                    continue;
                }
            };
            let res =
                match layerwise_grid_search(&self.cfg.grid, &split.train, &split.val, self.cfg.max_layers, &self.ctx) {
                    Ok(r) => r,
                    Err(HarnessError::NoViableCandidate { first, .. }) => {
                        self.failures.push(CandidateFailure::new(f, first));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
            self.failures.extend(res.failures.iter().cloned());
            self.leaderboard.extend(res.leaderboard.iter().map(|e| TuningEntry {
                model: name.into(),
                feature: *f,
                learner: LearnerSpec::Deep(e.candidate.clone()),
                val_rmse: e.val_rmse,
            }));
            let choice = ModelChoice {
                feature: *f,
                learner: LearnerSpec::Deep(res.best),
                val_rmse: res.val_rmse,
                layer_history: res.history,
                stopped_early: res.stopped_early,
            };
            if better(&choice, best.as_ref().map(|b| &b.0)) {
                best = Some((choice, split));
            }
        }
        best.ok_or_else(|| no_viable(&self.failures))
    }

    fn finish(&self, name: &str, choice: ModelChoice, split: Arc<SplitData>) -> Result<Tuned, HarnessError> {
        let seeds = &self.cfg.grid.seeds;
        let fit = |data: &WindowedDataset| -> Result<ForecastModel, HarnessError> {
            match &choice.learner {
                LearnerSpec::Persistence => Ok(ForecastModel::Persistence {
                    column: choice.feature.lags - 1,
                }),
                LearnerSpec::Shallow(c) => fit_shallow(data, c, if name == LINEAR { &[0] } else { seeds }, &self.ctx),
                LearnerSpec::Deep(c) => fit_deep(data, c, seeds, &self.ctx),
            }
        };
        let tuned_model = fit(&split.train)?;
        let val_forecasts = tuned_model.predict(&split.val.x)?;
        let final_model = if self.cfg.refit {
            fit(&split.train.concat(&split.val))?
        } else {
            tuned_model
        };
        Ok(Tuned {
            name: name.into(),
            choice,
            split,
            val_forecasts,
            final_model,
        })
    }
}

fn better(c: &ModelChoice, incumbent: Option<&ModelChoice>) -> bool {
    match incumbent {
        None => true,
        Some(b) => c
            .val_rmse
            .total_cmp(&b.val_rmse)
            .then_with(|| c.feature.key_cmp(&b.feature))
            .then_with(|| c.learner.key_cmp(&b.learner))
            .is_lt(),
    }
}

fn learner_failures(
    f: &FeatureCandidate,
    space: &GridSpace,
    split: &SplitData,
    ctx: &FitContext,
) -> Vec<CandidateFailure> {
    space
        .learner_candidates()
        .iter()
        .filter_map(|c| {
            fit_shallow(&split.train, c, &space.seeds, ctx)
                .and_then(|m| validation_rmse(&m, &split.val))
                .err()
                .map(|e| CandidateFailure::new(&(f, c), e))
        })
        .collect()
}

fn linear_space(grid: &GridSpace) -> GridSpace {
    GridSpace {
        hidden_nodes: vec![0],
        activation: vec![Activation::Sigmoid],
        input_scale: vec![1.0],
        direct_link: vec![true],
        output_bias: vec![true],
        seeds: vec![0],
        ..grid.clone()
    }
}

fn eval_series(values: &[f64], ds: &WindowedDataset, forecasts: Vec<f64>, training_end: usize) -> EvalSeries {
    let h = ds.horizon;
    EvalSeries {
        actuals: ds.targets(),
        forecasts,
        previous: ds.origins.iter().map(|&o| values[o + h - 1]).collect(),
        training: values[..training_end].to_vec(),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_experiment_with_probe(cfg, &NoProbe)
}

/// Load, split, featurize, tune, refit and test. `probe` observes the single
/// test-segment access.
pub fn run_experiment_with_probe(
    cfg: &ExperimentConfig,
    probe: &dyn AccessProbe,
) -> Result<ExperimentReport, HarnessError> {
    let started = Instant::now();
    cfg.validate()?;
    let ts = cfg.data.load()?;
    let n = ts.len();
    let (train_end, val_end) = cfg
        .split
        .boundaries(n)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let h = cfg.horizon;
    if train_end < 2 || val_end <= train_end {
        return Err(HarnessError::Config(format!(
            "split of {n} observations leaves train [0, {train_end}) and validation [{train_end}, {val_end})"
        )));
    }
    let seg = Segments {
        n,
        train_end,
        val_end,
        horizon: h,
    };
    let ctx = FitContext {
        scaler: cfg.scaler,
        seed: cfg.seed,
        ensemble_rule: cfg.ensemble_rule,
        layer_zscore: cfg.layer_zscore,
    };
    let window = |lags| {
        cfg.window
            .unwrap_or_else(|| WindowPolicy::Fixed(walkforward::default_window(lags, train_end)))
    };
    let mut tuner = Tuner {
        cfg,
        ctx,
        cache: FeatureCache {
            ts: &ts,
            seg,
            built: Vec::new(),
        },
        leaderboard: Vec::new(),
        failures: Vec::new(),
    };

    let persistence_choice = ModelChoice {
        feature: FeatureCandidate::raw(1),
        learner: LearnerSpec::Persistence,
        val_rmse: f64::NAN,
        layer_history: Vec::new(),
        stopped_early: false,
    };
    let persistence_split = tuner.cache.get(&persistence_choice.feature)?;
    let raw_features: Vec<FeatureCandidate> = cfg.grid.lags.iter().map(|&l| FeatureCandidate::raw(l)).collect();
    let (linear_choice, linear_split) = tuner.shallow(LINEAR, &raw_features, &linear_space(&cfg.grid))?;

    let primary = family_name(cfg.family);
    let features = cfg.grid.feature_candidates(cfg.pipeline, window);
    let mut tuned = Vec::new();
    match cfg.family {
        ModelFamily::Rvfl => {
            let (choice, split) = tuner.shallow(primary, &features, &cfg.grid)?;
            tuned.push(tuner.finish(primary, choice, split)?);
        }
        ModelFamily::Edrvfl => {
            let (choice, split) = tuner.deep(primary, &features)?;
            tuned.push(tuner.finish(primary, choice, split)?);
        }
        ModelFamily::BaselinePersistence | ModelFamily::BaselineLinear => {}
    }
    let mut p = tuner.finish(PERSISTENCE, persistence_choice, persistence_split)?;
    p.choice.val_rmse = metrics::rmse(&p.split.val.targets(), &p.val_forecasts);
    tuned.push(p);
    tuned.push(tuner.finish(LINEAR, linear_choice, linear_split)?);
    probe.tuning_complete();

    // the only place test rows are read
    let sealed = Sealed(tuned.iter().map(|t| t.split.test.clone().0).collect::<Vec<_>>());
    let tests = sealed.open(probe);

    let values = ts.values();
    let test_training_end = if cfg.refit { val_end } else { train_end };
    let mut models = Vec::new();
    for (t, test) in tuned.into_iter().zip(tests) {
        let validation = metrics::compute_metrics(&eval_series(values, &t.split.val, t.val_forecasts, train_end))?;
        let test_forecasts = t.final_model.predict(&test.x)?;
        let test_metrics =
            metrics::compute_metrics(&eval_series(values, &test, test_forecasts.clone(), test_training_end))?;
        let forecasts = test
            .origins
            .iter()
            .zip(test.targets())
            .zip(test_forecasts)
            .map(|((&origin, actual), forecast)| ForecastPoint {
                origin,
                target_index: origin + h,
                actual,
                forecast,
            })
            .collect();
        models.push(ModelResult {
            name: t.name,
            choice: t.choice,
            validation,
            test: test_metrics,
            forecasts,
        });
    }

    let primary_feature = models[0].choice.feature;
    let primary_split = tuner.cache.get(&primary_feature)?;
    let failed = tuner.failures.len();
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        series: ts.name.clone(),
        observations: n,
        train_end,
        val_end,
        primary: primary.into(),
        models,
        metadata: RunMetadata {
            wall_time_ms: started.elapsed().as_millis() as u64,
            grid_size: cfg.grid_size(),
            evaluated: tuner.leaderboard.len() + failed,
            failed,
            fallback_count: primary_split.fallback_count,
            clip_count: primary_split.clip_count,
            model_seeds: cfg.grid.seeds.iter().map(|&s| derive_seed(cfg.seed, s)).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        leaderboard: tuner.leaderboard,
        failures: tuner.failures,
    })
}

/// Rerun the config embedded in `report`.
pub fn rerun(report: &ExperimentReport) -> Result<ExperimentReport, HarnessError> {
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersion {
            found: report.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    run_experiment(&report.config)
}

#[derive(Deserialize)]
struct Envelope<'a> {
    schema_version: u32,
    checksum: String,
    #[serde(borrow)]
    model: &'a RawValue,
}

#[derive(Deserialize)]
struct VersionOnly {
    schema_version: u32,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Versioned, checksummed JSON: `{"schema_version", "checksum", "model"}`,
/// where the checksum is the SHA-256 of the exact `model` bytes.
pub fn save_model(model: &ForecastModel, path: &Path) -> Result<(), HarnessError> {
    let payload = serde_json::to_string(model).map_err(|e| HarnessError::Json(e.to_string()))?;
    let text = format!(
        "{{\"schema_version\":{MODEL_SCHEMA_VERSION},\"checksum\":\"{}\",\"model\":{payload}}}\n",
        sha256_hex(payload.as_bytes())
    );
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<ForecastModel, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let env: Envelope = match serde_json::from_str(&text) {
        Ok(env) => env,
        Err(e) => {
            if let Ok(v) = serde_json::from_str::<VersionOnly>(&text) {
                if v.schema_version != MODEL_SCHEMA_VERSION {
                    return Err(HarnessError::SchemaVersion {
                        found: v.schema_version,
                        expected: MODEL_SCHEMA_VERSION,
                    });
                }
            }
            return Err(HarnessError::Checksum(format!("unreadable model file: {e}")));
        }
    };
    if env.schema_version != MODEL_SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersion {
            found: env.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let actual = sha256_hex(env.model.get().as_bytes());
    if actual != env.checksum {
        return Err(HarnessError::Checksum(format!(
            "expected {}, computed {actual}",
            env.checksum
        )));
    }
    serde_json::from_str(env.model.get()).map_err(|e| HarnessError::Json(e.to_string()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| io_err(path, e)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `report.json`, `metrics.csv` (one row per model and split) and
/// `forecasts.csv` (one row per test origin and model) into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Json(e.to_string()))?;
    fs::write(&report_path, json + "\n").map_err(|e| io_err(&report_path, e))?;

    let metrics_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path).map_err(csv_err(&metrics_path))?;
    let mut header = vec!["model", "series", "horizon", "split"];
    header.extend(report.config.metrics.iter().map(|m| m.as_str()));
    w.write_record(&header).map_err(csv_err(&metrics_path))?;
    for m in &report.models {
        for (split, set) in [("validation", &m.validation), ("test", &m.test)] {
            let mut row = vec![
                m.name.clone(),
                report.series.clone(),
                report.config.horizon.to_string(),
                split.into(),
            ];
            row.extend(report.config.metrics.iter().map(|name| fmt_opt(name.reported(set))));
            w.write_record(&row).map_err(csv_err(&metrics_path))?;
        }
    }
    w.flush().map_err(|e| io_err(&metrics_path, e))?;

    let forecasts_path = dir.join("forecasts.csv");
    let mut w = csv::Writer::from_path(&forecasts_path).map_err(csv_err(&forecasts_path))?;
    w.write_record(["origin", "target_index", "model", "actual", "forecast"])
        .map_err(csv_err(&forecasts_path))?;
    for m in &report.models {
        for p in &m.forecasts {
            w.write_record([
                p.origin.to_string(),
                p.target_index.to_string(),
                m.name.clone(),
                p.actual.to_string(),
                p.forecast.to_string(),
            ])
            .map_err(csv_err(&forecasts_path))?;
        }
    }
    w.flush().map_err(|e| io_err(&forecasts_path, e))?;
    Ok(vec![report_path, metrics_path, forecasts_path])
}

pub fn read_report(path: &Path) -> Result<ExperimentReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if let Ok(v) = serde_json::from_str::<VersionOnly>(&text) {
        if v.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::SchemaVersion {
                found: v.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
    }
    serde_json::from_str(&text).map_err(|e| HarnessError::Json(format!("{}: {e}", path.display())))
}

/// Every `report.json` in `dir` or its immediate subdirectories, sorted by path.
pub fn find_reports(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    let direct = dir.join("report.json");
    if direct.is_file() {
        found.push(direct);
    }
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path().join("report.json");
        if p.is_file() {
            found.push(p);
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub dataset: String,
    pub model_a: String,
    pub model_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<WilcoxonResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub datasets: Vec<String>,
    /// Models present in every report, sorted by name.
    pub models: Vec<String>,
    /// `test_rmse[m][d]`.
    pub test_rmse: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nemenyi: Option<NemenyiResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nemenyi_note: Option<String>,
    /// Primary model against every other model, per report, on absolute
    /// test errors.
    pub wilcoxon: Vec<PairwiseTest>,
}

/// Friedman/Nemenyi over test RMSE across reports (alpha 0.05) and
/// per-report Wilcoxon tests of the primary model against the others.
pub fn compare_reports(reports: &[ExperimentReport]) -> Result<ComparisonSummary, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::Config("no reports to compare".into()));
    }
    let datasets: Vec<String> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}#{}@h{}", r.series, i + 1, r.config.horizon))
        .collect();
    let mut models: Vec<String> = reports[0]
        .models
        .iter()
        .map(|m| m.name.clone())
        .filter(|name| reports.iter().all(|r| r.model(name).is_some()))
        .collect();
    models.sort();
    models.dedup();
    let test_rmse: Vec<Vec<f64>> = models
        .iter()
        .map(|name| reports.iter().map(|r| r.model(name).unwrap().test.rmse).collect())
        .collect();
    let (nemenyi, nemenyi_note) = match metrics::friedman_nemenyi(&test_rmse, 0.05) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let abs_errors =
        |m: &ModelResult| -> Vec<f64> { m.forecasts.iter().map(|p| (p.forecast - p.actual).abs()).collect() };
    let mut wilcoxon = Vec::new();
    for (r, dataset) in reports.iter().zip(&datasets) {
        let a = r.primary_result();
        for b in r.models.iter().filter(|m| m.name != a.name) {
            let (result, note) = match metrics::wilcoxon_signed_rank(&abs_errors(a), &abs_errors(b)) {
                Ok(w) => (Some(w), None),
                Err(e) => (None, Some(e.to_string())),
            };
            wilcoxon.push(PairwiseTest {
                dataset: dataset.clone(),
                model_a: a.name.clone(),
                model_b: b.name.clone(),
                result,
                note,
            });
        }
    }
    Ok(ComparisonSummary {
        datasets,
        models,
        test_rmse,
        nemenyi,
        nemenyi_note,
        wilcoxon,
    })
}

/// CSV of a one-shot decomposition: `t`, `value`, then one column per band.
pub fn write_decomposition_csv<W: Write>(signal: &[f64], components: &[Vec<f64>], out: W) -> Result<(), HarnessError> {
    let path = Path::new("<decomposition>");
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "value".to_string()];
    header.extend((1..=components.len()).map(|k| format!("band_{k}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (t, v) in signal.iter().enumerate() {
        let mut row = vec![t.to_string(), v.to_string()];
        row.extend(components.iter().map(|c| c[t].to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
    use std::sync::Mutex;

    fn linear_dataset(rows: std::ops::Range<usize>) -> WindowedDataset {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 1, |i, _| (rows.start + i) as f64 * 0.1);
        let y = x.map(|v| 2.0 * v);
        WindowedDataset {
            x,
            y,
            lags: 1,
            horizon: 1,
            origins: rows.collect(),
        }
    }

    fn random_walk(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = 0.0;
        (0..n)
            .map(|_| {
                v += rng.gen_range(-1.0..1.0);
                v
            })
            .collect()
    }

    fn inline_config(values: Vec<f64>, family: ModelFamily, pipeline: FeaturePipeline) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Inline {
                name: "walk".into(),
                values,
            },
            split: SplitSpec::new(0.6, 0.2).unwrap(),
            family,
            pipeline,
            grid: GridSpace {
                hidden_nodes: vec![4, 8],
                c: vec![1.0, 100.0],
                lags: vec![4],
                bands: vec![2],
                ..GridSpace::default()
            },
            horizon: 1,
            scaler: ScalerKind::Zscore,
            window: Some(WindowPolicy::Fixed(48)),
            max_layers: 2,
            ensemble_rule: EnsembleRule::Median,
            layer_zscore: false,
            refit: true,
            metrics: MetricName::ALL.to_vec(),
            output_dir: None,
            seed: 7,
        }
    }

    #[test]
    fn singleton_space_returns_its_candidate() {
        let space = GridSpace {
            hidden_nodes: vec![3],
            ..GridSpace::default()
        };
        let r = grid_search(
            &space,
            &linear_dataset(0..30),
            &linear_dataset(30..40),
            &FitContext::default(),
        )
        .unwrap();
        assert_eq!(r.best, space.learner_candidates()[0]);
        assert_eq!(r.grid_size, 1);
        assert_eq!(r.leaderboard.len(), 1);
    }

    #[test]
    fn interpolating_candidate_wins() {
        // a direct-linked model can represent y = 2x exactly; a hidden-only one cannot
        let space = GridSpace {
            hidden_nodes: vec![2],
            c: vec![1e8],
            direct_link: vec![false, true],
            ..GridSpace::default()
        };
        let r = grid_search(
            &space,
            &linear_dataset(0..30),
            &linear_dataset(30..40),
            &FitContext::default(),
        )
        .unwrap();
        assert!(r.best.direct_link);
        assert!(r.best_rmse < 1e-5, "{}", r.best_rmse);
        let other = r.leaderboard.iter().find(|e| !e.candidate.direct_link).unwrap();
        assert!(other.val_rmse > 10.0 * r.best_rmse);
    }

    #[test]
    fn failures_are_recorded_not_dropped() {
        let space = GridSpace {
            c: vec![-1.0, 1.0, 0.0],
            ..GridSpace::default()
        };
        let r = grid_search(
            &space,
            &linear_dataset(0..30),
            &linear_dataset(30..40),
            &FitContext::default(),
        )
        .unwrap();
        assert_eq!(r.grid_size, 3);
        assert_eq!(r.failures.len(), 2);
        assert_eq!(r.leaderboard.len(), r.grid_size - r.failures.len());
        assert!(r.failures[0].candidate.contains("-1"));

        let all_bad = GridSpace {
            c: vec![-1.0],
            ..GridSpace::default()
        };
        let e = grid_search(
            &all_bad,
            &linear_dataset(0..30),
            &linear_dataset(30..40),
            &FitContext::default(),
        )
        .unwrap_err();
        assert!(matches!(e, HarnessError::NoViableCandidate { failures: 1, .. }));
    }

    #[test]
    fn tie_break_ignores_list_order() {
        // zero hidden nodes: activation and scale cannot matter, so all tie
        let mk = |activation: Vec<Activation>, input_scale: Vec<f64>| GridSpace {
            hidden_nodes: vec![0],
            activation,
            input_scale,
            ..GridSpace::default()
        };
        let a = mk(
            vec![Activation::Tanh, Activation::Sigmoid, Activation::Relu],
            vec![2.0, 0.5],
        );
        let b = mk(
            vec![Activation::Relu, Activation::Tanh, Activation::Sigmoid],
            vec![0.5, 2.0],
        );
        let (tr, va) = (linear_dataset(0..30), linear_dataset(30..40));
        let ra = grid_search(&a, &tr, &va, &FitContext::default()).unwrap();
        let rb = grid_search(&b, &tr, &va, &FitContext::default()).unwrap();
        assert_eq!(ra.best, rb.best);
        let smallest = a.learner_candidates().into_iter().min_by(|x, y| x.key_cmp(y)).unwrap();
        assert_eq!(ra.best, smallest);
    }

    #[test]
    fn layerwise_single_layer_matches_shallow_search() {
        let space = GridSpace {
            hidden_nodes: vec![3, 6],
            c: vec![0.5, 20.0],
            activation: vec![Activation::Sigmoid, Activation::Sine],
            ..GridSpace::default()
        };
        let v = random_walk(80, 3);
        let tr = WindowedDataset {
            x: DMatrix::from_fn(50, 2, |i, j| v[i + j]),
            y: DMatrix::from_fn(50, 1, |i, _| v[i + 2]),
            lags: 2,
            horizon: 1,
            origins: (1..51).collect(),
        };
        let va = WindowedDataset {
            x: DMatrix::from_fn(20, 2, |i, j| v[50 + i + j]),
            y: DMatrix::from_fn(20, 1, |i, _| v[52 + i]),
            lags: 2,
            horizon: 1,
            origins: (51..71).collect(),
        };
        let ctx = FitContext::default();
        let shallow = grid_search(&space, &tr, &va, &ctx).unwrap();
        let deep = layerwise_grid_search(&space, &tr, &va, 1, &ctx).unwrap();
        assert_eq!(deep.val_rmse, shallow.best_rmse);
        assert_eq!(
            deep.best.layers,
            vec![LayerSpec {
                hidden_nodes: shallow.best.hidden_nodes,
                c: shallow.best.c
            }]
        );
        assert_eq!(deep.best.activation, shallow.best.activation);
        assert_eq!(deep.evaluations, shallow.grid_size);
    }

    #[test]
    fn layerwise_history_is_non_increasing() {
        let v = random_walk(140, 11);
        let mk = |start: usize, rows: usize| WindowedDataset {
            x: DMatrix::from_fn(rows, 3, |i, j| v[start + i + j]),
            y: DMatrix::from_fn(rows, 1, |i, _| v[start + i + 3]),
            lags: 3,
            horizon: 1,
            origins: (start + 2..start + 2 + rows).collect(),
        };
        let space = GridSpace {
            hidden_nodes: vec![4, 16],
            c: vec![0.1, 10.0],
            ..GridSpace::default()
        };
        let r = layerwise_grid_search(&space, &mk(0, 90), &mk(90, 40), 4, &FitContext::default()).unwrap();
        assert!(!r.history.is_empty());
        assert_eq!(r.history.len(), r.best.layers.len());
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.history.last().unwrap(), r.val_rmse);
    }

    #[test]
    fn layerwise_stops_on_linear_target() {
        // y = 2x + noise: one direct-linked layer captures all the signal, so
        // deeper layers only fit noise and never clear the improvement bar
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut noisy = |rows: std::ops::Range<usize>| {
            let mut d = linear_dataset(rows);
            d.y.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            d
        };
        let (tr, va) = (noisy(0..60), noisy(60..120));
        let space = GridSpace {
            hidden_nodes: vec![2],
            c: vec![100.0],
            ..GridSpace::default()
        };
        let r = layerwise_grid_search(&space, &tr, &va, 3, &FitContext::default()).unwrap();
        assert_eq!(r.best.layers.len(), 1);
        assert!(r.stopped_early);
        let two = r.leaderboard.iter().find(|e| e.candidate.layers.len() == 2).unwrap();
        assert!(two.val_rmse >= r.val_rmse * (1.0 - LAYER_MIN_IMPROVEMENT));
    }

    #[derive(Default)]
    struct CountingProbe {
        events: Mutex<Vec<&'static str>>,
        test_reads: AtomicUsize,
    }

    impl AccessProbe for CountingProbe {
        fn tuning_complete(&self) {
            self.events.lock().unwrap().push("tuned");
        }
        fn test_access(&self) {
            self.test_reads.fetch_add(1, AtomicOrdering::SeqCst);
            self.events.lock().unwrap().push("test");
        }
    }

    #[test]
    fn test_rows_read_once_after_tuning() {
        for family in [ModelFamily::Rvfl, ModelFamily::Edrvfl, ModelFamily::BaselineLinear] {
            let probe = CountingProbe::default();
            let cfg = inline_config(random_walk(200, 5), family, FeaturePipeline::WalkforwardEwt);
            run_experiment_with_probe(&cfg, &probe).unwrap();
            assert_eq!(probe.test_reads.load(AtomicOrdering::SeqCst), 1);
            assert_eq!(*probe.events.lock().unwrap(), vec!["tuned", "test"]);
        }
    }

    #[test]
    fn persistence_forecasts_last_observation() {
        let values = random_walk(120, 9);
        let cfg = inline_config(
            values.clone(),
            ModelFamily::BaselinePersistence,
            FeaturePipeline::RawLags,
        );
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.primary, PERSISTENCE);
        let p = report.primary_result();
        assert_eq!(p.forecasts.len(), 120 - report.val_end);
        for pt in &p.forecasts {
            assert_eq!(pt.forecast, values[pt.origin]);
            assert_eq!(pt.actual, values[pt.origin + 1]);
        }
        // all models are scored on the same origins
        let linear = report.model(LINEAR).unwrap();
        let origins = |m: &ModelResult| m.forecasts.iter().map(|p| p.origin).collect::<Vec<_>>();
        assert_eq!(origins(p), origins(linear));
    }

    #[test]
    fn experiment_is_deterministic_across_thread_counts() {
        let cfg = inline_config(random_walk(200, 21), ModelFamily::Rvfl, FeaturePipeline::WalkforwardEwt);
        let a = run_experiment(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_experiment(&cfg)).unwrap();
        assert!(a.same_result(&b));
        assert_eq!(a.models.len(), 3);
        assert_eq!(a.metadata.grid_size, 4);
        assert_eq!(a.metadata.evaluated, 4 + cfg.grid.c.len());
    }

    #[test]
    fn refit_switch_changes_final_model_only() {
        let mut cfg = inline_config(random_walk(160, 2), ModelFamily::Rvfl, FeaturePipeline::RawLags);
        let with = run_experiment(&cfg).unwrap();
        cfg.refit = false;
        let without = run_experiment(&cfg).unwrap();
        assert_eq!(with.primary_result().validation, without.primary_result().validation);
        assert_ne!(with.primary_result().forecasts, without.primary_result().forecasts);
    }

    #[test]
    fn config_errors_fail_fast() {
        let mut cfg = inline_config(random_walk(100, 1), ModelFamily::Rvfl, FeaturePipeline::RawLags);
        cfg.grid.c.clear();
        assert!(run_experiment(&cfg).unwrap_err().is_config());

        let mut cfg = inline_config(random_walk(100, 1), ModelFamily::Rvfl, FeaturePipeline::RawLags);
        cfg.data = DataSource::Csv {
            path: "/nonexistent/series.csv".into(),
            column: ColumnSelector::Index(0),
            has_header: true,
        };
        assert!(run_experiment(&cfg).unwrap_err().is_config());

        let json = r#"{"data":{"kind":"inline","name":"a","values":[1,2]},"split":{"train_fraction":0.6,"validation_fraction":0.2},
            "family":"rvfl","pipeline":"raw_lags","surprise":1}"#;
        assert!(ExperimentConfig::from_json(json).unwrap_err().is_config());
        let nested = r#"{"data":{"kind":"inline","name":"a","values":[1,2]},"split":{"train_fraction":0.6,"validation_fraction":0.2},
            "family":"rvfl","pipeline":"raw_lags","grid":{"hidden":[1]}}"#;
        assert!(ExperimentConfig::from_json(nested).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let json = r#"{"data":{"kind":"csv","path":"x.csv","column":"price"},"split":{"train_fraction":0.6,"validation_fraction":0.2},
            "family":"edrvfl","pipeline":"walkforward_ewt","grid":{"lags":[4,8]}}"#;
        let mut cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.horizon, 1);
        assert!(cfg.refit);
        assert_eq!(cfg.grid.c, vec![1.0]);
        assert_eq!(cfg.grid.lags, vec![4, 8]);
        assert_eq!(cfg.metrics.len(), 6);
        cfg.resolve_paths(Path::new("/data/in"));
        match &cfg.data {
            DataSource::Csv {
                path,
                column,
                has_header,
            } => {
                assert_eq!(path, Path::new("/data/in/x.csv"));
                assert_eq!(column, &ColumnSelector::Name("price".into()));
                assert!(has_header);
            }
            _ => unreachable!(),
        }
        assert_eq!(cfg.grid_size(), 2 * 3);
    }

    fn random_model(seed: u64) -> (ForecastModel, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(30, 4, |_, _| rng.gen_range(-2.0..2.0));
        let y = DMatrix::from_fn(30, 1, |_, _| rng.gen_range(-2.0..2.0));
        let cand = LearnerCandidate {
            hidden_nodes: 7,
            c: 3.0,
            activation: Activation::Tanh,
            input_scale: 0.7,
            direct_link: true,
            output_bias: true,
        };
        let data = WindowedDataset {
            x: x.clone(),
            y,
            lags: 4,
            horizon: 1,
            origins: (3..33).collect(),
        };
        let ctx = FitContext {
            scaler: ScalerKind::Zscore,
            seed,
            ..FitContext::default()
        };
        (fit_shallow(&data, &cand, &[0, 1], &ctx).unwrap(), x)
    }

    #[test]
    fn model_round_trip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        for seed in 0..5 {
            let (model, x) = random_model(seed);
            save_model(&model, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, model);
            let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let deep = ForecastModel::Edrvfl {
            members: vec![edrvfl::fit_edrvfl(
                &DMatrix::from_fn(20, 2, |i, j| (i * j) as f64 / 7.0),
                &DMatrix::from_fn(20, 1, |i, _| i as f64),
                &EdRvflConfig::uniform(2, 3, 1.0),
            )
            .unwrap()],
        };
        save_model(&deep, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), deep);
    }

    #[test]
    fn corrupt_and_foreign_model_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let (model, _) = random_model(1);
        save_model(&model, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(HarnessError::Checksum(_))));

        // flip one digit inside the payload
        let i = text.rfind("0.").unwrap();
        let mut bytes = text.clone().into_bytes();
        bytes[i] = b'1';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(HarnessError::Checksum(_))));

        fs::write(&path, text.replacen("\"schema_version\":1", "\"schema_version\":99", 1)).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(HarnessError::SchemaVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn report_files_and_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = inline_config(random_walk(150, 4), ModelFamily::Rvfl, FeaturePipeline::RawLags);
        let report = run_experiment(&cfg).unwrap();
        write_report(&report, dir.path()).unwrap();

        let forecasts = fs::read_to_string(dir.path().join("forecasts.csv")).unwrap();
        let test_origins = 150 - report.val_end;
        assert_eq!(forecasts.lines().count(), 1 + test_origins * report.models.len());

        let metrics_csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics_csv.starts_with("model,series,horizon,split,mae,mse,rmse,mape,mase,dstat"));
        for name in ["rvfl", PERSISTENCE, LINEAR] {
            assert!(metrics_csv
                .lines()
                .any(|l| l.starts_with(&format!("{name},walk,1,test,"))));
        }

        let loaded = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(loaded, report);
        let again = rerun(&loaded).unwrap();
        assert!(again.same_result(&report));
    }

    #[test]
    fn compare_reports_summary() {
        let reports: Vec<_> = (0..3)
            .map(|s| {
                run_experiment(&inline_config(
                    random_walk(150, 30 + s),
                    ModelFamily::Rvfl,
                    FeaturePipeline::RawLags,
                ))
                .unwrap()
            })
            .collect();
        let summary = compare_reports(&reports).unwrap();
        assert_eq!(summary.models, vec![LINEAR, PERSISTENCE, "rvfl"]);
        assert_eq!(summary.test_rmse[0].len(), 3);
        let nem = summary.nemenyi.unwrap();
        assert!((nem.average_ranks.iter().sum::<f64>() - 6.0).abs() < 1e-12);
        assert_eq!(summary.wilcoxon.len(), 6);
        assert!(summary.wilcoxon.iter().all(|w| w.model_a == "rvfl"));
        let single = compare_reports(&reports[..1]).unwrap();
        assert!(single.nemenyi.is_none() && single.nemenyi_note.is_some());
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let seeds: Vec<u64> = (0..100).map(|s| derive_seed(7, s)).collect();
        let mut sorted = seeds.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }
}
