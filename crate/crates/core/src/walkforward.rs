//! Causal (walk-forward) EWT features.
//!
//! For every forecast origin `t` only the observations `x[..=t]` are
//! decomposed; the last `lags` values of each band are concatenated with the
//! raw lags. [`leaky_features`] builds the same layout from one decomposition
//! of the whole series and exists only as a control.

use std::io::Write;
use std::ops::RangeInclusive;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ewt::{self, DetectOptions, EwtBoundaries, EwtError, EwtFilterBank};
use crate::series::{TimeSeries, WindowedDataset};

/// Extra samples a decomposition window needs beyond `lags`.
pub const WINDOW_SLACK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkForwardError {
    #[error("invalid walk-forward config: {0}")]
    Config(String),
    #[error("origin {origin} is outside [{first}, {last}]")]
    OriginOutOfRange { origin: usize, first: usize, last: usize },
    #[error("empty origin range")]
    EmptyRange,
    #[error("series of length {len} is too short for window {window} and horizon {horizon}")]
    TooShort { len: usize, window: usize, horizon: usize },
    #[error(transparent)]
    Ewt(#[from] EwtError),
    #[error("csv export failed: {0}")]
    Export(String),
}

/// Length of the slice decomposed at each origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    Fixed(usize),
    AllHistory,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Re-detect boundaries on every slice.
    #[default]
    AdaptivePerStep,
    /// Detect once on the first decomposition window and reuse.
    FrozenFromTrain,
}

impl BoundaryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryMode::AdaptivePerStep => "adaptive_per_step",
            BoundaryMode::FrozenFromTrain => "frozen_from_train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardConfig {
    pub bands: usize,
    pub lags: usize,
    pub horizon: usize,
    pub window: WindowPolicy,
    pub gamma: f64,
    pub boundary_mode: BoundaryMode,
    #[serde(default)]
    pub detect: DetectOptions,
}

/// `max(4 * lags, 128)`, capped at `available` observations.
pub fn default_window(lags: usize, available: usize) -> usize {
    (4 * lags).max(128).min(available)
}

impl WalkForwardConfig {
    pub fn new(bands: usize, lags: usize, horizon: usize, window: WindowPolicy) -> Self {
        Self {
            bands,
            lags,
            horizon,
            window,
            gamma: ewt::DEFAULT_GAMMA,
            boundary_mode: BoundaryMode::default(),
            detect: DetectOptions::default(),
        }
    }

    pub fn min_window(&self) -> usize {
        self.lags + WINDOW_SLACK
    }

    /// Length of the first (shortest) decomposition slice.
    pub fn first_window(&self) -> usize {
        match self.window {
            WindowPolicy::Fixed(w) => w,
            WindowPolicy::AllHistory => self.min_window(),
        }
    }

    /// Earliest origin for which a full slice is available.
    pub fn first_origin(&self) -> usize {
        self.first_window() - 1
    }

    pub fn feature_dim(&self) -> usize {
        (self.bands + 1) * self.lags
    }

    pub fn validate(&self) -> Result<(), WalkForwardError> {
        let bad = |m: String| Err(WalkForwardError::Config(m));
        if self.bands == 0 {
            return bad("bands must be at least 1".into());
        }
        if self.lags == 0 || self.horizon == 0 {
            return bad("lags and horizon must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if let WindowPolicy::Fixed(w) = self.window {
            if w < self.min_window() {
                return bad(format!("window {w} shorter than lags + {WINDOW_SLACK}"));
            }
        }
        Ok(())
    }

    /// All origins usable on a series of length `len`.
    pub fn valid_origins(&self, len: usize) -> Result<RangeInclusive<usize>, WalkForwardError> {
        let first = self.first_origin();
        if len < self.first_window() + self.horizon {
            return Err(WalkForwardError::TooShort {
                len,
                window: self.first_window(),
                horizon: self.horizon,
            });
        }
        Ok(first..=len - 1 - self.horizon)
    }
}

/// Last `lags` values of every band for one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalTails {
    pub origin: usize,
    pub tails: Vec<Vec<f64>>,
    pub fallback: bool,
    pub gamma_clipped: bool,
}

/// One feature row: `[raw lags | band 1 tail | ... | band K tail]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalFeatureRow {
    pub origin: usize,
    pub features: Vec<f64>,
    pub target: f64,
    pub fallback: bool,
    pub gamma_clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkForwardFeatures {
    pub dataset: WindowedDataset,
    pub bands: usize,
    /// Rows whose slice fell back to uniform band boundaries.
    pub fallback_count: usize,
    /// Rows whose gamma was clipped to keep transitions apart.
    pub clip_count: usize,
}

/// Walk-forward decomposer bound to one series and config.
#[derive(Debug, Clone)]
pub struct WalkForward<'a> {
    ts: &'a TimeSeries,
    cfg: WalkForwardConfig,
    frozen: Option<FrozenBank>,
}

#[derive(Debug, Clone)]
struct FrozenBank {
    boundaries: EwtBoundaries,
    /// Reusable bank when every slice has the same length.
    fixed: Option<Arc<EwtFilterBank>>,
}

impl<'a> WalkForward<'a> {
    pub fn new(ts: &'a TimeSeries, cfg: WalkForwardConfig) -> Result<Self, WalkForwardError> {
        cfg.validate()?;
        cfg.valid_origins(ts.len())?;
        let frozen = match cfg.boundary_mode {
            BoundaryMode::AdaptivePerStep => None,
            BoundaryMode::FrozenFromTrain => {
                let prefix = &ts.values()[..cfg.first_window()];
                let spectrum = ewt::magnitude_spectrum(prefix)?;
                let boundaries = ewt::detect_boundaries_with(&spectrum, cfg.bands, cfg.detect)?;
                let fixed = match cfg.window {
                    WindowPolicy::Fixed(w) => Some(Arc::new(ewt::build_filter_bank(&boundaries, w, cfg.gamma)?)),
                    WindowPolicy::AllHistory => None,
                };
                Some(FrozenBank { boundaries, fixed })
            }
        };
        Ok(Self { ts, cfg, frozen })
    }

    pub fn config(&self) -> &WalkForwardConfig {
        &self.cfg
    }

    fn slice(&self, origin: usize) -> &'a [f64] {
        let start = match self.cfg.window {
            WindowPolicy::Fixed(w) => origin + 1 - w,
            WindowPolicy::AllHistory => 0,
        };
        &self.ts.values()[start..=origin]
    }

    fn check_origin(&self, origin: usize) -> Result<(), WalkForwardError> {
        let range = self.cfg.valid_origins(self.ts.len())?;
        let first = *range.start();
        // decomposition itself only needs x[..=origin]
        let last = self.ts.len() - 1;
        if origin < first || origin > last {
            return Err(WalkForwardError::OriginOutOfRange { origin, first, last });
        }
        Ok(())
    }

    /// Decompose the slice ending at `origin` and keep the band tails.
    pub fn decompose_at(&self, origin: usize) -> Result<CausalTails, WalkForwardError> {
        self.check_origin(origin)?;
        let slice = self.slice(origin);
        let bank = match &self.frozen {
            Some(FrozenBank { fixed: Some(bank), .. }) => Arc::clone(bank),
            Some(FrozenBank {
                boundaries,
                fixed: None,
            }) => Arc::new(ewt::build_filter_bank(boundaries, slice.len(), self.cfg.gamma)?),
            None => {
                let spectrum = ewt::magnitude_spectrum(slice)?;
                let boundaries = ewt::detect_boundaries_with(&spectrum, self.cfg.bands, self.cfg.detect)?;
                Arc::new(ewt::build_filter_bank(&boundaries, slice.len(), self.cfg.gamma)?)
            }
        };
        let fallback = bank.boundaries().fallback;
        let gamma_clipped = bank.gamma_clipped;
        let dec = ewt::decompose(slice, bank)?;
        let lags = self.cfg.lags;
        let tails = dec
            .components
            .into_iter()
            .map(|c| c[c.len() - lags..].to_vec())
            .collect();
        Ok(CausalTails {
            origin,
            tails,
            fallback,
            gamma_clipped,
        })
    }

    pub fn row_at(&self, origin: usize) -> Result<CausalFeatureRow, WalkForwardError> {
        let tails = self.decompose_at(origin)?;
        let target =
            self.ts
                .values()
                .get(origin + self.cfg.horizon)
                .copied()
                .ok_or(WalkForwardError::OriginOutOfRange {
                    origin,
                    first: self.cfg.first_origin(),
                    last: self.ts.len() - 1 - self.cfg.horizon,
                })?;
        Ok(assemble_row(self.ts.values(), self.cfg.lags, origin, target, tails))
    }

    pub fn features(&self, range: RangeInclusive<usize>) -> Result<WalkForwardFeatures, WalkForwardError> {
        let origins = checked_origins(&self.cfg, self.ts.len(), range)?;
        let rows = origins
            .into_par_iter()
            .map(|o| self.row_at(o))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(collect_rows(&self.cfg, rows))
    }
}

fn assemble_row(values: &[f64], lags: usize, origin: usize, target: f64, tails: CausalTails) -> CausalFeatureRow {
    let mut features = Vec::with_capacity((tails.tails.len() + 1) * lags);
    features.extend_from_slice(&values[origin + 1 - lags..=origin]);
    for t in &tails.tails {
        features.extend_from_slice(t);
    }
    CausalFeatureRow {
        origin,
        features,
        target,
        fallback: tails.fallback,
        gamma_clipped: tails.gamma_clipped,
    }
}

fn checked_origins(
    cfg: &WalkForwardConfig,
    len: usize,
    range: RangeInclusive<usize>,
) -> Result<Vec<usize>, WalkForwardError> {
    let valid = cfg.valid_origins(len)?;
    if range.is_empty() {
        return Err(WalkForwardError::EmptyRange);
    }
    for o in [*range.start(), *range.end()] {
        if !valid.contains(&o) {
            return Err(WalkForwardError::OriginOutOfRange {
                origin: o,
                first: *valid.start(),
                last: *valid.end(),
            });
        }
    }
    Ok(range.collect())
}

fn collect_rows(cfg: &WalkForwardConfig, rows: Vec<CausalFeatureRow>) -> WalkForwardFeatures {
    let dim = cfg.feature_dim();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, dim);
    let mut y = DMatrix::zeros(n, 1);
    let mut origins = Vec::with_capacity(n);
    let (mut fallback_count, mut clip_count) = (0, 0);
    for (i, row) in rows.into_iter().enumerate() {
        debug_assert_eq!(row.features.len(), dim);
        for (j, v) in row.features.iter().enumerate() {
            x[(i, j)] = *v;
        }
        y[(i, 0)] = row.target;
        origins.push(row.origin);
        fallback_count += usize::from(row.fallback);
        clip_count += usize::from(row.gamma_clipped);
    }
    WalkForwardFeatures {
        dataset: WindowedDataset {
            x,
            y,
            lags: cfg.lags,
            horizon: cfg.horizon,
            origins,
        },
        bands: cfg.bands,
        fallback_count,
        clip_count,
    }
}

/// Band tails for `origin` using only `x[..=origin]`.
pub fn causal_decompose_at(
    ts: &TimeSeries,
    origin: usize,
    cfg: &WalkForwardConfig,
) -> Result<CausalTails, WalkForwardError> {
    WalkForward::new(ts, *cfg)?.decompose_at(origin)
}

/// One causal feature row per origin in `range`, in origin order.
pub fn build_walkforward_features(
    ts: &TimeSeries,
    cfg: &WalkForwardConfig,
    range: RangeInclusive<usize>,
) -> Result<WalkForwardFeatures, WalkForwardError> {
    WalkForward::new(ts, *cfg)?.features(range)
}

/// Same layout as [`build_walkforward_features`], but the bands come from a
/// single decomposition of the entire series, so rows see the future.
pub fn leaky_features(
    ts: &TimeSeries,
    cfg: &WalkForwardConfig,
    range: RangeInclusive<usize>,
) -> Result<WalkForwardFeatures, WalkForwardError> {
    cfg.validate()?;
    let origins = checked_origins(cfg, ts.len(), range)?;
    let values = ts.values();
    let spectrum = ewt::magnitude_spectrum(values)?;
    let boundaries = ewt::detect_boundaries_with(&spectrum, cfg.bands, cfg.detect)?;
    let bank = Arc::new(ewt::build_filter_bank(&boundaries, values.len(), cfg.gamma)?);
    let (fallback, gamma_clipped) = (bank.boundaries().fallback, bank.gamma_clipped);
    let dec = ewt::decompose(values, bank)?;
    let lags = cfg.lags;
    let rows = origins
        .into_iter()
        .map(|o| {
            let tails = CausalTails {
                origin: o,
                tails: dec.components.iter().map(|c| c[o + 1 - lags..=o].to_vec()).collect(),
                fallback,
                gamma_clipped,
            };
            assemble_row(values, lags, o, values[o + cfg.horizon], tails)
        })
        .collect();
    Ok(collect_rows(cfg, rows))
}

/// Column names in feature order. Lag 1 is the observation at the origin.
pub fn feature_names(lags: usize, bands: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..lags).map(|j| format!("raw_lag_{}", lags - j)).collect();
    for k in 1..=bands {
        names.extend((0..lags).map(|j| format!("band_{k}_lag_{}", lags - j)));
    }
    names
}

/// CSV with an `origin` column, the feature columns and a final `target`.
pub fn write_features_csv<W: Write>(features: &WalkForwardFeatures, out: W) -> Result<(), WalkForwardError> {
    let err = |e: csv::Error| WalkForwardError::Export(e.to_string());
    let d = &features.dataset;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["origin".to_string()];
    header.extend(feature_names(d.lags, features.bands));
    header.push("target".into());
    w.write_record(&header).map_err(err)?;
    for i in 0..d.len() {
        let mut rec = vec![d.origins[i].to_string()];
        rec.extend(d.x.row(i).iter().map(|v| v.to_string()));
        rec.push(d.y[(i, 0)].to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| WalkForwardError::Export(e.to_string()))
}
