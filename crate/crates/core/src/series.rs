//! Univariate series ingestion, chronological splitting, lag embedding and
//! train-only feature scaling.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("empty series")]
    Empty,
    #[error("column {0} not found")]
    MissingColumn(String),
    #[error("row {row}: cannot parse {cell:?} as a finite number")]
    BadCell { row: usize, cell: String },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("invalid split fractions: train={train}, validation={validation}")]
    InvalidSplit { train: f64, validation: f64 },
    #[error("split of {len} observations leaves the {segment} segment empty")]
    EmptySegment { len: usize, segment: &'static str },
    #[error("series too short: need at least {needed} observations, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("lags and horizon must be positive")]
    ZeroLagOrHorizon,
    #[error("column {0} is constant and cannot be z-scored")]
    ConstantColumn(usize),
    #[error("dimension mismatch: scaler fitted on {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot fit a scaler on zero rows")]
    NoRows,
}

/// An ordered sequence of finite observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self, SeriesError> {
        if values.is_empty() {
            return Err(SeriesError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SeriesError::NonFinite(i));
        }
        Ok(Self {
            values,
            name: name.into(),
            note: None,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false for a constructed series; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn segment(&self, range: std::ops::Range<usize>, suffix: &str) -> TimeSeries {
        TimeSeries {
            values: self.values[range].to_vec(),
            name: format!("{}/{}", self.name, suffix),
            note: self.note.clone(),
        }
    }
}

/// How a CSV column is selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSelector {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ColumnSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnSelector::Index(i) => write!(f, "#{i}"),
            ColumnSelector::Name(n) => write!(f, "{n:?}"),
        }
    }
}

/// Load one column of a comma-separated file as a series.
///
/// Row numbers in errors are 1-based file lines, so the header (when
/// present) is line 1.
pub fn load_csv(path: impl AsRef<Path>, column: &ColumnSelector, has_header: bool) -> Result<TimeSeries, SeriesError> {
    let path = path.as_ref();
    let io_err = |e: &dyn std::fmt::Display| SeriesError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(&e))?;

    let index = match column {
        ColumnSelector::Index(i) => *i,
        ColumnSelector::Name(name) => {
            if !has_header {
                return Err(SeriesError::MissingColumn(column.to_string()));
            }
            let headers = reader.headers().map_err(|e| io_err(&e))?;
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| SeriesError::MissingColumn(column.to_string()))?
        }
    };

    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let record = record.map_err(|e| io_err(&e))?;
        let cell = record
            .get(index)
            .ok_or_else(|| SeriesError::MissingColumn(column.to_string()))?;
        let value: f64 = cell.trim().parse().map_err(|_| SeriesError::BadCell {
            row,
            cell: cell.to_string(),
        })?;
        if !value.is_finite() {
            return Err(SeriesError::BadCell {
                row,
                cell: cell.to_string(),
            });
        }
        values.push(value);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TimeSeries::new(name, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, validation_fraction: f64) -> Result<Self, SeriesError> {
        let spec = Self {
            train_fraction,
            validation_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SeriesError> {
        let (t, v) = (self.train_fraction, self.validation_fraction);
        let ok = t > 0.0 && t < 1.0 && (0.0..1.0).contains(&v) && t + v < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SeriesError::InvalidSplit {
                train: t,
                validation: v,
            })
        }
    }

    pub fn test_fraction(&self) -> f64 {
        1.0 - self.train_fraction - self.validation_fraction
    }

    /// End indices (exclusive) of the train and validation segments for a
    /// series of length `n`.
    pub fn boundaries(&self, n: usize) -> Result<(usize, usize), SeriesError> {
        self.validate()?;
        let train_end = (n as f64 * self.train_fraction).floor() as usize;
        let val_end = (n as f64 * (self.train_fraction + self.validation_fraction)).floor() as usize;
        if train_end == 0 {
            return Err(SeriesError::EmptySegment {
                len: n,
                segment: "train",
            });
        }
        if val_end == train_end {
            return Err(SeriesError::EmptySegment {
                len: n,
                segment: "validation",
            });
        }
        if val_end >= n {
            return Err(SeriesError::EmptySegment {
                len: n,
                segment: "test",
            });
        }
        Ok((train_end, val_end))
    }
}

/// Split a series into contiguous train, validation and test segments.
pub fn chronological_split(
    ts: &TimeSeries,
    spec: &SplitSpec,
) -> Result<(TimeSeries, TimeSeries, TimeSeries), SeriesError> {
    let (a, b) = spec.boundaries(ts.len())?;
    Ok((
        ts.segment(0..a, "train"),
        ts.segment(a..b, "validation"),
        ts.segment(b..ts.len(), "test"),
    ))
}

/// Supervised rows: `x` is N×d, `y` is N×1. `origins[i]` is the index of the
/// last observation that row `i` may depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub lags: usize,
    pub horizon: usize,
    pub origins: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows whose origin satisfies `keep`, in their original order.
    pub fn filter_origins(&self, keep: impl Fn(usize) -> bool) -> WindowedDataset {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.origins[i])).collect();
        self.select_rows(&rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> WindowedDataset {
        WindowedDataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            lags: self.lags,
            horizon: self.horizon,
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
        }
    }

    /// Stack `other` below `self`. Origins must keep increasing.
    pub fn concat(&self, other: &WindowedDataset) -> WindowedDataset {
        debug_assert_eq!(self.dim(), other.dim());
        debug_assert!(match (self.origins.last(), other.origins.first()) {
            (Some(a), Some(b)) => a < b,
            _ => true,
        });
        let mut x = DMatrix::zeros(self.len() + other.len(), self.dim());
        let mut y = DMatrix::zeros(self.len() + other.len(), self.y.ncols());
        x.rows_mut(0, self.len()).copy_from(&self.x);
        x.rows_mut(self.len(), other.len()).copy_from(&other.x);
        y.rows_mut(0, self.len()).copy_from(&self.y);
        y.rows_mut(self.len(), other.len()).copy_from(&other.y);
        let mut origins = self.origins.clone();
        origins.extend_from_slice(&other.origins);
        WindowedDataset {
            x,
            y,
            lags: self.lags,
            horizon: self.horizon,
            origins,
        }
    }

    pub fn targets(&self) -> Vec<f64> {
        self.y.column(0).iter().copied().collect()
    }
}

/// Autoregressive embedding: row `i` holds `x[i..i+lags]` and targets
/// `x[i+lags+horizon-1]`.
pub fn embed(ts: &TimeSeries, lags: usize, horizon: usize) -> Result<WindowedDataset, SeriesError> {
    if lags == 0 || horizon == 0 {
        return Err(SeriesError::ZeroLagOrHorizon);
    }
    let n = ts.len();
    if n < lags + horizon {
        return Err(SeriesError::TooShort {
            needed: lags + horizon,
            have: n,
        });
    }
    let rows = n - lags - horizon + 1;
    let v = ts.values();
    let x = DMatrix::from_fn(rows, lags, |i, j| v[i + j]);
    let y = DMatrix::from_fn(rows, 1, |i, _| v[i + lags + horizon - 1]);
    Ok(WindowedDataset {
        x,
        y,
        lags,
        horizon,
        origins: (0..rows).map(|i| i + lags - 1).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    #[default]
    None,
    Zscore,
    Minmax,
}

/// Per-column affine map `(v - offset) / scale`, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    /// Mean (zscore) or minimum (minmax) per column.
    pub offset: Vec<f64>,
    /// Population std (zscore) or range (minmax) per column.
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn identity() -> Self {
        Self {
            kind: ScalerKind::None,
            offset: Vec::new(),
            scale: Vec::new(),
        }
    }

    fn check_dim(&self, rows: &DMatrix<f64>) -> Result<(), SeriesError> {
        if self.kind != ScalerKind::None && rows.ncols() != self.offset.len() {
            return Err(SeriesError::DimensionMismatch {
                expected: self.offset.len(),
                got: rows.ncols(),
            });
        }
        Ok(())
    }
}

pub fn fit_scaler(train_rows: &DMatrix<f64>, kind: ScalerKind) -> Result<Scaler, SeriesError> {
    if kind == ScalerKind::None {
        return Ok(Scaler::identity());
    }
    let n = train_rows.nrows();
    if n == 0 {
        return Err(SeriesError::NoRows);
    }
    let mut offset = Vec::with_capacity(train_rows.ncols());
    let mut scale = Vec::with_capacity(train_rows.ncols());
    for (j, col) in train_rows.column_iter().enumerate() {
        let (o, s) = match kind {
            ScalerKind::Zscore => {
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            }
            ScalerKind::Minmax => {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
            ScalerKind::None => unreachable!(),
        };
        if s <= 0.0 || !s.is_finite() {
            return Err(SeriesError::ConstantColumn(j));
        }
        offset.push(o);
        scale.push(s);
    }
    Ok(Scaler { kind, offset, scale })
}

pub fn apply_scaler(s: &Scaler, rows: &DMatrix<f64>) -> Result<DMatrix<f64>, SeriesError> {
    s.check_dim(rows)?;
    if s.kind == ScalerKind::None {
        return Ok(rows.clone());
    }
    Ok(DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, j| {
        (rows[(i, j)] - s.offset[j]) / s.scale[j]
    }))
}

pub fn invert_scaler(s: &Scaler, rows: &DMatrix<f64>) -> Result<DMatrix<f64>, SeriesError> {
    s.check_dim(rows)?;
    if s.kind == ScalerKind::None {
        return Ok(rows.clone());
    }
    Ok(DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, j| {
        rows[(i, j)] * s.scale[j] + s.offset[j]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn ts(v: &[f64]) -> TimeSeries {
        TimeSeries::new("t", v.to_vec()).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_by_name_and_index() {
        let f = write_tmp("time,load\na,1.0\nb,2.0\nc,3.0\n");
        let s = load_csv(f.path(), &ColumnSelector::Name("load".into()), true).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
        let s = load_csv(f.path(), &ColumnSelector::Index(1), true).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_without_header() {
        let f = write_tmp("4.5\n-1e3\n");
        let s = load_csv(f.path(), &ColumnSelector::Index(0), false).unwrap();
        assert_eq!(s.values(), &[4.5, -1000.0]);
    }

    #[test]
    fn load_empty_is_error() {
        let f = write_tmp("load\n");
        let err = load_csv(f.path(), &ColumnSelector::Name("load".into()), true).unwrap_err();
        assert_eq!(err, SeriesError::Empty);
        assert_eq!(err.to_string(), "empty series");
    }

    #[test]
    fn load_bad_cell_names_row() {
        let f = write_tmp("load\n1\n2\n3\n4\n5\nabc\n7\n");
        let err = load_csv(f.path(), &ColumnSelector::Index(0), true).unwrap_err();
        assert_eq!(
            err,
            SeriesError::BadCell {
                row: 7,
                cell: "abc".into()
            }
        );
        assert!(err.to_string().contains("row 7"));
    }

    #[test]
    fn load_rejects_non_finite_and_missing() {
        let f = write_tmp("x\n1\nNaN\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnSelector::Index(0), true),
            Err(SeriesError::BadCell { row: 3, .. })
        ));
        assert!(matches!(
            load_csv(f.path(), &ColumnSelector::Name("y".into()), true),
            Err(SeriesError::MissingColumn(_))
        ));
        assert!(matches!(
            load_csv(f.path(), &ColumnSelector::Index(4), true),
            Err(SeriesError::MissingColumn(_))
        ));
        assert!(matches!(
            load_csv("/definitely/not/here.csv", &ColumnSelector::Index(0), true),
            Err(SeriesError::Io { .. })
        ));
    }

    #[test]
    fn split_lengths() {
        let s = ts(&(0..10).map(f64::from).collect::<Vec<_>>());
        let (a, b, c) = chronological_split(&s, &SplitSpec::new(0.6, 0.2).unwrap()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        // floor(9.9) = 9 leaves nothing between the train and test boundaries
        let err = chronological_split(&s, &SplitSpec::new(0.9, 0.09).unwrap()).unwrap_err();
        assert!(matches!(err, SeriesError::EmptySegment { .. }));
        let err = chronological_split(&s, &SplitSpec::new(0.05, 0.5).unwrap()).unwrap_err();
        assert!(matches!(err, SeriesError::EmptySegment { segment: "train", .. }));
        let s5 = ts(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (a, b, c) = chronological_split(&s5, &SplitSpec::new(0.6, 0.2).unwrap()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3, 1, 1));
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.0, 0.2).is_err());
        assert!(SplitSpec::new(0.7, 0.3).is_err());
        assert!(SplitSpec::new(0.5, -0.1).is_err());
        assert!((SplitSpec::new(0.6, 0.1).unwrap().test_fraction() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn embed_examples() {
        let d = embed(&ts(&[1.0, 2.0, 3.0, 4.0]), 2, 1).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
        assert_eq!(d.y, DMatrix::from_row_slice(2, 1, &[3.0, 4.0]));
        assert_eq!(d.origins, vec![1, 2]);

        let err = embed(&ts(&[1.0, 2.0, 3.0]), 3, 1).unwrap_err();
        assert!(err.to_string().starts_with("series too short"));

        let d = embed(&ts(&[1.0, 2.0, 3.0, 4.0, 5.0]), 1, 2).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]));
        assert_eq!(d.y, DMatrix::from_row_slice(3, 1, &[3.0, 4.0, 5.0]));
    }

    #[test]
    fn scaler_examples() {
        let train = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let z = fit_scaler(&train, ScalerKind::Zscore).unwrap();
        assert_eq!((z.offset[0], z.scale[0]), (1.0, 1.0));
        let out = apply_scaler(&z, &DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        assert_eq!(out[(0, 0)], 0.0);

        let none = fit_scaler(&train, ScalerKind::None).unwrap();
        let m = DMatrix::from_row_slice(1, 3, &[3.0, -1.0, 7.5]);
        assert_eq!(apply_scaler(&none, &m).unwrap(), m);

        let mm = fit_scaler(&DMatrix::from_row_slice(2, 1, &[0.0, 10.0]), ScalerKind::Minmax).unwrap();
        let out = apply_scaler(&mm, &DMatrix::from_row_slice(1, 1, &[5.0])).unwrap();
        assert_eq!(out[(0, 0)], 0.5);
    }

    #[test]
    fn scaler_errors() {
        let constant = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        assert_eq!(
            fit_scaler(&constant, ScalerKind::Zscore).unwrap_err(),
            SeriesError::ConstantColumn(1)
        );
        let s = fit_scaler(&DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), ScalerKind::Zscore).unwrap();
        assert!(matches!(
            apply_scaler(&s, &DMatrix::zeros(1, 2)),
            Err(SeriesError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    proptest! {
        #[test]
        fn split_concatenation_is_identity(n in 3usize..400, t in 0.05f64..0.9, v in 0.0f64..0.5) {
            prop_assume!(t + v < 0.999);
            let s = ts(&(0..n).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
            let spec = SplitSpec::new(t, v).unwrap();
            if let Ok((a, b, c)) = chronological_split(&s, &spec) {
                let mut all = a.values().to_vec();
                all.extend_from_slice(b.values());
                all.extend_from_slice(c.values());
                prop_assert_eq!(all.as_slice(), s.values());
                prop_assert_eq!(a.len(), (n as f64 * t).floor() as usize);
            }
        }

        #[test]
        fn embed_row_count(n in 2usize..200, lags in 1usize..20, horizon in 1usize..10) {
            let s = ts(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
            match embed(&s, lags, horizon) {
                Ok(d) => {
                    prop_assert_eq!(d.len(), n - lags - horizon + 1);
                    prop_assert_eq!(d.dim(), lags);
                    prop_assert!(d.origins.windows(2).all(|w| w[0] < w[1]));
                }
                Err(_) => prop_assert!(n < lags + horizon),
            }
        }

        #[test]
        fn scaler_round_trip(rows in 2usize..12, cols in 1usize..6,
                             data in proptest::collection::vec(-1e3f64..1e3, 72),
                             zscore in any::<bool>()) {
            let m = DMatrix::from_fn(rows, cols, |i, j| data[i * cols + j] + (i as f64) * 1e-3);
            let kind = if zscore { ScalerKind::Zscore } else { ScalerKind::Minmax };
            if let Ok(s) = fit_scaler(&m, kind) {
                let back = invert_scaler(&s, &apply_scaler(&s, &m).unwrap()).unwrap();
                for (a, b) in m.iter().zip(back.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn scaler_stats_ignore_later_rows(suffix in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let base: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 3.0 + i as f64).collect();
            let mut changed = base.clone();
            changed[20..].copy_from_slice(&suffix);
            let fit_train = |v: &[f64]| {
                let d = embed(&ts(v), 3, 1).unwrap().filter_origins(|o| o + 1 < 20);
                fit_scaler(&d.x, ScalerKind::Zscore).unwrap()
            };
            prop_assert_eq!(fit_train(&base), fit_train(&changed));
        }
    }
}
