//! Ensemble deep RVFL.
//!
//! Layer 1 is a shallow RVFL on the raw input. Layer `l > 1` draws its
//! random features from `[raw input | layer l-1 features]`. Every layer has
//! its own direct-linked output layer, solved independently, and the
//! per-layer forecasts are combined by median or mean.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rvfl::{self, Activation, HiddenLayer, RidgeSolution, RvflConfig, RvflError, SolverBranch};
use crate::series::{self, Scaler, ScalerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdRvflError {
    #[error("invalid edRVFL config: {0}")]
    Config(String),
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: RvflError },
    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error(transparent)]
    Rvfl(#[from] RvflError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    #[default]
    Median,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub hidden_nodes: usize,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdRvflConfig {
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub input_scale: f64,
    #[serde(default)]
    pub ensemble_rule: EnsembleRule,
    #[serde(default)]
    pub output_bias: bool,
    pub seed: u64,
    /// Z-score each layer's features before feeding the next layer.
    #[serde(default)]
    pub layer_zscore: bool,
    #[serde(default)]
    pub solver: SolverBranch,
}

impl EdRvflConfig {
    pub fn uniform(layers: usize, hidden_nodes: usize, c: f64) -> Self {
        Self {
            layers: vec![LayerSpec { hidden_nodes, c }; layers],
            activation: Activation::Sigmoid,
            input_scale: 1.0,
            ensemble_rule: EnsembleRule::Median,
            output_bias: false,
            seed: 0,
            layer_zscore: false,
            solver: SolverBranch::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), EdRvflError> {
        if self.layers.is_empty() {
            return Err(EdRvflError::Config("at least one layer is required".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.hidden_nodes == 0 {
                return Err(EdRvflError::Config(format!("layer {} has no hidden nodes", l + 1)));
            }
            self.layer_config(l)
                .validate()
                .map_err(|source| EdRvflError::Layer { layer: l + 1, source })?;
        }
        Ok(())
    }

    /// Shallow config used by layer `l` (0-based). Layer 0 reuses `seed`.
    pub fn layer_config(&self, l: usize) -> RvflConfig {
        RvflConfig {
            hidden_nodes: self.layers[l].hidden_nodes,
            activation: self.activation,
            c: self.layers[l].c,
            input_scale: self.input_scale,
            direct_link: true,
            output_bias: self.output_bias,
            seed: layer_seed(self.seed, l),
            solver: self.solver,
        }
    }
}

fn layer_seed(seed: u64, l: usize) -> u64 {
    seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Column statistics used when `layer_zscore` is on. Zero spreads map to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LayerNorm {
    fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut std = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(m);
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.std[j]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdLayer {
    pub hidden: HiddenLayer,
    /// Normalization applied to this layer's features before the next layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<LayerNorm>,
    pub solution: RidgeSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdRvflModel {
    pub config: EdRvflConfig,
    pub input_dim: usize,
    pub scaler: Scaler,
    pub layers: Vec<EdLayer>,
}

fn stack_design(x: &DMatrix<f64>, enhanced: &DMatrix<f64>, output_bias: bool) -> DMatrix<f64> {
    let (n, d, l) = (x.nrows(), x.ncols(), enhanced.ncols());
    let mut h = DMatrix::zeros(n, d + l + usize::from(output_bias));
    h.columns_mut(0, d).copy_from(x);
    h.columns_mut(d, l).copy_from(enhanced);
    if output_bias {
        h.column_mut(d + l).fill(1.0);
    }
    h
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

pub fn fit_edrvfl(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &EdRvflConfig) -> Result<EdRvflModel, EdRvflError> {
    fit_edrvfl_scaled(x, y, cfg, ScalerKind::None)
}

pub fn fit_edrvfl_scaled(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &EdRvflConfig,
    kind: ScalerKind,
) -> Result<EdRvflModel, EdRvflError> {
    cfg.validate()?;
    if x.nrows() != y.nrows() {
        return Err(RvflError::RowMismatch {
            x: x.nrows(),
            y: y.nrows(),
        }
        .into());
    }
    let scaler = series::fit_scaler(x, kind).map_err(RvflError::from)?;
    let xs = series::apply_scaler(&scaler, x).map_err(RvflError::from)?;
    let d = x.ncols();

    // forward pass is sequential; the ridge solves below are independent
    let mut hiddens = Vec::with_capacity(cfg.layers.len());
    let mut norms = Vec::with_capacity(cfg.layers.len());
    let mut designs = Vec::with_capacity(cfg.layers.len());
    let mut prev: Option<DMatrix<f64>> = None;
    for l in 0..cfg.layers.len() {
        let layer_cfg = cfg.layer_config(l);
        let wrap = |source| EdRvflError::Layer { layer: l + 1, source };
        let input = match &prev {
            None => xs.clone(),
            Some(p) => hstack(&xs, p),
        };
        let hidden = rvfl::init_hidden_layer(input.ncols(), &layer_cfg).map_err(wrap)?;
        let enhanced = hidden.transform(&input).map_err(wrap)?;
        designs.push(stack_design(&xs, &enhanced, cfg.output_bias));
        let norm = cfg.layer_zscore.then(|| LayerNorm::fit(&enhanced));
        prev = Some(match &norm {
            Some(n) => n.apply(&enhanced),
            None => enhanced,
        });
        hiddens.push(hidden);
        norms.push(norm);
    }
    debug_assert_eq!(hiddens[0].input_dim(), d);

    let solutions = designs
        .par_iter()
        .enumerate()
        .map(|(l, h)| {
            rvfl::fit_output_weights(h, y, cfg.layers[l].c, cfg.solver)
                .map_err(|source| EdRvflError::Layer { layer: l + 1, source })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let layers = hiddens
        .into_iter()
        .zip(norms)
        .zip(solutions)
        .map(|((hidden, norm), solution)| EdLayer { hidden, norm, solution })
        .collect();
    Ok(EdRvflModel {
        config: cfg.clone(),
        input_dim: d,
        scaler,
        layers,
    })
}

/// Median of a non-empty slice; even lengths average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl EdRvflModel {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Factorized system size of each layer's ridge solve.
    pub fn solve_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.solution.system_dim).collect()
    }

    /// Predictions of every layer, in layer order.
    pub fn predict_layers(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, EdRvflError> {
        if x.ncols() != self.input_dim {
            return Err(RvflError::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            }
            .into());
        }
        let xs = series::apply_scaler(&self.scaler, x).map_err(RvflError::from)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut prev: Option<DMatrix<f64>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let wrap = |source| EdRvflError::Layer { layer: l + 1, source };
            let input = match &prev {
                None => xs.clone(),
                Some(p) => hstack(&xs, p),
            };
            let enhanced = layer.hidden.transform(&input).map_err(wrap)?;
            let h = stack_design(&xs, &enhanced, self.config.output_bias);
            out.push(h * &layer.solution.beta);
            prev = Some(match &layer.norm {
                Some(n) => n.apply(&enhanced),
                None => enhanced,
            });
        }
        Ok(out)
    }

    /// Prediction of layer `l` (0-based) alone.
    pub fn predict_layer(&self, x: &DMatrix<f64>, l: usize) -> Result<DMatrix<f64>, EdRvflError> {
        if l >= self.layers.len() {
            return Err(EdRvflError::LayerOutOfRange {
                index: l,
                layers: self.layers.len(),
            });
        }
        let mut all = self.predict_layers(x)?;
        all.truncate(l + 1);
        Ok(all.pop().expect("l < layer count"))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, EdRvflError> {
        let per_layer = self.predict_layers(x)?;
        Ok(combine(&per_layer, self.config.ensemble_rule))
    }
}

/// Combine per-layer predictions elementwise.
pub fn combine(per_layer: &[DMatrix<f64>], rule: EnsembleRule) -> DMatrix<f64> {
    let (n, c) = per_layer[0].shape();
    if per_layer.len() == 1 {
        return per_layer[0].clone();
    }
    DMatrix::from_fn(n, c, |i, j| {
        let v: Vec<f64> = per_layer.iter().map(|p| p[(i, j)]).collect();
        match rule {
            EnsembleRule::Median => median(&v),
            EnsembleRule::Mean => v.iter().sum::<f64>() / v.len() as f64,
        }
    })
}
