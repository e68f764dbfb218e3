//! Shallow random vector functional link network.
//!
//! A frozen random enhancement layer maps each input `x` to
//! `theta(mu_k . x + sigma_k)`; the output layer sees those features next to
//! the raw input (direct links) and is trained in closed form by ridge
//! regression.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_serde;
use crate::series::{self, Scaler, ScalerKind, SeriesError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RvflError {
    #[error("invalid RVFL config: {0}")]
    Config(String),
    #[error("unknown activation {0:?}")]
    UnknownActivation(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row count mismatch: {x} input rows, {y} target rows")]
    RowMismatch { x: usize, y: usize },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("ridge system of size {dim} is not positive definite (condition estimate {condition:e})")]
    Factorization { dim: usize, condition: f64 },
    #[error(transparent)]
    Scaling(#[from] SeriesError),
}

/// Hidden-node activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Sign,
    Relu,
    Sine,
    Radbas,
    Hardlim,
    Tribas,
    Tanh,
    Selu,
}

const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

impl Activation {
    pub const ALL: [Activation; 9] = [
        Activation::Sigmoid,
        Activation::Sign,
        Activation::Relu,
        Activation::Sine,
        Activation::Radbas,
        Activation::Hardlim,
        Activation::Tribas,
        Activation::Tanh,
        Activation::Selu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Sine => x.sin(),
            Activation::Radbas => (-x * x).exp(),
            Activation::Hardlim => {
                if x <= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tribas => (1.0 - x.abs()).max(0.0),
            // (1 - e^-x) / (1 + e^-x), i.e. tanh(x / 2)
            Activation::Tanh => (x / 2.0).tanh(),
            Activation::Selu => SELU_SCALE * (x.max(0.0) + (SELU_ALPHA * (x.exp() - 1.0)).min(0.0)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Sign => "sign",
            Activation::Relu => "relu",
            Activation::Sine => "sine",
            Activation::Radbas => "radbas",
            Activation::Hardlim => "hardlim",
            Activation::Tribas => "tribas",
            Activation::Tanh => "tanh",
            Activation::Selu => "selu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = RvflError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| RvflError::UnknownActivation(s.to_string()))
    }
}

/// Apply the named activation to one value.
pub fn activate(name: &str, x: f64) -> Result<f64, RvflError> {
    Ok(name.parse::<Activation>()?.apply(x))
}

/// Which closed form to use for the ridge solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverBranch {
    /// Primal when `cols <= rows`, dual otherwise.
    #[default]
    Auto,
    Primal,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvflConfig {
    /// Enhancement node count `L`.
    pub hidden_nodes: usize,
    pub activation: Activation,
    /// Regularization strength; the ridge penalty is `1 / c`.
    pub c: f64,
    /// Random weights are uniform on `[-s, s]`, biases on `[0, s]`.
    pub input_scale: f64,
    pub direct_link: bool,
    pub output_bias: bool,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverBranch,
}

impl Default for RvflConfig {
    fn default() -> Self {
        Self {
            hidden_nodes: 32,
            activation: Activation::Sigmoid,
            c: 1.0,
            input_scale: 1.0,
            direct_link: true,
            output_bias: false,
            seed: 0,
            solver: SolverBranch::Auto,
        }
    }
}

impl RvflConfig {
    pub fn validate(&self) -> Result<(), RvflError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(RvflError::Config(format!("c must be positive, got {}", self.c)));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(RvflError::Config(format!(
                "input_scale must be positive, got {}",
                self.input_scale
            )));
        }
        if !self.direct_link && self.hidden_nodes == 0 {
            return Err(RvflError::Config(
                "no features: direct_link is off and hidden_nodes is 0".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self, input_dim: usize) -> Layout {
        Layout {
            input_dim,
            hidden_nodes: self.hidden_nodes,
            direct_link: self.direct_link,
            output_bias: self.output_bias,
        }
    }
}

/// Frozen random enhancement layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    /// `L x d`; row `k` is `mu_k`.
    #[serde(with = "matrix_serde")]
    pub weights: DMatrix<f64>,
    #[serde(with = "matrix_serde::vector")]
    pub biases: DVector<f64>,
    pub activation: Activation,
}

impl HiddenLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn nodes(&self) -> usize {
        self.weights.nrows()
    }

    /// `N x L` matrix of `theta(mu_k . x_i + sigma_k)`.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, RvflError> {
        if x.ncols() != self.input_dim() {
            return Err(RvflError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut pre = x * self.weights.transpose();
        for (k, mut col) in pre.column_iter_mut().enumerate() {
            let b = self.biases[k];
            col.apply(|v| *v = self.activation.apply(*v + b));
        }
        Ok(pre)
    }
}

/// Draw the random layer for `d` inputs from `cfg.seed`.
pub fn init_hidden_layer(d: usize, cfg: &RvflConfig) -> Result<HiddenLayer, RvflError> {
    if d < 1 {
        return Err(RvflError::Config("input dimension must be at least 1".into()));
    }
    cfg.validate()?;
    let s = cfg.input_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Uniform::new_inclusive(-s, s);
    let b = Uniform::new_inclusive(0.0, s);
    let l = cfg.hidden_nodes;
    let weights_row_major: Vec<f64> = (0..l * d).map(|_| w.sample(&mut rng)).collect();
    let biases: Vec<f64> = (0..l).map(|_| b.sample(&mut rng)).collect();
    Ok(HiddenLayer {
        weights: DMatrix::from_row_slice(l, d, &weights_row_major),
        biases: DVector::from_vec(biases),
        activation: cfg.activation,
    })
}

/// Column layout of the design matrix: `[direct | enhancement | bias]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    pub hidden_nodes: usize,
    pub direct_link: bool,
    pub output_bias: bool,
}

impl Layout {
    pub fn cols(&self) -> usize {
        self.input_dim * usize::from(self.direct_link) + self.hidden_nodes + usize::from(self.output_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub h: DMatrix<f64>,
    pub layout: Layout,
}

pub fn build_design_matrix(x: &DMatrix<f64>, hidden: &HiddenLayer, layout: Layout) -> Result<DesignMatrix, RvflError> {
    if x.ncols() != layout.input_dim {
        return Err(RvflError::DimensionMismatch {
            expected: layout.input_dim,
            got: x.ncols(),
        });
    }
    if hidden.nodes() != layout.hidden_nodes {
        return Err(RvflError::Config(format!(
            "hidden layer has {} nodes, layout expects {}",
            hidden.nodes(),
            layout.hidden_nodes
        )));
    }
    let n = x.nrows();
    let mut h = DMatrix::zeros(n, layout.cols());
    let mut col = 0;
    if layout.direct_link {
        h.columns_mut(col, x.ncols()).copy_from(x);
        col += x.ncols();
    }
    if layout.hidden_nodes > 0 {
        let enhanced = hidden.transform(x)?;
        h.columns_mut(col, layout.hidden_nodes).copy_from(&enhanced);
        col += layout.hidden_nodes;
    }
    if layout.output_bias {
        h.column_mut(col).fill(1.0);
    }
    Ok(DesignMatrix { h, layout })
}

/// Outcome of one ridge solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSolution {
    #[serde(with = "matrix_serde")]
    pub beta: DMatrix<f64>,
    pub branch: SolverBranch,
    /// Size of the factorized system.
    pub system_dim: usize,
    pub jittered: bool,
}

fn cholesky_solve(mut a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool), RvflError> {
    let dim = a.nrows();
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.solve(rhs), false));
    }
    let jitter = 1e-10 * a.trace() / dim as f64;
    for i in 0..dim {
        a[(i, i)] += jitter;
    }
    match a.clone().cholesky() {
        Some(ch) => Ok((ch.solve(rhs), true)),
        None => {
            let eig = a.symmetric_eigenvalues();
            let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
            Err(RvflError::Factorization {
                dim,
                condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            })
        }
    }
}

/// Minimize `(c/2)||H beta - Y||^2 + (1/2)||beta||^2` in closed form.
///
/// Primal: `(H'H + I/c) beta = H'Y`. Dual: `(HH' + I/c) a = Y`, `beta = H'a`.
pub fn fit_output_weights(
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    c: f64,
    branch: SolverBranch,
) -> Result<RidgeSolution, RvflError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(RvflError::Config(format!("c must be positive, got {c}")));
    }
    if h.nrows() != y.nrows() {
        return Err(RvflError::RowMismatch {
            x: h.nrows(),
            y: y.nrows(),
        });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(RvflError::NonFinite("design matrix"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RvflError::NonFinite("targets"));
    }
    let (n, p) = h.shape();
    let branch = match branch {
        SolverBranch::Auto if p <= n => SolverBranch::Primal,
        SolverBranch::Auto => SolverBranch::Dual,
        b => b,
    };
    let ridge = 1.0 / c;
    let (beta, system_dim, jittered) = if branch == SolverBranch::Primal {
        let mut a = h.tr_mul(h);
        for i in 0..p {
            a[(i, i)] += ridge;
        }
        let (beta, j) = cholesky_solve(a, &h.tr_mul(y))?;
        (beta, p, j)
    } else {
        let mut a = h * h.transpose();
        for i in 0..n {
            a[(i, i)] += ridge;
        }
        let (alpha, j) = cholesky_solve(a, y)?;
        (h.tr_mul(&alpha), n, j)
    };
    Ok(RidgeSolution {
        beta,
        branch,
        system_dim,
        jittered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvflModel {
    pub config: RvflConfig,
    pub layout: Layout,
    pub hidden: HiddenLayer,
    /// Input scaler applied before the hidden layer and direct links.
    pub scaler: Scaler,
    pub solution: RidgeSolution,
}

/// Random layer, design matrix and ridge solve in one step.
pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &RvflConfig) -> Result<RvflModel, RvflError> {
    fit_scaled(x, y, cfg, ScalerKind::None)
}

/// Like [`fit`], but first fits a feature scaler of `kind` on `x`.
pub fn fit_scaled(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &RvflConfig,
    kind: ScalerKind,
) -> Result<RvflModel, RvflError> {
    cfg.validate()?;
    if x.nrows() != y.nrows() {
        return Err(RvflError::RowMismatch {
            x: x.nrows(),
            y: y.nrows(),
        });
    }
    let scaler = series::fit_scaler(x, kind)?;
    let xs = series::apply_scaler(&scaler, x)?;
    let hidden = init_hidden_layer(x.ncols(), cfg)?;
    let layout = cfg.layout(x.ncols());
    let design = build_design_matrix(&xs, &hidden, layout)?;
    let solution = fit_output_weights(&design.h, y, cfg.c, cfg.solver)?;
    Ok(RvflModel {
        config: cfg.clone(),
        layout,
        hidden,
        scaler,
        solution,
    })
}

impl RvflModel {
    pub fn beta(&self) -> &DMatrix<f64> {
        &self.solution.beta
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim
    }

    pub fn design(&self, x: &DMatrix<f64>) -> Result<DesignMatrix, RvflError> {
        if x.ncols() != self.layout.input_dim {
            return Err(RvflError::DimensionMismatch {
                expected: self.layout.input_dim,
                got: x.ncols(),
            });
        }
        let xs = series::apply_scaler(&self.scaler, x)?;
        build_design_matrix(&xs, &self.hidden, self.layout)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, RvflError> {
        Ok(self.design(x)?.h * self.beta())
    }
}

/// Ridge objective `(c/2)||H beta - Y||^2 + (1/2)||beta||^2`.
pub fn objective(h: &DMatrix<f64>, y: &DMatrix<f64>, beta: &DMatrix<f64>, c: f64) -> f64 {
    0.5 * c * (h * beta - y).norm_squared() + 0.5 * beta.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Plain gradient descent on the ridge objective, run to a tiny gradient.
    fn gradient_descent(h: &DMatrix<f64>, y: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
        let gram = h.tr_mul(h);
        let lmax = gram.symmetric_eigenvalues().max();
        let step = 1.0 / (c * lmax + 1.0);
        let hty = h.tr_mul(y);
        let mut beta = DMatrix::zeros(h.ncols(), y.ncols());
        for _ in 0..2_000_000 {
            let grad = (&gram * &beta - &hty) * c + &beta;
            if grad.norm() < 1e-11 {
                break;
            }
            beta -= grad * step;
        }
        beta
    }

    #[test]
    fn activation_table_values() {
        assert_eq!(activate("sigmoid", 0.0).unwrap(), 0.5);
        assert_eq!(activate("tribas", 0.5).unwrap(), 0.5);
        assert_eq!(activate("radbas", 0.0).unwrap(), 1.0);
        assert_eq!(activate("relu", -3.0).unwrap(), 0.0);
        assert_eq!(activate("sign", -2.0).unwrap(), -1.0);
        assert_eq!(activate("sign", 0.0).unwrap(), 0.0);
        assert_eq!(activate("hardlim", 0.0).unwrap(), 1.0);
        assert_eq!(activate("hardlim", 0.1).unwrap(), 0.0);
        assert!((activate("sine", 1.0).unwrap() - 1f64.sin()).abs() < 1e-15);
        let t = activate("tanh", 0.7).unwrap();
        assert!((t - (1.0 - (-0.7f64).exp()) / (1.0 + (-0.7f64).exp())).abs() < 1e-15);
        assert_eq!(activate("selu", 2.0).unwrap(), SELU_SCALE * 2.0);
        assert!(activate("selu", -50.0).unwrap() > -SELU_SCALE * SELU_ALPHA - 1e-12);
        assert!(matches!(activate("softmax", 0.0), Err(RvflError::UnknownActivation(_))));
        for a in Activation::ALL {
            assert_eq!(a.as_str().parse::<Activation>().unwrap(), a);
        }
    }

    #[test]
    fn hidden_layer_is_seeded_and_bounded() {
        let cfg = RvflConfig {
            hidden_nodes: 20,
            input_scale: 0.5,
            seed: 42,
            ..Default::default()
        };
        let a = init_hidden_layer(7, &cfg).unwrap();
        let b = init_hidden_layer(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.weights.iter().all(|w| w.abs() <= 0.5));
        assert!(a.biases.iter().all(|b| (0.0..=0.5).contains(b)));
        let other = init_hidden_layer(
            7,
            &RvflConfig {
                seed: 43,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a, other);

        let empty = init_hidden_layer(
            3,
            &RvflConfig {
                hidden_nodes: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(empty.weights.shape(), (0, 3));
        assert!(init_hidden_layer(0, &cfg).is_err());
    }

    #[test]
    fn design_matrix_layouts() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cfg = RvflConfig {
            hidden_nodes: 0,
            ..Default::default()
        };
        let hidden = init_hidden_layer(2, &cfg).unwrap();
        let d = build_design_matrix(&x, &hidden, cfg.layout(2)).unwrap();
        assert_eq!(d.h, x);

        let zero = HiddenLayer {
            weights: DMatrix::zeros(1, 1),
            biases: DVector::zeros(1),
            activation: Activation::Sigmoid,
        };
        let layout = Layout {
            input_dim: 1,
            hidden_nodes: 1,
            direct_link: false,
            output_bias: false,
        };
        let d = build_design_matrix(&DMatrix::from_element(1, 1, 3.0), &zero, layout).unwrap();
        assert_eq!(d.h[(0, 0)], 0.5);

        let cfg = RvflConfig {
            hidden_nodes: 4,
            output_bias: true,
            ..Default::default()
        };
        let hidden = init_hidden_layer(2, &cfg).unwrap();
        let d = build_design_matrix(&x, &hidden, cfg.layout(2)).unwrap();
        assert_eq!(d.h.ncols(), 2 + 4 + 1);
        assert!(d.h.column(6).iter().all(|v| *v == 1.0));
        let expect = Activation::Sigmoid.apply(hidden.weights.row(1).dot(&x.row(2)) + hidden.biases[1]);
        assert!((d.h[(2, 3)] - expect).abs() < 1e-15);

        assert!(matches!(
            build_design_matrix(&DMatrix::zeros(2, 3), &hidden, cfg.layout(2)),
            Err(RvflError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn diagonal_ridge_system() {
        let h = DMatrix::identity(2, 2);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let s = fit_output_weights(&h, &y, 1.0, SolverBranch::Auto).unwrap();
        assert!((s.beta - DMatrix::from_column_slice(2, 1, &[0.5, 1.0])).amax() < 1e-15);
        let zero = fit_output_weights(&h, &DMatrix::zeros(2, 1), 1.0, SolverBranch::Auto).unwrap();
        assert!(zero.beta.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = random_matrix(20, 5, &mut rng);
        let y = random_matrix(20, 1, &mut rng);
        let closed = fit_output_weights(&h, &y, 10.0, SolverBranch::Auto).unwrap();
        let iterative = gradient_descent(&h, &y, 10.0);
        assert!((closed.beta - iterative).amax() < 1e-6);
    }

    #[test]
    fn branch_selection_follows_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_matrix(6, 1, &mut rng);
        let tall = fit_output_weights(&random_matrix(6, 4, &mut rng), &y, 1.0, SolverBranch::Auto).unwrap();
        assert_eq!((tall.branch, tall.system_dim), (SolverBranch::Primal, 4));
        let wide = fit_output_weights(&random_matrix(6, 9, &mut rng), &y, 1.0, SolverBranch::Auto).unwrap();
        assert_eq!((wide.branch, wide.system_dim), (SolverBranch::Dual, 6));
    }

    #[test]
    fn solver_rejects_bad_input() {
        let h = DMatrix::from_element(2, 2, f64::NAN);
        let y = DMatrix::zeros(2, 1);
        assert_eq!(
            fit_output_weights(&h, &y, 1.0, SolverBranch::Auto).unwrap_err(),
            RvflError::NonFinite("design matrix")
        );
        assert!(fit_output_weights(&DMatrix::zeros(2, 2), &y, 0.0, SolverBranch::Auto).is_err());
        assert!(matches!(
            fit_output_weights(&DMatrix::zeros(3, 2), &y, 1.0, SolverBranch::Auto),
            Err(RvflError::RowMismatch { .. })
        ));
    }

    #[test]
    fn linear_model_without_hidden_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(30, 3, &mut rng);
        let y = random_matrix(30, 1, &mut rng);
        let cfg = RvflConfig {
            hidden_nodes: 0,
            c: 5.0,
            ..Default::default()
        };
        let m = fit(&x, &y, &cfg).unwrap();
        let yhat = m.predict(&x).unwrap();
        assert_eq!(yhat, &x * m.beta());
        let one = m.predict(&x.rows(0, 1).into_owned()).unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert!(matches!(
            m.predict(&DMatrix::zeros(1, 4)),
            Err(RvflError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn interpolates_when_overparameterized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(15, 2, &mut rng);
        let y = random_matrix(15, 1, &mut rng);
        let cfg = RvflConfig {
            hidden_nodes: 40,
            activation: Activation::Sine,
            input_scale: 10.0,
            c: 1e10,
            seed: 3,
            ..Default::default()
        };
        let m = fit(&x, &y, &cfg).unwrap();
        assert_eq!(m.solution.branch, SolverBranch::Dual);
        assert!((m.predict(&x).unwrap() - y).amax() < 1e-6);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(25, 4, &mut rng);
        let y = random_matrix(25, 1, &mut rng);
        let cfg = RvflConfig {
            hidden_nodes: 10,
            activation: Activation::Tribas,
            seed: 77,
            ..Default::default()
        };
        assert_eq!(fit(&x, &y, &cfg).unwrap(), fit(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = RvflConfig {
            hidden_nodes: 0,
            direct_link: false,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(RvflError::Config(_))));
        assert!(RvflConfig {
            c: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RvflConfig {
            input_scale: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn scaled_fit_applies_scaler_at_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_matrix(40, 3, &mut rng) * 100.0;
        let y = random_matrix(40, 1, &mut rng);
        let cfg = RvflConfig::default();
        let m = fit_scaled(&x, &y, &cfg, ScalerKind::Zscore).unwrap();
        let xs = series::apply_scaler(&m.scaler, &x).unwrap();
        let plain = fit(&xs, &y, &cfg).unwrap();
        assert_eq!(m.predict(&x).unwrap(), plain.predict(&xs).unwrap());
    }

    #[test]
    fn json_round_trip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(30, 4, &mut rng);
        let y = random_matrix(30, 1, &mut rng);
        let cfg = RvflConfig {
            hidden_nodes: 12,
            activation: Activation::Selu,
            output_bias: true,
            seed: 5,
            ..Default::default()
        };
        let m = fit_scaled(&x, &y, &cfg, ScalerKind::Minmax).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: RvflModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closed_form_is_a_minimum(seed in any::<u64>(), n in 3usize..25, p in 1usize..12,
                                    c in prop::sample::select(vec![0.1, 1.0, 100.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(n, p, &mut rng);
            let y = random_matrix(n, 1, &mut rng);
            let s = fit_output_weights(&h, &y, c, SolverBranch::Auto).unwrap();
            let best = objective(&h, &y, &s.beta, c);
            for _ in 0..8 {
                let mut delta = random_matrix(p, 1, &mut rng);
                delta *= 1e-3 / delta.norm();
                prop_assert!(objective(&h, &y, &(&s.beta + delta), c) >= best);
            }
        }

        #[test]
        fn primal_and_dual_agree(seed in any::<u64>(), n in 2usize..30, p in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(n, p, &mut rng);
            let y = random_matrix(n, 1, &mut rng);
            let a = fit_output_weights(&h, &y, 1.0, SolverBranch::Primal).unwrap();
            let b = fit_output_weights(&h, &y, 1.0, SolverBranch::Dual).unwrap();
            prop_assert!((a.beta - b.beta).amax() < 1e-8);
        }
    }
}
