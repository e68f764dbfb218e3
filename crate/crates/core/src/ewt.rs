//! Empirical wavelet transform on a finite window.
//!
//! The one-sided magnitude spectrum is segmented at adaptively detected
//! boundaries, a bank of Meyer-type band filters is built around them, and
//! the signal is split into one component per band. Filters sum to exactly
//! one at every frequency, so the components add back to the input.

use std::cell::RefCell;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest signal accepted by the spectrum and the decomposition.
pub const MIN_SIGNAL_LEN: usize = 4;

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EwtError {
    #[error("signal of length {0} is shorter than {MIN_SIGNAL_LEN}")]
    TooShort(usize),
    #[error("band count must be at least 1")]
    ZeroBands,
    #[error("gamma {0} outside (0, 1)")]
    GammaOutOfRange(f64),
    #[error("boundaries must be strictly increasing inside (0, pi): {0:?}")]
    InvalidBoundaries(Vec<f64>),
    #[error("signal length {signal} does not match filter bank length {bank}")]
    LengthMismatch { signal: usize, bank: usize },
    #[error("components have unequal lengths")]
    RaggedComponents,
    #[error("no components to reconstruct")]
    NoComponents,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        }
    });
    plan.process(buf);
}

fn forward_dft(signal: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf
}

/// Magnitudes of the DFT on the one-sided grid `omega_k = 2 pi k / n`,
/// `k = 0..=n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    magnitudes: Vec<f64>,
    signal_len: usize,
}

impl Spectrum {
    /// Wrap precomputed magnitudes; `magnitudes.len()` must be `n/2 + 1`.
    pub fn from_magnitudes(magnitudes: Vec<f64>, signal_len: usize) -> Result<Self, EwtError> {
        if signal_len < MIN_SIGNAL_LEN {
            return Err(EwtError::TooShort(signal_len));
        }
        assert_eq!(magnitudes.len(), signal_len / 2 + 1, "one-sided grid size");
        assert!(magnitudes.iter().all(|m| *m >= 0.0), "magnitudes are non-negative");
        Ok(Self { magnitudes, signal_len })
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn frequency(&self, bin: usize) -> f64 {
        2.0 * PI * bin as f64 / self.signal_len as f64
    }
}

pub fn magnitude_spectrum(signal: &[f64]) -> Result<Spectrum, EwtError> {
    if signal.len() < MIN_SIGNAL_LEN {
        return Err(EwtError::TooShort(signal.len()));
    }
    let full = forward_dft(signal);
    let magnitudes = full[..signal.len() / 2 + 1].iter().map(|c| c.norm()).collect();
    Ok(Spectrum {
        magnitudes,
        signal_len: signal.len(),
    })
}

/// Segmentation frequencies, strictly increasing in `(0, pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwtBoundaries {
    omegas: Vec<f64>,
    /// Set when too few spectral maxima were found and the bands are uniform.
    pub fallback: bool,
}

impl EwtBoundaries {
    pub fn new(omegas: Vec<f64>) -> Result<Self, EwtError> {
        let inside = omegas.iter().all(|w| *w > 0.0 && *w < PI);
        let increasing = omegas.windows(2).all(|p| p[0] < p[1]);
        if !(inside && increasing) {
            return Err(EwtError::InvalidBoundaries(omegas));
        }
        Ok(Self {
            omegas,
            fallback: false,
        })
    }

    /// `bands - 1` boundaries splitting `(0, pi)` evenly.
    pub fn uniform(bands: usize) -> Result<Self, EwtError> {
        if bands == 0 {
            return Err(EwtError::ZeroBands);
        }
        let omegas = (1..bands).map(|i| PI * i as f64 / bands as f64).collect();
        Ok(Self { omegas, fallback: true })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn bands(&self) -> usize {
        self.omegas.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectOptions {
    /// Run peak picking on a 5-point moving average of the spectrum.
    pub smooth: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { smooth: true }
    }
}

fn moving_average5(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Bins that are local maxima of `s`. The DC bin counts when it exceeds its
/// neighbour; the Nyquist bin never counts. Plateaus report their left edge.
fn local_maxima(s: &[f64]) -> Vec<usize> {
    let last = s.len() - 1;
    let mut out = Vec::new();
    if last >= 1 && s[0] > s[1] {
        out.push(0);
    }
    for i in 1..last {
        if s[i] > s[i - 1] && s[i] >= s[i + 1] {
            out.push(i);
        }
    }
    out
}

pub fn detect_boundaries(spectrum: &Spectrum, bands: usize) -> Result<EwtBoundaries, EwtError> {
    detect_boundaries_with(spectrum, bands, DetectOptions::default())
}

/// Keep the `bands` largest local maxima of the (optionally smoothed)
/// spectrum and put one boundary at the lowest raw magnitude between each
/// consecutive pair. Falls back to uniform bands when there are not enough
/// maxima.
pub fn detect_boundaries_with(
    spectrum: &Spectrum,
    bands: usize,
    opts: DetectOptions,
) -> Result<EwtBoundaries, EwtError> {
    if bands == 0 {
        return Err(EwtError::ZeroBands);
    }
    if bands == 1 {
        return EwtBoundaries::new(Vec::new());
    }
    let raw = spectrum.magnitudes();
    let picked = if opts.smooth {
        moving_average5(raw)
    } else {
        raw.to_vec()
    };
    let mut maxima = local_maxima(&picked);
    if maxima.len() < bands {
        return EwtBoundaries::uniform(bands);
    }
    maxima.sort_by(|&a, &b| picked[b].total_cmp(&picked[a]).then(a.cmp(&b)));
    maxima.truncate(bands);
    maxima.sort_unstable();

    let omegas = maxima
        .windows(2)
        .map(|pair| {
            let (lo, hi) = (pair[0] + 1, pair[1]);
            let bin = (lo..hi)
                .min_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)))
                .expect("maxima are at least two bins apart");
            spectrum.frequency(bin)
        })
        .collect();
    EwtBoundaries::new(omegas)
}

/// Largest gamma for which neighbouring transition zones do not overlap.
pub fn max_gamma(boundaries: &EwtBoundaries) -> f64 {
    boundaries
        .omegas()
        .windows(2)
        .map(|p| (p[1] - p[0]) / (p[1] + p[0]))
        .fold(f64::INFINITY, f64::min)
}

/// Meyer smoothness polynomial, maps [0, 1] onto [0, 1].
fn meyer_beta(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x.powi(4) * (35.0 - 84.0 * x + 70.0 * x * x - 20.0 * x.powi(3))
}

/// Low-pass profile that is 1 below `(1-gamma) w`, 0 above `(1+gamma) w`
/// and a squared-cosine Meyer transition in between.
fn low_side(freq: f64, w: f64, gamma: f64) -> f64 {
    let lo = (1.0 - gamma) * w;
    let hi = (1.0 + gamma) * w;
    if freq <= lo {
        1.0
    } else if freq >= hi {
        0.0
    } else {
        let c = (FRAC_PI_2 * meyer_beta((freq - lo) / (2.0 * gamma * w))).cos();
        c * c
    }
}

/// Band filters over the full FFT grid of a length-`n` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EwtFilterBank {
    boundaries: EwtBoundaries,
    gamma: f64,
    /// True when the requested gamma was reduced to [`max_gamma`].
    pub gamma_clipped: bool,
    responses: Vec<Vec<f64>>,
}

impl EwtFilterBank {
    pub fn boundaries(&self) -> &EwtBoundaries {
        &self.boundaries
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn bands(&self) -> usize {
        self.responses.len()
    }

    pub fn len(&self) -> usize {
        self.responses[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn response(&self, band: usize) -> &[f64] {
        &self.responses[band]
    }

    pub fn responses(&self) -> &[Vec<f64>] {
        &self.responses
    }
}

pub fn build_filter_bank(boundaries: &EwtBoundaries, n: usize, gamma: f64) -> Result<EwtFilterBank, EwtError> {
    if n < MIN_SIGNAL_LEN {
        return Err(EwtError::TooShort(n));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(EwtError::GammaOutOfRange(gamma));
    }
    let bound = max_gamma(boundaries);
    let (gamma, gamma_clipped) = if gamma > bound { (bound, true) } else { (gamma, false) };

    // bin j and bin n-j share a frequency, so every response is symmetric
    let freqs: Vec<f64> = (0..n).map(|j| 2.0 * PI * j.min(n - j) as f64 / n as f64).collect();
    let lows: Vec<Vec<f64>> = boundaries
        .omegas()
        .iter()
        .map(|&w| freqs.iter().map(|&f| low_side(f, w, gamma)).collect())
        .collect();

    let bands = boundaries.bands();
    let mut responses = Vec::with_capacity(bands);
    for k in 0..bands {
        let r: Vec<f64> = (0..n)
            .map(|j| {
                let upper = if k + 1 < bands { lows[k][j] } else { 1.0 };
                let lower = if k > 0 { lows[k - 1][j] } else { 0.0 };
                upper - lower
            })
            .collect();
        responses.push(r);
    }
    Ok(EwtFilterBank {
        boundaries: boundaries.clone(),
        gamma,
        gamma_clipped,
        responses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwtDecomposition {
    pub components: Vec<Vec<f64>>,
    pub bank: Arc<EwtFilterBank>,
    /// Largest imaginary part discarded when taking the real components.
    pub max_imag_residue: f64,
}

/// Component `k` is the inverse DFT of `response_k * DFT(signal)`.
pub fn decompose(signal: &[f64], bank: Arc<EwtFilterBank>) -> Result<EwtDecomposition, EwtError> {
    let n = signal.len();
    if n != bank.len() {
        return Err(EwtError::LengthMismatch {
            signal: n,
            bank: bank.len(),
        });
    }
    let spectrum = forward_dft(signal);
    let scale = 1.0 / n as f64;
    let mut max_imag_residue = 0.0f64;
    let mut components = Vec::with_capacity(bank.bands());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for response in bank.responses() {
        for ((b, s), r) in buf.iter_mut().zip(&spectrum).zip(response) {
            *b = s * r;
        }
        fft_in_place(&mut buf, true);
        let mut comp = Vec::with_capacity(n);
        for c in &buf {
            max_imag_residue = max_imag_residue.max((c.im * scale).abs());
            comp.push(c.re * scale);
        }
        components.push(comp);
    }
    Ok(EwtDecomposition {
        components,
        bank,
        max_imag_residue,
    })
}

/// Detect boundaries on `signal` itself and decompose it into `bands` parts.
pub fn ewt(signal: &[f64], bands: usize, gamma: f64) -> Result<EwtDecomposition, EwtError> {
    let spectrum = magnitude_spectrum(signal)?;
    let boundaries = detect_boundaries(&spectrum, bands)?;
    let bank = build_filter_bank(&boundaries, signal.len(), gamma)?;
    decompose(signal, Arc::new(bank))
}

/// Elementwise sum of the components.
pub fn reconstruct(components: &[Vec<f64>]) -> Result<Vec<f64>, EwtError> {
    let first = components.first().ok_or(EwtError::NoComponents)?;
    if components.iter().any(|c| c.len() != first.len()) {
        return Err(EwtError::RaggedComponents);
    }
    let mut out = first.clone();
    for c in &components[1..] {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    Ok(out)
}
