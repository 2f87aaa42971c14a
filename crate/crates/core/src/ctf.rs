//! Convolutive transfer function (CTF) observation model.
//!
//! Each band is modelled as `X_f(n) = sum_p H_f(p) S_f(n - p) + W_f(n)` with
//! frames before the segment start treated as silence. The per-band
//! convolution matrix is lower-triangular banded Toeplitz and is only ever
//! handled through [`BandedLowerToeplitz`].

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{is_finite, Real};
use crate::stft::Spectrogram;

/// Per-band CTF coefficients, `F x (P + 1)`, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CtfFilter<T> {
    coeffs: Vec<Complex<T>>,
    n_bands: usize,
    taps: usize,
}

impl<T: Real> CtfFilter<T> {
    pub fn new(coeffs: Vec<Complex<T>>, n_bands: usize, taps: usize) -> Result<Self> {
        if taps == 0 {
            return Err(Error::InvalidInput("a CTF needs at least one tap".into()));
        }
        if coeffs.len() != n_bands * taps {
            return Err(Error::Shape(format!(
                "expected {n_bands} x {taps} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|z| !is_finite(*z)) {
            return Err(Error::InvalidInput("non-finite CTF coefficient".into()));
        }
        Ok(Self {
            coeffs,
            n_bands,
            taps,
        })
    }

    /// `H_f(0) = h0`, all later taps zero.
    pub fn impulse(n_bands: usize, order: usize, h0: Complex<T>) -> Self {
        let taps = order + 1;
        let mut coeffs = vec![Complex::new(T::zero(), T::zero()); n_bands * taps];
        for f in 0..n_bands {
            coeffs[f * taps] = h0;
        }
        Self {
            coeffs,
            n_bands,
            taps,
        }
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    /// Filter length `P + 1`.
    pub fn taps(&self) -> usize {
        self.taps
    }

    /// `P`.
    pub fn order(&self) -> usize {
        self.taps - 1
    }

    pub fn band(&self, f: usize) -> &[Complex<T>] {
        &self.coeffs[f * self.taps..(f + 1) * self.taps]
    }

    pub fn band_mut(&mut self, f: usize) -> &mut [Complex<T>] {
        &mut self.coeffs[f * self.taps..(f + 1) * self.taps]
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    /// Convolution operator for band `f` over `n` frames.
    pub fn operator(&self, f: usize, n: usize) -> BandedLowerToeplitz<'_, T> {
        BandedLowerToeplitz::new(self.band(f), n)
    }
}

/// Per-band noise power `sigma^2_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariance<T> {
    pub power: Vec<T>,
}

impl<T: Real> NoiseVariance<T> {
    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }
}

/// Implicit `N x N` lower-triangular Toeplitz matrix with `P + 1` nonzero
/// diagonals: entry `(i, j)` is `h[i - j]` when `0 <= i - j <= P`.
#[derive(Debug, Clone, Copy)]
pub struct BandedLowerToeplitz<'a, T> {
    coeffs: &'a [Complex<T>],
    n: usize,
}

impl<'a, T: Real> BandedLowerToeplitz<'a, T> {
    pub fn new(coeffs: &'a [Complex<T>], n: usize) -> Self {
        Self { coeffs, n }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        self.coeffs
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex<T> {
        if i >= j && i - j < self.coeffs.len() {
            self.coeffs[i - j]
        } else {
            Complex::new(T::zero(), T::zero())
        }
    }

    /// `y = H s`.
    pub fn apply(&self, s: &[Complex<T>], y: &mut [Complex<T>]) {
        debug_assert_eq!(s.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (n, out) in y.iter_mut().enumerate() {
            *out = self
                .coeffs
                .iter()
                .take(n + 1)
                .enumerate()
                .map(|(p, &h)| h * s[n - p])
                .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b);
        }
    }

    /// `y = H^H x`.
    pub fn apply_adjoint(&self, x: &[Complex<T>], y: &mut [Complex<T>]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (j, out) in y.iter_mut().enumerate() {
            *out = self
                .coeffs
                .iter()
                .take(self.n - j)
                .enumerate()
                .map(|(q, &h)| h.conj() * x[j + q])
                .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b);
        }
    }

    /// Dense row-major copy. Only meant for cross-checking small cases.
    pub fn to_dense(&self) -> Vec<Complex<T>> {
        let n = self.n;
        let mut m = vec![Complex::new(T::zero(), T::zero()); n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.entry(i, j);
            }
        }
        m
    }
}

/// Builds the convolution operator for one band (`P + 1` coefficients, `n` frames).
pub fn build_banded_convolution<T: Real>(
    h_f: &[Complex<T>],
    n: usize,
) -> Result<BandedLowerToeplitz<'_, T>> {
    if n == 0 {
        return Err(Error::Shape("convolution needs at least one frame".into()));
    }
    if h_f.is_empty() {
        return Err(Error::Shape(
            "convolution needs at least one coefficient".into(),
        ));
    }
    Ok(BandedLowerToeplitz::new(h_f, n))
}

/// Band-wise causal convolution of `s` with `h`.
pub fn apply_ctf<T: Real>(h: &CtfFilter<T>, s: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    if h.n_bands() != s.n_bands() {
        return Err(Error::Shape(format!(
            "filter has {} bands, spectrogram has {}",
            h.n_bands(),
            s.n_bands()
        )));
    }
    if s.n_frames() == 0 {
        return Err(Error::Shape("spectrogram has no frames".into()));
    }
    let n = s.n_frames();
    let mut out = vec![Complex::new(T::zero(), T::zero()); s.bins().len()];
    for (f, y) in out.chunks_mut(n).enumerate() {
        h.operator(f, n).apply(s.band(f), y);
    }
    s.with_bins(out)
}

/// `ln CN(x; H s, sigma2 I) = -N ln(pi sigma2) - |x - H s|^2 / sigma2`.
pub fn observation_loglik<T: Real>(
    x_f: &[Complex<T>],
    s_f: &[Complex<T>],
    h_f: &[Complex<T>],
    sigma2: T,
) -> Result<T> {
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if x_f.len() != s_f.len() {
        return Err(Error::Shape(format!(
            "observation has {} frames, source has {}",
            x_f.len(),
            s_f.len()
        )));
    }
    let n = x_f.len();
    let mut hs = vec![Complex::new(T::zero(), T::zero()); n];
    BandedLowerToeplitz::new(h_f, n).apply(s_f, &mut hs);
    let resid: T = x_f.iter().zip(&hs).map(|(x, y)| (x - y).norm_sqr()).sum();
    let nn = T::lit(n as f64);
    Ok(-nn * (T::PI() * sigma2).ln() - resid / sigma2)
}
