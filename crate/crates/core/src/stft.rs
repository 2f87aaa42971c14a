//! Hann-windowed STFT analysis and weighted overlap-add synthesis.
//!
//! Spectrograms are one-sided with the DC row split off: row `f` of the
//! band matrix holds DFT bin `f + 1`, so a window of length `W` yields
//! `W / 2` bands with the Nyquist bin in the last row. The DC row is kept
//! on the side (see [`Spectrogram::dc`]) so that analysis followed by
//! synthesis is lossless; spectrograms produced by the EM engine carry no
//! DC row and are synthesized with a zero DC component.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{is_finite, Real};

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// How frames are aligned against the waveform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framing {
    /// Pad by `W/2` on both ends so frame `n` is centered on sample `n * hop`.
    /// Reflection padding is used; signals no longer than `W/2` are zero padded.
    Centered,
    /// No padding: frame `n` covers samples `[n * hop, n * hop + W)`.
    Valid,
}

/// Complex `F x N` time-frequency matrix, stored band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    bins: Vec<Complex<T>>,
    n_bands: usize,
    n_frames: usize,
    window_len: usize,
    hop: usize,
    framing: Framing,
    signal_len: usize,
    dc: Option<Vec<Complex<T>>>,
}

impl<T: Real> Spectrogram<T> {
    /// All-zero spectrogram for the given STFT geometry (centered framing).
    pub fn zeros(n_frames: usize, window_len: usize, hop: usize) -> Result<Self> {
        check_geometry(window_len, hop)?;
        let n_bands = window_len / 2;
        Ok(Self {
            bins: vec![Complex::new(T::zero(), T::zero()); n_bands * n_frames],
            n_bands,
            n_frames,
            window_len,
            hop,
            framing: Framing::Centered,
            signal_len: default_signal_len(n_frames, window_len, hop, Framing::Centered),
            dc: None,
        })
    }

    /// Builds a spectrogram from band-major data (`bins[f * n_frames + n]`).
    pub fn from_bins(
        bins: Vec<Complex<T>>,
        n_frames: usize,
        window_len: usize,
        hop: usize,
    ) -> Result<Self> {
        let mut s = Self::zeros(0, window_len, hop)?;
        if bins.len() != s.n_bands * n_frames {
            return Err(Error::Shape(format!(
                "expected {} x {} bins, got {}",
                s.n_bands,
                n_frames,
                bins.len()
            )));
        }
        if bins.iter().any(|z| !is_finite(*z)) {
            return Err(Error::InvalidInput("non-finite spectrogram entry".into()));
        }
        s.bins = bins;
        s.n_frames = n_frames;
        s.signal_len = default_signal_len(n_frames, window_len, hop, Framing::Centered);
        Ok(s)
    }

    /// Same STFT geometry and length as `self`, new band data, no DC row.
    pub fn with_bins(&self, bins: Vec<Complex<T>>) -> Result<Self> {
        if bins.len() != self.bins.len() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {}",
                self.bins.len(),
                bins.len()
            )));
        }
        Ok(Self {
            bins,
            dc: None,
            ..self.clone()
        })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    /// Number of samples [`synthesize`] produces.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn set_signal_len(&mut self, len: usize) {
        self.signal_len = len;
    }

    /// The split-off DC row, if this spectrogram came from [`analyze`].
    pub fn dc(&self) -> Option<&[Complex<T>]> {
        self.dc.as_deref()
    }

    pub fn clear_dc(&mut self) {
        self.dc = None;
    }

    pub fn bins(&self) -> &[Complex<T>] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.bins
    }

    pub fn band(&self, f: usize) -> &[Complex<T>] {
        &self.bins[f * self.n_frames..(f + 1) * self.n_frames]
    }

    pub fn band_mut(&mut self, f: usize) -> &mut [Complex<T>] {
        let n = self.n_frames;
        &mut self.bins[f * n..(f + 1) * n]
    }

    pub fn bands(&self) -> impl Iterator<Item = &[Complex<T>]> {
        self.bins.chunks(self.n_frames.max(1)).take(self.n_bands)
    }

    pub fn get(&self, f: usize, n: usize) -> Complex<T> {
        self.bins[f * self.n_frames + n]
    }

    pub fn set(&mut self, f: usize, n: usize, v: Complex<T>) {
        self.bins[f * self.n_frames + n] = v;
    }

    /// `|X|^2` summed over all bins.
    pub fn energy(&self) -> T {
        self.bins.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> T {
        if self.bins.is_empty() {
            return T::zero();
        }
        self.energy() / T::lit(self.bins.len() as f64)
    }

    fn frames_slice(&self, start: usize, len: usize, pad_to: usize) -> Self {
        let zero = Complex::new(T::zero(), T::zero());
        let mut bins = Vec::with_capacity(self.n_bands * pad_to);
        for f in 0..self.n_bands {
            bins.extend_from_slice(&self.band(f)[start..start + len]);
            bins.extend(std::iter::repeat_n(zero, pad_to - len));
        }
        let dc = self.dc.as_ref().map(|dc| {
            let mut d = dc[start..start + len].to_vec();
            d.resize(pad_to, zero);
            d
        });
        Self {
            bins,
            n_bands: self.n_bands,
            n_frames: pad_to,
            window_len: self.window_len,
            hop: self.hop,
            framing: self.framing,
            signal_len: default_signal_len(pad_to, self.window_len, self.hop, self.framing),
            dc,
        }
    }
}

/// A fixed-length slice of a longer spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub spec: Spectrogram<T>,
    /// Frames that came from the source; the rest are zero padding.
    pub valid_frames: usize,
}

fn check_geometry(window_len: usize, hop: usize) -> Result<()> {
    if window_len < 2 || !window_len.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "window length must be even and at least 2, got {window_len}"
        )));
    }
    if hop == 0 || hop > window_len {
        return Err(Error::InvalidInput(format!(
            "hop must be in 1..={window_len}, got {hop}"
        )));
    }
    Ok(())
}

fn default_signal_len(n_frames: usize, window_len: usize, hop: usize, framing: Framing) -> usize {
    if n_frames == 0 {
        return 0;
    }
    match framing {
        Framing::Centered => (n_frames - 1) * hop + 1,
        Framing::Valid => (n_frames - 1) * hop + window_len,
    }
}

/// Periodic Hann window of length `len`.
pub fn hann<T: Real>(len: usize) -> Vec<T> {
    let step = T::TAU() / T::lit(len as f64);
    (0..len)
        .map(|i| T::lit(0.5) - T::lit(0.5) * (step * T::lit(i as f64)).cos())
        .collect()
}

fn pad_signal<T: Real>(x: &[T], half: usize) -> Vec<T> {
    let len = x.len();
    let mut out = Vec::with_capacity(len + 2 * half);
    if len > half {
        out.extend((1..=half).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.extend((0..half).map(|j| x[len - 2 - j]));
    } else {
        out.resize(half, T::zero());
        out.extend_from_slice(x);
        out.resize(len + 2 * half, T::zero());
    }
    out
}

/// STFT with centered framing (reflection padded by `window_len / 2`).
pub fn analyze<T: Real>(w: &Waveform<T>, window_len: usize, hop: usize) -> Result<Spectrogram<T>> {
    analyze_with(w, window_len, hop, Framing::Centered)
}

pub fn analyze_with<T: Real>(
    w: &Waveform<T>,
    window_len: usize,
    hop: usize,
    framing: Framing,
) -> Result<Spectrogram<T>> {
    check_geometry(window_len, hop)?;
    if w.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    w.validate()?;

    let padded;
    let signal: &[T] = match framing {
        Framing::Centered => {
            padded = pad_signal(&w.samples, window_len / 2);
            &padded
        }
        Framing::Valid => &w.samples,
    };
    if signal.len() < window_len {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than one {window_len}-sample frame",
            w.len()
        )));
    }
    let n_frames = 1 + (signal.len() - window_len) / hop;
    let n_bands = window_len / 2;

    let window = hann::<T>(window_len);
    let fft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_forward(window_len);
    let zero = Complex::new(T::zero(), T::zero());
    let mut bins = vec![zero; n_bands * n_frames];
    let mut dc = vec![zero; n_frames];
    let mut buf = vec![zero; window_len];
    let mut scratch = vec![zero; fft.get_inplace_scratch_len()];

    for n in 0..n_frames {
        let frame = &signal[n * hop..n * hop + window_len];
        for ((b, &x), &win) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * win, T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        dc[n] = buf[0];
        for f in 0..n_bands {
            bins[f * n_frames + n] = buf[f + 1];
        }
    }

    Ok(Spectrogram {
        bins,
        n_bands,
        n_frames,
        window_len,
        hop,
        framing,
        signal_len: w.len(),
        dc: Some(dc),
    })
}

/// Inverse STFT by weighted overlap-add, normalized by the summed squared window.
pub fn synthesize<T: Real>(s: &Spectrogram<T>, sample_rate: u32) -> Result<Waveform<T>> {
    check_geometry(s.window_len, s.hop)?;
    if s.n_bands != s.window_len / 2 {
        return Err(Error::Shape(format!(
            "{} bands do not match window length {}",
            s.n_bands, s.window_len
        )));
    }
    let wl = s.window_len;
    let half = wl / 2;
    let offset = match s.framing {
        Framing::Centered => half,
        Framing::Valid => 0,
    };
    let total = (s.n_frames.saturating_sub(1)) * s.hop + wl;
    let window = hann::<T>(wl);
    let ifft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_inverse(wl);
    let zero = Complex::new(T::zero(), T::zero());
    let mut acc = vec![T::zero(); total];
    let mut norm = vec![T::zero(); total];
    let mut buf = vec![zero; wl];
    let mut scratch = vec![zero; ifft.get_inplace_scratch_len()];
    let scale = T::one() / T::lit(wl as f64);

    for n in 0..s.n_frames {
        buf[0] =
            s.dc.as_ref()
                .map_or(zero, |dc| Complex::new(dc[n].re, T::zero()));
        for k in 1..half {
            let v = s.get(k - 1, n);
            buf[k] = v;
            buf[wl - k] = v.conj();
        }
        buf[half] = Complex::new(s.get(half - 1, n).re, T::zero());
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = n * s.hop;
        for i in 0..wl {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let tiny = T::epsilon();
    let samples = (0..s.signal_len)
        .map(|t| {
            let idx = t + offset;
            if idx < total && norm[idx] > tiny {
                acc[idx] / norm[idx]
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate,
    })
}

/// Splits `s` into non-overlapping segments of `frames_per_segment` frames,
/// zero padding the last one.
pub fn segment<T: Real>(s: &Spectrogram<T>, frames_per_segment: usize) -> Result<Vec<Segment<T>>> {
    if frames_per_segment == 0 {
        return Err(Error::InvalidInput(
            "frames per segment must be positive".into(),
        ));
    }
    let mut out = Vec::with_capacity(s.n_frames.div_ceil(frames_per_segment));
    let mut start = 0;
    while start < s.n_frames {
        let len = frames_per_segment.min(s.n_frames - start);
        out.push(Segment {
            spec: s.frames_slice(start, len, frames_per_segment),
            valid_frames: len,
        });
        start += len;
    }
    Ok(out)
}

/// Concatenates the valid frames of `segments` back into one spectrogram
/// shaped like `template`.
pub fn join_segments<T: Real>(
    template: &Spectrogram<T>,
    segments: &[Segment<T>],
) -> Result<Spectrogram<T>> {
    let total: usize = segments.iter().map(|s| s.valid_frames).sum();
    if total != template.n_frames {
        return Err(Error::Shape(format!(
            "segments hold {total} frames, template has {}",
            template.n_frames
        )));
    }
    let mut bins = Vec::with_capacity(template.bins.len());
    for f in 0..template.n_bands {
        for seg in segments {
            if seg.spec.n_bands != template.n_bands {
                return Err(Error::Shape("segment band count differs".into()));
            }
            bins.extend_from_slice(&seg.spec.band(f)[..seg.valid_frames]);
        }
    }
    template.with_bins(bins)
}
