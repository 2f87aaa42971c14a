//! MAP dereverberation of single-channel speech.
//!
//! The reverberant STFT is modelled band by band as a causal convolution of
//! the clean STFT with a short convolutive transfer function (CTF) plus
//! white complex Gaussian noise. Given a per-bin prior variance for the
//! clean speech, [`em::run_em`] alternates exact Gaussian posterior
//! inference with closed-form updates of the CTF and noise power.
//!
//! Numeric code is generic over [`Real`] (`f32`, `f64`); the aliases below
//! name the common instantiations.

// `!(x > 0)` is used on purpose so that NaN is rejected too; banded kernels
// index several arrays per loop and read better with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod banded;
pub mod ctf;
pub mod em;
pub mod error;
pub mod metrics;
pub mod prior;
pub mod scalar;
pub mod stft;
pub mod wav;

pub use ctf::{
    apply_ctf, build_banded_convolution, observation_loglik, BandedLowerToeplitz, CtfFilter,
    NoiseVariance,
};
pub use em::{
    e_step, init_state, m_step_ctf, m_step_noise, run_em, EmConfig, EmState, IterationRecord,
    PosteriorStats,
};
pub use error::{Error, Result};
pub use prior::{heuristic_prior, load_prior, save_prior, PriorVariance};
pub use scalar::Real;
pub use stft::{analyze, segment, synthesize, Framing, Segment, Spectrogram, Waveform};

pub use num_complex::Complex;

pub type Complex32 = Complex<f32>;
pub type Complex64 = Complex<f64>;

pub type Waveform32 = Waveform<f32>;
pub type Waveform64 = Waveform<f64>;
pub type Spectrogram32 = Spectrogram<f32>;
pub type Spectrogram64 = Spectrogram<f64>;
pub type CtfFilter32 = CtfFilter<f32>;
pub type CtfFilter64 = CtfFilter<f64>;
pub type PriorVariance32 = PriorVariance<f32>;
pub type PriorVariance64 = PriorVariance<f64>;
pub type EmConfig32 = EmConfig<f32>;
pub type EmConfig64 = EmConfig<f64>;
pub type EmState32 = EmState<f32>;
pub type EmState64 = EmState<f64>;
pub type PosteriorStats32 = PosteriorStats<f32>;
pub type PosteriorStats64 = PosteriorStats<f64>;
