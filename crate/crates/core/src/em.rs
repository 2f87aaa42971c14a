//! Expectation-maximization over the CTF observation model.
//!
//! Per band `f`, with prior variances `D_f = diag(sigma2_spch,f)` and noise
//! power `sigma2_f`, the posterior of the clean band is complex Gaussian
//! with precision `J_f = H_f^H H_f / sigma2_f + D_f^{-1}` and mean
//! `J_f^{-1} H_f^H X_f / sigma2_f`. `J_f` has bandwidth `P`, so the E-step
//! is a banded Cholesky factorization plus a selected inversion that yields
//! only the `P + 1` lower diagonals of the posterior covariance, which is
//! all either M-step reads.
//!
//! M-step reductions are accumulated in `f64` whatever the engine scalar.

use std::collections::BTreeSet;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::{BandedCholesky, BandedHermitian};
use crate::ctf::{BandedLowerToeplitz, CtfFilter, NoiseVariance};
use crate::error::{Error, Result};
use crate::prior::{PriorVariance, DEFAULT_PRIOR_FLOOR};
use crate::scalar::{narrow, widen, Real};
use crate::stft::Spectrogram;

type C64 = Complex<f64>;

const RIDGE_SCALE: f64 = 1e-10;
const RETRY_NOISE_GAIN: f64 = 1e3;

/// Tunables of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig<T> {
    /// CTF order `P`; filters have `P + 1` taps.
    pub order: usize,
    pub iterations: usize,
    /// Initial noise power is this factor times the per-band mean power.
    pub noise_init_scale: T,
    /// Initial first CTF tap; later taps start at zero.
    pub h0_init: Complex<T>,
    /// Noise floor as a fraction of the mean observed power.
    pub noise_floor_rel: T,
    pub prior_floor: T,
    /// Record objective values for every iteration.
    pub likelihood_tracking: bool,
    /// Worker threads for band-parallel work; `0` uses the global pool.
    pub workers: usize,
}

impl<T: Real> Default for EmConfig<T> {
    fn default() -> Self {
        Self {
            order: 30,
            iterations: 100,
            noise_init_scale: T::lit(1e3),
            h0_init: Complex::new(T::one(), T::zero()),
            noise_floor_rel: T::lit(1e-8),
            prior_floor: T::lit(DEFAULT_PRIOR_FLOOR),
            likelihood_tracking: true,
            workers: 0,
        }
    }
}

/// Posterior mean and the central band of the posterior covariance, per band.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats<T> {
    mean: Vec<Complex<T>>,
    cov_band: Vec<Complex<T>>,
    n_bands: usize,
    n_frames: usize,
    order: usize,
}

impl<T: Real> PosteriorStats<T> {
    /// Assembles posterior statistics from raw parts.
    ///
    /// `cov_band[(f * (order + 1) + d) * n_frames + n]` holds
    /// `Sigma_f(n, n - d)`; entries with `n < d` are ignored.
    pub fn from_parts(
        mean: Vec<Complex<T>>,
        cov_band: Vec<Complex<T>>,
        n_bands: usize,
        n_frames: usize,
        order: usize,
    ) -> Result<Self> {
        if mean.len() != n_bands * n_frames || cov_band.len() != n_bands * (order + 1) * n_frames {
            return Err(Error::Shape(
                "posterior parts have inconsistent sizes".into(),
            ));
        }
        Ok(Self {
            mean,
            cov_band,
            n_bands,
            n_frames,
            order,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn mean(&self) -> &[Complex<T>] {
        &self.mean
    }

    pub fn mean_band(&self, f: usize) -> &[Complex<T>] {
        &self.mean[f * self.n_frames..(f + 1) * self.n_frames]
    }

    fn cov_slice(&self, f: usize) -> &[Complex<T>] {
        let len = (self.order + 1) * self.n_frames;
        &self.cov_band[f * len..(f + 1) * len]
    }

    /// `Sigma_f(n, n - d)` for `d <= P`, `d <= n`.
    pub fn cov(&self, f: usize, d: usize, n: usize) -> Complex<T> {
        self.cov_slice(f)[d * self.n_frames + n]
    }

    /// `Sigma_f(i, j)` when `|i - j| <= P`, zero (not stored) otherwise.
    pub fn cov_entry(&self, f: usize, i: usize, j: usize) -> Complex<T> {
        let d = i.abs_diff(j);
        if d > self.order {
            return Complex::new(T::zero(), T::zero());
        }
        if i >= j {
            self.cov(f, d, i)
        } else {
            self.cov(f, d, j).conj()
        }
    }
}

/// One EM round as seen by the objective tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `ln p(X; psi)` with the prior fixed, for the parameters used by this
    /// round's E-step.
    pub log_marginal: f64,
    /// Parameter-dependent part of the expected complete-data
    /// log-likelihood under this round's posterior, before the M-step.
    pub surrogate_before: f64,
    /// Same objective after the M-step.
    pub surrogate_after: f64,
}

/// Everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct EmState<T> {
    pub ctf: CtfFilter<T>,
    pub noise: NoiseVariance<T>,
    pub prior: PriorVariance<T>,
    pub observed: Spectrogram<T>,
    /// Absolute noise floor derived from the observed power.
    pub noise_floor: T,
    pub history: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl<T: Real> EmState<T> {
    pub fn n_bands(&self) -> usize {
        self.observed.n_bands()
    }

    pub fn n_frames(&self) -> usize {
        self.observed.n_frames()
    }

    pub fn order(&self) -> usize {
        self.ctf.order()
    }
}

pub fn init_state<T: Real>(
    x: &Spectrogram<T>,
    prior: &PriorVariance<T>,
    cfg: &EmConfig<T>,
) -> Result<EmState<T>> {
    let (f_bands, n) = (x.n_bands(), x.n_frames());
    if prior.n_bands() != f_bands || prior.n_frames() != n {
        return Err(Error::Shape(format!(
            "prior is {} x {}, observation is {f_bands} x {n}",
            prior.n_bands(),
            prior.n_frames()
        )));
    }
    if cfg.order >= n {
        return Err(Error::Shape(format!(
            "CTF order {} needs more than {n} frames",
            cfg.order
        )));
    }
    let floor = (cfg.noise_floor_rel * x.mean_power()).max(T::min_positive_value().sqrt());
    let nn = T::lit(n as f64);
    let power = x
        .bands()
        .map(|b| {
            let e: T = b.iter().map(|z| z.norm_sqr()).sum();
            (cfg.noise_init_scale * e / nn).max(floor)
        })
        .collect();
    Ok(EmState {
        ctf: CtfFilter::impulse(f_bands, cfg.order, cfg.h0_init),
        noise: NoiseVariance { power },
        prior: prior.clone(),
        observed: x.clone(),
        noise_floor: floor,
        history: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Precision matrix `H^H H / sigma2 + diag(1 / prior)` in band storage.
fn band_precision<T: Real>(h: &[Complex<T>], sigma2: T, prior: &[T]) -> BandedHermitian<T> {
    let n = prior.len();
    let p = h.len() - 1;
    let mut j = BandedHermitian::zeros(n, p);
    let bw = j.bandwidth();
    let inv_s = T::one() / sigma2;
    let zero = Complex::new(T::zero(), T::zero());
    // full-length lag products; rows near the end see a truncated sum
    let full: Vec<Complex<T>> = (0..=bw)
        .map(|d| {
            (0..=p - d)
                .map(|q| h[q].conj() * h[q + d])
                .fold(zero, |a, b| a + b)
        })
        .collect();
    for i in 0..n {
        for d in 0..=bw.min(i) {
            let r = if i + (p - d) < n {
                full[d]
            } else {
                (0..=p - d)
                    .take_while(|q| i + q < n)
                    .map(|q| h[q].conj() * h[q + d])
                    .fold(zero, |a, b| a + b)
            };
            *j.lower_mut(i, d) = r * inv_s;
        }
        let diag = j.lower_mut(i, 0);
        *diag = Complex::new(diag.re + T::one() / prior[i], T::zero());
    }
    j
}

struct BandPosterior<T> {
    mean: Vec<Complex<T>>,
    cov: Vec<Complex<T>>,
}

fn band_e_step<T: Real>(
    x: &[Complex<T>],
    h: &[Complex<T>],
    sigma2: T,
    prior: &[T],
    order: usize,
) -> std::result::Result<BandPosterior<T>, usize> {
    let n = x.len();
    let precision = band_precision(h, sigma2, prior);
    let chol = precision.cholesky().map_err(|e| e.row)?;
    let mut mean = vec![Complex::new(T::zero(), T::zero()); n];
    BandedLowerToeplitz::new(h, n).apply_adjoint(x, &mut mean);
    let inv_s = T::one() / sigma2;
    mean.iter_mut().for_each(|m| *m *= inv_s);
    chol.solve(&mut mean);
    let mut cov = chol.selected_inverse().into_raw();
    cov.resize((order + 1) * n, Complex::new(T::zero(), T::zero()));
    Ok(BandPosterior { mean, cov })
}

/// Posterior statistics for every band under the current parameters.
pub fn e_step<T: Real>(state: &EmState<T>) -> Result<PosteriorStats<T>> {
    let (f_bands, n, p) = (state.n_bands(), state.n_frames(), state.order());
    if p >= n {
        return Err(Error::Shape(format!(
            "CTF order {p} needs more than {n} frames"
        )));
    }
    let bands: Vec<_> = (0..f_bands)
        .into_par_iter()
        .map(|f| {
            band_e_step(
                state.observed.band(f),
                state.ctf.band(f),
                state.noise.power[f],
                state.prior.band(f),
                p,
            )
            .map_err(|row| Error::Numerical { band: f, row })
        })
        .collect();
    let mut mean = Vec::with_capacity(f_bands * n);
    let mut cov_band = Vec::with_capacity(f_bands * (p + 1) * n);
    for b in bands {
        let b = b?;
        mean.extend(b.mean);
        cov_band.extend(b.cov);
    }
    PosteriorStats::from_parts(mean, cov_band, f_bands, n, p)
}

/// `G[a][b] = sum_n Sigma(n - a, n - b)` over frames with both indices valid,
/// row-major `(P+1) x (P+1)`.
fn cov_gram<T: Real>(post: &PosteriorStats<T>, f: usize) -> Vec<C64> {
    let (n, taps) = (post.n_frames, post.order + 1);
    let mut g = vec![C64::new(0.0, 0.0); taps * taps];
    for a in 0..taps {
        for b in 0..=a {
            let d = a - b;
            // i = n - a runs over 0..n-a; Sigma(i, i + d) = conj(Sigma(i + d, i))
            let s: C64 = (0..n - a.min(n))
                .map(|i| widen(post.cov(f, d, i + d)).conj())
                .sum();
            g[a * taps + b] = s;
            g[b * taps + a] = s.conj();
        }
    }
    g
}

/// `M[a][b] = sum_n mu(n - a) conj(mu(n - b))` and `c[a] = sum_n mu(n - a) conj(X(n))`.
fn mean_moments<T: Real>(mu: &[Complex<T>], x: &[Complex<T>], taps: usize) -> (Vec<C64>, Vec<C64>) {
    let n = mu.len();
    let mu: Vec<C64> = mu.iter().map(|&z| widen(z)).collect();
    let mut m = vec![C64::new(0.0, 0.0); taps * taps];
    let mut c = vec![C64::new(0.0, 0.0); taps];
    for a in 0..taps {
        for b in 0..=a {
            let d = a - b;
            let s: C64 = (0..n - a.min(n)).map(|i| mu[i] * mu[i + d].conj()).sum();
            m[a * taps + b] = s;
            m[b * taps + a] = s.conj();
        }
        c[a] = (a..n).map(|t| mu[t - a] * widen(x[t]).conj()).sum();
    }
    (m, c)
}

fn solve_hermitian(a: &[C64], rhs: &[C64], taps: usize) -> Option<Vec<C64>> {
    let mut band = BandedHermitian::<f64>::zeros(taps, taps - 1);
    for i in 0..taps {
        for d in 0..=i {
            *band.lower_mut(i, d) = a[i * taps + i - d];
        }
    }
    let chol: BandedCholesky<f64> = band.cholesky().ok()?;
    let mut x = rhs.to_vec();
    chol.solve(&mut x);
    x.iter()
        .all(|z| z.re.is_finite() && z.im.is_finite())
        .then_some(x)
}

/// Returns the new filter for band `f`, or `None` if the normal equations
/// could not be solved even after regularization.
fn band_ctf_update<T: Real>(
    post: &PosteriorStats<T>,
    x: &[Complex<T>],
    f: usize,
) -> (Option<Vec<Complex<T>>>, bool) {
    let taps = post.order + 1;
    let (mut a, c) = mean_moments(post.mean_band(f), x, taps);
    for (ai, gi) in a.iter_mut().zip(cov_gram(post, f)) {
        *ai += gi;
    }
    if let Some(u) = solve_hermitian(&a, &c, taps) {
        return (Some(u.iter().map(|z| narrow(z.conj())).collect()), false);
    }
    let trace: f64 = (0..taps).map(|i| a[i * taps + i].re).sum();
    let ridge = RIDGE_SCALE * trace / taps as f64;
    if !(ridge > 0.0) {
        return (None, true);
    }
    for i in 0..taps {
        a[i * taps + i] += ridge;
    }
    (
        solve_hermitian(&a, &c, taps).map(|u| u.iter().map(|z| narrow(z.conj())).collect()),
        true,
    )
}

fn ctf_update<T: Real>(
    state: &EmState<T>,
    post: &PosteriorStats<T>,
) -> (CtfFilter<T>, Vec<String>) {
    let taps = state.order() + 1;
    let results: Vec<_> = (0..state.n_bands())
        .into_par_iter()
        .map(|f| band_ctf_update(post, state.observed.band(f), f))
        .collect();
    let mut ctf = state.ctf.clone();
    let mut warnings = Vec::new();
    for (f, (h, regularized)) in results.into_iter().enumerate() {
        match h {
            Some(h) => ctf.band_mut(f).copy_from_slice(&h[..taps]),
            None => warnings.push(format!(
                "band {f}: CTF normal equations singular, filter kept"
            )),
        }
        if regularized {
            warnings.push(format!("band {f}: CTF normal equations regularized"));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    (ctf, warnings)
}

/// Closed-form CTF update maximizing the expected complete-data likelihood.
pub fn m_step_ctf<T: Real>(state: &EmState<T>, post: &PosteriorStats<T>) -> CtfFilter<T> {
    ctf_update(state, post).0
}

/// Expected residual energy `E|X - H S|^2 = |X - H mu|^2 + tr(H Sigma H^H)`.
fn expected_residual<T: Real>(
    post: &PosteriorStats<T>,
    x: &[Complex<T>],
    h: &[Complex<T>],
    f: usize,
) -> f64 {
    let n = x.len();
    let taps = h.len();
    let hw: Vec<C64> = h.iter().map(|&z| widen(z)).collect();
    let mu = post.mean_band(f);
    let mut resid = 0.0;
    for t in 0..n {
        let pred: C64 = (0..taps.min(t + 1)).map(|p| hw[p] * widen(mu[t - p])).sum();
        resid += (widen(x[t]) - pred).norm_sqr();
    }
    let g = cov_gram(post, f);
    let mut trace = 0.0;
    for a in 0..taps {
        for b in 0..taps {
            trace += (hw[a] * g[a * taps + b] * hw[b].conj()).re;
        }
    }
    resid + trace
}

/// Noise power update given the freshly estimated filter.
pub fn m_step_noise<T: Real>(
    state: &EmState<T>,
    post: &PosteriorStats<T>,
    ctf_new: &CtfFilter<T>,
) -> NoiseVariance<T> {
    let n = state.n_frames() as f64;
    let floor = state.noise_floor;
    let power = (0..state.n_bands())
        .into_par_iter()
        .map(|f| {
            let r = expected_residual(post, state.observed.band(f), ctf_new.band(f), f);
            T::lit(r / n).max(floor)
        })
        .collect();
    NoiseVariance { power }
}

/// `sum_f [-N ln(pi sigma2_f) - E|X_f - H_f S_f|^2 / sigma2_f]` under `post`.
pub fn expected_loglik<T: Real>(
    observed: &Spectrogram<T>,
    post: &PosteriorStats<T>,
    ctf: &CtfFilter<T>,
    noise: &NoiseVariance<T>,
) -> f64 {
    let n = observed.n_frames() as f64;
    let per_band: Vec<f64> = (0..observed.n_bands())
        .into_par_iter()
        .map(|f| {
            let s2 = noise.power[f].as_f64();
            let r = expected_residual(post, observed.band(f), ctf.band(f), f);
            -n * (std::f64::consts::PI * s2).ln() - r / s2
        })
        .collect();
    per_band.iter().sum()
}

/// Covariance of the observation with the clean signal integrated out:
/// `H diag(prior) H^H + sigma2 I`.
fn band_marginal_cov<T: Real>(h: &[Complex<T>], sigma2: T, prior: &[T]) -> BandedHermitian<f64> {
    let n = prior.len();
    let p = h.len() - 1;
    let mut c = BandedHermitian::<f64>::zeros(n, p);
    let bw = c.bandwidth();
    let hw: Vec<C64> = h.iter().map(|&z| widen(z)).collect();
    for i in 0..n {
        for d in 0..=bw.min(i) {
            let j = i - d;
            let v: C64 = (0..=j.min(p - d))
                .map(|t| hw[d + t] * prior[j - t].as_f64() * hw[t].conj())
                .sum();
            *c.lower_mut(i, d) = v;
        }
        let diag = c.lower_mut(i, 0);
        *diag = C64::new(diag.re + sigma2.as_f64(), 0.0);
    }
    c
}

/// `ln p(X; psi) = sum_f ln CN(X_f; 0, H_f D_f H_f^H + sigma2_f I)`.
pub fn log_marginal<T: Real>(state: &EmState<T>) -> Result<f64> {
    let n = state.n_frames();
    let per_band: Vec<Result<f64>> = (0..state.n_bands())
        .into_par_iter()
        .map(|f| {
            let cov =
                band_marginal_cov(state.ctf.band(f), state.noise.power[f], state.prior.band(f));
            let chol = cov.cholesky().map_err(|e| Error::Numerical {
                band: f,
                row: e.row,
            })?;
            let mut y: Vec<C64> = state.observed.band(f).iter().map(|&z| widen(z)).collect();
            chol.forward(&mut y);
            let quad: f64 = y.iter().map(|z| z.norm_sqr()).sum();
            Ok(-(n as f64) * std::f64::consts::PI.ln() - chol.log_det() - quad)
        })
        .collect();
    per_band.into_iter().sum()
}

fn e_step_with_retry<T: Real>(
    state: &mut EmState<T>,
    retried: &mut BTreeSet<usize>,
) -> Result<PosteriorStats<T>> {
    loop {
        match e_step(state) {
            Err(Error::Numerical { band, row }) if retried.insert(band) => {
                let raised =
                    (state.noise.power[band] * T::lit(RETRY_NOISE_GAIN)).max(state.noise_floor);
                let msg = format!(
                    "band {band}: factorization failed at row {row}, noise power raised to {raised:e}"
                );
                log::warn!("{msg}");
                state.warnings.push(msg);
                state.noise.power[band] = raised;
            }
            other => return other,
        }
    }
}

fn run_em_inner<T: Real>(
    x: &Spectrogram<T>,
    prior: &PriorVariance<T>,
    cfg: &EmConfig<T>,
) -> Result<(Spectrogram<T>, EmState<T>)> {
    let mut state = init_state(x, prior, cfg)?;
    let mut retried = BTreeSet::new();
    for iteration in 1..=cfg.iterations {
        let post = e_step_with_retry(&mut state, &mut retried)?;
        let tracked = if cfg.likelihood_tracking {
            Some((
                log_marginal(&state)?,
                expected_loglik(&state.observed, &post, &state.ctf, &state.noise),
            ))
        } else {
            None
        };
        let (ctf, warnings) = ctf_update(&state, &post);
        state.warnings.extend(warnings);
        let noise = m_step_noise(&state, &post, &ctf);
        state.ctf = ctf;
        state.noise = noise;
        if let Some((log_marginal, surrogate_before)) = tracked {
            state.history.push(IterationRecord {
                iteration,
                log_marginal,
                surrogate_before,
                surrogate_after: expected_loglik(&state.observed, &post, &state.ctf, &state.noise),
            });
        }
    }
    // posterior under the final parameters
    let post = e_step_with_retry(&mut state, &mut retried)?;
    let estimate = state.observed.with_bins(post.mean)?;
    Ok((estimate, state))
}

/// Runs `cfg.iterations` rounds of E-step, CTF update and noise update and
/// returns the posterior mean under the final parameters.
pub fn run_em<T: Real>(
    x: &Spectrogram<T>,
    prior: &PriorVariance<T>,
    cfg: &EmConfig<T>,
) -> Result<(Spectrogram<T>, EmState<T>)> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidInput(
            "at least one EM iteration is required".into(),
        ));
    }
    if cfg.workers == 0 {
        return run_em_inner(x, prior, cfg);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_em_inner(x, prior, cfg))
}
