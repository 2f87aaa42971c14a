#![allow(dead_code)]

//! Helpers shared by the integration tests: random instances and dense
//! reference computations built on nalgebra, independent of the banded
//! code paths under test.

use dereverb_core::{
    Complex64, CtfFilter64, EmState64, NoiseVariance, PosteriorStats64, PriorVariance64,
    Spectrogram64,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C = Complex64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Circular complex Gaussian sample with variance `var`.
pub fn cgauss(r: &mut ChaCha8Rng, var: f64) -> C {
    let s = (var / 2.0).sqrt();
    C::new(s * gauss(r), s * gauss(r))
}

pub fn cvec(r: &mut ChaCha8Rng, n: usize) -> Vec<C> {
    (0..n).map(|_| cgauss(r, 1.0)).collect()
}

pub fn dense_conv(h: &[C], n: usize) -> DMatrix<C> {
    DMatrix::from_fn(n, n, |i, j| {
        if i >= j && i - j < h.len() {
            h[i - j]
        } else {
            C::new(0.0, 0.0)
        }
    })
}

/// Posterior mean and covariance of `s` given `x = H s + w`, by explicit inversion.
pub fn dense_posterior(x: &[C], h: &[C], sigma2: f64, prior: &[f64]) -> (DVector<C>, DMatrix<C>) {
    let n = x.len();
    let hm = dense_conv(h, n);
    let hh = hm.adjoint();
    let mut prec = &hh * &hm / C::new(sigma2, 0.0);
    for i in 0..n {
        prec[(i, i)] += C::new(1.0 / prior[i], 0.0);
    }
    let cov = prec.try_inverse().expect("invertible precision");
    let xv = DVector::from_column_slice(x);
    let mean = &cov * (&hh * xv) / C::new(sigma2, 0.0);
    (mean, cov)
}

pub fn rel_err(a: C, b: C, scale: f64) -> f64 {
    (a - b).norm() / scale.max(f64::MIN_POSITIVE)
}

/// Known-answer dereverberation problem.
pub struct Synthetic {
    pub clean: Spectrogram64,
    pub observed: Spectrogram64,
    pub prior: PriorVariance64,
    pub ctf: CtfFilter64,
    pub noise: Vec<f64>,
}

/// Clean bins drawn from `CN(0, prior)` with a log-uniform prior spanning
/// four decades, filtered by a CTF with `h(0) = 1` and geometrically
/// decaying random-phase taps, plus white noise `snr_db` below the
/// reverberant signal in each band.
pub fn synthetic(
    seed: u64,
    n_bands: usize,
    n_frames: usize,
    order: usize,
    decay: f64,
    snr_db: f64,
) -> Synthetic {
    synthetic_with_range(seed, n_bands, n_frames, order, decay, snr_db, (-2.0, 2.0))
}

pub fn synthetic_with_range(
    seed: u64,
    n_bands: usize,
    n_frames: usize,
    order: usize,
    decay: f64,
    snr_db: f64,
    log10_range: (f64, f64),
) -> Synthetic {
    let mut r = rng(seed);
    let mut prior = Vec::with_capacity(n_bands * n_frames);
    let mut clean = Vec::with_capacity(n_bands * n_frames);
    for _ in 0..n_bands * n_frames {
        let lam = 10f64.powf(r.gen_range(log10_range.0..log10_range.1));
        prior.push(lam);
        clean.push(cgauss(&mut r, lam));
    }
    let mut taps = Vec::with_capacity(n_bands * (order + 1));
    for _ in 0..n_bands {
        taps.push(C::new(1.0, 0.0));
        for p in 1..=order {
            let phase = r.gen_range(0.0..std::f64::consts::TAU);
            taps.push(C::from_polar(decay.powi(p as i32), phase));
        }
    }
    let window_len = 2 * n_bands;
    let clean = Spectrogram64::from_bins(clean, n_frames, window_len, 1).unwrap();
    let ctf = CtfFilter64::new(taps, n_bands, order + 1).unwrap();
    let reverb = dereverb_core::apply_ctf(&ctf, &clean).unwrap();
    let mut noisy = reverb.bins().to_vec();
    let mut noise = Vec::with_capacity(n_bands);
    for f in 0..n_bands {
        let band = reverb.band(f);
        let p: f64 = band.iter().map(|z| z.norm_sqr()).sum::<f64>() / n_frames as f64;
        let s2 = p / 10f64.powf(snr_db / 10.0);
        noise.push(s2);
        for n in 0..n_frames {
            noisy[f * n_frames + n] += cgauss(&mut r, s2);
        }
    }
    Synthetic {
        observed: reverb.with_bins(noisy).unwrap(),
        clean,
        prior: PriorVariance64::new(prior, n_bands, n_frames, 1e-10).unwrap(),
        ctf,
        noise,
    }
}

pub fn ctf_rel_error(est: &CtfFilter64, truth: &CtfFilter64) -> f64 {
    let num: f64 = est
        .coeffs()
        .iter()
        .zip(truth.coeffs())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let den: f64 = truth.coeffs().iter().map(|b| b.norm_sqr()).sum();
    (num / den).sqrt()
}

/// Random well-posed EM state: unit-scale observation, random filter with a
/// dominant first tap, noise and prior spread over about a decade each way.
pub fn random_state(seed: u64, n_bands: usize, n_frames: usize, order: usize) -> EmState64 {
    let mut r = rng(seed);
    let observed = cvec(&mut r, n_bands * n_frames);
    let mut taps = Vec::with_capacity(n_bands * (order + 1));
    for _ in 0..n_bands {
        taps.push(C::new(1.0, 0.0) + cgauss(&mut r, 0.1));
        for _ in 0..order {
            taps.push(cgauss(&mut r, 0.3));
        }
    }
    let power = (0..n_bands)
        .map(|_| 10f64.powf(r.gen_range(-1.0..0.5)))
        .collect();
    let prior = (0..n_bands * n_frames)
        .map(|_| 10f64.powf(r.gen_range(-1.0..1.0)))
        .collect();
    EmState64 {
        ctf: CtfFilter64::new(taps, n_bands, order + 1).unwrap(),
        noise: NoiseVariance { power },
        prior: PriorVariance64::new(prior, n_bands, n_frames, 1e-10).unwrap(),
        observed: Spectrogram64::from_bins(observed, n_frames, 2 * n_bands, 1).unwrap(),
        noise_floor: 1e-12,
        history: Vec::new(),
        warnings: Vec::new(),
    }
}

/// Posterior covariance of band `f` as a dense matrix, zero outside the stored band.
pub fn band_cov_dense(post: &PosteriorStats64, f: usize) -> DMatrix<C> {
    let n = post.n_frames();
    DMatrix::from_fn(n, n, |i, j| post.cov_entry(f, i, j))
}

/// Stacked lag vector `[v(n), v(n-1), ..., v(n-p)]` with zeros before the start.
fn lagged(v: &DVector<C>, n: usize, p: usize) -> DVector<C> {
    DVector::from_fn(
        p + 1,
        |a, _| if a <= n { v[n - a] } else { C::new(0.0, 0.0) },
    )
}

/// CTF maximizing the expected complete-data likelihood of one band, written as
/// the row-vector normal equations `h^T R = sum_n X(n) mu_n^H` with
/// `R = sum_n (mu_n mu_n^H + Sigma_n)` over lag vectors, solved by dense LU.
pub fn dense_ctf_update(x: &[C], mean: &[C], cov: &DMatrix<C>, order: usize) -> Vec<C> {
    let n = x.len();
    let taps = order + 1;
    let mu = DVector::from_column_slice(mean);
    let mut r = DMatrix::<C>::zeros(taps, taps);
    let mut rhs = DVector::<C>::zeros(taps);
    for t in 0..n {
        let m = lagged(&mu, t, order);
        let mut block = DMatrix::<C>::zeros(taps, taps);
        for a in 0..taps.min(t + 1) {
            for b in 0..taps.min(t + 1) {
                block[(a, b)] = cov[(t - a, t - b)];
            }
        }
        r += &m * m.adjoint() + block;
        rhs += m.map(|z| z.conj()) * x[t];
    }
    // h^T R = rhs^T  <=>  R^T h = rhs
    r.transpose()
        .lu()
        .solve(&rhs)
        .expect("nonsingular normal equations")
        .as_slice()
        .to_vec()
}

/// `(|x - H mu|^2 + tr(H Sigma H^H)) / N` with dense matrices.
pub fn dense_noise_update(x: &[C], mean: &[C], cov: &DMatrix<C>, h: &[C]) -> f64 {
    let n = x.len();
    let hm = dense_conv(h, n);
    let resid = DVector::from_column_slice(x) - &hm * DVector::from_column_slice(mean);
    let trace = (&hm * cov * hm.adjoint()).trace().re;
    (resid.norm_squared() + trace) / n as f64
}
