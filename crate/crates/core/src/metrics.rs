//! Quality metrics and divergences.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reported SI-SDR values are clamped to `[-SISDR_CAP_DB, SISDR_CAP_DB]`.
pub const SISDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sisdr_db: f64,
    pub is_divergence: f64,
    pub notes: String,
}

fn ratio_db(target: f64, distortion: f64) -> f64 {
    if distortion <= 0.0 {
        return if target > 0.0 {
            SISDR_CAP_DB
        } else {
            -SISDR_CAP_DB
        };
    }
    if target <= 0.0 {
        return -SISDR_CAP_DB;
    }
    (10.0 * (target / distortion).log10()).clamp(-SISDR_CAP_DB, SISDR_CAP_DB)
}

/// Scale-invariant SDR in dB of `estimate` against `reference`.
pub fn sisdr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape(format!(
            "sisdr needs equal non-empty lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r.as_f64().powi(2)).sum();
    if ref_energy == 0.0 {
        return Err(Error::Domain("reference signal is all zeros".into()));
    }
    let dot: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| r.as_f64() * e.as_f64())
        .sum();
    let alpha = dot / ref_energy;
    let mut target = 0.0;
    let mut distortion = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r.as_f64();
        target += t * t;
        distortion += (t - e.as_f64()).powi(2);
    }
    Ok(ratio_db(target, distortion))
}

/// SI-SDR on complex STFT coefficients, with a real projection gain
/// (the time-domain inner product maps to the real part of the spectral one).
pub fn sisdr_complex<T: Real>(reference: &[Complex<T>], estimate: &[Complex<T>]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape("sisdr needs equal non-empty lengths".into()));
    }
    let widen = |z: &Complex<T>| Complex::new(z.re.as_f64(), z.im.as_f64());
    let ref_energy: f64 = reference.iter().map(|r| widen(r).norm_sqr()).sum();
    if ref_energy == 0.0 {
        return Err(Error::Domain("reference signal is all zeros".into()));
    }
    let dot: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (widen(e) * widen(r).conj()).re)
        .sum();
    let alpha = dot / ref_energy;
    let mut target = 0.0;
    let mut distortion = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        let t = widen(r) * alpha;
        target += t.norm_sqr();
        distortion += (t - widen(e)).norm_sqr();
    }
    Ok(ratio_db(target, distortion))
}

/// Itakura-Saito divergence `sum a/b - ln(a/b) - 1`.
pub fn is_divergence<T: Real>(power_a: &[T], power_b: &[T]) -> Result<f64> {
    if power_a.len() != power_b.len() {
        return Err(Error::Shape(format!(
            "IS divergence needs equal shapes, got {} and {}",
            power_a.len(),
            power_b.len()
        )));
    }
    let mut total = 0.0;
    for (i, (a, b)) in power_a.iter().zip(power_b).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Domain(format!(
                "IS divergence needs positive entries, got ({a}, {b}) at {i}"
            )));
        }
        let r = a / b;
        total += r - r.ln() - 1.0;
    }
    Ok(total)
}

/// KL divergence of a diagonal Gaussian from the standard normal:
/// `1/2 sum var + mean^2 - 1 - ln var`.
pub fn kl_diag_gauss<T: Real>(mean_q: &[T], var_q: &[T]) -> Result<f64> {
    if mean_q.len() != var_q.len() {
        return Err(Error::Shape(format!(
            "KL needs equal shapes, got {} and {}",
            mean_q.len(),
            var_q.len()
        )));
    }
    let mut total = 0.0;
    for (i, (m, v)) in mean_q.iter().zip(var_q).enumerate() {
        let (m, v) = (m.as_f64(), v.as_f64());
        if !(v > 0.0) || !v.is_finite() || !m.is_finite() {
            return Err(Error::Domain(format!(
                "KL needs a positive variance, got {v} at {i}"
            )));
        }
        total += v + m * m - 1.0 - v.ln();
    }
    Ok(0.5 * total)
}

/// Shared loss test vectors for the prior trainer.
pub mod fixtures {
    use serde::{Deserialize, Serialize};

    use super::{is_divergence, kl_diag_gauss};
    use crate::error::Result;

    pub const FIXTURE_VERSION: u32 = 1;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LossInputs {
        /// Clean power `|S|^2`, `F x N`, rows are bands.
        pub s_power: Vec<Vec<f64>>,
        /// Decoder variance, `F x N`.
        pub decoder_var: Vec<Vec<f64>>,
        /// Encoder posterior mean, `D x N`.
        pub enc_mean: Vec<Vec<f64>>,
        /// Encoder posterior variance, `D x N`.
        pub enc_var: Vec<Vec<f64>>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LossExpected {
        pub is_divergence: f64,
        pub kl_diag_gauss: f64,
        pub elbo_loss: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LossVector {
        pub name: String,
        pub inputs: LossInputs,
        pub expected: LossExpected,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LossFixtureFile {
        pub version: u32,
        pub tolerance: f64,
        pub vectors: Vec<LossVector>,
    }

    fn flat(m: &[Vec<f64>]) -> Vec<f64> {
        m.iter().flatten().copied().collect()
    }

    impl LossInputs {
        pub fn evaluate(&self) -> Result<LossExpected> {
            let is = is_divergence(&flat(&self.s_power), &flat(&self.decoder_var))?;
            let kl = kl_diag_gauss(&flat(&self.enc_mean), &flat(&self.enc_var))?;
            Ok(LossExpected {
                is_divergence: is,
                kl_diag_gauss: kl,
                elbo_loss: is + kl,
            })
        }
    }

    /// Deterministic pseudo-random matrix with entries in `[lo, hi)`.
    fn matrix(rows: usize, cols: usize, lo: f64, hi: f64, state: &mut u64) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| {
                        // splitmix64
                        *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
                        let mut z = *state;
                        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                        z = (z ^ (z >> 27)).wrapping_mul(0x94D1_049B_B133_111E);
                        z ^= z >> 31;
                        let u = (z >> 11) as f64 / (1u64 << 53) as f64;
                        // round-trip safe decimal
                        let v = lo + (hi - lo) * u;
                        (v * 1e6).round() / 1e6
                    })
                    .collect()
            })
            .collect()
    }

    /// The fixture set shipped in `fixtures/loss_vectors.json`.
    pub fn generate(seed: u64) -> Result<LossFixtureFile> {
        let mut state = seed;
        let mut vectors = Vec::new();

        let unit = LossInputs {
            s_power: vec![vec![1.0, 2.0, 0.5]],
            decoder_var: vec![vec![1.0, 2.0, 0.5]],
            enc_mean: vec![vec![0.0, 0.0, 0.0]],
            enc_var: vec![vec![1.0, 1.0, 1.0]],
        };
        let scalar = LossInputs {
            s_power: vec![vec![2.0]],
            decoder_var: vec![vec![1.0]],
            enc_mean: vec![vec![1.0]],
            enc_var: vec![vec![1.0]],
        };
        for (name, inputs) in [("identity", unit), ("scalar", scalar)] {
            let expected = inputs.evaluate()?;
            vectors.push(LossVector {
                name: name.into(),
                inputs,
                expected,
            });
        }
        for (i, (f, d, n)) in [(4usize, 3usize, 5usize), (8, 4, 6), (16, 32, 3)]
            .into_iter()
            .enumerate()
        {
            let inputs = LossInputs {
                s_power: matrix(f, n, 1e-3, 10.0, &mut state),
                decoder_var: matrix(f, n, 1e-3, 10.0, &mut state),
                enc_mean: matrix(d, n, -2.0, 2.0, &mut state),
                enc_var: matrix(d, n, 0.05, 3.0, &mut state),
            };
            let expected = inputs.evaluate()?;
            vectors.push(LossVector {
                name: format!("random_{}", i + 1),
                inputs,
                expected,
            });
        }
        Ok(LossFixtureFile {
            version: FIXTURE_VERSION,
            tolerance: 1e-6,
            vectors,
        })
    }
}
