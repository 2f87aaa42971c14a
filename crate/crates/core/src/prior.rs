//! Clean-speech prior variance providers and the on-disk prior format.
//!
//! The prior file is little-endian: the magic bytes `SPRV`, a `u32`
//! version (1), `u32` band count `F`, `u32` frame count `N`, then `F * N`
//! `f32` values with the band index outermost.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::{Segment, Spectrogram};

pub const PRIOR_MAGIC: &[u8; 4] = b"SPRV";
pub const PRIOR_VERSION: u32 = 1;
pub const PRIOR_HEADER_LEN: usize = 16;
pub const DEFAULT_PRIOR_FLOOR: f64 = 1e-10;

/// Positive `F x N` matrix of per-bin clean-speech variances, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorVariance<T> {
    var: Vec<T>,
    n_bands: usize,
    n_frames: usize,
}

impl<T: Real> PriorVariance<T> {
    /// Builds a prior, clamping every entry to at least `floor`.
    pub fn new(mut var: Vec<T>, n_bands: usize, n_frames: usize, floor: T) -> Result<Self> {
        if var.len() != n_bands * n_frames {
            return Err(Error::Shape(format!(
                "expected {n_bands} x {n_frames} prior entries, got {}",
                var.len()
            )));
        }
        for (i, v) in var.iter_mut().enumerate() {
            if !v.is_finite() || *v < T::zero() {
                return Err(Error::InvalidInput(format!(
                    "prior entry {v} at (f={}, n={}) is not a variance",
                    i / n_frames.max(1),
                    i % n_frames.max(1)
                )));
            }
            *v = v.max(floor);
        }
        Ok(Self {
            var,
            n_bands,
            n_frames,
        })
    }

    pub fn constant(n_bands: usize, n_frames: usize, value: T, floor: T) -> Result<Self> {
        Self::new(vec![value; n_bands * n_frames], n_bands, n_frames, floor)
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[T] {
        &self.var
    }

    pub fn band(&self, f: usize) -> &[T] {
        &self.var[f * self.n_frames..(f + 1) * self.n_frames]
    }

    pub fn get(&self, f: usize, n: usize) -> T {
        self.var[f * self.n_frames + n]
    }

    /// Cuts the prior along the same frame boundaries as `segments`,
    /// filling padded frames with `floor`.
    pub fn split_like(&self, segments: &[Segment<T>], floor: T) -> Result<Vec<Self>> {
        let total: usize = segments.iter().map(|s| s.valid_frames).sum();
        if total != self.n_frames {
            return Err(Error::Shape(format!(
                "prior has {} frames, spectrogram has {total}",
                self.n_frames
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(segments.len());
        for seg in segments {
            let len = seg.spec.n_frames();
            let mut var = Vec::with_capacity(self.n_bands * len);
            for f in 0..self.n_bands {
                var.extend_from_slice(&self.band(f)[start..start + seg.valid_frames]);
                var.resize((f + 1) * len, floor);
            }
            out.push(Self {
                var,
                n_bands: self.n_bands,
                n_frames: len,
            });
            start += seg.valid_frames;
        }
        Ok(out)
    }
}

/// Recursively smoothed periodogram of `x`:
/// `v(n) = (1 - a) v(n - 1) + a |x(n)|^2`, `v(0) = |x(0)|^2`, floored.
pub fn heuristic_prior<T: Real>(
    x: &Spectrogram<T>,
    smoothing: T,
    floor: T,
) -> Result<PriorVariance<T>> {
    if !(smoothing > T::zero() && smoothing <= T::one()) {
        return Err(Error::InvalidInput(format!(
            "smoothing must lie in (0, 1], got {smoothing}"
        )));
    }
    let keep = T::one() - smoothing;
    let mut var = Vec::with_capacity(x.bins().len());
    for band in x.bands() {
        let mut v = band.first().map_or(T::zero(), |z| z.norm_sqr());
        for z in band {
            v = keep * v + smoothing * z.norm_sqr();
            var.push(v.max(floor));
        }
    }
    PriorVariance::new(var, x.n_bands(), x.n_frames(), floor)
}

pub fn save_prior<T: Real>(p: &PriorVariance<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(PRIOR_HEADER_LEN + 4 * p.var.len());
    buf.extend_from_slice(PRIOR_MAGIC);
    buf.extend_from_slice(&PRIOR_VERSION.to_le_bytes());
    for dim in [p.n_bands, p.n_frames] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Shape(format!("dimension {dim} does not fit in u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in &p.var {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_prior<T: Real>(path: impl AsRef<Path>, floor: T) -> Result<PriorVariance<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_prior(&bytes, path, floor)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub(crate) fn decode_prior<T: Real>(
    bytes: &[u8],
    path: &Path,
    floor: T,
) -> Result<PriorVariance<T>> {
    if bytes.len() < PRIOR_HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != PRIOR_MAGIC {
        return Err(Error::format(path, "bad magic, expected SPRV"));
    }
    let version = read_u32(bytes, 4);
    if version != PRIOR_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let n_bands = read_u32(bytes, 8) as usize;
    let n_frames = read_u32(bytes, 12) as usize;
    let expected = n_bands
        .checked_mul(n_frames)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(PRIOR_HEADER_LEN))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {n_bands} x {n_frames}, found {}",
                bytes.len()
            ),
        ));
    }
    let mut var = Vec::with_capacity(n_bands * n_frames);
    for (i, chunk) in bytes[PRIOR_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                reason: format!("invalid variance {v}"),
                band: i / n_frames,
                frame: i % n_frames,
            });
        }
        var.push(T::lit(v as f64));
    }
    PriorVariance::new(var, n_bands, n_frames, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    fn spec_from_power(power: &[f64], n_frames: usize) -> Spectrogram<f64> {
        let bins = power.iter().map(|p| Complex::new(p.sqrt(), 0.0)).collect();
        Spectrogram::from_bins(bins, n_frames, 2 * power.len() / n_frames, 1).unwrap()
    }

    #[test]
    fn heuristic_hand_recursion() {
        let x = spec_from_power(&[4.0, 0.0], 2);
        let p = heuristic_prior(&x, 0.5, 1e-10).unwrap();
        assert_eq!(p.band(0), &[4.0, 2.0]);
    }

    #[test]
    fn heuristic_fixed_point_and_floor() {
        let x = spec_from_power(&[1.0; 40], 20);
        let p = heuristic_prior(&x, 0.3, 1e-10).unwrap();
        assert!(p.values().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let z = spec_from_power(&[0.0; 6], 3);
        let p = heuristic_prior(&z, 0.7, 1e-10).unwrap();
        assert!(p.values().iter().all(|&v| v == 1e-10));
        assert!(heuristic_prior(&z, 0.0, 1e-10).is_err());
        assert!(heuristic_prior(&z, 1.5, 1e-10).is_err());
    }

    #[test]
    fn heuristic_ignores_phase() {
        let mags = [1.0, 2.0, 0.5, 3.0];
        let a: Vec<_> = mags.iter().map(|&m| Complex::new(m, 0.0)).collect();
        let b: Vec<_> = mags
            .iter()
            .enumerate()
            .map(|(i, &m)| Complex::from_polar(m, i as f64 * 1.3))
            .collect();
        let sa = Spectrogram::from_bins(a, 4, 2, 1).unwrap();
        let sb = Spectrogram::from_bins(b, 4, 2, 1).unwrap();
        let pa = heuristic_prior(&sa, 0.4, 1e-10).unwrap();
        let pb = heuristic_prior(&sb, 0.4, 1e-10).unwrap();
        for (u, v) in pa.values().iter().zip(pb.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.sprv");
        let vals: Vec<f64> = vec![1., 2., 3., 4., 5., 6.];
        let p = PriorVariance::new(vals.clone(), 2, 3, 1e-10).unwrap();
        save_prior(&p, &path).unwrap();
        assert_eq!(load_prior::<f64>(&path, 1e-10).unwrap(), p);

        let big = PriorVariance::<f32>::constant(512, 320, 0.5, 1e-10).unwrap();
        save_prior(&big, &path).unwrap();
        assert_eq!(
            fs::metadata(&path).unwrap().len() as usize,
            PRIOR_HEADER_LEN + 512 * 320 * 4
        );
    }

    fn raw(n_bands: u32, n_frames: u32, vals: &[f32]) -> Vec<u8> {
        let mut b = b"SPRV".to_vec();
        for v in [1u32, n_bands, n_frames] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn zero_entry_is_clamped() {
        let p: PriorVariance<f64> =
            decode_prior(&raw(1, 3, &[1.0, 0.0, 2.0]), Path::new("x"), 1e-10).unwrap();
        assert_eq!(p.values(), &[1.0, 1e-10, 2.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = Path::new("x");
        let good = raw(2, 2, &[1.0; 4]);
        assert!(matches!(
            decode_prior::<f64>(&good[..good.len() - 1], p, 1e-10),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_prior::<f64>(&good[..10], p, 1e-10),
            Err(Error::Format { .. })
        ));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_prior::<f64>(&bad_magic, p, 1e-10),
            Err(Error::Format { .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_prior::<f64>(&bad_version, p, 1e-10),
            Err(Error::Format { .. })
        ));
        match decode_prior::<f64>(&raw(2, 2, &[1.0, 1.0, -3.0, 1.0]), p, 1e-10) {
            Err(Error::Data { band, frame, .. }) => assert_eq!((band, frame), (1, 0)),
            other => panic!("{other:?}"),
        }
        match decode_prior::<f64>(&raw(2, 2, &[1.0, f32::NAN, 1.0, 1.0]), p, 1e-10) {
            Err(Error::Data { band, frame, .. }) => assert_eq!((band, frame), (0, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_follows_segments() {
        let s = Spectrogram::<f64>::zeros(5, 4, 1).unwrap();
        let segs = crate::stft::segment(&s, 3).unwrap();
        let vals: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let p = PriorVariance::new(vals, 2, 5, 1e-10).unwrap();
        let parts = p.split_like(&segs, 1e-10).unwrap();
        assert_eq!(parts[0].values(), &[1., 2., 3., 6., 7., 8.]);
        assert_eq!(parts[1].values(), &[4., 5., 1e-10, 9., 10., 1e-10]);
    }
}
