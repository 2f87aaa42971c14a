//! Mono WAV ingestion (PCM16 or IEEE float32) and float32 output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::Waveform;

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono input, found {} channels", spec.channels),
        ));
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {fmt:?} with {bits} bits"),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `w` as mono IEEE float32.
pub fn write_wav<T: Real>(path: impl AsRef<Path>, w: &Waveform<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &w.samples {
        writer
            .write_sample(s.to_f32().unwrap_or(0.0))
            .map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}

/// Writes `w` as mono PCM16, clipping to [-1, 1).
pub fn write_wav_pcm16<T: Real>(path: impl AsRef<Path>, w: &Waveform<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &w.samples {
        let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}
