//! RIFF/WAVE reading and writing for multi-channel signals.
//!
//! Supports 16-bit integer PCM and 32-bit IEEE float. WAV channel `c` maps to
//! signal channel `c`.

use std::path::Path;

use thiserror::Error;

use crate::signal::{MultiChannelSignal, SignalError};

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav i/o: {0}")]
    Hound(#[from] hound::Error),
    #[error("unsupported wav encoding: {bits}-bit {format}")]
    Unsupported { bits: u16, format: &'static str },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Int16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelSignal, WavError> {
    let reader = hound::WavReader::open(path)?;
    read_from(reader)
}

fn read_from<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<MultiChannelSignal, WavError> {
    let spec = reader.spec();
    let num_channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, bits) => return Err(WavError::Unsupported { bits, format: "integer" }),
        (hound::SampleFormat::Float, bits) => return Err(WavError::Unsupported { bits, format: "float" }),
    };
    let frames = interleaved.len() / num_channels.max(1);
    let mut channels = vec![Vec::with_capacity(frames); num_channels];
    for frame in interleaved.chunks_exact(num_channels) {
        for (ch, v) in channels.iter_mut().zip(frame) {
            ch.push(*v);
        }
    }
    Ok(MultiChannelSignal::new(channels, spec.sample_rate)?)
}

pub fn write_wav(
    path: impl AsRef<Path>,
    signal: &MultiChannelSignal,
    format: SampleFormat,
) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: signal.num_channels() as u16,
        sample_rate: signal.sample_rate(),
        bits_per_sample: match format {
            SampleFormat::Int16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Int16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for t in 0..signal.num_frames() {
        for c in 0..signal.num_channels() {
            let v = signal.channel(c)[t];
            match format {
                SampleFormat::Int16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                SampleFormat::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo() -> MultiChannelSignal {
        let a: Vec<f64> = (0..100).map(|t| (t as f64 * 0.1).sin() * 0.5).collect();
        let b: Vec<f64> = (0..100).map(|t| (t as f64 * 0.03).cos() * 0.25).collect();
        MultiChannelSignal::new(vec![a, b], 16000).unwrap()
    }

    #[test]
    fn float_round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let sig = stereo();
        write_wav(&p, &sig, SampleFormat::Float32).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.num_channels(), 2);
        assert_eq!(back.sample_rate(), 16000);
        for c in 0..2 {
            for (x, y) in sig.channel(c).iter().zip(back.channel(c)) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn int16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let sig = stereo();
        write_wav(&p, &sig, SampleFormat::Int16).unwrap();
        let back = read_wav(&p).unwrap();
        for c in 0..2 {
            for (x, y) in sig.channel(c).iter().zip(back.channel(c)) {
                assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_24_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(WavError::Unsupported { bits: 24, .. })));
    }
}
