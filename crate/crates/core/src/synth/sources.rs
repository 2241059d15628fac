//! Dry source generators. Every generator returns unit-RMS signals.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Band-limited noise gated into syllable-length bursts.
    ModulatedNoise,
    /// Harmonic series with slight vibrato and slow amplitude drift.
    ToneComplex,
    /// Random excerpt from the configured WAV library.
    Wav,
}

impl std::str::FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "modulated_noise" => Ok(Self::ModulatedNoise),
            "tone_complex" => Ok(Self::ToneComplex),
            "wav" => Ok(Self::Wav),
            other => Err(format!("unknown source kind {other:?}")),
        }
    }
}

fn normalize(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Resonant band-pass noise under a burst envelope: bursts of 80-300 ms with
/// raised-cosine edges, separated by 30-200 ms gaps.
pub fn modulated_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let centre = rng.random_range(300.0..2500.0_f64).min(0.4 * sr);
    let q = rng.random_range(0.7..2.5);
    // RBJ band-pass biquad (constant peak gain).
    let w0 = 2.0 * PI * centre / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let x: f64 = StandardNormal.sample(rng);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(y);
    }

    let mut envelope = vec![0.0; len];
    let mut pos = ((rng.random_range(0.0..0.1) * sr) as usize).min(len / 4);
    while pos < len {
        let burst = (rng.random_range(0.08..0.3) * sr) as usize;
        let level = rng.random_range(0.4..1.0);
        let ramp = (burst / 4).max(1);
        for i in 0..burst.min(len - pos) {
            let edge = if i < ramp {
                0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos())
            } else if burst - i <= ramp {
                0.5 * (1.0 - (PI * (burst - i) as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            envelope[pos + i] = level * edge;
        }
        pos += burst + (rng.random_range(0.03..0.2) * sr) as usize;
    }
    normalize(out.iter().zip(&envelope).map(|(x, e)| x * e).collect())
}

/// Harmonic complex: fundamental 110-440 Hz, 3-6 harmonics below Nyquist
/// with 1/h amplitudes, 5 Hz vibrato and a slow amplitude drift.
pub fn tone_complex<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = rng.random_range(110.0..440.0);
    let harmonics = rng.random_range(3..=6usize);
    let vibrato_rate = rng.random_range(3.0..6.0);
    let vibrato_depth = rng.random_range(0.0..0.01);
    let drift_rate = rng.random_range(0.5..2.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let parts: Vec<(f64, f64, f64)> = (1..=harmonics)
        .filter(|&h| (h as f64) * f0 * (1.0 + vibrato_depth) < 0.45 * sr)
        .map(|h| {
            let amp = rng.random_range(0.5..1.0) / h as f64;
            (h as f64, amp, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut phase = 0.0;
    let out = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let inst = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
            phase += 2.0 * PI * inst / sr;
            let drift = 1.0 + 0.3 * (2.0 * PI * drift_rate * t + drift_phase).sin();
            drift * parts.iter().map(|(h, a, p)| a * (h * phase + p).sin()).sum::<f64>()
        })
        .collect();
    normalize(out)
}

/// Random `len`-sample excerpt of `signal`, rescaled to unit RMS.
pub fn wav_excerpt<R: Rng + ?Sized>(rng: &mut R, signal: &[f64], len: usize) -> Result<Vec<f64>, SynthError> {
    if signal.len() < len {
        return Err(SynthError::InvalidConfig(format!(
            "WAV source has {} samples, need {len}",
            signal.len()
        )));
    }
    let start = rng.random_range(0..=signal.len() - len);
    let excerpt = signal[start..start + len].to_vec();
    if excerpt.iter().all(|v| *v == 0.0) {
        return Err(SynthError::InvalidConfig("WAV excerpt is silent".into()));
    }
    Ok(normalize(excerpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn generators_are_unit_rms_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let x = modulated_noise(&mut a, 16000, 16000);
        assert_eq!(x, modulated_noise(&mut b, 16000, 16000));
        assert!((rms(&x) - 1.0).abs() < 1e-12);
        let y = tone_complex(&mut a, 16000, 16000);
        assert!((rms(&y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_bursts_leave_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = modulated_noise(&mut rng, 32000, 16000);
        let quiet = x.chunks(160).filter(|c| rms(c) < 1e-3).count();
        assert!(quiet > 0);
    }

    #[test]
    fn excerpt_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig: Vec<f64> = (0..100).map(|n| (n as f64).sin()).collect();
        assert_eq!(wav_excerpt(&mut rng, &sig, 100).unwrap().len(), 100);
        assert!(wav_excerpt(&mut rng, &sig, 101).is_err());
        assert!(wav_excerpt(&mut rng, &[0.0; 10], 5).is_err());
    }
}
