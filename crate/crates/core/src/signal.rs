//! Multi-channel waveforms, objective metrics and the mixture-consistency
//! projection.
//!
//! All metric arithmetic is done in `f64`. Signals are stored channel-major:
//! `channels[c][t]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default audio sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal must have at least one channel and one sample")]
    Empty,
    #[error("channel {channel} has {len} samples, expected {expected}")]
    RaggedChannels {
        channel: usize,
        len: usize,
        expected: usize,
    },
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate reference: reference has zero energy")]
    DegenerateReference,
    #[error("degenerate source: source signal has zero energy")]
    DegenerateSource,
}

/// A `T x C` time-domain waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSignal {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultiChannelSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::ZeroSampleRate);
        }
        let expected = channels.first().map(Vec::len).unwrap_or(0);
        if channels.is_empty() || expected == 0 {
            return Err(SignalError::Empty);
        }
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != expected {
                return Err(SignalError::RaggedChannels {
                    channel: c,
                    len: ch.len(),
                    expected,
                });
            }
            if let Some(index) = ch.iter().position(|v| !v.is_finite()) {
                return Err(SignalError::NonFinite { channel: c, index });
            }
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(num_channels: usize, num_frames: usize, sample_rate: u32) -> Result<Self, SignalError> {
        Self::new(vec![vec![0.0; num_frames]; num_channels], sample_rate)
    }

    /// Number of samples per channel (`T`).
    pub fn num_frames(&self) -> usize {
        self.channels[0].len()
    }

    /// Number of channels (`C`).
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_frames() == other.num_frames()
            && self.num_channels() == other.num_channels()
            && self.sample_rate == other.sample_rate
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), SignalError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(SignalError::ShapeMismatch(format!(
                "{}x{}@{} vs {}x{}@{}",
                self.num_frames(),
                self.num_channels(),
                self.sample_rate,
                other.num_frames(),
                other.num_channels(),
                other.sample_rate
            )))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, SignalError> {
        self.check_same_shape(other)?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self {
            channels,
            sample_rate: self.sample_rate,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SignalError> {
        self.check_same_shape(other)?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Ok(Self {
            channels,
            sample_rate: self.sample_rate,
        })
    }

    /// Keep only the listed channels, in the given order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self, SignalError> {
        let mut channels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ch = self.channels.get(i).ok_or_else(|| {
                SignalError::ShapeMismatch(format!(
                    "channel {i} requested from a {}-channel signal",
                    self.num_channels()
                ))
            })?;
            channels.push(ch.clone());
        }
        Self::new(channels, self.sample_rate)
    }

    /// Samples `start..start + len` of every channel, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|ch| {
                (start..start + len)
                    .map(|t| ch.get(t).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        Self {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.channels.iter().map(|c| energy(c)).sum()
    }
}

/// A stack of `M` same-shaped multi-channel signals (`T x C x M`).
///
/// Used both for separated estimates and for reference sources.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSet {
    signals: Vec<MultiChannelSignal>,
}

impl EstimateSet {
    pub fn new(signals: Vec<MultiChannelSignal>) -> Result<Self, SignalError> {
        let first = signals.first().ok_or(SignalError::Empty)?;
        for s in &signals[1..] {
            first.check_same_shape(s)?;
        }
        Ok(Self { signals })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.signals[0].num_frames()
    }

    pub fn num_channels(&self) -> usize {
        self.signals[0].num_channels()
    }

    pub fn sample_rate(&self) -> u32 {
        self.signals[0].sample_rate()
    }

    pub fn get(&self, m: usize) -> &MultiChannelSignal {
        &self.signals[m]
    }

    pub fn signals(&self) -> &[MultiChannelSignal] {
        &self.signals
    }

    pub fn into_signals(self) -> Vec<MultiChannelSignal> {
        self.signals
    }

    /// Channel `c` of source `m`.
    pub fn channel(&self, m: usize, c: usize) -> &[f64] {
        self.signals[m].channel(c)
    }

    /// Sum over all members.
    pub fn sum(&self) -> MultiChannelSignal {
        let mut acc = self.signals[0].clone();
        for s in &self.signals[1..] {
            for (a, b) in acc.channels.iter_mut().zip(&s.channels) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        acc
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self, SignalError> {
        let signals = self
            .signals
            .iter()
            .map(|s| s.select_channels(indices))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(signals)
    }
}

/// Parameters shared by the SNR-style metrics and losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Soft limit on the maximum SNR; the cap is `10 log10(1 / tau)`.
    pub tau: f64,
    /// Stabilizer for zero denominators.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    /// Largest value `thresholded_snr` can return.
    pub fn snr_cap_db(&self) -> f64 {
        10.0 * (1.0 / self.tau).log10()
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(reference: &[f64], estimate: &[f64]) -> Result<(), SignalError> {
    if reference.len() != estimate.len() {
        return Err(SignalError::ShapeMismatch(format!(
            "reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.is_empty() {
        return Err(SignalError::Empty);
    }
    Ok(())
}

/// Squared error `||estimate - reference||^2`.
pub fn squared_error(reference: &[f64], estimate: &[f64]) -> f64 {
    reference
        .iter()
        .zip(estimate)
        .map(|(y, e)| {
            let d = e - y;
            d * d
        })
        .sum()
}

/// Thresholded SNR in dB: `10 log10(|y|^2 / (|y_hat - y|^2 + tau |y|^2))`.
///
/// Training losses use the negation of this value.
pub fn thresholded_snr(reference: &[f64], estimate: &[f64], config: &LossConfig) -> Result<f64, SignalError> {
    check_lengths(reference, estimate)?;
    let ref_energy = energy(reference);
    if ref_energy <= 0.0 {
        return Err(SignalError::DegenerateReference);
    }
    Ok(thresholded_snr_from_energies(
        ref_energy,
        squared_error(reference, estimate),
        config.tau,
    ))
}

pub(crate) fn thresholded_snr_from_energies(ref_energy: f64, err_energy: f64, tau: f64) -> f64 {
    10.0 * (ref_energy / (err_energy + tau * ref_energy)).log10()
}

fn remove_mean(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Scale-invariant SNR in dB.
///
/// Both signals are mean-removed and the estimate is projected onto the
/// reference (`a = <y_hat, y> / |y|^2`). Target and noise energies are taken
/// relative to the estimate energy before `eps` is applied, so the value is
/// exactly invariant to rescaling the estimate and saturates at
/// `10 log10(1 / eps)` (80 dB for the default) for a perfect estimate. A
/// silent estimate scores `10 log10(eps)`.
pub fn si_snr(reference: &[f64], estimate: &[f64], config: &LossConfig) -> Result<f64, SignalError> {
    check_lengths(reference, estimate)?;
    let y = remove_mean(reference);
    let y_hat = remove_mean(estimate);
    let ref_energy = energy(&y);
    if ref_energy <= 0.0 {
        return Err(SignalError::DegenerateReference);
    }
    let est_energy = energy(&y_hat);
    if est_energy <= 0.0 {
        return Ok(10.0 * config.epsilon.log10());
    }
    let alpha = dot(&y_hat, &y) / ref_energy;
    let target = alpha * alpha * ref_energy / est_energy;
    let noise = y_hat
        .iter()
        .zip(&y)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum::<f64>()
        / est_energy;
    Ok(10.0 * (target / (noise + config.epsilon) + config.epsilon).log10())
}

/// SI-SNR improvement of `estimate` over the unprocessed `mixture`.
pub fn si_snr_improvement(
    reference: &[f64],
    estimate: &[f64],
    mixture: &[f64],
    config: &LossConfig,
) -> Result<f64, SignalError> {
    Ok(si_snr(reference, estimate, config)? - si_snr(reference, mixture, config)?)
}

/// Projects estimates so they sum to `input` on every channel and sample:
/// `s_m <- s_m + (x - sum_m s_m) / M`.
pub fn mixture_consistency_project(
    estimates: &EstimateSet,
    input: &MultiChannelSignal,
) -> Result<EstimateSet, SignalError> {
    if estimates.num_frames() != input.num_frames() || estimates.num_channels() != input.num_channels() {
        return Err(SignalError::ShapeMismatch(format!(
            "estimates are {}x{}, input is {}x{}",
            estimates.num_frames(),
            estimates.num_channels(),
            input.num_frames(),
            input.num_channels()
        )));
    }
    let m = estimates.len() as f64;
    let total = estimates.sum();
    let correction: Vec<Vec<f64>> = input
        .channels
        .iter()
        .zip(&total.channels)
        .map(|(x, s)| x.iter().zip(s).map(|(a, b)| (a - b) / m).collect())
        .collect();
    let signals = estimates
        .signals
        .iter()
        .map(|sig| {
            let channels = sig
                .channels
                .iter()
                .zip(&correction)
                .map(|(ch, corr)| ch.iter().zip(corr).map(|(a, b)| a + b).collect())
                .collect();
            MultiChannelSignal {
                channels,
                sample_rate: sig.sample_rate,
            }
        })
        .collect();
    Ok(EstimateSet { signals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn sine(freq: f64, len: usize, sr: f64) -> Vec<f64> {
        (0..len)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn thresholded_snr_hits_cap_for_perfect_estimate() {
        let y = sine(440.0, 1000, 16000.0);
        let v = thresholded_snr(&y, &y, &cfg()).unwrap();
        assert!((v - 30.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn thresholded_snr_unit_error_and_zero_estimate() {
        let y = vec![1.0, -2.0, 0.5, 3.0];
        let e: Vec<f64> = y.iter().map(|v| v * 2.0).collect();
        let expected = 10.0 * (1.0f64 / 1.001).log10();
        assert!((thresholded_snr(&y, &e, &cfg()).unwrap() - expected).abs() < 1e-12);
        let zero = vec![0.0; 4];
        assert!((thresholded_snr(&y, &zero, &cfg()).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 0.00434).abs() < 1e-5);
    }

    #[test]
    fn thresholded_snr_rejects_silent_reference() {
        let z = vec![0.0; 8];
        assert_eq!(
            thresholded_snr(&z, &[1.0; 8], &cfg()),
            Err(SignalError::DegenerateReference)
        );
        assert!(matches!(
            thresholded_snr(&[1.0; 3], &[1.0; 4], &cfg()),
            Err(SignalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn si_snr_is_scale_invariant() {
        let y = sine(300.0, 2048, 16000.0);
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let a = si_snr(&y, &y, &cfg()).unwrap();
        let b = si_snr(&y, &doubled, &cfg()).unwrap();
        assert!(a >= 80.0 && b >= 80.0);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn si_snr_orthogonal_estimate_is_very_negative() {
        // 16 and 32 full periods over 1024 samples: zero-mean and orthogonal.
        let y = sine(250.0, 1024, 16000.0);
        let e = sine(500.0, 1024, 16000.0);
        let norm = energy(&y).sqrt();
        let y: Vec<f64> = y.iter().map(|v| v / norm).collect();
        let e: Vec<f64> = e.iter().map(|v| v / norm).collect();
        let v = si_snr(&y, &e, &cfg()).unwrap();
        assert!(v <= -40.0, "{v}");
    }

    #[test]
    fn si_snr_improvement_identity_and_perfect() {
        let y = sine(250.0, 1024, 16000.0);
        let n = sine(700.0, 1024, 16000.0);
        let mix: Vec<f64> = y.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert_eq!(si_snr_improvement(&y, &mix, &mix, &cfg()).unwrap(), 0.0);
        let imp = si_snr_improvement(&y, &y, &mix, &cfg()).unwrap();
        assert!(imp > 0.0);
        let direct = si_snr(&y, &y, &cfg()).unwrap() - si_snr(&y, &mix, &cfg()).unwrap();
        assert!((imp - direct).abs() < 1e-12);
    }

    #[test]
    fn consistency_splits_residual_uniformly() {
        let x = MultiChannelSignal::mono(vec![1.0, 1.0], 16000).unwrap();
        let s1 = MultiChannelSignal::mono(vec![1.0, 0.0], 16000).unwrap();
        let s2 = MultiChannelSignal::mono(vec![0.0, 0.0], 16000).unwrap();
        let est = EstimateSet::new(vec![s1, s2]).unwrap();
        let out = mixture_consistency_project(&est, &x).unwrap();
        assert_eq!(out.channel(0, 0), &[1.0, 0.5]);
        assert_eq!(out.channel(1, 0), &[0.0, 0.5]);
        let again = mixture_consistency_project(&out, &x).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn consistency_random_sum_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_sig = |c: usize| {
            let chans = (0..c)
                .map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            MultiChannelSignal::new(chans, 16000).unwrap()
        };
        let x = rand_sig(2);
        let est = EstimateSet::new((0..4).map(|_| rand_sig(2)).collect()).unwrap();
        let out = mixture_consistency_project(&est, &x).unwrap();
        let sum = out.sum();
        for c in 0..2 {
            for t in 0..64 {
                assert!((sum.channel(c)[t] - x.channel(c)[t]).abs() <= 1e-6);
            }
        }
        let bad = MultiChannelSignal::zeros(3, 64, 16000).unwrap();
        assert!(mixture_consistency_project(&est, &bad).is_err());
    }

    #[test]
    fn signal_constructor_validates() {
        assert_eq!(MultiChannelSignal::new(vec![], 16000), Err(SignalError::Empty));
        assert_eq!(
            MultiChannelSignal::new(vec![vec![0.0; 2]], 0),
            Err(SignalError::ZeroSampleRate)
        );
        assert!(matches!(
            MultiChannelSignal::new(vec![vec![0.0; 2], vec![0.0; 3]], 8000),
            Err(SignalError::RaggedChannels { .. })
        ));
        assert!(matches!(
            MultiChannelSignal::new(vec![vec![f64::NAN]], 8000),
            Err(SignalError::NonFinite { .. })
        ));
        let a = MultiChannelSignal::zeros(1, 4, 8000).unwrap();
        let b = MultiChannelSignal::zeros(1, 4, 16000).unwrap();
        assert!(a.add(&b).is_err());
    }
}
