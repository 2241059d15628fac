//! Seeded synthetic scenes and training examples.
//!
//! Sources are spatialized with a gain, a fractional delay per microphone and
//! an optional per-microphone FIR, then summed with Gaussian sensor noise.

mod dataset;
mod examples;
mod shard;
pub mod sources;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::signal::{MultiChannelSignal, SignalError};
use crate::wav::WavError;

pub use dataset::{
    circular_array_delays, random_fir, DatasetConfig, DatasetStream, ExampleSource, Split, SPEED_OF_SOUND,
};
pub use examples::{make_mom, make_supervised_filtered, make_supervised_mixed, ExampleKind, TrainingExample};
pub use shard::{read_shard, write_shard, ManifestRecord, ShardDataset, MANIFEST_FILE};

/// Taps of the windowed-sinc fractional delay interpolator.
pub const DELAY_TAPS: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has no sources")]
    NoSources,
    #[error("source {id}: {detail}")]
    InvalidSource { id: String, detail: String },
    #[error("source {id}: delay {delay} exceeds the {len}-sample render length")]
    DelayTooLarge { id: String, delay: f64, len: usize },
    #[error("source id {0} appears in both scenes")]
    DuplicateSourceId(String),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("unknown split {0:?} (expected train, validation or test)")]
    UnknownSplit(String),
    #[error("shard: {0}")]
    Shard(String),
    #[error("shard i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// One dry source placed in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSource {
    pub id: String,
    pub signal: Vec<f64>,
    pub gain: f64,
    /// Fractional delay in samples for each microphone.
    pub delays: Vec<f64>,
    /// Optional FIR per microphone, applied after the delay.
    pub spatial_fir: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sources: Vec<SceneSource>,
    /// Noise RMS relative to the RMS of the clean rendered mixture.
    pub noise_level: f64,
    pub seed: u64,
}

/// Output of [`render_scene`]. `mixture` is `images` summed plus `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub mixture: MultiChannelSignal,
    pub images: Vec<MultiChannelSignal>,
    pub noise: MultiChannelSignal,
}

impl Scene {
    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.sources.iter().map(|s| s.id.as_str())
    }
}

/// Windowed-sinc kernel for a delay of `delay` samples: returns the index of
/// the first tap and the taps. Integer delays give a unit impulse.
pub fn fractional_delay_kernel(delay: f64) -> (isize, [f64; DELAY_TAPS]) {
    let half = (DELAY_TAPS / 2) as f64;
    let base = delay.floor() as isize;
    let first = base - (DELAY_TAPS / 2) as isize + 1;
    let mut taps = [0.0; DELAY_TAPS];
    for (i, tap) in taps.iter_mut().enumerate() {
        let t = (first + i as isize) as f64 - delay;
        let sinc = if t == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
        };
        let window = if t.abs() < half {
            0.5 * (1.0 + (std::f64::consts::PI * t / half).cos())
        } else {
            0.0
        };
        *tap = sinc * window;
    }
    (first, taps)
}

/// `out[n] = gain * sum_k h[k] x[n - first - k]`, with `x` zero outside its
/// support.
fn delay_signal(x: &[f64], delay: f64, gain: f64, len: usize) -> Vec<f64> {
    let (first, taps) = fractional_delay_kernel(delay);
    let mut out = vec![0.0; len];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, h) in taps.iter().enumerate() {
            if *h == 0.0 {
                continue;
            }
            let idx = n as isize - first - k as isize;
            if idx >= 0 && (idx as usize) < x.len() {
                acc += h * x[idx as usize];
            }
        }
        *o = gain * acc;
    }
    out
}

fn validate_source(src: &SceneSource, channels: usize, len: usize) -> Result<(), SynthError> {
    let invalid = |detail: String| SynthError::InvalidSource {
        id: src.id.clone(),
        detail,
    };
    if src.signal.len() < len {
        return Err(invalid(format!("signal has {} samples, need {len}", src.signal.len())));
    }
    if !(src.gain > 0.0 && src.gain.is_finite()) {
        return Err(invalid(format!("gain {} must be positive", src.gain)));
    }
    if src.delays.len() < channels {
        return Err(invalid(format!("{} delays for {channels} microphones", src.delays.len())));
    }
    for &d in &src.delays[..channels] {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(invalid(format!("delay {d} must be non-negative")));
        }
        if d > len as f64 {
            return Err(SynthError::DelayTooLarge {
                id: src.id.clone(),
                delay: d,
                len,
            });
        }
    }
    if let Some(fir) = &src.spatial_fir {
        if fir.len() < channels || fir[..channels].iter().any(Vec::is_empty) {
            return Err(invalid("spatial FIR must have non-empty taps for every microphone".into()));
        }
    }
    if src.signal[..len].iter().any(|v| !v.is_finite()) {
        return Err(invalid("signal contains non-finite samples".into()));
    }
    Ok(())
}

/// Renders `scene` at `channels` microphones for `len` samples.
pub fn render_scene(scene: &Scene, channels: usize, len: usize, sample_rate: u32) -> Result<RenderedScene, SynthError> {
    if scene.sources.is_empty() {
        return Err(SynthError::NoSources);
    }
    if channels == 0 || len == 0 {
        return Err(SignalError::Empty.into());
    }
    if !(scene.noise_level >= 0.0 && scene.noise_level.is_finite()) {
        return Err(SynthError::InvalidConfig(format!("noise level {}", scene.noise_level)));
    }
    let mut images = Vec::with_capacity(scene.sources.len());
    for src in &scene.sources {
        validate_source(src, channels, len)?;
        let dry = &src.signal[..len];
        let chans = (0..channels)
            .map(|c| {
                let delayed = delay_signal(dry, src.delays[c], src.gain, len);
                match &src.spatial_fir {
                    Some(fir) => crate::refilter::fir_filter(&delayed, &fir[c]),
                    None => delayed,
                }
            })
            .collect();
        images.push(MultiChannelSignal::new(chans, sample_rate)?);
    }
    let mut clean = images[0].clone();
    for img in &images[1..] {
        clean = clean.add(img)?;
    }
    let rms = (clean.energy() / (channels * len) as f64).sqrt();
    let sigma = scene.noise_level * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise_chans: Vec<Vec<f64>> = (0..channels)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect()
        })
        .collect();
    let noise = MultiChannelSignal::new(noise_chans, sample_rate)?;
    let mixture = clean.add(&noise)?;
    Ok(RenderedScene { mixture, images, noise })
}
