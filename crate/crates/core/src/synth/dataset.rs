use std::ops::Range;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sources::{modulated_noise, tone_complex, wav_excerpt, SourceKind};
use super::{make_mom, make_supervised_filtered, make_supervised_mixed, ExampleKind, Scene, SceneSource, SynthError, TrainingExample};
use crate::refilter::DEFAULT_FILTER_LEN;
use crate::wav::read_wav;

/// Metres per second.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Smallest per-microphone delay, so every fractional-delay kernel is causal.
const BASE_DELAY: f64 = 8.0;

/// Settings for synthetic example generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sample_rate: u32,
    pub num_mics: usize,
    /// Radius of the circular array in metres.
    pub array_radius: f64,
    pub kind: ExampleKind,
    /// Samples per unsupervised example.
    pub unsup_len: usize,
    /// Samples per supervised example.
    pub sup_len: usize,
    /// Sources per reference mixture in unsupervised examples.
    pub sources_per_mixture: usize,
    /// Source types, assigned in turn to the sources of each example.
    pub source_kinds: Vec<SourceKind>,
    /// Draw each source's type uniformly from `source_kinds` instead of
    /// cycling through them.
    pub random_kinds: bool,
    pub noise_level: f64,
    /// Per-source gain range in dB.
    pub gain_db: [f64; 2],
    /// Random spatial FIR length; 0 disables.
    pub fir_len: usize,
    /// Reference filter length for filtered targets.
    pub filter_len: usize,
    /// Mono (or first-channel) WAV files used by `wav` sources.
    pub wav_sources: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            num_mics: 4,
            array_radius: 0.1,
            kind: ExampleKind::UnsupervisedMom,
            unsup_len: 160_000,
            sup_len: 80_000,
            sources_per_mixture: 1,
            source_kinds: vec![SourceKind::ToneComplex, SourceKind::ModulatedNoise],
            random_kinds: false,
            noise_level: 0.05,
            gain_db: [-6.0, 0.0],
            fir_len: 0,
            filter_len: DEFAULT_FILTER_LEN,
            wav_sources: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn example_len(&self) -> usize {
        if self.kind.is_supervised() {
            self.sup_len
        } else {
            self.unsup_len
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.num_mics == 0 {
            return bad("num_mics must be at least 1".into());
        }
        if self.unsup_len == 0 || self.sup_len == 0 {
            return bad("example lengths must be positive".into());
        }
        if self.sources_per_mixture == 0 {
            return bad("sources_per_mixture must be at least 1".into());
        }
        if self.source_kinds.is_empty() {
            return bad("source_kinds must not be empty".into());
        }
        if !(self.array_radius >= 0.0 && self.array_radius.is_finite()) {
            return bad(format!("array_radius {}", self.array_radius));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level {}", self.noise_level));
        }
        if !(self.gain_db[0] <= self.gain_db[1]) || self.gain_db.iter().any(|g| !g.is_finite()) {
            return bad(format!("gain_db range {:?}", self.gain_db));
        }
        if self.fir_len > 256 {
            return bad(format!("fir_len {} exceeds 256", self.fir_len));
        }
        if self.kind == ExampleKind::SupervisedFiltered && (self.filter_len == 0 || self.filter_len > self.sup_len) {
            return bad(format!("filter_len {} must be in 1..={}", self.filter_len, self.sup_len));
        }
        if self.source_kinds.contains(&SourceKind::Wav) && self.wav_sources.is_empty() {
            return bad("wav sources requested but wav_sources is empty".into());
        }
        Ok(())
    }
}

/// Far-field delays (samples) for a plane wave from `azimuth` radians at a
/// circular array with microphones at equal angles `2 pi c / C`. The
/// smallest delay is shifted to a fixed positive base.
pub fn circular_array_delays(num_mics: usize, radius: f64, azimuth: f64, sample_rate: u32) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_mics)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_mics as f64;
            -radius * (angle - azimuth).cos() / SPEED_OF_SOUND * sample_rate as f64
        })
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    raw.iter().map(|d| d - min + BASE_DELAY).collect()
}

/// Exponentially decaying FIR with a unit first tap.
pub fn random_fir<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let decay = (len as f64 / 4.0).max(1.0);
    (0..len)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z * (-(k as f64) / decay).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// Example seeds for `split_seed` (which must be below `2^30`). Ranges
    /// for different splits or split seeds never overlap.
    pub fn seed_range(self, split_seed: u64) -> Result<Range<u64>, SynthError> {
        if split_seed >= 1 << 30 {
            return Err(SynthError::InvalidConfig(format!("split seed {split_seed} must be below 2^30")));
        }
        let base = (self as u64) << 62;
        let start = base + (split_seed << 32);
        Ok(start..start + (1 << 32))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "valid" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(SynthError::UnknownSplit(other.to_string())),
        }
    }
}

/// Random access to a (possibly unbounded) sequence of examples.
pub trait ExampleSource {
    fn example(&self, index: u64) -> Result<TrainingExample, SynthError>;

    /// Number of distinct examples, `None` when unbounded.
    fn len(&self) -> Option<u64>;

    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

/// Deterministic example generator for one split.
#[derive(Debug, Clone)]
pub struct DatasetStream {
    config: DatasetConfig,
    split: Split,
    seeds: Range<u64>,
    wav_library: Vec<Vec<f64>>,
}

impl DatasetStream {
    pub fn new(config: DatasetConfig, split: Split, split_seed: u64) -> Result<Self, SynthError> {
        config.validate()?;
        let seeds = split.seed_range(split_seed)?;
        let wav_library = config
            .wav_sources
            .iter()
            .map(|p| Ok(read_wav(p)?.into_channels().swap_remove(0)))
            .collect::<Result<_, SynthError>>()?;
        Ok(Self {
            config,
            split,
            seeds,
            wav_library,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn seed_of(&self, index: u64) -> u64 {
        self.seeds.start + index
    }

    /// Examples `0..`, in order.
    pub fn iter(&self) -> impl Iterator<Item = Result<TrainingExample, SynthError>> + '_ {
        (0..).map(|i| self.example(i))
    }

    fn dry_source(&self, rng: &mut ChaCha8Rng, kind: SourceKind, len: usize) -> Result<Vec<f64>, SynthError> {
        let sr = self.config.sample_rate;
        Ok(match kind {
            SourceKind::ModulatedNoise => modulated_noise(rng, len, sr),
            SourceKind::ToneComplex => tone_complex(rng, len, sr),
            SourceKind::Wav => {
                let pick = rng.random_range(0..self.wav_library.len());
                wav_excerpt(rng, &self.wav_library[pick], len)?
            }
        })
    }

    fn scene(
        &self,
        rng: &mut ChaCha8Rng,
        label: &str,
        seed: u64,
        count: usize,
        cursor: &mut usize,
        len: usize,
    ) -> Result<Scene, SynthError> {
        let c = &self.config;
        let mut sources = Vec::with_capacity(count);
        for j in 0..count {
            let kind = if c.random_kinds {
                c.source_kinds[rng.random_range(0..c.source_kinds.len())]
            } else {
                c.source_kinds[*cursor % c.source_kinds.len()]
            };
            *cursor += 1;
            let signal = self.dry_source(rng, kind, len)?;
            let gain_db = if c.gain_db[0] < c.gain_db[1] {
                rng.random_range(c.gain_db[0]..c.gain_db[1])
            } else {
                c.gain_db[0]
            };
            let azimuth = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let spatial_fir = (c.fir_len > 0).then(|| (0..c.num_mics).map(|_| random_fir(rng, c.fir_len)).collect());
            sources.push(SceneSource {
                id: format!("{seed}-{label}{j}"),
                signal,
                gain: 10f64.powf(gain_db / 20.0),
                delays: circular_array_delays(c.num_mics, c.array_radius, azimuth, c.sample_rate),
                spatial_fir,
            });
        }
        Ok(Scene {
            sources,
            noise_level: c.noise_level,
            seed: rng.random(),
        })
    }
}

impl ExampleSource for DatasetStream {
    fn example(&self, index: u64) -> Result<TrainingExample, SynthError> {
        if index >= self.seeds.end - self.seeds.start {
            return Err(SynthError::InvalidConfig(format!("example index {index} out of range")));
        }
        let c = &self.config;
        let seed = self.seed_of(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = c.example_len();
        let per_scene = if c.kind.is_supervised() { 1 } else { c.sources_per_mixture };
        let mut cursor = 0;
        let a = self.scene(&mut rng, "a", seed, per_scene, &mut cursor, len)?;
        let b = self.scene(&mut rng, "b", seed, per_scene, &mut cursor, len)?;
        let (mics, sr) = (c.num_mics, c.sample_rate);
        let mut ex = match c.kind {
            ExampleKind::UnsupervisedMom => make_mom(&a, &b, mics, len, sr)?,
            ExampleKind::SupervisedMixed => make_supervised_mixed(&a, &b, mics, len, sr)?,
            ExampleKind::SupervisedFiltered => {
                make_supervised_filtered(&a, &b, &b.sources[0].signal, mics, len, sr, c.filter_len)?
            }
        };
        ex.id = format!("{}-{index:06}", self.split.as_str());
        ex.seed = seed;
        Ok(ex)
    }

    fn len(&self) -> Option<u64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExampleKind) -> DatasetConfig {
        DatasetConfig {
            kind,
            num_mics: 2,
            unsup_len: 800,
            sup_len: 800,
            filter_len: 32,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn defaults_are_ten_and_five_seconds() {
        let c = DatasetConfig::default();
        assert_eq!(c.unsup_len, 160_000);
        assert_eq!(c.sup_len, 80_000);
        assert_eq!(c.sample_rate, 16000);
    }

    #[test]
    fn streams_are_deterministic() {
        let s = DatasetStream::new(small(ExampleKind::UnsupervisedMom), Split::Train, 3).unwrap();
        let t = DatasetStream::new(small(ExampleKind::UnsupervisedMom), Split::Train, 3).unwrap();
        for i in 0..10 {
            assert_eq!(s.example(i).unwrap(), t.example(i).unwrap());
        }
        assert_ne!(s.example(0).unwrap().input, s.example(1).unwrap().input);
    }

    #[test]
    fn split_ranges_are_disjoint() {
        let mut ranges = Vec::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            for seed in [0, 1, (1 << 30) - 1] {
                ranges.push(split.seed_range(seed).unwrap());
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                assert!(a.end <= b.start || b.end <= a.start, "{a:?} {b:?}");
            }
        }
        assert!(Split::Train.seed_range(1 << 30).is_err());
        assert!("bogus".parse::<Split>().is_err());
    }

    #[test]
    fn every_kind_generates() {
        for kind in [ExampleKind::UnsupervisedMom, ExampleKind::SupervisedMixed, ExampleKind::SupervisedFiltered] {
            let s = DatasetStream::new(small(kind), Split::Test, 0).unwrap();
            let ex = s.example(0).unwrap();
            assert_eq!(ex.kind, kind);
            assert_eq!(ex.references.len(), kind.num_references());
            assert_eq!(ex.num_channels(), 2);
            assert_eq!(ex.references.sum(), ex.input);
        }
    }

    #[test]
    fn array_delays_are_causal_and_symmetric() {
        let d = circular_array_delays(4, 0.1, 0.0, 16000);
        assert!(d.iter().all(|v| *v >= BASE_DELAY));
        // Mic 0 faces the source, mic 2 is furthest away.
        assert!((d[0] - BASE_DELAY).abs() < 1e-12);
        let spread = 2.0 * 0.1 / SPEED_OF_SOUND * 16000.0;
        assert!((d[2] - d[0] - spread).abs() < 1e-9);
        assert!((d[1] - d[3]).abs() < 1e-9);
    }
}
