use serde::{Deserialize, Serialize};

use super::{render_scene, Scene, SynthError};
use crate::refilter::estimate_reference_filter;
use crate::signal::{EstimateSet, MultiChannelSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    /// Two reference mixtures summed into one input; trained with MC-MixIT.
    UnsupervisedMom,
    /// Two single-source array recordings, each with its own noise.
    SupervisedMixed,
    /// Mixture A, the filtered close-talk image of B, and B's residual.
    SupervisedFiltered,
}

impl ExampleKind {
    pub fn is_supervised(self) -> bool {
        !matches!(self, Self::UnsupervisedMom)
    }

    pub fn num_references(self) -> usize {
        match self {
            Self::SupervisedFiltered => 3,
            _ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UnsupervisedMom => "unsupervised_mom",
            Self::SupervisedMixed => "supervised_mixed",
            Self::SupervisedFiltered => "supervised_filtered",
        }
    }
}

impl std::fmt::Display for ExampleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExampleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mom" | "unsupervised_mom" => Ok(Self::UnsupervisedMom),
            "supervised_mixed" | "mixed" => Ok(Self::SupervisedMixed),
            "supervised_filtered" | "filtered" => Ok(Self::SupervisedFiltered),
            other => Err(format!(
                "unknown example kind {other:?} (expected mom, supervised_mixed or supervised_filtered)"
            )),
        }
    }
}

/// `input` is bit-identical to `references.sum()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub kind: ExampleKind,
    pub input: MultiChannelSignal,
    pub references: EstimateSet,
    pub source_ids: Vec<String>,
    pub seed: u64,
}

impl TrainingExample {
    pub fn num_channels(&self) -> usize {
        self.input.num_channels()
    }

    pub fn num_frames(&self) -> usize {
        self.input.num_frames()
    }

    /// Keeps only the listed microphones.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self, SynthError> {
        Ok(Self {
            input: self.input.select_channels(indices)?,
            references: self.references.select_channels(indices)?,
            ..self.clone()
        })
    }

    fn assemble(kind: ExampleKind, refs: Vec<MultiChannelSignal>, a: &Scene, b: &Scene) -> Result<Self, SynthError> {
        let references = EstimateSet::new(refs)?;
        Ok(Self {
            id: format!("{}-{}-{}", kind, a.seed, b.seed),
            kind,
            input: references.sum(),
            references,
            source_ids: a.source_ids().chain(b.source_ids()).map(str::to_string).collect(),
            seed: a.seed,
        })
    }
}

fn check_disjoint(a: &Scene, b: &Scene) -> Result<(), SynthError> {
    for id in a.source_ids() {
        if b.source_ids().any(|other| other == id) {
            return Err(SynthError::DuplicateSourceId(id.to_string()));
        }
    }
    Ok(())
}

fn check_single_source(scene: &Scene) -> Result<(), SynthError> {
    match scene.sources.len() {
        1 => Ok(()),
        0 => Err(SynthError::NoSources),
        n => Err(SynthError::InvalidConfig(format!(
            "supervised scenes hold exactly one source, found {n}"
        ))),
    }
}

/// Mixture of the two rendered scene mixtures.
pub fn make_mom(a: &Scene, b: &Scene, channels: usize, len: usize, sample_rate: u32) -> Result<TrainingExample, SynthError> {
    check_disjoint(a, b)?;
    let ra = render_scene(a, channels, len, sample_rate)?;
    let rb = render_scene(b, channels, len, sample_rate)?;
    TrainingExample::assemble(ExampleKind::UnsupervisedMom, vec![ra.mixture, rb.mixture], a, b)
}

/// Two single-source scenes whose noisy array signals are the references.
pub fn make_supervised_mixed(
    a: &Scene,
    b: &Scene,
    channels: usize,
    len: usize,
    sample_rate: u32,
) -> Result<TrainingExample, SynthError> {
    check_single_source(a)?;
    check_single_source(b)?;
    let mut ex = make_mom(a, b, channels, len, sample_rate)?;
    ex.kind = ExampleKind::SupervisedMixed;
    ex.id = format!("{}-{}-{}", ex.kind, a.seed, b.seed);
    Ok(ex)
}

/// Three targets: scene A's mixture, the close-talk signal of B filtered to
/// best match B's array signal, and what that filter leaves over.
pub fn make_supervised_filtered(
    a: &Scene,
    b: &Scene,
    close_talk_b: &[f64],
    channels: usize,
    len: usize,
    sample_rate: u32,
    filter_len: usize,
) -> Result<TrainingExample, SynthError> {
    check_disjoint(a, b)?;
    check_single_source(b)?;
    if close_talk_b.len() < len {
        return Err(SynthError::InvalidConfig(format!(
            "close-talk signal has {} samples, need {len}",
            close_talk_b.len()
        )));
    }
    let ra = render_scene(a, channels, len, sample_rate)?;
    let rb = render_scene(b, channels, len, sample_rate)?;
    let fit = estimate_reference_filter(&close_talk_b[..len], &rb.mixture, filter_len)?;
    TrainingExample::assemble(
        ExampleKind::SupervisedFiltered,
        vec![ra.mixture, fit.filtered, fit.residual],
        a,
        b,
    )
}

#[cfg(test)]
mod tests {
    use super::super::SceneSource;
    use super::*;
    use crate::signal::SignalError;

    fn scene(id: &str, seed: u64, noise: f64, delay: f64) -> Scene {
        let signal = (0..600).map(|n| ((n as f64) * 0.37 + seed as f64).sin()).collect();
        Scene {
            sources: vec![SceneSource {
                id: id.into(),
                signal,
                gain: 0.8,
                delays: vec![delay, delay + 1.5, delay + 0.25, delay + 3.0],
                spatial_fir: None,
            }],
            noise_level: noise,
            seed,
        }
    }

    #[test]
    fn mom_sums_exactly() {
        let ex = make_mom(&scene("a", 1, 0.1, 8.0), &scene("b", 2, 0.1, 9.0), 4, 600, 16000).unwrap();
        let sum = ex.references.sum();
        assert_eq!(sum, ex.input);
        assert_eq!(ex.references.len(), 2);
        assert_eq!(ex.source_ids, vec!["a", "b"]);
    }

    #[test]
    fn overlapping_ids_rejected() {
        let r = make_mom(&scene("a", 1, 0.0, 8.0), &scene("a", 2, 0.0, 8.0), 1, 600, 16000);
        assert!(matches!(r, Err(SynthError::DuplicateSourceId(_))));
    }

    #[test]
    fn mixed_without_noise_matches_mom() {
        let (a, b) = (scene("a", 1, 0.0, 8.0), scene("b", 2, 0.0, 9.0));
        let mixed = make_supervised_mixed(&a, &b, 2, 600, 16000).unwrap();
        let mom = make_mom(&a, &b, 2, 600, 16000).unwrap();
        assert_eq!(mixed.references, mom.references);
        assert_eq!(mixed.input, mom.input);
        assert_eq!(mixed.kind, ExampleKind::SupervisedMixed);
    }

    #[test]
    fn filtered_targets_partition_input() {
        let (a, b) = (scene("a", 1, 0.05, 8.0), scene("b", 2, 0.05, 9.0));
        let ex = make_supervised_filtered(&a, &b, &b.sources[0].signal, 2, 600, 16000, 64).unwrap();
        assert_eq!(ex.references.len(), 3);
        assert_eq!(ex.references.sum(), ex.input);
    }

    #[test]
    fn silent_close_talk_is_an_error() {
        let (a, b) = (scene("a", 1, 0.0, 8.0), scene("b", 2, 0.0, 9.0));
        let r = make_supervised_filtered(&a, &b, &[0.0; 600], 1, 600, 16000, 32);
        assert!(matches!(r, Err(SynthError::Signal(SignalError::DegenerateSource))));
    }
}
