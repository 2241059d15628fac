//! Multi-channel mixture invariant training (MC-MixIT) for speech
//! separation.
//!
//! The crate is organized bottom-up:
//!
//! * [`signal`]: waveforms, SNR metrics, mixture consistency.
//! * [`refilter`]: least-squares FIR matching for filtered references.
//! * [`wav`]: WAV file input/output.
//! * [`assign`]: MixIT, MC-MixIT and PIT assignment losses.
//! * [`autodiff`]: the reverse-mode tape used for training.
//! * [`model`]: the separation network and its parameters.
//! * [`checkpoint`]: binary checkpoint files.
//! * [`synth`]: seeded synthetic scenes, examples and shards.
//! * [`train`]: optimization loops, warm start and evaluation.

pub mod assign;
pub mod autodiff;
pub mod checkpoint;
pub mod model;
pub mod refilter;
pub mod signal;
pub mod synth;
pub mod train;
pub mod wav;
