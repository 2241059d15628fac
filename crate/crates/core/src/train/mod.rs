//! Supervised (PIT), unsupervised (MC-MixIT) and semi-supervised training.

mod adam;
mod eval;
mod loss;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::AssignError;
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::checkpoint::{Checkpoint, CheckpointError, OptimizerSection};
use crate::model::{build_forward, estimates_from_tensor, ModelError, ModelParams};
use crate::signal::{LossConfig, SignalError};
use crate::synth::{ExampleSource, SynthError, TrainingExample};

pub use adam::Adam;
pub use eval::{evaluate, evaluate_estimates, summarize, EvalAssignment, EvalConfig, EvalReport, ExampleReport};
pub use loss::{assignment_loss, solve_assignment, Groups};
pub use metrics::{MetricsLog, StepMetrics};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or gradient at step {step} on example {example_id}")]
    NonFinite { step: u64, example_id: String },
    #[error("checkpoint config differs from the target model: {0}")]
    ConfigMismatch(String),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
    Semi,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            "semi" => Ok(Self::Semi),
            other => Err(format!("unknown mode {other:?} (expected supervised, unsupervised or semi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32-bit")]
    Bits32,
    #[serde(rename = "64-bit")]
    Bits64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of each batch drawn from the supervised stream (semi mode).
    pub semi_mix_ratio: f64,
    pub warm_start_path: Option<PathBuf>,
    pub precision: Precision,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unsupervised,
            learning_rate: 3e-4,
            batch_size: 8,
            steps: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            semi_mix_ratio: 0.5,
            warm_start_path: None,
            precision: Precision::Bits64,
            seed: 0,
            checkpoint_interval: 1000,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(0.0..=1.0).contains(&self.semi_mix_ratio) {
            return bad(format!("semi_mix_ratio {} must be in [0, 1]", self.semi_mix_ratio));
        }
        if self.precision == Precision::Bits32 {
            return bad("32-bit training is not supported; use precision = \"64-bit\"".into());
        }
        if !(self.loss.tau >= 0.0 && self.loss.epsilon > 0.0) {
            return bad("loss.tau must be non-negative and loss.epsilon positive".into());
        }
        Ok(())
    }

    /// Supervised and unsupervised examples per batch.
    pub fn batch_split(&self) -> (usize, usize) {
        match self.mode {
            TrainMode::Supervised => (self.batch_size, 0),
            TrainMode::Unsupervised => (0, self.batch_size),
            TrainMode::Semi => {
                let sup = (self.semi_mix_ratio * self.batch_size as f64).round() as usize;
                (sup, self.batch_size - sup)
            }
        }
    }
}

/// Example sources for a run.
#[derive(Clone, Copy, Default)]
pub struct Streams<'a> {
    pub supervised: Option<&'a dyn ExampleSource>,
    pub unsupervised: Option<&'a dyn ExampleSource>,
}

impl Streams<'_> {
    /// Fails when `config` needs a stream that is absent.
    pub fn check(&self, config: &TrainConfig) -> Result<(), TrainError> {
        let need_sup = matches!(config.mode, TrainMode::Supervised | TrainMode::Semi);
        let need_unsup = matches!(config.mode, TrainMode::Unsupervised | TrainMode::Semi);
        if need_sup && self.supervised.is_none() {
            return Err(TrainError::InvalidConfig(format!("{:?} mode needs a supervised stream", config.mode)));
        }
        if need_unsup && self.unsupervised.is_none() {
            return Err(TrainError::InvalidConfig(format!("{:?} mode needs an unsupervised stream", config.mode)));
        }
        Ok(())
    }
}

/// Loads every tensor of the checkpoint at `path` into a model shaped like
/// `target`. The channel count is not part of the parameters, so weights
/// trained at any number of microphones load at any other.
pub fn warm_start(target: &ModelParams, path: impl AsRef<Path>) -> Result<ModelParams, TrainError> {
    let ck = Checkpoint::load(path)?;
    let params = ModelParams::from_named(*target.config(), ck.params)?;
    if ck.config != *target.config() {
        let a = serde_json::to_value(ck.config).expect("config serializes");
        let b = serde_json::to_value(target.config()).expect("config serializes");
        let diffs: Vec<String> = a
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, target {}", b[k.as_str()]))
            .collect();
        return Err(TrainError::ConfigMismatch(diffs.join(", ")));
    }
    Ok(params)
}

const STATE_STEP: &str = "step";
const STATE_SUP: &str = "cursor.supervised";
const STATE_UNSUP: &str = "cursor.unsupervised";

/// Parameters, optimizer and stream positions of one run.
///
/// Batches are read sequentially from the streams, so the trainer's whole
/// random state is the pair of stream cursors.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    adam: Adam,
    step: u64,
    sup_cursor: u64,
    unsup_cursor: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: ModelParams) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(
            params.tensors(),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        Ok(Self {
            config,
            params,
            adam,
            step: 0,
            sup_cursor: 0,
            unsup_cursor: 0,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(config, ck.to_params()?)?;
        let missing = |k: &str| CheckpointError::Malformed(format!("missing state entry {k}"));
        t.step = ck.state_value(STATE_STEP).ok_or_else(|| missing(STATE_STEP))?;
        t.sup_cursor = ck.state_value(STATE_SUP).ok_or_else(|| missing(STATE_SUP))?;
        t.unsup_cursor = ck.state_value(STATE_UNSUP).ok_or_else(|| missing(STATE_UNSUP))?;
        let opt = ck
            .optimizer
            .as_ref()
            .ok_or_else(|| CheckpointError::Malformed("missing optimizer section".into()))?;
        let strip = |v: &[(String, Tensor)]| v.iter().map(|(_, t)| t.clone()).collect();
        t.adam
            .restore(opt.step, strip(&opt.first_moment), strip(&opt.second_moment))
            .map_err(CheckpointError::Malformed)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        let named = |ts: &[Tensor]| {
            self.params
                .names()
                .iter()
                .cloned()
                .zip(ts.iter().cloned())
                .collect::<Vec<_>>()
        };
        ck.optimizer = Some(OptimizerSection {
            step: self.adam.step(),
            first_moment: named(self.adam.first_moment()),
            second_moment: named(self.adam.second_moment()),
        });
        ck.state = vec![
            (STATE_STEP.into(), self.step),
            (STATE_SUP.into(), self.sup_cursor),
            (STATE_UNSUP.into(), self.unsup_cursor),
        ];
        ck
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Reads the next batch: supervised examples first, then unsupervised.
    pub fn next_batch(&mut self, streams: &Streams) -> Result<Vec<TrainingExample>, TrainError> {
        streams.check(&self.config)?;
        let (n_sup, n_unsup) = self.config.batch_split();
        let mut batch = Vec::with_capacity(n_sup + n_unsup);
        if let Some(s) = streams.supervised.filter(|_| n_sup > 0) {
            for i in 0..n_sup as u64 {
                batch.push(s.example(self.sup_cursor + i)?);
            }
            self.sup_cursor += n_sup as u64;
        }
        if let Some(s) = streams.unsupervised.filter(|_| n_unsup > 0) {
            for i in 0..n_unsup as u64 {
                batch.push(s.example(self.unsup_cursor + i)?);
            }
            self.unsup_cursor += n_unsup as u64;
        }
        Ok(batch)
    }

    /// Reads a batch and trains on it.
    pub fn step(&mut self, streams: &Streams) -> Result<StepMetrics, TrainError> {
        let batch = self.next_batch(streams)?;
        self.train_step(&batch)
    }

    /// Loss and parameter gradients for one example, or `None` when every
    /// reference is silent.
    pub fn example_gradients(
        &self,
        example: &TrainingExample,
    ) -> Result<Option<(f64, Vec<Tensor>)>, TrainError> {
        let non_finite = |e: TensorError| match e {
            TensorError::NonFinite { .. } => TrainError::NonFinite {
                step: self.step,
                example_id: example.id.clone(),
            },
            other => other.into(),
        };
        let mut g = Graph::new().with_finite_checks(true);
        let fwd = build_forward(&mut g, &self.params, &example.input, true).map_err(|e| match e {
            ModelError::Tensor(t) => non_finite(t),
            other => other.into(),
        })?;
        let est = estimates_from_tensor(
            g.value(fwd.estimates),
            fwd.num_outputs,
            fwd.num_channels,
            example.input.sample_rate(),
        )?;
        let groups = match solve_assignment(example, &est, &self.config.loss) {
            Ok((groups, _)) => groups,
            Err(AssignError::AllReferencesSilent) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let loss = assignment_loss(
            &mut g,
            fwd.estimates,
            &example.references,
            &groups,
            fwd.num_channels,
            self.config.loss.tau,
        )
        .map_err(non_finite)?;
        let value = g.value(loss).item().expect("scalar loss");
        let grads = g.backward(loss).map_err(non_finite)?;
        let tensors: Vec<Tensor> = fwd.params.iter().map(|&p| grads.tensor(&g, p)).collect();
        if !value.is_finite() || tensors.iter().any(|t| !t.is_finite()) {
            return Err(non_finite(TensorError::NonFinite { op: "backward" }));
        }
        Ok(Some((value, tensors)))
    }

    /// One Adam step on the batch mean of the per-example losses.
    pub fn train_step(&mut self, batch: &[TrainingExample]) -> Result<StepMetrics, TrainError> {
        let start = Instant::now();
        let mut sum: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut sup, mut unsup) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for ex in batch {
            let Some((loss, grads)) = self.example_gradients(ex)? else {
                skipped += 1;
                continue;
            };
            for (acc, g) in sum.iter_mut().zip(&grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            if ex.kind.is_supervised() {
                sup.push(loss);
            } else {
                unsup.push(loss);
            }
        }
        let used = sup.len() + unsup.len();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mut grad_norm = 0.0;
        if used > 0 {
            let scale = 1.0 / used as f64;
            for g in &mut sum {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                grad_norm += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            self.adam.update(self.params.tensors_mut(), &sum);
        }
        self.step += 1;
        let all: Vec<f64> = sup.iter().chain(&unsup).copied().collect();
        Ok(StepMetrics {
            step: self.step,
            loss: mean(&all),
            supervised_loss: mean(&sup),
            unsupervised_loss: mean(&unsup),
            grad_norm: grad_norm.sqrt(),
            examples: used,
            skipped,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}
