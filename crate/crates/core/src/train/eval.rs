use serde::{Deserialize, Serialize};

use super::loss::solve_assignment;
use super::TrainError;
use crate::assign::{enumerate_mixing_matrices, is_silent, AssignError, DEFAULT_ENUMERATION_CAP};
use crate::model::{forward, ModelParams};
use crate::signal::{si_snr, EstimateSet, LossConfig, SignalError};
use crate::synth::{SynthError, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAssignment {
    /// Each reference is matched with the single output of highest SI-SNR.
    #[default]
    BestSingle,
    /// Outputs are grouped by the mixing matrix maximizing mean SI-SNR and
    /// each group is summed.
    OracleMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub assignment: EvalAssignment,
    /// Microphone whose output is scored.
    pub channel: usize,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleReport {
    pub id: String,
    /// SI-SNRi per reference; `None` when the reference is degenerate.
    pub si_snri: Vec<Option<f64>>,
    /// Assignment loss at the optimum (MC-MixIT or PIT by example kind).
    pub oracle_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Mean over every scored reference.
    pub mean_si_snri: f64,
    /// Mean SI-SNRi of reference `n` (S1, S2, ...).
    pub per_source: Vec<f64>,
    pub scored_references: usize,
    pub skipped_references: usize,
    pub mean_oracle_loss: f64,
    pub per_example: Vec<ExampleReport>,
}

fn is_degenerate(e: &SignalError) -> bool {
    matches!(e, SignalError::DegenerateReference)
}

/// Scores `estimates` (separations of `example.input`) on one channel.
pub fn evaluate_estimates(
    example: &TrainingExample,
    estimates: &EstimateSet,
    config: &EvalConfig,
) -> Result<ExampleReport, TrainError> {
    let ch = config.channel;
    if ch >= example.num_channels() || estimates.num_channels() != example.num_channels() {
        return Err(SignalError::ShapeMismatch(format!(
            "channel {ch} not available for a {}-channel example",
            example.num_channels()
        ))
        .into());
    }
    let cfg = &config.loss;
    let mix = example.input.channel(ch);
    let n_refs = example.references.len();
    let mut baselines = Vec::with_capacity(n_refs);
    for n in 0..n_refs {
        let r = example.references.channel(n, ch);
        if is_silent(r) {
            baselines.push(None);
            continue;
        }
        match si_snr(r, mix, cfg) {
            Ok(v) => baselines.push(Some(v)),
            Err(e) if is_degenerate(&e) => baselines.push(None),
            Err(e) => return Err(e.into()),
        }
    }

    let si_snri = match config.assignment {
        EvalAssignment::BestSingle => {
            let mut out = Vec::with_capacity(n_refs);
            for (n, base) in baselines.iter().enumerate() {
                let Some(base) = base else {
                    out.push(None);
                    continue;
                };
                let r = example.references.channel(n, ch);
                let mut best = f64::NEG_INFINITY;
                for m in 0..estimates.len() {
                    best = best.max(si_snr(r, estimates.channel(m, ch), cfg)?);
                }
                out.push(Some(best - base));
            }
            out
        }
        EvalAssignment::OracleMix => {
            let len = example.num_frames();
            let mut best: Option<(f64, Vec<Option<f64>>)> = None;
            for a in enumerate_mixing_matrices(estimates.len(), n_refs, DEFAULT_ENUMERATION_CAP)? {
                let mut scores = Vec::with_capacity(n_refs);
                let mut total = 0.0;
                for (n, base) in baselines.iter().enumerate() {
                    let Some(base) = base else {
                        scores.push(None);
                        continue;
                    };
                    let mut sum = vec![0.0; len];
                    for m in a.estimates_for(n) {
                        sum.iter_mut().zip(estimates.channel(m, ch)).for_each(|(s, v)| *s += v);
                    }
                    let v = si_snr(example.references.channel(n, ch), &sum, cfg)?;
                    total += v;
                    scores.push(Some(v - base));
                }
                if best.as_ref().is_none_or(|(t, _)| total > *t) {
                    best = Some((total, scores));
                }
            }
            best.map(|(_, s)| s).unwrap_or_default()
        }
    };

    let oracle_loss = match solve_assignment(example, estimates, cfg) {
        Ok((_, loss)) => Some(loss),
        Err(AssignError::AllReferencesSilent) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ExampleReport {
        id: example.id.clone(),
        si_snri,
        oracle_loss,
    })
}

/// Summarizes per-example reports.
pub fn summarize(reports: Vec<ExampleReport>) -> EvalReport {
    let n_refs = reports.iter().map(|r| r.si_snri.len()).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); n_refs];
    let mut skipped = 0;
    for r in &reports {
        for (n, v) in r.si_snri.iter().enumerate() {
            match v {
                Some(v) => {
                    sums[n].0 += v;
                    sums[n].1 += 1;
                }
                None => skipped += 1,
            }
        }
    }
    let scored: usize = sums.iter().map(|s| s.1).sum();
    let total: f64 = sums.iter().map(|s| s.0).sum();
    let losses: Vec<f64> = reports.iter().filter_map(|r| r.oracle_loss).collect();
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    EvalReport {
        examples: reports.len(),
        mean_si_snri: mean(total, scored),
        per_source: sums.iter().map(|&(s, n)| mean(s, n)).collect(),
        scored_references: scored,
        skipped_references: skipped,
        mean_oracle_loss: mean(losses.iter().sum(), losses.len()),
        per_example: reports,
    }
}

/// Separates every example with `params` and scores it.
pub fn evaluate<I>(params: &ModelParams, examples: I, config: &EvalConfig) -> Result<EvalReport, TrainError>
where
    I: IntoIterator<Item = Result<TrainingExample, SynthError>>,
{
    let mut reports = Vec::new();
    for ex in examples {
        let ex = ex?;
        let est = forward(params, &ex.input)?;
        reports.push(evaluate_estimates(&ex, &est, config)?);
    }
    Ok(summarize(reports))
}
