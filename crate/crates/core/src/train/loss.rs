use crate::assign::{is_silent, mc_mixit_loss, pit_loss, AssignError};
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::signal::{energy, EstimateSet, LossConfig};
use crate::synth::TrainingExample;

/// Which estimates are summed to approximate each reference.
pub type Groups = Vec<Vec<usize>>;

/// Solves the assignment for `example` against fixed `estimates`: MC-MixIT
/// for unsupervised examples, PIT otherwise. Returns the groups and the
/// optimal loss.
pub fn solve_assignment(
    example: &TrainingExample,
    estimates: &EstimateSet,
    config: &LossConfig,
) -> Result<(Groups, f64), AssignError> {
    let n = example.references.len();
    if example.kind.is_supervised() {
        let r = pit_loss(&example.references, estimates, config)?;
        let groups = r
            .matrix
            .estimate_for_reference()
            .iter()
            .map(|m| m.iter().copied().collect())
            .collect();
        Ok((groups, r.loss))
    } else {
        let r = mc_mixit_loss(&example.references, estimates, config)?;
        let groups = (0..n).map(|k| r.matrix.estimates_for(k).collect()).collect();
        Ok((groups, r.loss))
    }
}

/// Records `sum_{n,c} -SNR_tau(y_nc, sum_{m in groups[n]} s_mc)` on `g`, where
/// `estimates` is the `(M C) x T` output of the network. Silent
/// reference/channel pairs are skipped.
pub fn assignment_loss(
    g: &mut Graph,
    estimates: Var,
    references: &EstimateSet,
    groups: &[Vec<usize>],
    num_channels: usize,
    tau: f64,
) -> Result<Var, TensorError> {
    if groups.len() != references.len() || references.num_channels() != num_channels {
        return Err(TensorError::invalid("assignment_loss", "groups or channels do not match references"));
    }
    let len = references.num_frames();
    let mut constant = 0.0;
    let mut total: Option<Var> = None;
    for (n, members) in groups.iter().enumerate() {
        for c in 0..num_channels {
            let y = references.channel(n, c);
            if is_silent(y) {
                continue;
            }
            let e = energy(y);
            constant -= 10.0 * e.log10();
            if members.is_empty() {
                constant += 10.0 * (e * (1.0 + tau)).log10();
                continue;
            }
            let mut sum = g.slice(estimates, 0, members[0] * num_channels + c, 1)?;
            for &m in &members[1..] {
                let row = g.slice(estimates, 0, m * num_channels + c, 1)?;
                sum = g.add(sum, row)?;
            }
            let target = g.constant(Tensor::matrix(1, len, y.to_vec())?);
            let diff = g.sub(sum, target)?;
            let sq = g.square(diff)?;
            let err = g.sum(sq, None)?;
            let den = g.add_scalar(err, tau * e)?;
            let db = g.log10(den)?;
            let term = g.scale(db, 10.0)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    match total {
        Some(t) => g.add_scalar(t, constant),
        None => Ok(g.constant(Tensor::scalar(constant))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::MultiChannelSignal;
    use crate::synth::ExampleKind;

    fn sig(chans: Vec<Vec<f64>>) -> MultiChannelSignal {
        MultiChannelSignal::new(chans, 8000).unwrap()
    }

    #[test]
    fn graph_loss_matches_numeric_optimum() {
        let t = 32;
        let wave = |f: f64, p: f64| (0..t).map(|n| (f * n as f64 + p).sin()).collect::<Vec<_>>();
        let refs = EstimateSet::new(vec![
            sig(vec![wave(0.3, 0.0), wave(0.3, 1.0)]),
            sig(vec![wave(1.1, 0.5), vec![0.0; t]]),
        ])
        .unwrap();
        let ests = EstimateSet::new(vec![
            sig(vec![wave(0.31, 0.0), wave(0.3, 1.1)]),
            sig(vec![wave(1.1, 0.4), wave(2.0, 0.0)]),
            sig(vec![wave(0.7, 0.2), wave(0.5, 0.0)]),
        ])
        .unwrap();
        for kind in [ExampleKind::UnsupervisedMom, ExampleKind::SupervisedMixed] {
            let ex = TrainingExample {
                id: "x".into(),
                kind,
                input: refs.sum(),
                references: refs.clone(),
                source_ids: vec![],
                seed: 0,
            };
            let cfg = LossConfig::default();
            let (groups, numeric) = solve_assignment(&ex, &ests, &cfg).unwrap();
            let mut rows = Vec::new();
            for s in ests.signals() {
                for c in 0..2 {
                    rows.extend_from_slice(s.channel(c));
                }
            }
            let mut g = Graph::new();
            let v = g.constant(Tensor::matrix(6, t, rows).unwrap());
            let l = assignment_loss(&mut g, v, &refs, &groups, 2, cfg.tau).unwrap();
            let graph = g.value(l).item().unwrap();
            assert!((graph - numeric).abs() < 1e-9, "{kind}: {graph} vs {numeric}");
        }
    }
}
