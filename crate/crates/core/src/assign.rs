//! Assignment losses: MixIT, multi-channel MixIT and supervised PIT.
//!
//! Every solver is an exhaustive search. Candidates are scored in a fixed
//! enumeration order and the first minimum wins, so results are
//! deterministic. Reference/channel pairs with (near) zero energy carry no
//! loss term.

use thiserror::Error;

use crate::signal::{energy, squared_error, thresholded_snr_from_energies, EstimateSet, LossConfig, SignalError};

/// Maximum number of candidate assignments a search may enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// A reference/channel pair is silent when its energy is at most this
/// fraction of its length.
pub const SILENCE_PER_SAMPLE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("search space too large: {size} candidates exceeds cap {cap}")]
    SearchSpaceTooLarge { size: u128, cap: usize },
    #[error("all references are silent")]
    AllReferencesSilent,
    #[error("need at least as many estimates as references ({estimates} < {references})")]
    TooFewEstimates { estimates: usize, references: usize },
    #[error("assignment entry {value} out of range for {references} references")]
    InvalidAssignment { value: usize, references: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Binary `M x N` mixing matrix with unit row sums, stored as the column
/// index of the single 1 in each row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MixingMatrix {
    assignment: Vec<usize>,
    num_references: usize,
}

impl MixingMatrix {
    pub fn new(assignment: Vec<usize>, num_references: usize) -> Result<Self, AssignError> {
        if let Some(&value) = assignment.iter().find(|&&a| a >= num_references) {
            return Err(AssignError::InvalidAssignment {
                value,
                references: num_references,
            });
        }
        Ok(Self {
            assignment,
            num_references,
        })
    }

    /// Reference index that each estimate is routed to.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_estimates(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_references(&self) -> usize {
        self.num_references
    }

    /// Dense `M x N` 0/1 matrix.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        self.assignment
            .iter()
            .map(|&a| (0..self.num_references).map(|n| u8::from(n == a)).collect())
            .collect()
    }

    /// Estimates routed to reference `n`.
    pub fn estimates_for(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == n)
            .map(|(m, _)| m)
    }
}

/// Injective map from references to estimates. Silent references map to
/// `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    estimate_for_reference: Vec<Option<usize>>,
}

impl Permutation {
    pub fn new(estimate_for_reference: Vec<Option<usize>>) -> Self {
        Self { estimate_for_reference }
    }

    pub fn estimate_for_reference(&self) -> &[Option<usize>] {
        &self.estimate_for_reference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult<A> {
    pub matrix: A,
    /// Negated thresholded SNR in dB, summed over references and channels.
    pub loss: f64,
    /// Mean SNR over active channels at the optimum, `None` for silent
    /// references.
    pub per_reference_snr: Vec<Option<f64>>,
    pub candidates_evaluated: usize,
}

/// Lazily enumerates all mixing matrices in base-`N` counting order
/// (estimate 0 is the most significant digit).
#[derive(Debug, Clone)]
pub struct MixingMatrices {
    next: usize,
    total: usize,
    num_estimates: usize,
    num_references: usize,
}

impl Iterator for MixingMatrices {
    type Item = MixingMatrix;

    fn next(&mut self) -> Option<MixingMatrix> {
        if self.next >= self.total {
            return None;
        }
        let mut k = self.next;
        let mut assignment = vec![0; self.num_estimates];
        for slot in assignment.iter_mut().rev() {
            *slot = k % self.num_references;
            k /= self.num_references;
        }
        self.next += 1;
        Some(MixingMatrix {
            assignment,
            num_references: self.num_references,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for MixingMatrices {}

pub fn enumerate_mixing_matrices(
    num_estimates: usize,
    num_references: usize,
    cap: usize,
) -> Result<MixingMatrices, AssignError> {
    if num_references == 0 || num_estimates == 0 {
        return Err(AssignError::TooFewEstimates {
            estimates: num_estimates,
            references: num_references,
        });
    }
    let size = (num_references as u128).checked_pow(num_estimates as u32).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(AssignError::SearchSpaceTooLarge { size, cap });
    }
    Ok(MixingMatrices {
        next: 0,
        total: size as usize,
        num_estimates,
        num_references,
    })
}

/// `[n][c]` views into the references and `[m][c]` views into the estimates.
struct Problem<'a> {
    refs: Vec<Vec<&'a [f64]>>,
    ests: Vec<Vec<&'a [f64]>>,
    /// Energy of each reference/channel, `None` when silent.
    ref_energy: Vec<Vec<Option<f64>>>,
    len: usize,
}

impl<'a> Problem<'a> {
    fn new(refs: Vec<Vec<&'a [f64]>>, ests: Vec<Vec<&'a [f64]>>) -> Result<Self, AssignError> {
        let len = refs
            .first()
            .and_then(|r| r.first())
            .map(|c| c.len())
            .ok_or(SignalError::Empty)?;
        let channels = refs[0].len();
        for group in refs.iter().chain(&ests) {
            if group.len() != channels || group.iter().any(|c| c.len() != len) {
                return Err(SignalError::ShapeMismatch(
                    "references and estimates must share duration and channel count".into(),
                )
                .into());
            }
        }
        if ests.len() < refs.len() {
            return Err(AssignError::TooFewEstimates {
                estimates: ests.len(),
                references: refs.len(),
            });
        }
        let threshold = SILENCE_PER_SAMPLE * len as f64;
        let ref_energy: Vec<Vec<Option<f64>>> = refs
            .iter()
            .map(|r| {
                r.iter()
                    .map(|c| Some(energy(c)).filter(|&e| e > threshold))
                    .collect()
            })
            .collect();
        if ref_energy.iter().flatten().all(Option::is_none) {
            return Err(AssignError::AllReferencesSilent);
        }
        Ok(Self {
            refs,
            ests,
            ref_energy,
            len,
        })
    }

    fn channels(&self) -> usize {
        self.refs[0].len()
    }

    fn reference_active(&self, n: usize) -> bool {
        self.ref_energy[n].iter().any(Option::is_some)
    }

    /// Loss and per-reference SNR for reference `n` reconstructed from the
    /// listed estimates.
    fn reference_term(&self, n: usize, members: &[usize], scratch: &mut [f64], tau: f64) -> (f64, Option<f64>) {
        let mut loss = 0.0;
        let mut snr_sum = 0.0;
        let mut active = 0usize;
        for c in 0..self.channels() {
            let Some(ref_energy) = self.ref_energy[n][c] else {
                continue;
            };
            scratch.fill(0.0);
            for &m in members {
                for (acc, v) in scratch.iter_mut().zip(self.ests[m][c]) {
                    *acc += v;
                }
            }
            let err = squared_error(self.refs[n][c], scratch);
            let snr = thresholded_snr_from_energies(ref_energy, err, tau);
            loss -= snr;
            snr_sum += snr;
            active += 1;
        }
        let snr = (active > 0).then(|| snr_sum / active as f64);
        (loss, snr)
    }

    fn mixing_loss(&self, matrix: &MixingMatrix, tau: f64) -> (f64, Vec<Option<f64>>) {
        let mut scratch = vec![0.0; self.len];
        let mut members = Vec::with_capacity(matrix.num_estimates());
        let mut loss = 0.0;
        let mut snrs = Vec::with_capacity(self.refs.len());
        for n in 0..self.refs.len() {
            members.clear();
            members.extend(matrix.estimates_for(n));
            let (l, s) = self.reference_term(n, &members, &mut scratch, tau);
            loss += l;
            snrs.push(s);
        }
        (loss, snrs)
    }

    fn permutation_loss(&self, perm: &Permutation, tau: f64) -> (f64, Vec<Option<f64>>) {
        let mut scratch = vec![0.0; self.len];
        let mut loss = 0.0;
        let mut snrs = Vec::with_capacity(self.refs.len());
        for (n, est) in perm.estimate_for_reference.iter().enumerate() {
            match est {
                Some(m) => {
                    let (l, s) = self.reference_term(n, &[*m], &mut scratch, tau);
                    loss += l;
                    snrs.push(s);
                }
                None => snrs.push(None),
            }
        }
        (loss, snrs)
    }

    fn solve_mixit(&self, config: &LossConfig) -> Result<AssignmentResult<MixingMatrix>, AssignError> {
        let mut best: Option<AssignmentResult<MixingMatrix>> = None;
        let mut count = 0;
        for matrix in enumerate_mixing_matrices(self.ests.len(), self.refs.len(), DEFAULT_ENUMERATION_CAP)? {
            count += 1;
            let (loss, snrs) = self.mixing_loss(&matrix, config.tau);
            if best.as_ref().is_none_or(|b| loss < b.loss) {
                best = Some(AssignmentResult {
                    matrix,
                    loss,
                    per_reference_snr: snrs,
                    candidates_evaluated: 0,
                });
            }
        }
        let mut best = best.expect("enumeration yields at least one matrix");
        best.candidates_evaluated = count;
        Ok(best)
    }

    fn solve_pit(&self, config: &LossConfig) -> Result<AssignmentResult<Permutation>, AssignError> {
        let active: Vec<usize> = (0..self.refs.len()).filter(|&n| self.reference_active(n)).collect();
        let m = self.ests.len();
        let size: u128 = (0..active.len()).map(|i| (m - i) as u128).product();
        if size > DEFAULT_ENUMERATION_CAP as u128 {
            return Err(AssignError::SearchSpaceTooLarge {
                size,
                cap: DEFAULT_ENUMERATION_CAP,
            });
        }
        let mut best: Option<AssignmentResult<Permutation>> = None;
        let mut count = 0;
        for choice in KPermutations::new(m, active.len()) {
            count += 1;
            let mut slots = vec![None; self.refs.len()];
            for (&n, &e) in active.iter().zip(&choice) {
                slots[n] = Some(e);
            }
            let perm = Permutation::new(slots);
            let (loss, snrs) = self.permutation_loss(&perm, config.tau);
            if best.as_ref().is_none_or(|b| loss < b.loss) {
                best = Some(AssignmentResult {
                    matrix: perm,
                    loss,
                    per_reference_snr: snrs,
                    candidates_evaluated: 0,
                });
            }
        }
        let mut best = best.expect("at least one injective assignment exists");
        best.candidates_evaluated = count;
        Ok(best)
    }
}

/// Ordered selections of `k` distinct items from `0..n`, lexicographic.
struct KPermutations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl KPermutations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for KPermutations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        // Advance to the next lexicographic selection, rightmost slot first.
        let mut next = out.clone();
        let mut pos = k;
        let mut advanced = false;
        while pos > 0 {
            pos -= 1;
            let used: Vec<bool> = {
                let mut u = vec![false; self.n];
                for &v in &next[..pos] {
                    u[v] = true;
                }
                u
            };
            if let Some(v) = (next[pos] + 1..self.n).find(|&v| !used[v]) {
                next[pos] = v;
                let mut used = used;
                used[v] = true;
                let mut fill = 0;
                for slot in next.iter_mut().skip(pos + 1) {
                    while used[fill] {
                        fill += 1;
                    }
                    *slot = fill;
                    used[fill] = true;
                }
                advanced = true;
                break;
            }
        }
        self.current = advanced.then_some(next);
        Some(out)
    }
}

fn single_channel<R: AsRef<[f64]>>(signals: &[R]) -> Vec<Vec<&[f64]>> {
    signals.iter().map(|s| vec![s.as_ref()]).collect()
}

fn multi_channel(set: &EstimateSet) -> Vec<Vec<&[f64]>> {
    (0..set.len())
        .map(|m| (0..set.num_channels()).map(|c| set.channel(m, c)).collect())
        .collect()
}

/// Single-channel MixIT: `min_A sum_n -SNR_tau(x_n, (S A)_n)`.
pub fn mixit_loss<R: AsRef<[f64]>, E: AsRef<[f64]>>(
    references: &[R],
    estimates: &[E],
    config: &LossConfig,
) -> Result<AssignmentResult<MixingMatrix>, AssignError> {
    Problem::new(single_channel(references), single_channel(estimates))?.solve_mixit(config)
}

/// Multi-channel MixIT with one mixing matrix shared by every channel.
pub fn mc_mixit_loss(
    references: &EstimateSet,
    estimates: &EstimateSet,
    config: &LossConfig,
) -> Result<AssignmentResult<MixingMatrix>, AssignError> {
    Problem::new(multi_channel(references), multi_channel(estimates))?.solve_mixit(config)
}

/// Supervised permutation-invariant loss over injective assignments of the
/// non-silent references to distinct estimates.
pub fn pit_loss(
    references: &EstimateSet,
    estimates: &EstimateSet,
    config: &LossConfig,
) -> Result<AssignmentResult<Permutation>, AssignError> {
    Problem::new(multi_channel(references), multi_channel(estimates))?.solve_pit(config)
}

/// Loss of a fixed mixing matrix under the multi-channel MixIT objective.
pub fn mixing_matrix_loss(
    references: &EstimateSet,
    estimates: &EstimateSet,
    matrix: &MixingMatrix,
    config: &LossConfig,
) -> Result<f64, AssignError> {
    let problem = Problem::new(multi_channel(references), multi_channel(estimates))?;
    if matrix.num_references() != references.len() || matrix.num_estimates() != estimates.len() {
        return Err(SignalError::ShapeMismatch("mixing matrix does not match inputs".into()).into());
    }
    Ok(problem.mixing_loss(matrix, config.tau).0)
}

/// Loss of a fixed reference-to-estimate assignment under the PIT objective.
pub fn permutation_loss(
    references: &EstimateSet,
    estimates: &EstimateSet,
    perm: &Permutation,
    config: &LossConfig,
) -> Result<f64, AssignError> {
    let problem = Problem::new(multi_channel(references), multi_channel(estimates))?;
    if perm.estimate_for_reference.len() != references.len()
        || perm.estimate_for_reference.iter().flatten().any(|&m| m >= estimates.len())
    {
        return Err(SignalError::ShapeMismatch("assignment does not match inputs".into()).into());
    }
    Ok(problem.permutation_loss(perm, config.tau).0)
}

/// Whether the reference/channel pair counts as silent.
pub fn is_silent(channel: &[f64]) -> bool {
    energy(channel) <= SILENCE_PER_SAMPLE * channel.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::MultiChannelSignal;

    fn tone(k: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| (2.0 * std::f64::consts::PI * k * t as f64 / len as f64).sin())
            .collect()
    }

    fn set(channels: Vec<Vec<Vec<f64>>>) -> EstimateSet {
        EstimateSet::new(
            channels
                .into_iter()
                .map(|c| MultiChannelSignal::new(c, 16000).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn enumeration_counts_and_order() {
        assert_eq!(enumerate_mixing_matrices(3, 2, 1000).unwrap().count(), 8);
        assert_eq!(enumerate_mixing_matrices(8, 2, 1000).unwrap().count(), 256);
        let one: Vec<_> = enumerate_mixing_matrices(1, 1, 10).unwrap().collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].to_dense(), vec![vec![1]]);
        let all: Vec<_> = enumerate_mixing_matrices(3, 2, 100).unwrap().collect();
        assert_eq!(all[1].assignment(), &[0, 0, 1]);
        assert_eq!(all[4].assignment(), &[1, 0, 0]);
        for m in &all {
            assert!(m.to_dense().iter().all(|row| row.iter().map(|&v| v as u32).sum::<u32>() == 1));
        }
        assert!(matches!(
            enumerate_mixing_matrices(30, 2, DEFAULT_ENUMERATION_CAP),
            Err(AssignError::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn k_permutations_are_lexicographic_and_complete() {
        let all: Vec<_> = KPermutations::new(4, 2).collect();
        assert_eq!(all.len(), 12);
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[1], vec![0, 2]);
        assert_eq!(all[3], vec![1, 0]);
        assert_eq!(KPermutations::new(8, 3).count(), 336);
        assert_eq!(KPermutations::new(3, 0).count(), 1);
    }

    #[test]
    fn mixit_perfect_split_reaches_cap() {
        let x1 = tone(3.0, 256);
        let x2 = tone(7.0, 256);
        let zero = vec![0.0; 256];
        let est = [x1.clone(), x2.clone(), zero.clone(), zero];
        let r = mixit_loss(&[x1.clone(), x2.clone()], &est, &LossConfig::default()).unwrap();
        assert!((r.loss + 60.0).abs() < 1e-9, "{}", r.loss);
        assert_eq!(r.matrix.assignment()[..2], [0, 1]);

        let swapped = mixit_loss(&[x1.clone(), x2.clone()], &[x2, x1], &LossConfig::default()).unwrap();
        assert_eq!(swapped.matrix.assignment(), &[1, 0]);
        assert!((swapped.loss + 60.0).abs() < 1e-9);
    }

    #[test]
    fn silent_references_are_skipped() {
        let x1 = tone(3.0, 128);
        let zero = vec![0.0; 128];
        let r = mixit_loss(&[x1.clone(), zero.clone()], &[x1.clone(), zero.clone()], &LossConfig::default()).unwrap();
        assert!((r.loss + 30.0).abs() < 1e-9);
        assert_eq!(r.per_reference_snr[1], None);
        assert_eq!(
            mixit_loss(&[zero.clone()], &[x1.clone()], &LossConfig::default()),
            Err(AssignError::AllReferencesSilent)
        );
        assert!(mixit_loss(&[x1.clone()], &[vec![0.0; 64]], &LossConfig::default()).is_err());
    }

    #[test]
    fn pit_swaps_and_skips_silent_targets() {
        let a = tone(2.0, 64);
        let b = tone(5.0, 64);
        let refs = set(vec![vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]]);
        let est = set(vec![vec![b.clone(), a.clone()], vec![a.clone(), b.clone()]]);
        let r = pit_loss(&refs, &est, &LossConfig::default()).unwrap();
        assert_eq!(r.matrix.estimate_for_reference(), &[Some(1), Some(0)]);
        assert!((r.loss + 30.0 * 2.0 * 2.0).abs() < 1e-9);

        let zero = vec![0.0; 64];
        let refs = set(vec![vec![a.clone()], vec![zero.clone()], vec![b.clone()]]);
        let est = set(vec![vec![b.clone()], vec![zero.clone()], vec![a.clone()], vec![zero]]);
        let r = pit_loss(&refs, &est, &LossConfig::default()).unwrap();
        assert_eq!(r.matrix.estimate_for_reference(), &[Some(2), None, Some(0)]);
        assert_eq!(r.candidates_evaluated, 12);
    }

    #[test]
    fn fixed_matrix_loss_matches_search() {
        let refs = set(vec![vec![tone(1.0, 32)], vec![tone(4.0, 32)]]);
        let est = set(vec![vec![tone(4.0, 32)], vec![tone(1.0, 32)], vec![tone(9.0, 32)]]);
        let r = mc_mixit_loss(&refs, &est, &LossConfig::default()).unwrap();
        let again = mixing_matrix_loss(&refs, &est, &r.matrix, &LossConfig::default()).unwrap();
        assert_eq!(r.loss, again);
        let bad = MixingMatrix::new(vec![0, 1], 2).unwrap();
        assert!(mixing_matrix_loss(&refs, &est, &bad, &LossConfig::default()).is_err());
        assert!(MixingMatrix::new(vec![0, 2], 2).is_err());
    }
}
