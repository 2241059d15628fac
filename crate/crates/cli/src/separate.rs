use std::path::PathBuf;

use clap::Args;
use mcmixit::checkpoint::load_model;
use mcmixit::model::{forward, ModelParams};
use mcmixit::signal::{EstimateSet, MultiChannelSignal};
use mcmixit::wav::{read_wav, write_wav, SampleFormat};

use crate::error::CliError;

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input WAV (16-bit PCM or 32-bit float, any channel count).
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for `source1.wav` ... `sourceM.wav`.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected number of outputs; must match the model when given.
    #[arg(long)]
    pub num_outputs: Option<usize>,
    /// Block length in seconds for long inputs; 0 processes in one pass.
    #[arg(long, default_value_t = 10.0)]
    pub block_seconds: f64,
    /// Crossfade between consecutive blocks in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub overlap_seconds: f64,
}

/// Permutation `p` maximizing `sum_m sim[m][p[m]]`, exhaustive up to eight
/// outputs and greedy beyond.
fn best_permutation(sim: &[Vec<f64>]) -> Vec<usize> {
    let m = sim.len();
    if m > 8 {
        let mut used = vec![false; m];
        return (0..m)
            .map(|i| {
                let j = (0..m)
                    .filter(|&j| !used[j])
                    .max_by(|&a, &b| sim[i][a].total_cmp(&sim[i][b]))
                    .expect("free column");
                used[j] = true;
                j
            })
            .collect();
    }
    fn go(sim: &[Vec<f64>], perm: &mut Vec<usize>, used: &mut [bool], score: f64, best: &mut (f64, Vec<usize>)) {
        let i = perm.len();
        if i == sim.len() {
            if score > best.0 {
                *best = (score, perm.clone());
            }
            return;
        }
        for j in 0..sim.len() {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                go(sim, perm, used, score + sim[i][j], best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, (0..m).collect());
    go(sim, &mut Vec::new(), &mut vec![false; m], 0.0, &mut best);
    best.1
}

/// Separates `signal` in blocks of `block` samples that overlap by
/// `overlap`. Each block's outputs are reordered to best match the previous
/// block over the shared span, then crossfaded with complementary
/// raised-cosine weights, so the stitched outputs still sum to the input.
pub fn separate_blocks(
    params: &ModelParams,
    signal: &MultiChannelSignal,
    block: usize,
    overlap: usize,
) -> Result<EstimateSet, CliError> {
    let total = signal.num_frames();
    if block == 0 || block >= total {
        return Ok(forward(params, signal)?);
    }
    let (window, hop) = (params.config().window, params.config().hop);
    let block = block.max(window + hop);
    if overlap >= block {
        return Err(CliError::Usage(format!("overlap {overlap} must be shorter than block {block}")));
    }
    let (m, c) = (params.config().num_outputs, signal.num_channels());
    // Block starts sit on the encoder's frame grid so that, away from the
    // seams, every block sees the same frames as a single pass would.
    let step = ((block - overlap) / hop).max(1) * hop;
    let mut spans = vec![(0, block)];
    while spans.last().expect("non-empty").1 < total {
        let mut s = spans.last().expect("non-empty").0 + step;
        if total - s < window {
            s = (total - window) / hop * hop;
        }
        spans.push((s, (s + block).min(total)));
    }
    let mut out = vec![vec![vec![0.0; total]; c]; m];
    let mut prev_end = 0usize;
    for (start, end) in spans {
        let est = forward(params, &signal.window(start, end - start))?;
        let shared = prev_end.saturating_sub(start).min(end - start);
        let perm: Vec<usize> = if shared == 0 {
            (0..m).collect()
        } else {
            let sim: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    (0..m)
                        .map(|j| {
                            (0..c)
                                .map(|ch| {
                                    let old = &out[i][ch][start..start + shared];
                                    let new = &est.channel(j, ch)[..shared];
                                    old.iter().zip(new).map(|(a, b)| a * b).sum::<f64>()
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect();
            best_permutation(&sim)
        };
        for (i, &j) in perm.iter().enumerate() {
            for ch in 0..c {
                let src = est.channel(j, ch);
                let dst = &mut out[i][ch];
                for (k, &v) in src.iter().enumerate() {
                    let t = start + k;
                    if k < shared {
                        let w = 0.5 - 0.5 * (std::f64::consts::PI * (k as f64 + 0.5) / shared as f64).cos();
                        dst[t] = (1.0 - w) * dst[t] + w * v;
                    } else {
                        dst[t] = v;
                    }
                }
            }
        }
        prev_end = prev_end.max(end);
    }
    let signals = out
        .into_iter()
        .map(|chans| MultiChannelSignal::new(chans, signal.sample_rate()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    EstimateSet::new(signals).map_err(|e| CliError::Data(e.to_string()))
}

pub fn run(args: SeparateArgs) -> Result<(), CliError> {
    let params = load_model(&args.checkpoint)?;
    let m = params.config().num_outputs;
    if let Some(n) = args.num_outputs.filter(|&n| n != m) {
        return Err(CliError::Usage(format!("model has {m} outputs, --num-outputs {n} requested")));
    }
    let signal = read_wav(&args.input)?;
    if signal.num_frames() < params.config().window {
        return Err(CliError::Data(format!(
            "input has {} samples, shorter than the {}-sample window",
            signal.num_frames(),
            params.config().window
        )));
    }
    if !(args.block_seconds >= 0.0 && args.overlap_seconds >= 0.0) {
        return Err(CliError::Usage("block and overlap durations must be non-negative".into()));
    }
    let sr = signal.sample_rate() as f64;
    let block = (args.block_seconds * sr).round() as usize;
    let overlap = (args.overlap_seconds * sr).round() as usize;
    let block = if block > 0 { block.max(params.config().window) } else { 0 };
    let estimates = separate_blocks(&params, &signal, block, overlap.min(block.saturating_sub(1)))?;
    if estimates.signals().iter().flat_map(|s| s.channels()).flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("separated output is not finite".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(args.out.display(), e))?;
    for (i, s) in estimates.signals().iter().enumerate() {
        let path = args.out.join(format!("source{}.wav", i + 1));
        write_wav(&path, s, SampleFormat::Float32)?;
    }
    println!(
        "wrote {m} outputs ({} channels, {} samples) to {}",
        signal.num_channels(),
        signal.num_frames(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcmixit::model::ModelConfig;

    fn noise(channels: usize, len: usize, seed: u64) -> MultiChannelSignal {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let chans = (0..channels)
            .map(|_| {
                (0..len)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                    })
                    .collect()
            })
            .collect();
        MultiChannelSignal::new(chans, 8000).unwrap()
    }

    #[test]
    fn permutation_search_finds_the_maximum() {
        let sim = vec![vec![0.0, 1.0, 0.2], vec![0.9, 0.0, 0.1], vec![0.0, 0.3, 0.5]];
        assert_eq!(best_permutation(&sim), vec![1, 0, 2]);
    }

    #[test]
    fn blocks_sum_to_the_input() {
        let params = ModelParams::init(ModelConfig::tiny(), 2).unwrap();
        let x = noise(2, 3000, 5);
        let est = separate_blocks(&params, &x, 1000, 200).unwrap();
        let sum = est.sum();
        for ch in 0..2 {
            let err = sum.channel(ch).iter().zip(x.channel(ch)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn blocks_match_single_pass_away_from_seams() {
        let params = ModelParams::init(ModelConfig::tiny(), 4).unwrap();
        let x = noise(1, 6000, 9);
        let whole = forward(&params, &x).unwrap();
        let (block, overlap) = (2000, 500);
        let blocked = separate_blocks(&params, &x, block, overlap).unwrap();
        // Blocks cover [0, 2000), [1504, 3504), [3008, 5008), [4512, 6000).
        // Compare well inside each block's exclusive span, past the
        // receptive field of the block edges.
        for span in [200..1000, 2100..2500, 3600..4000, 5100..5500] {
            for m in 0..whole.len() {
                let err = span
                    .clone()
                    .map(|t| (whole.channel(m, 0)[t] - blocked.channel(m, 0)[t]).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-3, "output {m} at {span:?}: {err}");
            }
        }
    }
}
