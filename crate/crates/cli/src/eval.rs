use std::path::PathBuf;

use clap::{Args, ValueEnum};
use mcmixit::checkpoint::load_model;
use mcmixit::synth::{read_shard, DatasetStream, SynthError, TrainingExample, Split};
use mcmixit::train::{evaluate, EvalAssignment, EvalConfig, EvalReport};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Assignment {
    BestSingle,
    OracleMix,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Shard directory; without it, examples are generated from [data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Splits of generated data to score, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "test")]
    pub split: Vec<Split>,
    /// Generated examples per split, or the first N shard records.
    #[arg(long, default_value_t = 100)]
    pub examples: usize,
    /// Microphone counts for a cross-evaluation table, e.g. 1,2,4.
    #[arg(long, value_delimiter = ',')]
    pub mics: Vec<usize>,
    /// How estimates are matched to references.
    #[arg(long, value_enum, default_value_t = Assignment::BestSingle)]
    pub assignment: Assignment,
    /// Output channel that is scored.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Row {
    source: String,
    mics: usize,
    report: EvalReport,
}

fn row_line(row: &Row) -> String {
    let per: Vec<String> = row
        .report
        .per_source
        .iter()
        .enumerate()
        .map(|(i, v)| format!("S{}={v:.2}", i + 1))
        .collect();
    format!(
        "{:<12} {:>4} {:>8} {:>10.2}  {}  oracle_loss={:.3} skipped={}",
        row.source,
        row.mics,
        row.report.examples,
        row.report.mean_si_snri,
        per.join(" "),
        row.report.mean_oracle_loss,
        row.report.skipped_references
    )
}

pub fn run(args: EvalArgs, config: RunConfig) -> Result<(), CliError> {
    let params = load_model(&args.checkpoint)?;
    let eval = EvalConfig {
        assignment: match args.assignment {
            Assignment::BestSingle => EvalAssignment::BestSingle,
            Assignment::OracleMix => EvalAssignment::OracleMix,
        },
        channel: args.channel,
        loss: config.train.loss,
    };

    let mut sets: Vec<(String, Vec<TrainingExample>)> = Vec::new();
    if let Some(dir) = &args.data {
        let shard = read_shard(dir)?;
        let examples = shard
            .records()
            .iter()
            .take(args.examples)
            .map(|r| shard.load(r))
            .collect::<Result<Vec<_>, SynthError>>()?;
        sets.push((dir.display().to_string(), examples));
    } else {
        for split in &args.split {
            let stream = DatasetStream::new(config.data.clone(), *split, config.train.seed)?;
            let examples = stream.iter().take(args.examples).collect::<Result<Vec<_>, SynthError>>()?;
            sets.push((split.as_str().to_string(), examples));
        }
    }

    let mut rows = Vec::new();
    for (source, examples) in &sets {
        let available = examples.first().map_or(0, TrainingExample::num_channels);
        let counts = if args.mics.is_empty() { vec![available] } else { args.mics.clone() };
        for &mics in &counts {
            if mics == 0 || mics > available {
                return Err(CliError::Data(format!("{source} has {available} mics, {mics} requested")));
            }
            if args.channel >= mics {
                return Err(CliError::Usage(format!("--channel {} needs at least {} mics", args.channel, args.channel + 1)));
            }
            let picks: Vec<usize> = (0..mics).collect();
            let subset = examples.iter().map(|e| e.select_channels(&picks));
            let report = evaluate(&params, subset, &eval)?;
            rows.push(Row {
                source: source.clone(),
                mics,
                report,
            });
        }
    }

    println!("{:<12} {:>4} {:>8} {:>10}  per-source SI-SNRi (dB)", "data", "mics", "examples", "SI-SNRi");
    for row in &rows {
        println!("{}", row_line(row));
    }
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path.display(), e))?;
    }
    Ok(())
}
