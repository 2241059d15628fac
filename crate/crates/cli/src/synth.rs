use std::path::PathBuf;

use clap::Args;
use mcmixit::synth::{write_shard, DatasetStream, ExampleKind, Split};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the shard.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of examples to write.
    #[arg(long, default_value_t = 100)]
    pub examples: u64,
    /// Example kind: mom, mixed or filtered (full names also accepted).
    #[arg(long)]
    pub kind: Option<ExampleKind>,
    /// Microphones; overrides `data.num_mics`.
    #[arg(long)]
    pub mics: Option<usize>,
    /// Split whose seed range is used: train, validation or test.
    #[arg(long, default_value = "train")]
    pub split: Split,
}

pub fn run(args: SynthArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(kind) = args.kind {
        config.data.kind = kind;
    }
    if let Some(mics) = args.mics {
        config.data.num_mics = mics;
    }
    let stream = DatasetStream::new(config.data.clone(), args.split, config.train.seed)?;
    let records = write_shard(&args.out, stream.iter().take(args.examples as usize))?;
    println!(
        "wrote {} {} examples ({} references each, {} mics) to {}",
        records.len(),
        config.data.kind,
        config.data.kind.num_references(),
        config.data.num_mics,
        args.out.display()
    );
    Ok(())
}
