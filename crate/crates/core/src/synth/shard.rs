//! On-disk example shards: 32-bit float WAV files plus a JSON-lines
//! manifest with one record per example.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExampleKind, ExampleSource, SynthError, TrainingExample};
use crate::signal::EstimateSet;
use crate::wav::{read_wav, write_wav, SampleFormat};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: ExampleKind,
    /// Paths relative to the shard directory.
    pub input: String,
    pub references: Vec<String>,
    pub num_references: usize,
    pub num_channels: usize,
    pub num_frames: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub source_ids: Vec<String>,
}

/// Writes every example into `dir` (created if missing) and returns the
/// manifest records in order.
pub fn write_shard<I>(dir: impl AsRef<Path>, examples: I) -> Result<Vec<ManifestRecord>, SynthError>
where
    I: IntoIterator<Item = Result<TrainingExample, SynthError>>,
{
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut records = Vec::new();
    for ex in examples {
        let ex = ex?;
        if ex.id.is_empty() || ex.id.contains(['/', '\\']) {
            return Err(SynthError::Shard(format!("example id {:?} is not a valid file stem", ex.id)));
        }
        let input = format!("{}.input.wav", ex.id);
        write_wav(dir.join(&input), &ex.input, SampleFormat::Float32)?;
        let mut references = Vec::with_capacity(ex.references.len());
        for (n, r) in ex.references.signals().iter().enumerate() {
            let name = format!("{}.ref{n}.wav", ex.id);
            write_wav(dir.join(&name), r, SampleFormat::Float32)?;
            references.push(name);
        }
        let record = ManifestRecord {
            id: ex.id.clone(),
            kind: ex.kind,
            input,
            num_references: references.len(),
            references,
            num_channels: ex.num_channels(),
            num_frames: ex.num_frames(),
            sample_rate: ex.input.sample_rate(),
            seed: ex.seed,
            source_ids: ex.source_ids.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| SynthError::Shard(e.to_string()))?;
        writeln!(manifest, "{line}")?;
        records.push(record);
    }
    manifest.flush()?;
    Ok(records)
}

/// Reads a shard manifest; WAV files are loaded on demand.
pub fn read_shard(dir: impl AsRef<Path>) -> Result<ShardDataset, SynthError> {
    let dir = dir.as_ref().to_path_buf();
    let file = File::open(dir.join(MANIFEST_FILE))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| SynthError::Shard(format!("{MANIFEST_FILE} line {}: {e}", i + 1)))?;
        if record.references.len() != record.num_references {
            return Err(SynthError::Shard(format!(
                "{}: {} reference paths but num_references = {}",
                record.id,
                record.references.len(),
                record.num_references
            )));
        }
        records.push(record);
    }
    Ok(ShardDataset { dir, records })
}

#[derive(Debug, Clone)]
pub struct ShardDataset {
    dir: PathBuf,
    records: Vec<ManifestRecord>,
}

impl ShardDataset {
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self, record: &ManifestRecord) -> Result<TrainingExample, SynthError> {
        let input = read_wav(self.dir.join(&record.input))?;
        let refs = record
            .references
            .iter()
            .map(|p| read_wav(self.dir.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let references = EstimateSet::new(refs)?;
        if !input.same_shape(references.get(0)) {
            return Err(SynthError::Shard(format!("{}: input and references differ in shape", record.id)));
        }
        if input.num_channels() != record.num_channels || input.num_frames() != record.num_frames {
            return Err(SynthError::Shard(format!("{}: WAV shape disagrees with manifest", record.id)));
        }
        Ok(TrainingExample {
            id: record.id.clone(),
            kind: record.kind,
            input,
            references,
            source_ids: record.source_ids.clone(),
            seed: record.seed,
        })
    }
}

impl ExampleSource for ShardDataset {
    /// Cycles through the shard.
    fn example(&self, index: u64) -> Result<TrainingExample, SynthError> {
        if self.records.is_empty() {
            return Err(SynthError::Shard("shard is empty".into()));
        }
        self.load(&self.records[(index % self.records.len() as u64) as usize])
    }

    fn len(&self) -> Option<u64> {
        Some(self.records.len() as u64)
    }
}
