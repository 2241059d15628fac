use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use mcmixit::checkpoint::Checkpoint;
use mcmixit::model::ModelParams;
use mcmixit::synth::{read_shard, DatasetStream, ExampleKind, ExampleSource, Split};
use mcmixit::train::{warm_start, MetricsLog, StepMetrics, Streams, TrainMode, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;

pub const LOCK_FILE: &str = "run.lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest.ckpt";
pub const FINAL: &str = "final.ckpt";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run directory for checkpoints, metrics and the lock file.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub semi_mix_ratio: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Checkpoint whose weights initialize the model.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Microphones for generated data; overrides `data.num_mics`.
    #[arg(long)]
    pub mics: Option<usize>,
    /// Shard for the unsupervised stream instead of generated examples.
    #[arg(long)]
    pub unsupervised_data: Option<PathBuf>,
    /// Shard for the supervised stream instead of generated examples.
    #[arg(long)]
    pub supervised_data: Option<PathBuf>,
    /// Steps between progress lines on stdout.
    #[arg(long, default_value_t = 100)]
    pub log_interval: u64,
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is held by another training run (delete it if that run is gone)",
                path.display()
            ))),
            Err(e) => Err(CliError::io(path.display(), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn apply_overrides(args: &TrainArgs, config: &mut RunConfig) {
    let t = &mut config.train;
    if let Some(v) = args.mode {
        t.mode = v;
    }
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.semi_mix_ratio {
        t.semi_mix_ratio = v;
    }
    if let Some(v) = args.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    if let Some(v) = &args.warm_start {
        t.warm_start_path = Some(v.clone());
    }
    if let Some(v) = args.mics {
        config.data.num_mics = v;
    }
}

/// Writes via a temporary file so a crash never leaves a torn checkpoint.
fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))
}

/// Keeps metrics records up to `step`, dropping any written after the
/// checkpoint being resumed.
fn truncate_metrics(path: &Path, step: u64) -> Result<(), CliError> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: StepMetrics = serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| CliError::io(path.display(), e))
}

enum Source {
    Generated(DatasetStream),
    Shard(mcmixit::synth::ShardDataset),
}

impl Source {
    fn as_dyn(&self) -> &dyn ExampleSource {
        match self {
            Self::Generated(s) => s,
            Self::Shard(s) => s,
        }
    }
}

fn stream(shard: Option<&Path>, config: &RunConfig, kind: ExampleKind, split_seed: u64) -> Result<Source, CliError> {
    match shard {
        Some(dir) => Ok(Source::Shard(read_shard(dir)?)),
        None => {
            let data = mcmixit::synth::DatasetConfig { kind, ..config.data.clone() };
            Ok(Source::Generated(DatasetStream::new(data, Split::Train, split_seed)?))
        }
    }
}

pub fn run(args: TrainArgs, mut config: RunConfig, global_seed: Option<u64>, config_given: bool) -> Result<(), CliError> {
    let run_dir = &args.run_dir;
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(|e| CliError::io(ck_dir.display(), e))?;
    let _lock = RunLock::acquire(run_dir)?;

    let saved_config = run_dir.join(CONFIG_FILE);
    if args.resume && !config_given && saved_config.exists() {
        config = RunConfig::load(Some(&saved_config))?;
        if let Some(seed) = global_seed {
            config.train.seed = seed;
        }
    }
    apply_overrides(&args, &mut config);
    let model_config = config.model.resolve()?;
    config.train.validate()?;
    config.data.validate()?;

    let need_sup = matches!(config.train.mode, TrainMode::Supervised | TrainMode::Semi);
    let need_unsup = matches!(config.train.mode, TrainMode::Unsupervised | TrainMode::Semi);
    let seed = config.train.seed;
    let sup_kind = if config.data.kind.is_supervised() {
        config.data.kind
    } else {
        ExampleKind::SupervisedFiltered
    };
    let sup = need_sup
        .then(|| stream(args.supervised_data.as_deref(), &config, sup_kind, seed + 1))
        .transpose()?;
    let unsup = need_unsup
        .then(|| stream(args.unsupervised_data.as_deref(), &config, ExampleKind::UnsupervisedMom, seed))
        .transpose()?;
    let streams = Streams {
        supervised: sup.as_ref().map(Source::as_dyn),
        unsupervised: unsup.as_ref().map(Source::as_dyn),
    };
    streams.check(&config.train)?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let latest = ck_dir.join(LATEST);
    let (mut trainer, mut log) = if args.resume {
        let ck = Checkpoint::load(&latest)?;
        if ck.config != model_config {
            return Err(CliError::Config(format!("{} was written by a different model config", latest.display())));
        }
        let trainer = Trainer::resume(config.train.clone(), &ck)?;
        truncate_metrics(&metrics_path, trainer.step_count())?;
        let log = MetricsLog::append(&metrics_path).map_err(|e| CliError::io(metrics_path.display(), e))?;
        println!("resuming at step {}", trainer.step_count());
        (trainer, log)
    } else {
        let mut params = ModelParams::init(model_config, seed)?;
        if let Some(path) = &config.train.warm_start_path {
            params = warm_start(&params, path)?;
            println!("warm start from {}", path.display());
        }
        let trainer = Trainer::new(config.train.clone(), params)?;
        let text = toml::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&saved_config, text).map_err(|e| CliError::io(saved_config.display(), e))?;
        let log = MetricsLog::create(&metrics_path).map_err(|e| CliError::io(metrics_path.display(), e))?;
        (trainer, log)
    };

    let interval = config.train.checkpoint_interval;
    while trainer.step_count() < config.train.steps {
        let m = trainer.step(&streams)?;
        log.write(&m).map_err(|e| CliError::io(metrics_path.display(), e))?;
        let step = m.step;
        if args.log_interval > 0 && step % args.log_interval == 0 {
            let loss = m.loss.map_or("n/a".to_string(), |l| format!("{l:.4}"));
            println!("step {step} loss {loss} grad_norm {:.4}", m.grad_norm);
        }
        if interval > 0 && step % interval == 0 {
            let ck = trainer.checkpoint();
            save_atomic(&ck, &ck_dir.join(format!("step-{step:09}.ckpt")))?;
            save_atomic(&ck, &latest)?;
        }
    }
    let ck = trainer.checkpoint();
    save_atomic(&ck, &latest)?;
    save_atomic(&ck, &ck_dir.join(FINAL))?;
    println!("finished {} steps; final checkpoint {}", trainer.step_count(), ck_dir.join(FINAL).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CliError::Usage(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        for step in 1..=5 {
            log.write(&StepMetrics {
                step,
                loss: Some(1.0),
                supervised_loss: None,
                unsupervised_loss: Some(1.0),
                grad_norm: 0.5,
                examples: 1,
                skipped: 0,
                wall_time_s: 0.0,
            })
            .unwrap();
        }
        truncate_metrics(&path, 3).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
    }
}
