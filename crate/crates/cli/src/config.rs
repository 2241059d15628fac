//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! sections, overridden by command-line flags.

use std::path::Path;

use mcmixit::model::ModelConfig;
use mcmixit::synth::DatasetConfig;
use mcmixit::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Model section: a named preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub num_superblocks: Option<usize>,
    pub blocks_per_superblock: Option<usize>,
    pub kernel_width: Option<usize>,
    pub window: Option<usize>,
    pub hop: Option<usize>,
    pub bottleneck_dim: Option<usize>,
    pub conv_channels: Option<usize>,
    pub tac_dim: Option<usize>,
    pub num_outputs: Option<usize>,
    pub encoder_bases: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            num_superblocks: None,
            blocks_per_superblock: None,
            kernel_width: None,
            window: None,
            hop: None,
            bottleneck_dim: None,
            conv_channels: None,
            tac_dim: None,
            num_outputs: None,
            encoder_bases: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let mut c = ModelConfig::preset(&self.preset)
            .ok_or_else(|| CliError::Config(format!("unknown model preset {:?} (expected tiny or full)", self.preset)))?;
        let fields = [
            (&mut c.num_superblocks, self.num_superblocks),
            (&mut c.blocks_per_superblock, self.blocks_per_superblock),
            (&mut c.kernel_width, self.kernel_width),
            (&mut c.window, self.window),
            (&mut c.hop, self.hop),
            (&mut c.bottleneck_dim, self.bottleneck_dim),
            (&mut c.conv_channels, self.conv_channels),
            (&mut c.tac_dim, self.tac_dim),
            (&mut c.num_outputs, self.num_outputs),
            (&mut c.encoder_bases, self.encoder_bases),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DatasetConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// `(key, description)` for every configuration key.
const KEYS: &[(&str, &str)] = &[
    ("model.preset", "base architecture: tiny or full"),
    ("model.num_superblocks", "TCN superblocks, each followed by a TAC layer"),
    ("model.blocks_per_superblock", "TCN blocks per superblock (dilation 2^b)"),
    ("model.kernel_width", "dilated convolution width"),
    ("model.window", "encoder window in samples"),
    ("model.hop", "encoder hop in samples"),
    ("model.bottleneck_dim", "bottleneck features K"),
    ("model.conv_channels", "TCN hidden channels"),
    ("model.tac_dim", "TAC hidden features"),
    ("model.num_outputs", "separated outputs M"),
    ("model.encoder_bases", "encoder bases F"),
    ("train.mode", "supervised, unsupervised or semi"),
    ("train.learning_rate", "Adam step size"),
    ("train.batch_size", "examples per step"),
    ("train.steps", "total optimizer steps"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.semi_mix_ratio", "supervised fraction of each batch in semi mode"),
    ("train.warm_start_path", "checkpoint whose weights initialize the model"),
    ("train.precision", "arithmetic width; only 64-bit is supported"),
    ("train.seed", "parameter initialization and data seed"),
    ("train.checkpoint_interval", "steps between checkpoints (0: final only)"),
    ("train.loss.tau", "soft threshold of the training SNR"),
    ("train.loss.epsilon", "SI-SNR stabilizer"),
    ("data.sample_rate", "sample rate in Hz"),
    ("data.num_mics", "microphones on the circular array"),
    ("data.array_radius", "array radius in metres"),
    ("data.kind", "unsupervised_mom, supervised_mixed or supervised_filtered"),
    ("data.unsup_len", "samples per unsupervised example"),
    ("data.sup_len", "samples per supervised example"),
    ("data.sources_per_mixture", "sources per reference mixture (unsupervised)"),
    ("data.source_kinds", "source generators used in turn: tone_complex, modulated_noise, wav"),
    ("data.random_kinds", "draw each source type at random from source_kinds instead of in turn"),
    ("data.noise_level", "noise RMS relative to the clean scene"),
    ("data.gain_db", "per-source gain range [low, high] in dB"),
    ("data.fir_len", "random spatial FIR taps (0 disables, at most 256)"),
    ("data.filter_len", "reference filter taps for filtered targets"),
    ("data.wav_sources", "WAV files for wav sources"),
];

fn default_value(key: &str) -> String {
    let defaults = RunConfig::default();
    let model = defaults.model.resolve().expect("default preset is valid");
    let model_value = serde_json::to_value(model).expect("serializable");
    let value = serde_json::to_value(&defaults).expect("serializable");
    let mut parts = key.split('.');
    let section = parts.next().unwrap_or_default();
    let mut node = if section == "model" && key != "model.preset" {
        &model_value
    } else {
        &value[section]
    };
    for p in parts {
        node = &node[p];
    }
    match node {
        serde_json::Value::Null => "unset".into(),
        other => other.to_string(),
    }
}

/// Help text listing every configuration key with its default.
pub fn reference() -> String {
    let mut out = String::from(
        "CONFIG FILE (--config, TOML): sections [model], [train], [data]; unknown keys are errors.\n\
         Model fields default to the chosen preset's values.\n\n",
    );
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, desc) in KEYS {
        out.push_str(&format!("  {key:<width$}  {desc} [default: {}]\n", default_value(key)));
    }
    out.push_str("\nMCMIXIT_SEED supplies --seed when the flag is absent.\n");
    out.push_str("Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn every_key_is_documented() {
        let mut keys = Vec::new();
        leaf_keys("", &serde_json::to_value(RunConfig::default()).unwrap(), &mut keys);
        let documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            assert!(documented.contains(&k.as_str()), "undocumented key {k}");
        }
        assert_eq!(keys.len(), documented.len());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(RunConfig::parse("[trian]\n").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "[model]\npreset = \"tiny\"\nnum_outputs = 6\n[train]\nmode = \"semi\"\nbatch_size = 4\n[data]\nnum_mics = 2\nkind = \"supervised_filtered\"\n",
        )
        .unwrap();
        assert_eq!(c.model.resolve().unwrap().num_outputs, 6);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.data.num_mics, 2);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn bad_preset_is_a_config_error() {
        let c = RunConfig::parse("[model]\npreset = \"huge\"\n").unwrap();
        assert!(matches!(c.model.resolve(), Err(CliError::Config(_))));
    }

    #[test]
    fn reference_lists_defaults() {
        let text = reference();
        assert!(text.contains("train.learning_rate"));
        assert!(text.contains("[default: 0.0003]"));
        assert!(text.contains("model.num_outputs"));
    }
}
