use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network hyperparameters. `Default` is the full-size configuration
/// (4 x 8 TCN blocks, K = 128, 512 conv channels, 8 outputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_superblocks: usize,
    pub blocks_per_superblock: usize,
    pub kernel_width: usize,
    /// Encoder window in samples.
    pub window: usize,
    /// Encoder hop in samples.
    pub hop: usize,
    /// Bottleneck feature count `K`.
    pub bottleneck_dim: usize,
    pub conv_channels: usize,
    pub tac_dim: usize,
    /// Number of separated outputs `M`.
    pub num_outputs: usize,
    /// Encoder basis count `F`.
    pub encoder_bases: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_superblocks: 4,
            blocks_per_superblock: 8,
            kernel_width: 3,
            window: 64,
            hop: 32,
            bottleneck_dim: 128,
            conv_channels: 512,
            tac_dim: 128,
            num_outputs: 8,
            encoder_bases: 128,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 2 superblocks, K = F = 32, four outputs.
    pub fn tiny() -> Self {
        Self {
            num_superblocks: 2,
            blocks_per_superblock: 4,
            kernel_width: 3,
            window: 32,
            hop: 16,
            bottleneck_dim: 32,
            conv_channels: 64,
            tac_dim: 32,
            num_outputs: 4,
            encoder_bases: 32,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" | "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_superblocks", self.num_superblocks),
            ("blocks_per_superblock", self.blocks_per_superblock),
            ("kernel_width", self.kernel_width),
            ("window", self.window),
            ("hop", self.hop),
            ("bottleneck_dim", self.bottleneck_dim),
            ("conv_channels", self.conv_channels),
            ("tac_dim", self.tac_dim),
            ("num_outputs", self.num_outputs),
            ("encoder_bases", self.encoder_bases),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.window.is_multiple_of(self.hop) {
            return Err(ModelError::InvalidConfig(format!(
                "hop {} must divide window {}",
                self.hop, self.window
            )));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("kernel_width must be odd".into()));
        }
        Ok(())
    }

    /// Number of encoder frames for `samples` input samples.
    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.window).then(|| 1 + (samples - self.window) / self.hop)
    }

    /// Dilation of block `b` inside a superblock.
    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }

    pub(crate) fn to_fields(self) -> [usize; 10] {
        [
            self.num_superblocks,
            self.blocks_per_superblock,
            self.kernel_width,
            self.window,
            self.hop,
            self.bottleneck_dim,
            self.conv_channels,
            self.tac_dim,
            self.num_outputs,
            self.encoder_bases,
        ]
    }

    pub(crate) fn from_fields(f: [usize; 10]) -> Self {
        Self {
            num_superblocks: f[0],
            blocks_per_superblock: f[1],
            kernel_width: f[2],
            window: f[3],
            hop: f[4],
            bottleneck_dim: f[5],
            conv_channels: f[6],
            tac_dim: f[7],
            num_outputs: f[8],
            encoder_bases: f[9],
        }
    }
}
