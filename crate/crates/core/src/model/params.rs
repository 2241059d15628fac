use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::Tensor;

/// Indices of one TCN block's tensors in [`ModelParams::tensors`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIndex {
    pub expand_weight: usize,
    pub expand_bias: usize,
    pub kernel: usize,
    pub norm_scale: usize,
    pub norm_bias: usize,
    pub project_weight: usize,
    pub project_bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TacIndex {
    pub transform: usize,
    pub average: usize,
    pub project_weight: usize,
    pub project_bias: usize,
}

/// Position of every named tensor for a given configuration.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub encoder: usize,
    pub input_norm_scale: usize,
    pub input_norm_bias: usize,
    pub bottleneck_weight: usize,
    pub bottleneck_bias: usize,
    pub blocks: Vec<Vec<BlockIndex>>,
    pub tac: Vec<TacIndex>,
    pub mask_weight: usize,
    pub mask_bias: usize,
    pub decoder: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let (f, k, h, d) = (c.encoder_bases, c.bottleneck_dim, c.conv_channels, c.tac_dim);
        let encoder = add("encoder.weight".into(), vec![f, c.window]);
        let input_norm_scale = add("input_norm.scale".into(), vec![f]);
        let input_norm_bias = add("input_norm.bias".into(), vec![f]);
        let bottleneck_weight = add("bottleneck.weight".into(), vec![k, f]);
        let bottleneck_bias = add("bottleneck.bias".into(), vec![k]);
        let mut blocks = Vec::new();
        let mut tac = Vec::new();
        for s in 0..c.num_superblocks {
            let mut sb = Vec::new();
            for b in 0..c.blocks_per_superblock {
                let p = format!("tcn.{s}.{b}");
                sb.push(BlockIndex {
                    expand_weight: add(format!("{p}.expand.weight"), vec![h, k]),
                    expand_bias: add(format!("{p}.expand.bias"), vec![h]),
                    kernel: add(format!("{p}.depthwise.kernel"), vec![h, c.kernel_width]),
                    norm_scale: add(format!("{p}.norm.scale"), vec![h]),
                    norm_bias: add(format!("{p}.norm.bias"), vec![h]),
                    project_weight: add(format!("{p}.project.weight"), vec![k, h]),
                    project_bias: add(format!("{p}.project.bias"), vec![k]),
                });
            }
            blocks.push(sb);
            tac.push(TacIndex {
                transform: add(format!("tac.{s}.transform"), vec![d, k]),
                average: add(format!("tac.{s}.average"), vec![d, k]),
                project_weight: add(format!("tac.{s}.project.weight"), vec![k, 2 * d]),
                project_bias: add(format!("tac.{s}.project.bias"), vec![k]),
            });
        }
        let mask_weight = add("mask.weight".into(), vec![c.num_outputs * f, k]);
        let mask_bias = add("mask.bias".into(), vec![c.num_outputs * f]);
        let decoder = add("decoder.weight".into(), vec![c.window, f]);
        Self {
            names,
            shapes,
            encoder,
            input_norm_scale,
            input_norm_bias,
            bottleneck_weight,
            bottleneck_bias,
            blocks,
            tac,
            mask_weight,
            mask_bias,
            decoder,
        }
    }
}

/// Every trainable tensor of the separation network, in a fixed order.
///
/// Nothing here depends on the number of input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    tac_bypassed: bool,
}

impl ModelParams {
    /// Glorot-uniform matrices, unit norm scales, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else if name.ends_with(".scale") {
                    vec![1.0; n]
                } else {
                    let (fan_out, fan_in) = (shape[0], shape[1]);
                    let limit = if name.ends_with(".kernel") {
                        (3.0 / fan_in as f64).sqrt()
                    } else {
                        (6.0 / (fan_in + fan_out) as f64).sqrt()
                    };
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                };
                Tensor::new(shape.clone(), data).expect("layout shapes are consistent")
            })
            .collect();
        Ok(Self {
            config,
            names: layout.names,
            tensors,
            tac_bypassed: false,
        })
    }

    /// Assemble from named tensors; names and shapes must match the layout
    /// for `config` exactly.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mismatches = compare_layout(&layout, &named);
        if !mismatches.is_empty() {
            return Err(ModelError::TensorMismatch(mismatches));
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            tac_bypassed: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tac_bypassed(&self) -> bool {
        self.tac_bypassed
    }

    /// Copy of these parameters whose forward pass skips every TAC layer
    /// (identity pass-through). Tensor shapes are unchanged.
    pub fn remove_tac(&self) -> Self {
        Self {
            tac_bypassed: true,
            ..self.clone()
        }
    }

    pub(crate) fn set_tac_bypassed(&mut self, bypassed: bool) {
        self.tac_bypassed = bypassed;
    }

    /// Replace every tensor with the ones from `other`, which must have the
    /// same names and shapes.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<(), ModelError> {
        let layout = Layout::new(&self.config);
        let mismatches = compare_layout(&layout, named);
        if !mismatches.is_empty() {
            return Err(ModelError::TensorMismatch(mismatches));
        }
        for (slot, (_, t)) in self.tensors.iter_mut().zip(named) {
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Why a stored tensor could not be loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMismatch {
    pub name: String,
    pub expected: Option<Vec<usize>>,
    pub found: Option<Vec<usize>>,
}

impl std::fmt::Display for TensorMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.expected, &self.found) {
            (Some(e), Some(g)) => write!(f, "{}: expected shape {e:?}, found {g:?}", self.name),
            (Some(e), None) => write!(f, "{}: missing (expected shape {e:?})", self.name),
            (None, Some(g)) => write!(f, "{}: unexpected tensor with shape {g:?}", self.name),
            (None, None) => write!(f, "{}", self.name),
        }
    }
}

fn compare_layout(layout: &Layout, named: &[(String, Tensor)]) -> Vec<TensorMismatch> {
    let mut out = Vec::new();
    for (name, shape) in layout.names.iter().zip(&layout.shapes) {
        match named.iter().find(|(n, _)| n == name) {
            Some((_, t)) if t.shape() == shape.as_slice() => {}
            Some((_, t)) => out.push(TensorMismatch {
                name: name.clone(),
                expected: Some(shape.clone()),
                found: Some(t.shape().to_vec()),
            }),
            None => out.push(TensorMismatch {
                name: name.clone(),
                expected: Some(shape.clone()),
                found: None,
            }),
        }
    }
    for (name, t) in named {
        if !layout.names.contains(name) {
            out.push(TensorMismatch {
                name: name.clone(),
                expected: None,
                found: Some(t.shape().to_vec()),
            });
        }
    }
    // Order matters for from_named/load_from, which rely on layout order.
    if out.is_empty() && named.iter().map(|(n, _)| n).ne(layout.names.iter()) {
        out.push(TensorMismatch {
            name: "<tensor order differs from layout>".into(),
            expected: None,
            found: None,
        });
    }
    out
}
