//! Forward pass of the channel-count-invariant separation network.
//!
//! Channels are folded into the column axis: every per-channel feature map
//! `K x L` is laid side by side into one `K x (C L)` matrix so pointwise
//! layers run as a single product. Depthwise convolutions and overlap-add
//! respect the channel boundaries; TAC layers are the only place where
//! columns from different channels meet.

use super::params::{BlockIndex, Layout, TacIndex};
use super::{ModelError, ModelParams};
use crate::autodiff::{Conv1d, Graph, Tensor, Var};
use crate::signal::{EstimateSet, MultiChannelSignal};

/// Graph handles produced by [`build_forward`].
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// `(M C) x T` matrix; row `m C + c` is channel `c` of source `m`.
    pub estimates: Var,
    /// One leaf per parameter tensor, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    pub num_channels: usize,
    pub num_outputs: usize,
}

/// Frames `window x (C L)`; column `c L + l` holds samples
/// `l hop .. l hop + window` of channel `c`.
fn frame_matrix(signal: &MultiChannelSignal, window: usize, hop: usize, frames: usize) -> Tensor {
    let channels = signal.num_channels();
    let cols = channels * frames;
    let mut data = vec![0.0; window * cols];
    for c in 0..channels {
        let x = signal.channel(c);
        for l in 0..frames {
            for w in 0..window {
                data[w * cols + c * frames + l] = x[l * hop + w];
            }
        }
    }
    Tensor::matrix(window, cols, data).expect("frame matrix shape")
}

struct Builder<'g> {
    g: &'g mut Graph,
    p: Vec<Var>,
    channels: usize,
    frames: usize,
    release: bool,
}

impl Builder<'_> {
    fn encode(&mut self, layout: &Layout, signal: &MultiChannelSignal, window: usize, hop: usize) -> Result<Var, ModelError> {
        let frames = self.g.constant(frame_matrix(signal, window, hop, self.frames));
        let basis = self.g.matmul(self.p[layout.encoder], frames)?;
        Ok(self.g.relu(basis)?)
    }

    fn tcn_block(&mut self, x: Var, b: &BlockIndex, dilation: usize, kernel_width: usize) -> Result<Var, ModelError> {
        let g = &mut *self.g;
        let p = &self.p;
        let z = g.dense(x, p[b.expand_weight], p[b.expand_bias])?;
        let z = g.relu(z)?;
        let spec = Conv1d::same(kernel_width, dilation).with_segments(self.channels);
        let z = g.dilated_conv1d(z, p[b.kernel], spec)?;
        let z = g.feature_norm(z, p[b.norm_scale], p[b.norm_bias])?;
        let z = g.dense(z, p[b.project_weight], p[b.project_bias])?;
        Ok(g.add(x, z)?)
    }

    /// `[ReLU(W P_c), mean_c ReLU(U P_c)]`, projected back to `K` features
    /// and added to the input.
    fn tac(&mut self, x: Var, t: &TacIndex) -> Result<Var, ModelError> {
        let g = &mut *self.g;
        let p = &self.p;
        let local = g.matmul(p[t.transform], x)?;
        let local = g.relu(local)?;
        let shared = g.matmul(p[t.average], x)?;
        let shared = g.relu(shared)?;
        let mut total = g.slice(shared, 1, 0, self.frames)?;
        for c in 1..self.channels {
            let part = g.slice(shared, 1, c * self.frames, self.frames)?;
            total = g.add(total, part)?;
        }
        let mean = g.scale(total, 1.0 / self.channels as f64)?;
        let tiled = g.concat(&vec![mean; self.channels], 1)?;
        let q = g.concat(&[local, tiled], 0)?;
        let y = g.dense(q, p[t.project_weight], p[t.project_bias])?;
        Ok(g.add(x, y)?)
    }

    fn checkpoint(&mut self, keep: &[Var]) -> Result<(), ModelError> {
        if self.release {
            self.g.release_except(keep)?;
        }
        Ok(())
    }
}

/// Records the full forward pass on `g`.
///
/// With `trainable`, parameters become gradient-carrying leaves; otherwise
/// they are constants and intermediate values are released as the pass
/// proceeds, which keeps memory flat for long inputs.
pub fn build_forward(
    g: &mut Graph,
    params: &ModelParams,
    signal: &MultiChannelSignal,
    trainable: bool,
) -> Result<ForwardGraph, ModelError> {
    let config = *params.config();
    let samples = signal.num_frames();
    let frames = config.num_frames(samples).ok_or(ModelError::TooShort {
        samples,
        window: config.window,
    })?;
    let layout = Layout::new(&config);
    let channels = signal.num_channels();
    let param_vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let mut b = Builder {
        g,
        p: param_vars,
        channels,
        frames,
        release: !trainable,
    };

    let basis = b.encode(&layout, signal, config.window, config.hop)?;
    let normed = b.g.feature_norm(basis, b.p[layout.input_norm_scale], b.p[layout.input_norm_bias])?;
    let mut h = b.g.dense(normed, b.p[layout.bottleneck_weight], b.p[layout.bottleneck_bias])?;
    b.checkpoint(&[basis, h])?;
    for (s, superblock) in layout.blocks.iter().enumerate() {
        for (i, block) in superblock.iter().enumerate() {
            h = b.tcn_block(h, block, config.dilation(i), config.kernel_width)?;
            b.checkpoint(&[basis, h])?;
        }
        if !params.tac_bypassed() {
            h = b.tac(h, &layout.tac[s])?;
            b.checkpoint(&[basis, h])?;
        }
    }

    let m = config.num_outputs;
    let f = config.encoder_bases;
    let logits = b.g.dense(h, b.p[layout.mask_weight], b.p[layout.mask_bias])?;
    let masks = b.g.sigmoid(logits)?;
    let mut masked = Vec::with_capacity(m);
    for src in 0..m {
        let mask = b.g.slice(masks, 0, src * f, f)?;
        masked.push(b.g.mul(mask, basis)?);
    }
    let stacked = b.g.concat(&masked, 1)?;
    b.checkpoint(&[stacked])?;
    let synth = b.g.matmul(b.p[layout.decoder], stacked)?;
    let waves = b.g.overlap_add(synth, config.hop, m * channels, samples)?;
    b.checkpoint(&[waves])?;

    // Mixture consistency: spread the residual evenly over the M outputs.
    let mut total = b.g.slice(waves, 0, 0, channels)?;
    for src in 1..m {
        let part = b.g.slice(waves, 0, src * channels, channels)?;
        total = b.g.add(total, part)?;
    }
    let input = b.g.constant(Tensor::matrix(channels, samples, signal.channels().concat())?);
    let residual = b.g.sub(input, total)?;
    let share = b.g.scale(residual, 1.0 / m as f64)?;
    let mut outputs = Vec::with_capacity(m);
    for src in 0..m {
        let part = b.g.slice(waves, 0, src * channels, channels)?;
        outputs.push(b.g.add(part, share)?);
    }
    let estimates = b.g.concat(&outputs, 0)?;
    b.checkpoint(&[estimates])?;
    Ok(ForwardGraph {
        estimates,
        params: b.p,
        num_channels: channels,
        num_outputs: m,
    })
}

/// Unpacks the `(M C) x T` estimate matrix.
pub fn estimates_from_tensor(
    value: &Tensor,
    num_outputs: usize,
    num_channels: usize,
    sample_rate: u32,
) -> Result<EstimateSet, ModelError> {
    let signals = (0..num_outputs)
        .map(|m| {
            let chans = (0..num_channels).map(|c| value.row(m * num_channels + c).to_vec()).collect();
            MultiChannelSignal::new(chans, sample_rate)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EstimateSet::new(signals)?)
}

/// Separates `signal` into `M` multi-channel estimates that sum to it.
pub fn forward(params: &ModelParams, signal: &MultiChannelSignal) -> Result<EstimateSet, ModelError> {
    let mut g = Graph::new();
    let out = build_forward(&mut g, params, signal, false)?;
    estimates_from_tensor(g.value(out.estimates), out.num_outputs, out.num_channels, signal.sample_rate())
}

/// Per-channel encoder output `E^c` (`F x L` each).
pub fn encode(params: &ModelParams, signal: &MultiChannelSignal) -> Result<Vec<Tensor>, ModelError> {
    let config = params.config();
    let samples = signal.num_frames();
    let frames = config.num_frames(samples).ok_or(ModelError::TooShort {
        samples,
        window: config.window,
    })?;
    let layout = Layout::new(config);
    let mut g = Graph::new();
    let enc = g.constant(params.tensors()[layout.encoder].clone());
    let x = g.constant(frame_matrix(signal, config.window, config.hop, frames));
    let e = g.matmul(enc, x)?;
    let e = g.relu(e)?;
    split_columns(&mut g, e, signal.num_channels(), frames)
}

fn split_columns(g: &mut Graph, v: Var, channels: usize, frames: usize) -> Result<Vec<Tensor>, ModelError> {
    (0..channels)
        .map(|c| {
            let part = g.slice(v, 1, c * frames, frames)?;
            Ok(g.value(part).clone())
        })
        .collect()
}

/// Applies TAC layer `index` to per-channel features (`K x L` each).
pub fn tac_layer(params: &ModelParams, index: usize, features: &[Tensor]) -> Result<Vec<Tensor>, ModelError> {
    let layout = Layout::new(params.config());
    let tac = layout
        .tac
        .get(index)
        .ok_or_else(|| ModelError::InvalidConfig(format!("no TAC layer {index}")))?;
    let first = features.first().ok_or_else(|| ModelError::InvalidConfig("no channels".into()))?;
    if features.iter().any(|f| f.shape() != first.shape()) {
        return Err(ModelError::InvalidConfig("channel feature shapes differ".into()));
    }
    let frames = first.cols();
    let mut g = Graph::new();
    let parts: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
    let x = g.concat(&parts, 1)?;
    let p = params.tensors().iter().map(|t| g.constant(t.clone())).collect();
    let mut b = Builder {
        g: &mut g,
        p,
        channels: features.len(),
        frames,
        release: false,
    };
    let y = b.tac(x, tac)?;
    split_columns(&mut g, y, features.len(), frames)
}
