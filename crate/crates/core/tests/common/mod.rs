//! Shared checks for the integration and acceptance tests.
#![allow(dead_code)]

use mcmixit::assign::{enumerate_mixing_matrices, mc_mixit_loss, mixing_matrix_loss, DEFAULT_ENUMERATION_CAP};
use mcmixit::autodiff::gradcheck::gradient_pair;
use mcmixit::autodiff::{Conv1d, Graph, Tensor, TensorError, Var};
use mcmixit::model::{build_forward, estimates_from_tensor, forward, ModelConfig, ModelParams};
use mcmixit::signal::{EstimateSet, LossConfig, MultiChannelSignal};
use mcmixit::synth::{ExampleKind, TrainingExample};
use mcmixit::train::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
/// Norm floor for relative gradient errors.
pub const FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, for ops with a kink or pole there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.5);
            if positive || rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` for a fixed random `w`, so every output element matters.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p, None)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

/// One gradient-check case: inputs and the op applied to them.
struct Case {
    inputs: Vec<Tensor>,
    op: Build,
    out_shape: Vec<usize>,
}

fn case(inputs: Vec<Tensor>, out_shape: Vec<usize>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static) -> Case {
    Case {
        inputs,
        op: Box::new(op),
        out_shape,
    }
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..6), r.random_range(1..7))
}

fn make_case(op: &str, r: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(r);
    match op {
        "add" => case(vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])], vec![m, n], |g, v| g.add(v[0], v[1])),
        "sub" => case(vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])], vec![m, n], |g, v| g.sub(v[0], v[1])),
        "mul" => case(vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])], vec![m, n], |g, v| g.mul(v[0], v[1])),
        "scale" => {
            let s = r.random_range(-3.0..3.0);
            case(vec![random_tensor(r, &[m, n])], vec![m, n], move |g, v| g.scale(v[0], s))
        }
        "add_scalar" => {
            let s = r.random_range(-3.0..3.0);
            case(vec![random_tensor(r, &[m, n])], vec![m, n], move |g, v| g.add_scalar(v[0], s))
        }
        "matmul" => {
            let k = r.random_range(1..6);
            case(vec![random_tensor(r, &[m, k]), random_tensor(r, &[k, n])], vec![m, n], |g, v| g.matmul(v[0], v[1]))
        }
        "dense" => {
            let k = r.random_range(1..6);
            case(
                vec![random_tensor(r, &[k, n]), random_tensor(r, &[m, k]), random_tensor(r, &[m])],
                vec![m, n],
                |g, v| g.dense(v[0], v[1], v[2]),
            )
        }
        "dilated_conv1d" => {
            let segments = r.random_range(1..4);
            let len = r.random_range(4..12);
            let width = [1, 3, 5][r.random_range(0..3)];
            let dilation = r.random_range(1..4);
            let spec = if r.random_bool(0.5) {
                Conv1d::same(width, dilation).with_segments(segments)
            } else {
                Conv1d {
                    dilation,
                    pad_left: r.random_range(0..4),
                    pad_right: r.random_range(0..4),
                    segments,
                }
            };
            let span = (width - 1) * dilation;
            let padded = len + spec.pad_left + spec.pad_right;
            let (len, padded) = if padded < span + 1 {
                (len + span, padded + span)
            } else {
                (len, padded)
            };
            let out_len = padded - span;
            case(
                vec![random_tensor(r, &[m, segments * len]), random_tensor(r, &[m, width])],
                vec![m, segments * out_len],
                move |g, v| g.dilated_conv1d(v[0], v[1], spec),
            )
        }
        "relu" => case(vec![away_from_zero(r, &[m, n], false)], vec![m, n], |g, v| g.relu(v[0])),
        "sigmoid" => case(vec![random_tensor(r, &[m, n])], vec![m, n], |g, v| g.sigmoid(v[0])),
        "square" => case(vec![random_tensor(r, &[m, n])], vec![m, n], |g, v| g.square(v[0])),
        "log10" => case(vec![away_from_zero(r, &[m, n], true)], vec![m, n], |g, v| g.log10(v[0])),
        "concat" => {
            let axis = r.random_range(0..2);
            let parts = r.random_range(1..4);
            let shapes: Vec<Vec<usize>> = (0..parts)
                .map(|_| {
                    let extra = r.random_range(1..4);
                    if axis == 0 {
                        vec![extra, n]
                    } else {
                        vec![m, extra]
                    }
                })
                .collect();
            let total: usize = shapes.iter().map(|s| s[axis]).sum();
            let out = if axis == 0 { vec![total, n] } else { vec![m, total] };
            case(shapes.iter().map(|s| random_tensor(r, s)).collect(), out, move |g, v| g.concat(v, axis))
        }
        "sum" | "mean" => {
            let axis = [None, Some(0), Some(1)][r.random_range(0..3)];
            let out = match axis {
                None => vec![],
                Some(0) => vec![n],
                _ => vec![m],
            };
            let mean = op == "mean";
            case(vec![random_tensor(r, &[m, n])], out, move |g, v| {
                if mean {
                    g.mean(v[0], axis)
                } else {
                    g.sum(v[0], axis)
                }
            })
        }
        "feature_norm" => {
            let k = r.random_range(2..7);
            case(
                vec![random_tensor(r, &[k, n]), random_tensor(r, &[k]), random_tensor(r, &[k])],
                vec![k, n],
                |g, v| g.feature_norm(v[0], v[1], v[2]),
            )
        }
        "slice" => {
            let axis = r.random_range(0..2);
            let extent = if axis == 0 { m } else { n };
            let start = r.random_range(0..extent);
            let len = r.random_range(1..=extent - start);
            let out = if axis == 0 { vec![len, n] } else { vec![m, len] };
            case(vec![random_tensor(r, &[m, n])], out, move |g, v| g.slice(v[0], axis, start, len))
        }
        "overlap_add" => {
            let window = r.random_range(1..6);
            let hop = r.random_range(1..=window);
            let segments = r.random_range(1..4);
            let frames = r.random_range(1..5);
            let natural = (frames - 1) * hop + window;
            let out_len = r.random_range(1..natural + 3);
            case(
                vec![random_tensor(r, &[window, segments * frames])],
                vec![segments, out_len],
                move |g, v| g.overlap_add(v[0], hop, segments, out_len),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "dense",
    "dilated_conv1d",
    "relu",
    "sigmoid",
    "square",
    "log10",
    "concat",
    "sum",
    "mean",
    "feature_norm",
    "slice",
    "overlap_add",
];

/// Largest relative gradient error of `op` over `cases` seeded shapes.
pub fn op_gradient_error(op: &str, cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut r = rng(1000 + seed);
        let c = make_case(op, &mut r);
        let weights = random_tensor(&mut r, &c.out_shape);
        let build = c.op;
        let pair = gradient_pair(&c.inputs, H, |g, v| {
            let out = build(g, v)?;
            assert_eq!(g.shape(out), weights.shape(), "{op}: output shape");
            project(g, out, &weights)
        })
        .unwrap();
        worst = worst.max(pair.max_relative_error(FLOOR));
    }
    worst
}

/// Random network configuration small enough for exhaustive checks.
pub fn random_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let window = [4, 8, 16][r.random_range(0..3)];
    ModelConfig {
        num_superblocks: r.random_range(1..3),
        blocks_per_superblock: r.random_range(1..4),
        kernel_width: [3, 5][r.random_range(0..2)],
        window,
        hop: window / [1, 2, 4][r.random_range(0..3)],
        bottleneck_dim: r.random_range(4..12),
        conv_channels: r.random_range(6..16),
        tac_dim: r.random_range(3..8),
        num_outputs: r.random_range(2..5),
        encoder_bases: r.random_range(6..16),
    }
}

pub fn random_signal(r: &mut ChaCha8Rng, channels: usize, len: usize) -> MultiChannelSignal {
    let chans = (0..channels)
        .map(|_| (0..len).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    MultiChannelSignal::new(chans, 16000).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max |forward(pi X) - pi forward(X)|` for a random channel permutation.
pub fn permutation_equivariance_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = ModelParams::init(random_config(&mut r), seed).unwrap();
    let channels = 4;
    let len = r.random_range(64..200);
    let x = random_signal(&mut r, channels, len);
    let mut perm: Vec<usize> = (0..channels).collect();
    for i in (1..channels).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let base = forward(&params, &x).unwrap();
    let permuted = forward(&params, &x.select_channels(&perm).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for m in 0..base.len() {
        for (c, &p) in perm.iter().enumerate() {
            worst = worst.max(max_abs_diff(permuted.channel(m, c), base.channel(m, p)));
        }
    }
    worst
}

/// `max |forward(mono replicated to C)[m][c] - forward(mono)[m][0]|`.
pub fn identical_channel_collapse_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = ModelParams::init(random_config(&mut r), seed).unwrap();
    let len = r.random_range(64..200);
    let mono = random_signal(&mut r, 1, len);
    let channels = r.random_range(2..6);
    let replicated = mono.select_channels(&vec![0; channels]).unwrap();
    let one = forward(&params, &mono).unwrap();
    let many = forward(&params, &replicated).unwrap();
    let mut worst: f64 = 0.0;
    for m in 0..one.len() {
        for c in 0..channels {
            worst = worst.max(max_abs_diff(many.channel(m, c), one.channel(m, 0)));
        }
    }
    worst
}

/// With TAC bypassed, a C-channel forward against C mono forwards.
pub fn tac_bypass_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = ModelParams::init(random_config(&mut r), seed).unwrap().remove_tac();
    let len = r.random_range(64..200);
    let x = random_signal(&mut r, 3, len);
    let joint = forward(&params, &x).unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..3 {
        let single = forward(&params, &x.select_channels(&[c]).unwrap()).unwrap();
        for m in 0..joint.len() {
            worst = worst.max(max_abs_diff(joint.channel(m, c), single.channel(m, 0)));
        }
    }
    worst
}

/// `max |sum_m s_m - x|` for random params, channels and outputs.
pub fn consistency_error(seed: u64, len: usize) -> f64 {
    let mut r = rng(seed);
    let params = ModelParams::init(random_config(&mut r), seed).unwrap();
    let channels = [1, 2, 4][r.random_range(0..3)];
    let x = random_signal(&mut r, channels, len);
    let est = forward(&params, &x).unwrap();
    let sum = est.sum();
    (0..x.num_channels())
        .map(|c| max_abs_diff(sum.channel(c), x.channel(c)))
        .fold(0.0, f64::max)
}

/// Weight counts of the same configuration exercised at one and eight
/// microphones, plus whether both forwards ran.
pub fn parameter_counts(seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let config = random_config(&mut r);
    let a = ModelParams::init(config, seed).unwrap();
    let b = ModelParams::init(config, seed).unwrap();
    let len = r.random_range(64..128);
    let ea = forward(&a, &random_signal(&mut r, 1, len)).unwrap();
    let eb = forward(&b, &random_signal(&mut r, 8, len)).unwrap();
    assert_eq!((ea.num_channels(), eb.num_channels()), (1, 8));
    (a.num_weights(), b.num_weights())
}

/// MC-MixIT loss of the network on `example` with parameters `tensors`,
/// solved numerically.
fn mixit_objective(config: ModelConfig, tensors: &[Tensor], names: &[String], example: &TrainingExample) -> f64 {
    let named = names.iter().cloned().zip(tensors.iter().cloned()).collect();
    let params = ModelParams::from_named(config, named).unwrap();
    let est = forward(&params, &example.input).unwrap();
    mc_mixit_loss(&example.references, &est, &LossConfig::default()).unwrap().loss
}

/// End-to-end check of forward + MC-MixIT gradients: returns the norm-wise
/// relative error over `per_tensor` sampled coordinates of every tensor.
/// Loss gap between the best and second-best mixing matrices.
pub fn assignment_gap(references: &EstimateSet, estimates: &EstimateSet) -> f64 {
    let cfg = LossConfig::default();
    let mut losses: Vec<f64> = enumerate_mixing_matrices(estimates.len(), references.len(), DEFAULT_ENUMERATION_CAP)
        .unwrap()
        .map(|a| mixing_matrix_loss(references, estimates, &a, &cfg).unwrap())
        .collect();
    losses.sort_by(f64::total_cmp);
    losses[1] - losses[0]
}

/// Smallest gap between the optimal assignment and the runner-up accepted
/// for an end-to-end check; closer ties make the loss non-smooth within
/// the finite-difference step.
pub const MIN_ASSIGNMENT_GAP: f64 = 1e-3;

/// End-to-end check of forward + MC-MixIT gradients: returns the norm-wise
/// relative error over `per_tensor` sampled coordinates of every tensor.
/// References are redrawn until the optimal assignment is unambiguous and
/// no ReLU input lies within one step of its kink.
pub fn end_to_end_gradient_error(config: ModelConfig, seed: u64, per_tensor: usize) -> f64 {
    let mut r = rng(seed);
    let channels = 2;
    let len = config.window * 6;
    let params = ModelParams::init(config, seed).unwrap();
    let example = loop {
        let refs = EstimateSet::new(vec![random_signal(&mut r, channels, len), random_signal(&mut r, channels, len)]).unwrap();
        let input = refs.sum();
        let mut g = Graph::new();
        build_forward(&mut g, &params, &input, true).unwrap();
        let smooth = g.relu_margin().is_none_or(|m| m >= H);
        if smooth && assignment_gap(&refs, &forward(&params, &input).unwrap()) >= MIN_ASSIGNMENT_GAP {
            break TrainingExample {
                id: "gradcheck".into(),
                kind: ExampleKind::UnsupervisedMom,
                input,
                references: refs,
                source_ids: vec![],
                seed,
            };
        }
    };
    let trainer = Trainer::new(TrainConfig::default(), params.clone()).unwrap();
    let (_, analytic) = trainer.example_gradients(&example).unwrap().unwrap();

    let names = params.names().to_vec();
    let mut probe = params.tensors().to_vec();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for t in 0..probe.len() {
        let n = probe[t].len();
        for _ in 0..per_tensor.min(n) {
            let j = r.random_range(0..n);
            let orig = probe[t].data()[j];
            probe[t].data_mut()[j] = orig + H;
            let plus = mixit_objective(config, &probe, &names, &example);
            probe[t].data_mut()[j] = orig - H;
            let minus = mixit_objective(config, &probe, &names, &example);
            probe[t].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[t].data()[j];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(FLOOR)
}

/// Output of the trainable forward path as an estimate set.
pub fn trainable_forward(params: &ModelParams, x: &MultiChannelSignal) -> EstimateSet {
    let mut g = Graph::new();
    let out = build_forward(&mut g, params, x, true).unwrap();
    estimates_from_tensor(g.value(out.estimates), out.num_outputs, out.num_channels, x.sample_rate()).unwrap()
}
