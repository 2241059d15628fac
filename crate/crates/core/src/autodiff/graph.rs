use super::gemm::gemm;
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Depthwise dilated 1-D convolution geometry.
///
/// The input's columns are split into `segments` equal runs (one per audio
/// channel) that are convolved independently, each padded with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub segments: usize,
}

impl Conv1d {
    /// Same-length convolution for an odd kernel width.
    pub fn same(kernel_width: usize, dilation: usize) -> Self {
        let pad = (kernel_width - 1) * dilation / 2;
        Self {
            dilation,
            pad_left: pad,
            pad_right: pad,
            segments: 1,
        }
    }

    pub fn with_segments(mut self, segments: usize) -> Self {
        self.segments = segments;
        self
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv {
        input: Var,
        kernel: Var,
        spec: Conv1d,
    },
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Log10(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reduce {
        input: Var,
        axis: Option<usize>,
        factor: f64,
    },
    FeatureNorm {
        input: Var,
        scale: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    OverlapAdd {
        input: Var,
        hop: usize,
        segments: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Standard deviation floor used by [`Graph::feature_norm`].
pub const FEATURE_NORM_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest `|x|` over every input element of every ReLU still held by
    /// the graph; `None` without ReLUs. A finite-difference step larger than
    /// this may cross a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => self.nodes[a.0].value.data().iter().map(|x| x.abs()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a], "scale")
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `weight * input + bias` with `input: in x L`, `weight: out x in`,
    /// `bias: [out]` added to every column.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (fin, cols) = self.dims2("dense", input)?;
        let (fout, fin2) = self.dims2("dense", weight)?;
        if fin != fin2 || self.shape(bias) != [fout] {
            return Err(TensorError::shape(
                "dense",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = vec![0.0; fout * cols];
        for (row, b) in out.chunks_exact_mut(cols).zip(self.value(bias).data()) {
            row.fill(*b);
        }
        gemm(fout, fin, cols, self.value(weight).data(), false, self.value(input).data(), false, 1.0, &mut out);
        let v = Tensor::new(vec![fout, cols], out)?;
        self.push(v, Op::Dense { input, weight, bias }, &[input, weight, bias], "dense")
    }

    /// Depthwise dilated convolution: row `h` of `input` is convolved with
    /// row `h` of `kernel` (`H x width`).
    pub fn dilated_conv1d(&mut self, input: Var, kernel: Var, spec: Conv1d) -> Result<Var, TensorError> {
        let (h, cols) = self.dims2("dilated_conv1d", input)?;
        let (h2, width) = self.dims2("dilated_conv1d", kernel)?;
        if h != h2 {
            return Err(TensorError::shape("dilated_conv1d", format!("{h} rows vs kernel {h2} rows")));
        }
        if spec.dilation == 0 || spec.segments == 0 || cols % spec.segments != 0 {
            return Err(TensorError::invalid("dilated_conv1d", format!("{spec:?} for {cols} columns")));
        }
        let len_in = cols / spec.segments;
        let span = (width - 1) * spec.dilation;
        let padded = len_in + spec.pad_left + spec.pad_right;
        if padded < span + 1 {
            return Err(TensorError::invalid("dilated_conv1d", "kernel longer than padded input"));
        }
        let len_out = padded - span;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; h * spec.segments * len_out];
        for r in 0..h {
            for s in 0..spec.segments {
                let xs = &x[r * cols + s * len_in..r * cols + (s + 1) * len_in];
                let ys = &mut out[(r * spec.segments + s) * len_out..(r * spec.segments + s + 1) * len_out];
                for j in 0..width {
                    let wj = w[r * width + j];
                    let (lo, hi, off) = conv_range(j * spec.dilation, spec.pad_left, len_in, len_out);
                    for t in lo..hi {
                        ys[t] += wj * xs[(t as isize + off) as usize];
                    }
                }
            }
        }
        let v = Tensor::new(vec![h, spec.segments * len_out], out)?;
        self.push(v, Op::Conv { input, kernel, spec }, &[input, kernel], "dilated_conv1d")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a], "square")
    }

    pub fn log10(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, f64::log10);
        self.push(v, Op::Log10(a), &[a], "log10")
    }

    /// Concatenate along `axis` (0: stack rows, 1: join columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let rank = self.shape(first).len();
        if rank == 0 || axis >= rank {
            return Err(TensorError::invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == self.shape(first)[d]);
            if !ok {
                return Err(TensorError::shape("concat", format!("{:?} vs {:?}", self.shape(first), s)));
            }
        }
        let mut shape = self.shape(first).to_vec();
        shape[axis] = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
        } else {
            for r in 0..shape[0] {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool, name: &'static str) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let rank = x.shape().len();
        let (shape, data, count): (Vec<usize>, Vec<f64>, usize) = match (axis, rank) {
            (None, _) => (Vec::new(), vec![x.data().iter().sum()], x.len()),
            (Some(0), 1) => (Vec::new(), vec![x.data().iter().sum()], x.len()),
            (Some(0), 2) => {
                let mut acc = vec![0.0; cols];
                for r in 0..rows {
                    for (a, v) in acc.iter_mut().zip(x.row(r)) {
                        *a += v;
                    }
                }
                (vec![cols], acc, rows)
            }
            (Some(1), 2) => (vec![rows], (0..rows).map(|r| x.row(r).iter().sum()).collect(), cols),
            (Some(ax), _) => return Err(TensorError::invalid(name, format!("axis {ax} for rank {rank}"))),
        };
        let factor = if mean { 1.0 / count.max(1) as f64 } else { 1.0 };
        let data = data.into_iter().map(|v| v * factor).collect();
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Reduce { input: a, axis, factor }, &[a], name)
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(a, axis, false, "sum")
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(a, axis, true, "mean")
    }

    /// Per-column normalization over the rows (features), followed by a
    /// per-row affine map: `y = scale * (x - mean) / sqrt(var + eps) + bias`.
    pub fn feature_norm(&mut self, input: Var, scale: Var, bias: Var) -> Result<Var, TensorError> {
        let (k, l) = self.dims2("feature_norm", input)?;
        if self.shape(scale) != [k] || self.shape(bias) != [k] {
            return Err(TensorError::shape(
                "feature_norm",
                format!("input {k}x{l}, scale {:?}, bias {:?}", self.shape(scale), self.shape(bias)),
            ));
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; l];
        for r in 0..k {
            for (m, v) in mean.iter_mut().zip(&x[r * l..(r + 1) * l]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        let mut var = vec![0.0; l];
        for r in 0..k {
            for ((s, v), m) in var.iter_mut().zip(&x[r * l..(r + 1) * l]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / k as f64 + FEATURE_NORM_EPS).sqrt()).collect();
        let mut normalized = vec![0.0; k * l];
        let mut out = vec![0.0; k * l];
        let (g, b) = (self.value(scale).data(), self.value(bias).data());
        for r in 0..k {
            let row = &x[r * l..(r + 1) * l];
            let nr = &mut normalized[r * l..(r + 1) * l];
            let orow = &mut out[r * l..(r + 1) * l];
            for t in 0..l {
                let n = (row[t] - mean[t]) * inv_std[t];
                nr[t] = n;
                orow[t] = g[r] * n + b[r];
            }
        }
        let v = Tensor::new(vec![k, l], out)?;
        self.push(
            v,
            Op::FeatureNorm {
                input,
                scale,
                bias,
                normalized,
                inv_std,
            },
            &[input, scale, bias],
            "feature_norm",
        )
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("slice", a)?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(TensorError::invalid("slice", format!("{start}+{len} on axis {axis} of {rows}x{cols}")));
        }
        let x = self.value(a);
        let (shape, data) = if axis == 0 {
            (vec![len, cols], x.data()[start * cols..(start + len) * cols].to_vec())
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&x.row(r)[start..start + len]);
            }
            (vec![rows, len], d)
        };
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Slice { input: a, axis, start }, &[a], "slice")
    }

    /// Overlap-add synthesis. `input` is `window x (segments * frames)`;
    /// column `s * frames + l` is frame `l` of segment `s`, placed at sample
    /// `l * hop`. The result is `segments x out_len`, cropped or zero-padded.
    pub fn overlap_add(&mut self, input: Var, hop: usize, segments: usize, out_len: usize) -> Result<Var, TensorError> {
        let (window, cols) = self.dims2("overlap_add", input)?;
        if hop == 0 || segments == 0 || cols % segments != 0 {
            return Err(TensorError::invalid("overlap_add", format!("hop {hop}, {segments} segments, {cols} columns")));
        }
        let frames = cols / segments;
        let x = self.value(input).data();
        let mut out = vec![0.0; segments * out_len];
        for w in 0..window {
            let row = &x[w * cols..(w + 1) * cols];
            for s in 0..segments {
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                for l in 0..frames {
                    let t = l * hop + w;
                    if t < out_len {
                        dst[t] += row[s * frames + l];
                    }
                }
            }
        }
        let v = Tensor::new(vec![segments, out_len], out)?;
        self.push(v, Op::OverlapAdd { input, hop, segments }, &[input], "overlap_add")
    }

    /// Frees the stored values of every non-leaf node except `keep`.
    ///
    /// Inference-only: fails if any node could need a gradient. Released
    /// nodes must not be used as inputs afterwards.
    pub fn release_except(&mut self, keep: &[Var]) -> Result<(), TensorError> {
        if self.nodes.iter().any(|n| n.requires_grad) {
            return Err(TensorError::invalid("release_except", "graph has trainable nodes"));
        }
        let mut keep_mask = vec![false; self.nodes.len()];
        for v in keep {
            keep_mask[v.0] = true;
        }
        for (node, kept) in self.nodes.iter_mut().zip(keep_mask) {
            if !kept && !matches!(node.op, Op::Leaf) && !node.value.is_empty() {
                node.value = Tensor::zeros(&[0]);
                if let Op::FeatureNorm { normalized, inv_std, .. } = &mut node.op {
                    *normalized = Vec::new();
                    *inv_std = Vec::new();
                }
            }
        }
        Ok(())
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.wants(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(acc) = self.accumulate(grads, v) {
                        axpy(acc, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    axpy(acc, g, 1.0);
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    axpy(acc, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.accumulate(grads, *a) {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(xb) {
                        *d += gi * y;
                    }
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    for ((d, gi), x) in acc.iter_mut().zip(g).zip(xa) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    axpy(acc, g, *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    axpy(acc, g, 1.0);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.accumulate(grads, *a) {
                    gemm(m, n, k, g, false, xb, true, 1.0, acc);
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    gemm(k, m, n, xa, true, g, false, 1.0, acc);
                }
            }
            Op::Dense { input, weight, bias } => {
                let (fout, fin) = (self.value(*weight).rows(), self.value(*weight).cols());
                let cols = self.value(*input).cols();
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                if let Some(acc) = self.accumulate(grads, *weight) {
                    gemm(fout, cols, fin, g, false, x, true, 1.0, acc);
                }
                if let Some(acc) = self.accumulate(grads, *input) {
                    gemm(fin, fout, cols, w, true, g, false, 1.0, acc);
                }
                if let Some(acc) = self.accumulate(grads, *bias) {
                    for (d, row) in acc.iter_mut().zip(g.chunks_exact(cols)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv { input, kernel, spec } => {
                let (h, cols) = (self.value(*input).rows(), self.value(*input).cols());
                let width = self.value(*kernel).cols();
                let len_in = cols / spec.segments;
                let len_out = node.value.cols() / spec.segments;
                let (x, w) = (self.value(*input).data(), self.value(*kernel).data());
                if let Some(acc) = self.accumulate(grads, *input) {
                    for r in 0..h {
                        for s in 0..spec.segments {
                            let gs = &g[(r * spec.segments + s) * len_out..(r * spec.segments + s + 1) * len_out];
                            let dx = &mut acc[r * cols + s * len_in..r * cols + (s + 1) * len_in];
                            for j in 0..width {
                                let wj = w[r * width + j];
                                let (lo, hi, off) = conv_range(j * spec.dilation, spec.pad_left, len_in, len_out);
                                for t in lo..hi {
                                    dx[(t as isize + off) as usize] += wj * gs[t];
                                }
                            }
                        }
                    }
                }
                if let Some(acc) = self.accumulate(grads, *kernel) {
                    for r in 0..h {
                        for s in 0..spec.segments {
                            let gs = &g[(r * spec.segments + s) * len_out..(r * spec.segments + s + 1) * len_out];
                            let xs = &x[r * cols + s * len_in..r * cols + (s + 1) * len_in];
                            for j in 0..width {
                                let (lo, hi, off) = conv_range(j * spec.dilation, spec.pad_left, len_in, len_out);
                                let mut sum = 0.0;
                                for t in lo..hi {
                                    sum += gs[t] * xs[(t as isize + off) as usize];
                                }
                                acc[r * width + j] += sum;
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    for ((d, gi), x) in acc.iter_mut().zip(g).zip(self.value(*a).data()) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Square(a) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    for ((d, gi), x) in acc.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += 2.0 * gi * x;
                    }
                }
            }
            Op::Log10(a) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    for ((d, gi), x) in acc.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gi / (x * std::f64::consts::LN_10);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &v in inputs {
                    let part = self.value(v);
                    let extent = if *axis == 0 { part.rows() } else { part.cols() };
                    if let Some(acc) = self.accumulate(grads, v) {
                        if *axis == 0 {
                            axpy(acc, &g[offset * cols..(offset + extent) * cols], 1.0);
                        } else {
                            let pc = part.cols();
                            for r in 0..part.rows() {
                                axpy(
                                    &mut acc[r * pc..(r + 1) * pc],
                                    &g[r * cols + offset..r * cols + offset + pc],
                                    1.0,
                                );
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Reduce { input, axis, factor } => {
                let x = self.value(*input);
                let (rows, cols) = (x.rows(), x.cols());
                let rank = x.shape().len();
                if let Some(acc) = self.accumulate(grads, *input) {
                    match (axis, rank) {
                        (Some(0), 2) => {
                            for r in 0..rows {
                                axpy(&mut acc[r * cols..(r + 1) * cols], g, *factor);
                            }
                        }
                        (Some(1), 2) => {
                            for r in 0..rows {
                                let gv = g[r] * factor;
                                acc[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                        _ => {
                            let gv = g[0] * factor;
                            acc.iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
            }
            Op::FeatureNorm {
                input,
                scale,
                bias,
                normalized,
                inv_std,
            } => {
                let (k, l) = (node.value.rows(), node.value.cols());
                if let Some(acc) = self.accumulate(grads, *scale) {
                    for r in 0..k {
                        acc[r] += g[r * l..(r + 1) * l]
                            .iter()
                            .zip(&normalized[r * l..(r + 1) * l])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(acc) = self.accumulate(grads, *bias) {
                    for r in 0..k {
                        acc[r] += g[r * l..(r + 1) * l].iter().sum::<f64>();
                    }
                }
                if self.wants(*input) {
                    let gamma = self.value(*scale).data();
                    let mut sum_g = vec![0.0; l];
                    let mut sum_gn = vec![0.0; l];
                    for r in 0..k {
                        for t in 0..l {
                            let gh = g[r * l + t] * gamma[r];
                            sum_g[t] += gh;
                            sum_gn[t] += gh * normalized[r * l + t];
                        }
                    }
                    let kf = k as f64;
                    let acc = self.accumulate(grads, *input).expect("checked above");
                    for r in 0..k {
                        for t in 0..l {
                            let gh = g[r * l + t] * gamma[r];
                            acc[r * l + t] +=
                                inv_std[t] * (gh - sum_g[t] / kf - normalized[r * l + t] * sum_gn[t] / kf);
                        }
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let x = self.value(*input);
                let cols = x.cols();
                if let Some(acc) = self.accumulate(grads, *input) {
                    if *axis == 0 {
                        axpy(&mut acc[start * cols..start * cols + g.len()], g, 1.0);
                    } else {
                        let len = node.value.cols();
                        for r in 0..x.rows() {
                            axpy(
                                &mut acc[r * cols + start..r * cols + start + len],
                                &g[r * len..(r + 1) * len],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::OverlapAdd { input, hop, segments } => {
                let x = self.value(*input);
                let (window, cols) = (x.rows(), x.cols());
                let frames = cols / segments;
                let out_len = node.value.cols();
                if let Some(acc) = self.accumulate(grads, *input) {
                    for w in 0..window {
                        let row = &mut acc[w * cols..(w + 1) * cols];
                        for s in 0..*segments {
                            let src = &g[s * out_len..(s + 1) * out_len];
                            for l in 0..frames {
                                let t = l * hop + w;
                                if t < out_len {
                                    row[s * frames + l] += src[t];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` touched by kernel tap at offset `tap`
/// (already multiplied by dilation), and the input offset for that tap.
fn conv_range(tap: usize, pad_left: usize, len_in: usize, len_out: usize) -> (usize, usize, isize) {
    let off = tap as isize - pad_left as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((len_in as isize - off).max(0) as usize).min(len_out);
    (lo.min(hi), hi, off)
}

fn axpy(acc: &mut [f64], g: &[f64], s: f64) {
    for (d, x) in acc.iter_mut().zip(g) {
        *d += s * x;
    }
}

/// Per-node gradients from [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if it was not reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; zeros if unreached.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn delta_kernel_is_identity_for_any_dilation() {
        for dilation in [1, 2, 4, 8] {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
            let x = g.constant(m(2, 20, &data));
            let k = g.constant(m(2, 3, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
            let y = g.dilated_conv1d(x, k, Conv1d::same(3, dilation).with_segments(2)).unwrap();
            assert_eq!(g.value(y).data(), &data[..]);
        }
    }

    #[test]
    fn segmented_conv_does_not_leak_across_segments() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 6, &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]));
        let k = g.constant(m(1, 3, &[1.0, 1.0, 1.0]));
        let y = g.dilated_conv1d(x, k, Conv1d::same(3, 1).with_segments(2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0, 30.0, 60.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i = g.constant(m(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y), g.value(a));
        assert!(g.matmul(i, a).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = g.mean(x, None).unwrap();
        assert_eq!(g.value(s).item(), Some(2.5));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn unused_param_gets_zero_gradient_and_nonscalar_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0]));
        let s = g.sum(x, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.tensor(&g, unused).data(), &[0.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn feature_norm_constant_column_and_identity() {
        let r = 1.5f64.sqrt();
        let mut g = Graph::new();
        let x = g.constant(m(3, 2, &[2.0, r, 2.0, -r, 2.0, 0.0]));
        let s = g.constant(Tensor::vector(vec![1.0; 3]));
        let b = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.feature_norm(x, s, b).unwrap();
        let v = g.value(y);
        for (row, want) in [r, -r, 0.0].iter().enumerate() {
            assert_eq!(v.row(row)[0], 0.0);
            assert!((v.row(row)[1] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_checks_flag_nan() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.constant(Tensor::vector(vec![-1.0]));
        assert_eq!(g.log10(x), Err(TensorError::NonFinite { op: "log10" }));
    }

    #[test]
    fn overlap_add_places_frames_at_hop() {
        let mut g = Graph::new();
        // window 2, two frames, one segment
        let x = g.constant(m(2, 2, &[1.0, 10.0, 2.0, 20.0]));
        let y = g.overlap_add(x, 1, 1, 4).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 12.0, 20.0, 0.0]);
    }
}
