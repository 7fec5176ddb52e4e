use std::hash::Hasher;

use fnv::FnvHasher;

use super::kernels::{self, conv2d_forward, gemm, matmul_forward};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values per channel (B*H*W).
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2x2(Var),
    AdaptiveAvgPool(Var),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    LogSoftmax {
        x: Var,
        tau: f64,
    },
    Reduce {
        x: Var,
        kind: Reduction,
        map: Vec<usize>,
        count: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MatMul(a, b)
            | AddBias(a, b)
            | Conv2d(a, b)
            | ConcatCols(a, b)
            | RowDot(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | AvgPool2x2(a) | AdaptiveAvgPool(a) => vec![*a],
            BatchNorm { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            SliceCols { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | Reduce { x, .. }
            | L2NormalizeRows { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of a differentiable computation.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and backward simply walks them in reverse. A graph can
/// be backpropagated once; build a new one (or call [`Graph::reset`]) to
/// record the next step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backpropagated: bool,
    track_kinks: bool,
    kinks: FnvHasher,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backpropagated", &self.backpropagated)
            .finish()
    }
}

/// Gradient buffers for the trainable leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for anything that is
    /// not a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Row-wise stable softmax of `x / tau` over the last axis of a 2-D buffer.
fn softmax_rows(data: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / tau).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn log_softmax_rows(data: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = src
            .iter()
            .map(|&s| ((s - max) / tau).exp())
            .sum::<f64>()
            .ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max) / tau - lse;
        }
    }
    out
}

/// Output shape and input->output flat index map for reducing `axes`.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let keep: Vec<bool> = (0..shape.len()).map(|a| !axes.contains(&a)).collect();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&d, _)| d)
        .collect();
    // Stride of each kept input axis inside the output layout.
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for a in (0..shape.len()).rev() {
        if keep[a] {
            out_strides[a] = stride;
            stride *= shape[a];
        }
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    let count = axes.iter().map(|&a| shape[a]).product();
    (out_shape, map, count)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that fingerprints every ReLU activation pattern. Used by the
    /// gradient checker to detect perturbations that cross a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::default()
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backpropagated = false;
        self.kinks = FnvHasher::default();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let parents = op.parents();
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("map keeps shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let Self { nodes, kinks, .. } = self;
            for &x in nodes[a.0].value.data() {
                kinks.write_u8((x > 0.0) as u8);
            }
        }
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    /// `max(0, x - threshold)`.
    pub fn hinge(&mut self, a: Var, threshold: f64) -> Var {
        let shifted = self.add_scalar(a, -threshold);
        self.relu(shifted)
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let v = matmul_forward(self.value(a), self.value(w))?;
        Ok(self.push(v, Op::MatMul(a, w)))
    }

    /// `x[B x q] + b[q]` added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let q = tb.len();
        let mut data = tx.data().to_vec();
        if q > 0 {
            for row in data.chunks_mut(q) {
                for (r, &bias) in row.iter_mut().zip(tb.data()) {
                    *r += bias;
                }
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let v = conv2d_forward(self.value(x), self.value(k))?;
        Ok(self.push(v, Op::Conv2d(x, k)))
    }

    fn bn_check(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize)> {
        let tx = self.value(x);
        expect_rank(op, tx, 4)?;
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((b, c, h * w))
    }

    /// Training-mode batch normalization over (B, H, W) per channel.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnStats)> {
        let (b, c, plane) = self.bn_check("batchnorm2d", x, gamma, beta)?;
        let count = b * plane;
        if count <= 1 {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm2d",
                msg: format!("need more than one value per channel, got B*H*W = {count}"),
            });
        }
        let tx = self.value(x);
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                s += tx.data()[off..off + plane].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                sq += tx.data()[off..off + plane]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let stats = BnStats { mean, var, count };
        let node = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((node, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, plane) = self.bn_check("batchnorm2d_eval", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm2d_eval",
                msg: format!(
                    "running stats have {} / {} entries for {c} channels",
                    mean.len(),
                    var.len()
                ),
            });
        }
        let tx = self.value(x);
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("avg_pool2x2", tx, 4)?;
        let s = tx.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2x2",
                msg: format!("spatial extent {h}x{w} too small"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &tx.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    dst[oy * ow + ox] = 0.25
                        * (src[y * w + xx]
                            + src[y * w + xx + 1]
                            + src[(y + 1) * w + xx]
                            + src[(y + 1) * w + xx + 1]);
                }
            }
        }
        let v = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2x2(x)))
    }

    /// Mean over all spatial positions, flattened to `[B, C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("adaptive_avg_pool", tx, 4)?;
        let s = tx.shape();
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        if plane == 0 {
            return Err(TensorError::InvalidArgument {
                op: "adaptive_avg_pool",
                msg: "empty spatial extent".into(),
            });
        }
        let out: Vec<f64> = tx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(vec![b, c], out)?;
        Ok(self.push(v, Op::AdaptiveAvgPool(x)))
    }

    /// `[a | b]` along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (rows, m, d) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(rows * (m + d));
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * m..(r + 1) * m]);
            out.extend_from_slice(&tb.data()[r * d..(r + 1) * d]);
        }
        let v = Tensor::new(vec![rows, m + d], out)?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("slice_cols", tx, 2)?;
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        if start > end || end > cols {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * cols + start..r * cols + end]);
        }
        let v = Tensor::new(vec![rows, end - start], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// Row-wise `softmax(x / tau)` of a `[B, K]` tensor.
    pub fn softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("softmax_t", tau)?;
        let tx = self.value(x);
        expect_rank("softmax_t", tx, 2)?;
        let v = Tensor::new(
            tx.shape().to_vec(),
            softmax_rows(tx.data(), tx.shape()[1], tau),
        )?;
        Ok(self.push(v, Op::Softmax { x, tau }))
    }

    /// Row-wise `log_softmax(x / tau)` of a `[B, K]` tensor.
    pub fn log_softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("log_softmax_t", tau)?;
        let tx = self.value(x);
        expect_rank("log_softmax_t", tx, 2)?;
        let v = Tensor::new(
            tx.shape().to_vec(),
            log_softmax_rows(tx.data(), tx.shape()[1], tau),
        )?;
        Ok(self.push(v, Op::LogSoftmax { x, tau }))
    }

    /// Sum or mean over `axes`; reduced axes are removed from the shape.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
            return Err(TensorError::InvalidArgument {
                op: "reduce",
                msg: format!("bad axes {axes:?} for shape {:?}", tx.shape()),
            });
        }
        let (out_shape, map, count) = reduce_plan(tx.shape(), &sorted);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in tx.data().iter().zip(&map) {
            out[o] += v;
        }
        if kind == Reduction::Mean && count > 0 {
            for o in out.iter_mut() {
                *o /= count as f64;
            }
        }
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(
            v,
            Op::Reduce {
                x,
                kind,
                map,
                count,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, Reduction::Sum, &axes)
            .expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, Reduction::Mean, &axes)
            .expect("all axes are valid")
    }

    /// Scale every row of a `[B, K]` tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("l2_normalize_rows", tx, 2)?;
        let cols = tx.shape()[1];
        let mut norms = Vec::with_capacity(tx.shape()[0]);
        let mut out = tx.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate().take(tx.shape()[0]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroNorm {
                    op: "l2_normalize_rows",
                    row: r,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }))
    }

    /// Per-row dot product of two `[B, K]` tensors, giving `[B]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_dot", ta, tb)?;
        expect_rank("row_dot", ta, 2)?;
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let out = (0..rows)
            .map(|r| {
                ta.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&tb.data()[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let v = Tensor::new(vec![rows], out)?;
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf recorded with `requires_grad` gets a gradient of its own
    /// shape (zeros when unreachable). Detached leaves get nothing.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        // Trainable leaves recorded after the loss node are unreachable.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let c = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], c);
                }
                if rg(*b) {
                    let c = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|x| x * c).collect());
            }
            Op::AddScalar(a) => {
                accumulate(&mut grads[a.0], g.to_vec());
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], c);
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tw.shape()[1]);
                if rg(*a) {
                    // dA = dC * W^T
                    let mut da = vec![0.0; m * k];
                    if n > 0 {
                        gemm(1.0, g, m, n, false, tw.data(), k, n, true, 0.0, &mut da);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if rg(*w) {
                    // dW = A^T * dC
                    let mut dw = vec![0.0; k * n];
                    if m > 0 {
                        gemm(1.0, ta.data(), m, k, true, g, m, n, false, 0.0, &mut dw);
                    }
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if rg(*b) {
                    let q = val(*b).len();
                    let mut db = vec![0.0; q];
                    if q > 0 {
                        for row in g.chunks(q) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Conv2d(x, k) => {
                let (dx, dk) = kernels::conv2d_backward(val(*x), val(*k), g, rg(*x), rg(*k));
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dk) = dk {
                    accumulate(&mut grads[k.0], dk);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = val(*x).shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                let count = (b * plane) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for j in off..off + plane {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch] / count;
                            for j in off..off + plane {
                                dx[j] =
                                    scale * (count * g[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_dy_xhat);
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], sum_dy);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = val(*x).shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for j in off..off + plane {
                            dx[j] = g[j] * gam[ch] * inv_std[ch];
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if rg(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
            Op::AvgPool2x2(x) => {
                let s = val(*x).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let q = 0.25 * src[oy * ow + ox];
                            let (y, xx) = (2 * oy, 2 * ox);
                            dst[y * w + xx] += q;
                            dst[y * w + xx + 1] += q;
                            dst[(y + 1) * w + xx] += q;
                            dst[(y + 1) * w + xx + 1] += q;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::AdaptiveAvgPool(x) => {
                let s = val(*x).shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let dx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatCols(a, b) => {
                let (m, d) = (val(*a).shape()[1], val(*b).shape()[1]);
                let rows = val(*a).shape()[0];
                if rg(*a) {
                    let mut da = Vec::with_capacity(rows * m);
                    for r in 0..rows {
                        da.extend_from_slice(&g[r * (m + d)..r * (m + d) + m]);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if rg(*b) {
                    let mut db = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        db.extend_from_slice(&g[r * (m + d) + m..(r + 1) * (m + d)]);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (val(*x).shape()[0], val(*x).shape()[1]);
                let width = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                if cols > 0 {
                    for ((yr, gr), dr) in
                        y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot) / tau;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LogSoftmax { x, tau } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                if cols > 0 {
                    for ((yr, gr), dr) in
                        y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv.exp() * gsum) / tau;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Reduce {
                x,
                kind,
                map,
                count,
            } => {
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / (*count).max(1) as f64,
                };
                let dx = map.iter().map(|&o| g[o] * scale).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        dx[r * cols + k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::RowDot(a, b) => {
                let cols = val(*a).shape()[1];
                let expand = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * g[j / cols.max(1)])
                        .collect()
                };
                if rg(*a) {
                    accumulate(&mut grads[a.0], expand(val(*b)));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], expand(val(*a)));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let r = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let h = g.constant(t(&[2], &[0.3, 0.7]));
        let h = g.hinge(h, 0.5);
        let hv = g.value(h).data();
        assert_eq!(hv[0], 0.0);
        assert!((hv[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let id = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = g.matmul(a, id).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let e = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let w = g.constant(Tensor::from_rows(&[&[2.0], &[5.0]]));
        let c = g.matmul(e, w).unwrap();
        assert_eq!(g.value(c).data(), &[2.0]);

        let bad = g.matmul(a, w);
        assert!(bad.is_ok());
        let bad = g.matmul(w, a);
        assert!(matches!(bad, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_identity_and_counting() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut dirac = vec![0.0; 9];
        dirac[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &dirac));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(ones, ones).unwrap();
        assert_eq!(g.value(y).data()[4], 9.0);
        // corners see a 2x2 neighbourhood
        assert_eq!(g.value(y).data()[0], 4.0);

        let k2 = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k2),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batchnorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.var, vec![0.0]);

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 7.0]));
        let gamma0 = g.constant(Tensor::zeros(&[1]));
        let beta = g.constant(Tensor::full(&[1], 0.75));
        let (y, _) = g.batchnorm2d(x, gamma0, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));

        let single = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let one = g.constant(Tensor::ones(&[1]));
        assert!(g.batchnorm2d(single, one, one, 1e-5).is_err());
    }

    #[test]
    fn pooling_and_concat() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1, 1], &[4.0, -1.0]));
        let p = g.adaptive_avg_pool(x).unwrap();
        assert_eq!(g.shape(p), &[1, 2]);
        assert_eq!(g.value(p).data(), &[4.0, -1.0]);

        let c = g.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let p = g.adaptive_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);

        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = g.constant(Tensor::from_rows(&[&[9.0]]));
        let ab = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[1.0, 2.0, 9.0]);

        let empty = g.constant(Tensor::zeros(&[1, 0]));
        let same = g.concat_cols(a, empty).unwrap();
        assert_eq!(g.value(same), g.value(a));

        let b2 = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.concat_cols(a, b2).is_err());
    }

    #[test]
    fn concat_gradient_splits() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.param(Tensor::from_rows(&[&[5.0], &[6.0]]));
        let ab = g.concat_cols(a, b).unwrap();
        let loss = g.sum_all(ab);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 2]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
        let p = g.softmax_t(z, 2.0).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let z = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let p = g.softmax_t(z, 1.0).unwrap();
        let e = std::f64::consts::E;
        let pv = g.value(p).data();
        assert!((pv[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((pv[1] - e / (1.0 + e)).abs() < 1e-15);

        let entropy = |p: &[f64]| -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let z = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let p1 = g.softmax_t(z, 1.0).unwrap();
        let p4 = g.softmax_t(z, 4.0).unwrap();
        assert!(entropy(g.value(p4).data()) > entropy(g.value(p1).data()));

        assert!(g.softmax_t(z, 0.0).is_err());
        assert!(g.log_softmax_t(z, -1.0).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean_all(x);
        assert_eq!(g.value(m).item(), 3.0);
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let s = g.sum_all(z);
        assert_eq!(g.value(s).item(), 0.0);
        assert!(g.reduce(x, Reduction::Sum, &[1]).is_err());
        assert!(g.reduce(z, Reduction::Sum, &[0, 0]).is_err());

        let y = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let r = g.reduce(y, Reduction::Sum, &[1]).unwrap();
        assert_eq!(g.value(r).data(), &[6.0, 15.0]);
        let r = g.reduce(y, Reduction::Mean, &[0]).unwrap();
        assert_eq!(g.value(r).data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let w = g.param(Tensor::full(&[2, 3], 0.7));
        let s = g.sum_all(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
        assert!(matches!(
            g.backward(s),
            Err(TensorError::AlreadyBackpropagated)
        ));

        let mut g = Graph::new();
        let w = g.param(Tensor::full(&[3], 1.3));
        let z = g.scale(w, 0.0);
        let s = g.sum_all(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0; 3]);

        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn reuse_accumulates_gradient() {
        // loss = sum(w * w) -> 2w
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let d = g.detach(w);
        let p = g.mul(w, c).unwrap();
        let q = g.mul(p, d).unwrap();
        let loss = g.sum_all(q);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        // d/dw (w * c * stop(w)) = c * w
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]));
        assert!(matches!(
            g.l2_normalize_rows(x),
            Err(TensorError::ZeroNorm { row: 1, .. })
        ));
    }
}
