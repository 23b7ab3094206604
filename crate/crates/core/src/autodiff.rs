//! Tape-based reverse-mode differentiation.
//!
//! Operations append nodes to a [`Graph`] in execution order, so the node
//! vector is already topologically sorted and the backward sweep is a single
//! reverse pass. A graph can be differentiated once; build a new graph for
//! the next forward pass.

use std::collections::{BTreeMap, HashMap};

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, BnCache, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors owned by a model: trainable parameters plus non-trainable
/// buffers such as batch-norm running statistics. Iteration follows
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push(ParamEntry {
                    name,
                    value,
                    trainable,
                });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("missing parameter or buffer `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Operation kinds, used to target fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    MaxPool,
    CropEven,
    BatchNorm,
    Relu,
    Linear,
    MatMul,
    Reshape,
    RowSlice,
    Concat,
    DivRowNorm,
    ChannelCollapse,
    PatchMax,
    Softmax,
    SoftmaxCrossEntropy,
    Nll,
    PairwiseEuclidean,
    PairwiseCosine,
    Scale,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Conv2d,
        OpKind::MaxPool,
        OpKind::CropEven,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::RowSlice,
        OpKind::Concat,
        OpKind::DivRowNorm,
        OpKind::ChannelCollapse,
        OpKind::PatchMax,
        OpKind::Softmax,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Nll,
        OpKind::PairwiseEuclidean,
        OpKind::PairwiseCosine,
        OpKind::Scale,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "maxpool",
            OpKind::CropEven => "crop",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::RowSlice => "rows",
            OpKind::Concat => "concat",
            OpKind::DivRowNorm => "div_norm",
            OpKind::ChannelCollapse => "collapse",
            OpKind::PatchMax => "patch_max",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCrossEntropy => "softmax_ce",
            OpKind::Nll => "nll",
            OpKind::PairwiseEuclidean => "euclidean",
            OpKind::PairwiseCosine => "cosine",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown op `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Scales every gradient an op of kind `op` sends to its inputs. Exists to
/// give gradient checks a negative control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

/// How a 2-D map is reduced across its channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collapse {
    Max,
    Mean,
}

/// Half-open rectangle `[row0, row1) x [col0, col1)` inside a 2-D map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl PatchBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Guard applied to norms used as denominators.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    CropEven {
        input: usize,
        in_shape: [usize; 4],
    },
    BatchNormTrain {
        input: usize,
        gamma: usize,
        beta: usize,
        cache: BnCache,
    },
    BatchNormEval {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Reshape {
        input: usize,
    },
    RowSlice {
        input: usize,
        start: usize,
    },
    Concat {
        lhs: usize,
        rhs: usize,
    },
    DivRowNorm {
        input: usize,
        norm_src: usize,
        raw: Vec<f64>,
    },
    ChannelCollapse {
        input: usize,
        method: Collapse,
        argmax: Vec<usize>,
    },
    PatchMax {
        input: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        input: usize,
    },
    SoftmaxCrossEntropy {
        input: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Nll {
        input: usize,
        labels: Vec<usize>,
    },
    PairwiseEuclidean {
        lhs: usize,
        rhs: usize,
    },
    PairwiseCosine {
        lhs: usize,
        rhs: usize,
        lnorm: Vec<f64>,
        rnorm: Vec<f64>,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::CropEven { .. } => OpKind::CropEven,
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::RowSlice { .. } => OpKind::RowSlice,
            Op::Concat { .. } => OpKind::Concat,
            Op::DivRowNorm { .. } => OpKind::DivRowNorm,
            Op::ChannelCollapse { .. } => OpKind::ChannelCollapse,
            Op::PatchMax { .. } => OpKind::PatchMax,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Nll { .. } => OpKind::Nll,
            Op::PairwiseEuclidean { .. } => OpKind::PairwiseEuclidean,
            Op::PairwiseCosine { .. } => OpKind::PairwiseCosine,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Trainable leaf; `Some(name)` when it came from a [`ParamStore`].
    trainable_leaf: Option<Option<String>>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(&var.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    fault: Option<Fault>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if let Some(kind) = op.kind() {
            value.check_finite(&format!("{kind:?}"))?;
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable_leaf: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable_leaf: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf that is not backed by a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable_leaf: Some(None),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named store entry. Repeated requests return the same node.
    /// Non-trainable entries (buffers) become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.require(name)?.clone();
        let trainable = store.is_trainable(name);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable_leaf: trainable.then(|| Some(name.to_string())),
        });
        let var = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    fn shape4(&self, var: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(var) {
            [n, h, w, c] => Ok([n, h, w, c]),
            ref s => dim_err(format!("{what}: expected [n,h,w,c], got {s:?}")),
        }
    }

    fn shape2(&self, var: Var, what: &str) -> Result<(usize, usize)> {
        ops::as_matrix(self.value(var), what)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let shape = self.shape4(input, "conv2d input")?;
        let geom = ConvGeom::new(shape, self.shape(kernel), stride)?;
        let out = ops::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::from_parts(geom.out_shape().to_vec(), out);
        self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
            &[input.0, kernel.0],
        )
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape4(input, "maxpool input")?;
        let (out, argmax) = ops::maxpool2x2_forward(self.value(input).data(), shape)?;
        let [n, h, w, c] = shape;
        let value = Tensor::from_parts(vec![n, h / 2, w / 2, c], out);
        self.push(
            value,
            Op::MaxPool {
                input: input.0,
                argmax,
            },
            &[input.0],
        )
    }

    /// Drops a trailing odd row/column. Identity when both dims are even.
    pub fn crop_to_even(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape4(input, "crop input")?;
        if shape[1] % 2 == 0 && shape[2] % 2 == 0 {
            return Ok(input);
        }
        if shape[1] < 2 || shape[2] < 2 {
            return dim_err(format!("cannot crop {}x{} map to even size", shape[1], shape[2]));
        }
        let (out, out_shape) = ops::crop_to_even(self.value(input).data(), shape);
        let value = Tensor::from_parts(out_shape.to_vec(), out);
        self.push(
            value,
            Op::CropEven {
                input: input.0,
                in_shape: shape,
            },
            &[input.0],
        )
    }

    /// Training-mode batch norm. Also returns the batch mean and (biased)
    /// variance so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let x = self.value(input);
        let channels = ops::check_bn_shapes(x, self.value(gamma), self.value(beta))?;
        let (y, cache) = ops::batchnorm_train_forward(
            x.data(),
            channels,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let out = self.push(
            value,
            Op::BatchNormTrain {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                cache,
            },
            &[input.0, gamma.0, beta.0],
        )?;
        Ok((out, mean, var))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let channels = ops::check_bn_shapes(x, self.value(gamma), self.value(beta))?;
        if mean.len() != channels || var.len() != channels {
            return dim_err("running statistics do not match channel count");
        }
        let (y, xhat) = ops::batchnorm_eval_forward(
            x.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        );
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.push(
            value,
            Op::BatchNormEval {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[input.0, gamma.0, beta.0],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = ops::relu(self.value(input));
        self.push(value, Op::Relu { input: input.0 }, &[input.0])
    }

    /// `input [n, din] * weight [din, dout] + bias [dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, din) = self.shape2(input, "linear input")?;
        let (wi, dout) = self.shape2(weight, "linear weight")?;
        if wi != din || self.value(bias).len() != dout {
            return dim_err(format!(
                "linear: input width {din}, weight {:?}, bias {:?}",
                self.shape(weight),
                self.shape(bias)
            ));
        }
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(self.value(bias).data());
        }
        ops::gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::from_parts(vec![n, dout], out);
        self.push(
            value,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
        )
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = ops::matmul(self.value(lhs), self.value(rhs))?;
        self.push(
            value,
            Op::MatMul {
                lhs: lhs.0,
                rhs: rhs.0,
            },
            &[lhs.0, rhs.0],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push(value, Op::Reshape { input: input.0 }, &[input.0])
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape.first().copied().unwrap_or(1);
        let rest = self.value(input).len() / n;
        self.reshape(input, &[n, rest])
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.shape2(input, "row slice")?;
        if start >= end || end > n {
            return dim_err(format!("row slice {start}..{end} of {n} rows"));
        }
        let data = self.value(input).data()[start * d..end * d].to_vec();
        let value = Tensor::from_parts(vec![end - start, d], data);
        self.push(
            value,
            Op::RowSlice {
                input: input.0,
                start,
            },
            &[input.0],
        )
    }

    /// Column-wise concatenation of two rank-2 tensors with equal row counts.
    pub fn concat(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (n, a) = self.shape2(lhs, "concat lhs")?;
        let (m, b) = self.shape2(rhs, "concat rhs")?;
        if n != m {
            return dim_err(format!("concat rows {n} vs {m}"));
        }
        let (l, r) = (self.value(lhs).data(), self.value(rhs).data());
        let mut out = Vec::with_capacity(n * (a + b));
        for i in 0..n {
            out.extend_from_slice(&l[i * a..(i + 1) * a]);
            out.extend_from_slice(&r[i * b..(i + 1) * b]);
        }
        let value = Tensor::from_parts(vec![n, a + b], out);
        self.push(
            value,
            Op::Concat {
                lhs: lhs.0,
                rhs: rhs.0,
            },
            &[lhs.0, rhs.0],
        )
    }

    /// Divides row `i` of `input` by `max(||norm_src[i]||, NORM_FLOOR)`.
    pub fn div_row_norm(&mut self, input: Var, norm_src: Var) -> Result<Var> {
        let (n, d) = self.shape2(input, "div_row_norm input")?;
        let (m, _) = self.shape2(norm_src, "div_row_norm norm source")?;
        if n != m {
            return dim_err(format!("div_row_norm rows {n} vs {m}"));
        }
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                self.value(norm_src)
                    .row(i)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * d);
        for (i, &r) in raw.iter().enumerate() {
            let denom = r.max(NORM_FLOOR);
            out.extend(x[i * d..(i + 1) * d].iter().map(|v| v / denom));
        }
        let value = Tensor::from_parts(vec![n, d], out);
        self.push(
            value,
            Op::DivRowNorm {
                input: input.0,
                norm_src: norm_src.0,
                raw,
            },
            &[input.0, norm_src.0],
        )
    }

    /// `[n, h, w, c] -> [n, h, w]` by channel max (first channel wins ties)
    /// or channel mean.
    pub fn collapse_channels(&mut self, input: Var, method: Collapse) -> Result<Var> {
        let [n, h, w, c] = self.shape4(input, "collapse input")?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * h * w);
        let mut argmax = Vec::new();
        for (cell, px) in x.chunks_exact(c).enumerate() {
            match method {
                Collapse::Max => {
                    let k = ops::argmax(px);
                    out.push(px[k]);
                    argmax.push(cell * c + k);
                }
                Collapse::Mean => out.push(px.iter().sum::<f64>() / c as f64),
            }
        }
        let value = Tensor::from_parts(vec![n, h, w], out);
        self.push(
            value,
            Op::ChannelCollapse {
                input: input.0,
                method,
                argmax,
            },
            &[input.0],
        )
    }

    /// `[n, h, w] -> [n, boxes.len()]`: the maximum of each patch, first cell
    /// in row-major order winning ties.
    pub fn patch_max(&mut self, input: Var, boxes: &[PatchBox]) -> Result<Var> {
        let (n, h, w) = match *self.shape(input) {
            [n, h, w] => (n, h, w),
            ref s => return dim_err(format!("patch_max: expected [n,h,w], got {s:?}")),
        };
        if boxes.is_empty() || boxes.iter().any(|b| b.row1 > h || b.col1 > w || b.height() == 0 || b.width() == 0) {
            return dim_err(format!("patch boxes do not fit a {h}x{w} map"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * boxes.len());
        let mut argmax = Vec::with_capacity(n * boxes.len());
        for b in 0..n {
            for pb in boxes {
                let mut best_idx = (b * h + pb.row0) * w + pb.col0;
                for r in pb.row0..pb.row1 {
                    for c in pb.col0..pb.col1 {
                        let idx = (b * h + r) * w + c;
                        if x[idx] > x[best_idx] {
                            best_idx = idx;
                        }
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
        let value = Tensor::from_parts(vec![n, boxes.len()], out);
        self.push(
            value,
            Op::PatchMax {
                input: input.0,
                argmax,
            },
            &[input.0],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let value = ops::softmax(self.value(input));
        self.push(value, Op::Softmax { input: input.0 }, &[input.0])
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.shape2(logits, "softmax_cross_entropy")?;
        ops::check_labels(labels, n, c)?;
        let probs = ops::softmax(self.value(logits));
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                input: logits.0,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            &[logits.0],
        )
    }

    /// Mean negative log of `probs[i, labels[i]]`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.shape2(probs, "nll")?;
        ops::check_labels(labels, n, c)?;
        let p = self.value(probs).data();
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * c + y].ln())
            .sum::<f64>()
            / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                input: probs.0,
                labels: labels.to_vec(),
            },
            &[probs.0],
        )
    }

    /// `out[i, j] = ||lhs[i] - rhs[j]||_2`.
    pub fn pairwise_euclidean(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (m, d) = self.shape2(lhs, "pairwise lhs")?;
        let (n, d2) = self.shape2(rhs, "pairwise rhs")?;
        if d != d2 {
            return dim_err(format!("pairwise distance dims {d} vs {d2}"));
        }
        let (a, b) = (self.value(lhs), self.value(rhs));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = a
                    .row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.push(s.sqrt());
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::PairwiseEuclidean {
                lhs: lhs.0,
                rhs: rhs.0,
            },
            &[lhs.0, rhs.0],
        )
    }

    /// `out[i, j] = cos(lhs[i], rhs[j])` with norms floored at [`NORM_FLOOR`].
    pub fn pairwise_cosine(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (m, d) = self.shape2(lhs, "pairwise lhs")?;
        let (n, d2) = self.shape2(rhs, "pairwise rhs")?;
        if d != d2 {
            return dim_err(format!("pairwise cosine dims {d} vs {d2}"));
        }
        let (a, b) = (self.value(lhs), self.value(rhs));
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lnorm: Vec<f64> = (0..m).map(|i| norm(a.row(i))).collect();
        let rnorm: Vec<f64> = (0..n).map(|j| norm(b.row(j))).collect();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                out.push(dot / (lnorm[i].max(NORM_FLOOR) * rnorm[j].max(NORM_FLOOR)));
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::PairwiseCosine {
                lhs: lhs.0,
                rhs: rhs.0,
                lnorm,
                rnorm,
            },
            &[lhs.0, rhs.0],
        )
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        );
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
            &[input.0],
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input: input.0 }, &[input.0])
    }

    /// Reverse sweep from a scalar loss. Fills gradients for every trainable
    /// leaf; a graph can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let mut contributions = self.local_grads(idx, &gout)?;
            if let (Some(fault), Some(kind)) = (self.fault, node.op.kind()) {
                if fault.op == kind {
                    for (_, g) in &mut contributions {
                        g.iter_mut().for_each(|v| *v *= fault.factor);
                    }
                }
            }
            for (parent, g) in contributions {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Some(name) = &node.trainable_leaf else {
                continue;
            };
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            t.check_finite("backward")?;
            if let Some(name) = name {
                out.by_name.insert(name.clone(), t.clone());
            }
            out.by_node.insert(idx, t);
        }
        Ok(out)
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn local_grads(&self, idx: usize, gout: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let val = |i: usize| self.nodes[i].value.data();
        let node = &self.nodes[idx];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gi, gk) = ops::conv2d_backward(val(*input), val(*kernel), gout, geom);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, ops::scatter_add(gout, argmax, val(*input).len()))]
            }
            Op::CropEven { input, in_shape } => {
                vec![(*input, ops::crop_to_even_backward(gout, *in_shape))]
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = ops::batchnorm_train_backward(gout, cache, val(*gamma));
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = val(*gamma);
                let c = g.len();
                let mut gx = Vec::with_capacity(gout.len());
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (dy, xh) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        gx.push(dy[ch] * g[ch] * inv_std[ch]);
                        gg[ch] += dy[ch] * xh[ch];
                        gb[ch] += dy[ch];
                    }
                }
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu { input } => {
                let g = val(*input)
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*input, g)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[*input].value;
                let (n, din) = (x.shape()[0], x.shape()[1]);
                let dout = self.nodes[*bias].value.len();
                let mut gx = vec![0.0; n * din];
                ops::gemm(n, dout, din, gout, false, val(*weight), true, &mut gx, false);
                let mut gw = vec![0.0; din * dout];
                ops::gemm(din, n, dout, x.data(), true, gout, false, &mut gw, false);
                let mut gb = vec![0.0; dout];
                for row in gout.chunks_exact(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*input, gx), (*weight, gw), (*bias, gb)]
            }
            Op::MatMul { lhs, rhs } => {
                let (m, k) = (self.nodes[*lhs].value.shape()[0], self.nodes[*lhs].value.shape()[1]);
                let n = self.nodes[*rhs].value.shape()[1];
                let mut ga = vec![0.0; m * k];
                ops::gemm(m, n, k, gout, false, val(*rhs), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                ops::gemm(k, m, n, val(*lhs), true, gout, false, &mut gb, false);
                vec![(*lhs, ga), (*rhs, gb)]
            }
            Op::Reshape { input } => vec![(*input, gout.to_vec())],
            Op::RowSlice { input, start } => {
                let x = &self.nodes[*input].value;
                let d = x.shape()[1];
                let mut g = vec![0.0; x.len()];
                g[start * d..start * d + gout.len()].copy_from_slice(gout);
                vec![(*input, g)]
            }
            Op::Concat { lhs, rhs } => {
                let a = self.nodes[*lhs].value.shape()[1];
                let b = self.nodes[*rhs].value.shape()[1];
                let mut gl = Vec::with_capacity(val(*lhs).len());
                let mut gr = Vec::with_capacity(val(*rhs).len());
                for row in gout.chunks_exact(a + b) {
                    gl.extend_from_slice(&row[..a]);
                    gr.extend_from_slice(&row[a..]);
                }
                vec![(*lhs, gl), (*rhs, gr)]
            }
            Op::DivRowNorm {
                input,
                norm_src,
                raw,
            } => {
                let x = &self.nodes[*input].value;
                let s = &self.nodes[*norm_src].value;
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = s.shape()[1];
                let mut gx = Vec::with_capacity(n * d);
                let mut gs = vec![0.0; n * k];
                for i in 0..n {
                    let denom = raw[i].max(NORM_FLOOR);
                    let grow = &gout[i * d..(i + 1) * d];
                    gx.extend(grow.iter().map(|g| g / denom));
                    if raw[i] >= NORM_FLOOR {
                        let dot: f64 = grow.iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                        let coef = -dot / (denom * denom * raw[i]);
                        for (dst, sv) in gs[i * k..(i + 1) * k].iter_mut().zip(s.row(i)) {
                            *dst = coef * sv;
                        }
                    }
                }
                vec![(*input, gx), (*norm_src, gs)]
            }
            Op::ChannelCollapse {
                input,
                method,
                argmax,
            } => {
                let x = &self.nodes[*input].value;
                let g = match method {
                    Collapse::Max => ops::scatter_add(gout, argmax, x.len()),
                    Collapse::Mean => {
                        let c = *x.shape().last().unwrap();
                        gout.iter()
                            .flat_map(|&g| std::iter::repeat_n(g / c as f64, c))
                            .collect()
                    }
                };
                vec![(*input, g)]
            }
            Op::PatchMax { input, argmax } => {
                vec![(*input, ops::scatter_add(gout, argmax, val(*input).len()))]
            }
            Op::Softmax { input } => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                vec![(*input, ops::softmax_backward(node.value.data(), gout, cols))]
            }
            Op::SoftmaxCrossEntropy {
                input,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = gout[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] -= scale;
                }
                vec![(*input, g)]
            }
            Op::Nll { input, labels } => {
                let p = val(*input);
                let n = labels.len();
                let c = p.len() / n;
                let mut g = vec![0.0; p.len()];
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] = -gout[0] / (n as f64 * p[i * c + y]);
                }
                vec![(*input, g)]
            }
            Op::PairwiseEuclidean { lhs, rhs } => {
                let a = &self.nodes[*lhs].value;
                let b = &self.nodes[*rhs].value;
                let (m, d) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let dist = node.value.data();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        if dij == 0.0 {
                            continue;
                        }
                        let coef = gout[i * n + j] / dij;
                        for k in 0..d {
                            let diff = a.data()[i * d + k] - b.data()[j * d + k];
                            ga[i * d + k] += coef * diff;
                            gb[j * d + k] -= coef * diff;
                        }
                    }
                }
                vec![(*lhs, ga), (*rhs, gb)]
            }
            Op::PairwiseCosine {
                lhs,
                rhs,
                lnorm,
                rnorm,
            } => {
                let a = &self.nodes[*lhs].value;
                let b = &self.nodes[*rhs].value;
                let (m, d) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let cosv = node.value.data();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    let na = lnorm[i].max(NORM_FLOOR);
                    for j in 0..n {
                        let nb = rnorm[j].max(NORM_FLOOR);
                        let g = gout[i * n + j];
                        let c = cosv[i * n + j];
                        let inv = 1.0 / (na * nb);
                        let a_live = lnorm[i] >= NORM_FLOOR;
                        let b_live = rnorm[j] >= NORM_FLOOR;
                        for k in 0..d {
                            let (ak, bk) = (a.data()[i * d + k], b.data()[j * d + k]);
                            let mut da = bk * inv;
                            if a_live {
                                da -= c * ak / (na * na);
                            }
                            let mut db = ak * inv;
                            if b_live {
                                db -= c * bk / (nb * nb);
                            }
                            ga[i * d + k] += g * da;
                            gb[j * d + k] += g * db;
                        }
                    }
                }
                vec![(*lhs, ga), (*rhs, gb)]
            }
            Op::Scale { input, factor } => {
                vec![(*input, gout.iter().map(|g| g * factor).collect())]
            }
            Op::Sum { input } => vec![(*input, vec![gout[0]; val(*input).len()])],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = g.sum(theta).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(theta).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::full(&[2], 1.0));
        let loss = g.sum(theta).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.scale(theta, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0), true);
        store.insert("buf", Tensor::full(&[2], 3.0), false);
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "buf").unwrap();
        let c = g.constant(Tensor::full(&[2], 5.0));
        let wb = g.reshape(w, &[1, 2]).unwrap();
        let bb = g.reshape(b, &[1, 2]).unwrap();
        let cb = g.reshape(c, &[1, 2]).unwrap();
        let x = g.concat(wb, bb).unwrap();
        let x = g.concat(x, cb).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param("w").is_some());
        assert!(grads.param("buf").is_none());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap(),
        );
        let p = g.maxpool2x2(x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2], 1.0));
        let y = g.scale(x, f64::MAX).unwrap();
        assert!(matches!(g.scale(y, 10.0), Err(Error::NonFinite(_))));
    }
}
