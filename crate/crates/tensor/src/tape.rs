//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. Nodes only ever reference earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, Geom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    Elu(f32),
    Exp,
    Log,
    Square,
    Neg,
    Scale(f32),
    Shift(f32),
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Elu(_) => "elu",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Square => "square",
            UnaryOp::Neg => "neg",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Shift(_) => "shift",
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            UnaryOp::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Square => x * x,
            UnaryOp::Neg => -x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Shift(c) => x + c,
        }
    }

    /// d(out)/d(in) from the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Elu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Neg => -1.0,
            UnaryOp::Scale(c) => c,
            UnaryOp::Shift(_) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Statistics source for [`Tape::batch_norm`].
pub enum BatchNormMode<'a> {
    /// Normalize by batch statistics and fold them into the running buffers:
    /// `running = momentum·running + (1 − momentum)·batch`.
    Train {
        running_mean: &'a mut [f32],
        running_var: &'a mut [f32],
        momentum: f32,
    },
    /// Normalize by the running buffers.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

enum Op {
    Leaf,
    Unary {
        a: usize,
        op: UnaryOp,
    },
    Binary {
        a: usize,
        b: usize,
        op: BinaryOp,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    ChannelBias {
        x: usize,
        bias: usize,
        channels: usize,
        inner: usize,
    },
    Conv {
        x: usize,
        w: usize,
        batch: usize,
        out_ch: usize,
        geom: Geom,
    },
    Deconv {
        x: usize,
        w: usize,
        batch: usize,
        in_ch: usize,
        geom: Geom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Fused {
        inputs: Vec<usize>,
        local: Vec<Vec<f32>>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations for one forward/backward cycle.
///
/// A tape supports exactly one [`backward`](Tape::backward); afterwards it
/// must be [`reset`](Tape::reset) before recording again.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(usize, u64, ParamId)>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Vec<f32>>,
    params: Vec<(usize, u64, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.idx).map(Vec::as_slice)
    }

    pub(crate) fn for_store(&self, store: u64) -> impl Iterator<Item = (ParamId, &[f32])> + '_ {
        self.params.iter().filter(move |(_, s, _)| *s == store).filter_map(|(idx, _, id)| {
            self.leaves.get(idx).map(|g| (*id, g.as_slice()))
        })
    }
}

fn check_finite(values: &[f32], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every recorded node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, tracked: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[self.idx(v).expect("foreign var")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("foreign var")].shape
    }

    /// Copies a recorded value out as a gradient-free tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[self.idx(v).expect("foreign var")];
        Tensor::new(&node.shape, node.value.clone()).expect("tape values are finite")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("foreign var")].tracked
    }

    /// Records a tensor as a leaf; tracked iff the tensor requires grad.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a parameter leaf whose gradient flows back to its store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())?;
        if t.requires_grad() {
            self.params.push((v.idx, store.uid(), id));
        }
        Ok(v)
    }

    /// Records a parameter as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let node = &self.nodes[ia];
        let value: Vec<f32> = node.value.iter().map(|&x| op.apply(x)).collect();
        check_finite(&value, op.name())?;
        let (shape, tracked) = (node.shape.clone(), node.tracked);
        self.push(shape, value, Op::Unary { a: ia, op }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn elu(&mut self, a: Var, alpha: f32) -> Result<Var> {
        self.unary(UnaryOp::Elu(alpha), a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    /// Elementwise binary op; either operand may be a one-element scalar.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        let shape = if na.shape == nb.shape || nb.value.len() == 1 {
            na.shape.clone()
        } else if na.value.len() == 1 {
            nb.shape.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let n = numel(&shape);
        let at = |i: usize| na.value[if na.value.len() == 1 { 0 } else { i }];
        let bt = |i: usize| nb.value[if nb.value.len() == 1 { 0 } else { i }];
        let value: Vec<f32> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => at(i) + bt(i),
                BinaryOp::Sub => at(i) - bt(i),
                BinaryOp::Mul => at(i) * bt(i),
                BinaryOp::Div => at(i) / bt(i),
            })
            .collect();
        check_finite(&value, "elementwise")?;
        let tracked = na.tracked || nb.tracked;
        self.push(shape, value, Op::Binary { a: ia, b: ib, op }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm(m, k, n, &na.value, false, &nb.value, false, 0.0, &mut value);
        check_finite(&value, "matmul")?;
        let tracked = na.tracked || nb.tracked;
        self.push(vec![m, n], value, Op::Matmul { a: ia, b: ib, m, k, n }, tracked)
    }

    /// Adds a per-channel bias to an `N×C` or `N×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (nx, nb) = (&self.nodes[ix], &self.nodes[ib]);
        if nx.shape.len() < 2 || nb.value.len() != nx.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: nx.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let channels = nx.shape[1];
        let inner: usize = nx.shape[2..].iter().product();
        let mut value = nx.value.clone();
        for (chunk_idx, chunk) in value.chunks_mut(inner).enumerate() {
            let b = nb.value[chunk_idx % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        check_finite(&value, "add_channel_bias")?;
        let (shape, tracked) = (nx.shape.clone(), nx.tracked || nb.tracked);
        self.push(
            shape,
            value,
            Op::ChannelBias {
                x: ix,
                bias: ib,
                channels,
                inner,
            },
            tracked,
        )
    }

    fn image_batch(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *shape {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: shape.to_vec(),
            }),
        }
    }

    /// Cross-correlation of `C×H×W` (or `N×C×H×W`) input with `O×C×k×k` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (nx, nw) = (&self.nodes[ix], &self.nodes[iw]);
        let (batch, c, h, wd) = Self::image_batch(&nx.shape, "conv2d")?;
        let [out_ch, wc, k, k2] = nw.shape[..] else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: nw.shape.clone(),
            });
        };
        if wc != c || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: nx.shape.clone(),
                rhs: nw.shape.clone(),
            });
        }
        let geometry_err = |input| TensorError::Geometry {
            op: "conv2d",
            input,
            kernel: k,
            stride,
            pad,
        };
        let oh = Geom::conv_out(h, k, stride, pad).ok_or_else(|| geometry_err(h))?;
        let ow = Geom::conv_out(wd, k, stride, pad).ok_or_else(|| geometry_err(wd))?;
        let geom = Geom {
            channels: c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let value = kernels::conv_forward(&nx.value, &nw.value, batch, out_ch, &geom);
        check_finite(&value, "conv2d")?;
        let shape = if nx.shape.len() == 3 {
            vec![out_ch, oh, ow]
        } else {
            vec![batch, out_ch, oh, ow]
        };
        let tracked = nx.tracked || nw.tracked;
        self.push(
            shape,
            value,
            Op::Conv {
                x: ix,
                w: iw,
                batch,
                out_ch,
                geom,
            },
            tracked,
        )
    }

    /// Transposed convolution with `Cin×Cout×k×k` kernels; the adjoint of
    /// [`conv2d`](Tape::conv2d) under the same stride and padding.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (nx, nw) = (&self.nodes[ix], &self.nodes[iw]);
        let (batch, in_ch, h, wd) = Self::image_batch(&nx.shape, "deconv2d")?;
        let [wc, out_ch, k, k2] = nw.shape[..] else {
            return Err(TensorError::Rank {
                op: "deconv2d",
                expected: 4,
                shape: nw.shape.clone(),
            });
        };
        if wc != in_ch || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "deconv2d",
                lhs: nx.shape.clone(),
                rhs: nw.shape.clone(),
            });
        }
        let geometry_err = |input| TensorError::Geometry {
            op: "deconv2d",
            input,
            kernel: k,
            stride,
            pad,
        };
        let big_h = Geom::deconv_out(h, k, stride, pad).ok_or_else(|| geometry_err(h))?;
        let big_w = Geom::deconv_out(wd, k, stride, pad).ok_or_else(|| geometry_err(wd))?;
        if Geom::conv_out(big_h, k, stride, pad) != Some(h) || Geom::conv_out(big_w, k, stride, pad) != Some(wd) {
            return Err(geometry_err(h));
        }
        let geom = Geom {
            channels: out_ch,
            h: big_h,
            w: big_w,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let value = kernels::deconv_forward(&nx.value, &nw.value, batch, in_ch, &geom);
        check_finite(&value, "deconv2d")?;
        let shape = if nx.shape.len() == 3 {
            vec![out_ch, big_h, big_w]
        } else {
            vec![batch, out_ch, big_h, big_w]
        };
        let tracked = nx.tracked || nw.tracked;
        self.push(
            shape,
            value,
            Op::Deconv {
                x: ix,
                w: iw,
                batch,
                in_ch,
                geom,
            },
            tracked,
        )
    }

    /// Per-channel batch normalization of an `N×C` or `N×C×H×W` tensor.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>, eps: f32) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (nx, ng, nb) = (&self.nodes[ix], &self.nodes[ig], &self.nodes[ib]);
        if nx.shape.len() != 2 && nx.shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "batch_norm",
                expected: 4,
                shape: nx.shape.clone(),
            });
        }
        let (batch, channels) = (nx.shape[0], nx.shape[1]);
        let inner: usize = nx.shape[2..].iter().product();
        if ng.value.len() != channels || nb.value.len() != channels {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: nx.shape.clone(),
                rhs: ng.shape.clone(),
            });
        }
        let at = |n: usize, c: usize| (n * channels + c) * inner;
        let mut xhat = vec![0.0f32; nx.value.len()];
        let mut inv_std = vec![0.0f32; channels];
        let training = matches!(mode, BatchNormMode::Train { .. });
        match mode {
            BatchNormMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if batch < 2 {
                    return Err(TensorError::BatchTooSmall(batch));
                }
                let count = (batch * inner) as f64;
                for c in 0..channels {
                    let mut sum = 0.0f64;
                    for n in 0..batch {
                        sum += nx.value[at(n, c)..at(n, c) + inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0f64;
                    for n in 0..batch {
                        sq += nx.value[at(n, c)..at(n, c) + inner]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count;
                    let istd = 1.0 / (var + eps as f64).sqrt();
                    inv_std[c] = istd as f32;
                    for n in 0..batch {
                        let base = at(n, c);
                        for i in 0..inner {
                            xhat[base + i] = ((nx.value[base + i] as f64 - mean) * istd) as f32;
                        }
                    }
                    running_mean[c] = momentum * running_mean[c] + (1.0 - momentum) * mean as f32;
                    running_var[c] = momentum * running_var[c] + (1.0 - momentum) * var as f32;
                }
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                for c in 0..channels {
                    let istd = 1.0 / (running_var[c] + eps).sqrt();
                    inv_std[c] = istd;
                    for n in 0..batch {
                        let base = at(n, c);
                        for i in 0..inner {
                            xhat[base + i] = (nx.value[base + i] - running_mean[c]) * istd;
                        }
                    }
                }
            }
        }
        let mut value = xhat.clone();
        for n in 0..batch {
            for c in 0..channels {
                let (g, b) = (ng.value[c], nb.value[c]);
                value[at(n, c)..at(n, c) + inner].iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        check_finite(&value, "batch_norm")?;
        let (shape, tracked) = (nx.shape.clone(), nx.tracked || ng.tracked || nb.tracked);
        self.push(
            shape,
            value,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                channels,
                inner,
                xhat,
                inv_std,
                training,
            },
            tracked,
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idxs.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let rows = self.nodes[*first].shape[0];
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[*first].shape.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push((i, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, w) in &widths {
                value.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let tracked = idxs.iter().any(|&i| self.nodes[i].tracked);
        self.push(vec![rows, total], value, Op::Concat { parts: widths, rows }, tracked)
    }

    /// Stacks tensors that agree in every dimension but the first.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let inner = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut flat = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s[1..] != inner[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: s,
                });
            }
            rows += s[0];
            flat.push(self.reshape(p, &[1, numel(&s)])?);
        }
        let joined = self.concat_cols(&flat)?;
        let mut shape = vec![rows];
        shape.extend_from_slice(&inner);
        self.reshape(joined, &shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let node = &self.nodes[ia];
        if numel(shape) != node.value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, tracked) = (node.value.clone(), node.tracked);
        self.push(shape.to_vec(), value, Op::Reshape { a: ia }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let node = &self.nodes[ia];
        let s: f64 = node.value.iter().map(|&v| v as f64).sum();
        let tracked = node.tracked;
        self.push(vec![1], vec![s as f32], Op::Sum { a: ia }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let node = &self.nodes[ia];
        let s: f64 = node.value.iter().map(|&v| v as f64).sum::<f64>() / node.value.len() as f64;
        let tracked = node.tracked;
        self.push(vec![1], vec![s as f32], Op::Mean { a: ia }, tracked)
    }

    /// Records a scalar computed outside the tape from `inputs`, together with
    /// its gradient w.r.t. each input. Backward scales `local_grads` by the
    /// incoming scalar gradient.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: f64, local_grads: Vec<Vec<f32>>) -> Result<Var> {
        let idxs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        if idxs.len() != local_grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "fused_scalar",
                lhs: vec![idxs.len()],
                rhs: vec![local_grads.len()],
            });
        }
        for (&i, g) in idxs.iter().zip(&local_grads) {
            if self.nodes[i].value.len() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "fused_scalar",
                    lhs: self.nodes[i].shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite("fused_scalar"));
        }
        let tracked = idxs.iter().any(|&i| self.nodes[i].tracked);
        self.push(
            vec![1],
            vec![value as f32],
            Op::Fused {
                inputs: idxs,
                local: local_grads,
            },
            tracked,
        )
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(li + 1);
        grads.resize_with(li + 1, || None);
        grads[li] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].tracked {
                continue;
            }
            match &nodes[i].op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Unary { a, op } => {
                    let (x, y) = (&nodes[*a].value, &nodes[i].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * op.derivative(x[j], y[j]);
                        }
                    }
                }
                Op::Binary { a, b, op } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let at = |j: usize| va[if va.len() == 1 { 0 } else { j }];
                    let bt = |j: usize| vb[if vb.len() == 1 { 0 } else { j }];
                    let da = |j: usize| match op {
                        BinaryOp::Add | BinaryOp::Sub => 1.0,
                        BinaryOp::Mul => bt(j),
                        BinaryOp::Div => 1.0 / bt(j),
                    };
                    let db = |j: usize| match op {
                        BinaryOp::Add => 1.0,
                        BinaryOp::Sub => -1.0,
                        BinaryOp::Mul => at(j),
                        BinaryOp::Div => -at(j) / (bt(j) * bt(j)),
                    };
                    let ca = nodes[*a].tracked.then(|| reduce_broadcast(&g, va.len(), da));
                    let cb = nodes[*b].tracked.then(|| reduce_broadcast(&g, vb.len(), db));
                    if let Some(c) = ca {
                        add_into(slot(&mut grads, nodes, *a), &c);
                    }
                    if let Some(c) = cb {
                        add_into(slot(&mut grads, nodes, *b), &c);
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        kernels::gemm(*m, *n, *k, &g, false, vb, true, 1.0, ga);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        kernels::gemm(*k, *m, *n, va, true, &g, false, 1.0, gb);
                    }
                }
                Op::ChannelBias { x, bias, channels, inner } => {
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for (ci, chunk) in g.chunks(*inner).enumerate() {
                            gb[ci % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                    }
                    add_into(slot(&mut grads, nodes, *x), &g);
                }
                Op::Conv { x, w, batch, out_ch, geom } => {
                    let mut gx = take_slot(&mut grads, nodes, *x);
                    let mut gw = take_slot(&mut grads, nodes, *w);
                    kernels::conv_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *batch,
                        *out_ch,
                        geom,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                    );
                    put_slot(&mut grads, *x, gx);
                    put_slot(&mut grads, *w, gw);
                }
                Op::Deconv { x, w, batch, in_ch, geom } => {
                    let mut gx = take_slot(&mut grads, nodes, *x);
                    let mut gw = take_slot(&mut grads, nodes, *w);
                    kernels::deconv_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *batch,
                        *in_ch,
                        geom,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                    );
                    put_slot(&mut grads, *x, gx);
                    put_slot(&mut grads, *w, gw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    channels,
                    inner,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let batch = g.len() / (channels * inner);
                    let at = |n: usize, c: usize| (n * channels + c) * inner;
                    let gv = &nodes[*gamma].value;
                    let mut sum_dy = vec![0.0f64; *channels];
                    let mut sum_dy_xhat = vec![0.0f64; *channels];
                    for n in 0..batch {
                        for c in 0..*channels {
                            let base = at(n, c);
                            for j in base..base + inner {
                                sum_dy[c] += g[j] as f64;
                                sum_dy_xhat[c] += g[j] as f64 * xhat[j] as f64;
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for c in 0..*channels {
                            gg[c] += sum_dy_xhat[c] as f32;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for c in 0..*channels {
                            gb[c] += sum_dy[c] as f32;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let count = (batch * inner) as f64;
                        for n in 0..batch {
                            for c in 0..*channels {
                                let base = at(n, c);
                                let scale = gv[c] as f64 * inv_std[c] as f64;
                                for j in base..base + inner {
                                    let d = if *training {
                                        scale / count * (count * g[j] as f64 - sum_dy[c] - xhat[j] as f64 * sum_dy_xhat[c])
                                    } else {
                                        scale * g[j] as f64
                                    };
                                    gx[j] += d as f32;
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(pi, w) in parts {
                        if let Some(gp) = slot(&mut grads, nodes, pi) {
                            for r in 0..*rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Reshape { a } => add_into(slot(&mut grads, nodes, *a), &g),
                Op::Sum { a } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|v| *v += g[0]);
                    }
                }
                Op::Mean { a } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let s = g[0] / ga.len() as f32;
                        ga.iter_mut().for_each(|v| *v += s);
                    }
                }
                Op::Fused { inputs, local } => {
                    for (&ii, lg) in inputs.iter().zip(local) {
                        if let Some(gi) = slot(&mut grads, nodes, ii) {
                            for (d, &l) in gi.iter_mut().zip(lg) {
                                *d += g[0] * l;
                            }
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            leaves,
            params: self.params.clone(),
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f32>> {
    if !nodes[i].tracked {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
}

fn take_slot(grads: &mut [Option<Vec<f32>>], nodes: &[Node], i: usize) -> Option<Vec<f32>> {
    if !nodes[i].tracked {
        return None;
    }
    Some(grads[i].take().unwrap_or_else(|| vec![0.0; nodes[i].value.len()]))
}

fn put_slot(grads: &mut [Option<Vec<f32>>], i: usize, g: Option<Vec<f32>>) {
    if let Some(g) = g {
        grads[i] = Some(g);
    }
}

fn add_into(dst: Option<&mut Vec<f32>>, src: &[f32]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

/// Elementwise local gradient, summed down to one value for a broadcast scalar.
fn reduce_broadcast(g: &[f32], target_len: usize, local: impl Fn(usize) -> f32) -> Vec<f32> {
    if target_len == g.len() {
        (0..g.len()).map(|j| g[j] * local(j)).collect()
    } else {
        vec![(0..g.len()).map(|j| (g[j] * local(j)) as f64).sum::<f64>() as f32]
    }
}
