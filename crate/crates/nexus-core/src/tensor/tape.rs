use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::{Array, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape for one forward pass. Nodes are appended in execution
/// order, so every operation's inputs precede it and a single reverse sweep
/// visits each node exactly once.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading dims.
    AddBroadcast { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// `a: [..., k]` (leading dims flattened) times `b: [k, n]`.
    MatMul { a: usize, b: usize },
    /// `[B, m, k] x [B, k, n]`.
    BatchMatMul { a: usize, b: usize },
    /// `x: [L, T, C]`, one kernel row per channel `k: [C, w]`, zero padding.
    ConvDepthwise { x: usize, k: usize },
    /// `x: [L, T, C_in]`, `k: [C_out, C_in, w]`, zero padding.
    ConvFull { x: usize, k: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, axis: usize },
    Unfold { x: usize, patch: usize, stride: usize },
    /// Arithmetic mean over the axes flagged in `mask`; those axes are dropped.
    MeanAxes { x: usize, mask: Vec<bool> },
    /// Mask entries are 0 or 1/(1-rate); applied elementwise.
    Dropout { x: usize, mask: Vec<f64> },
    Reshape { x: usize },
    /// `x * s.values[idx]` for a scalar drawn from a vector node.
    ScaleByElem { x: usize, s: usize, idx: usize },
    /// `x: [L, d]`, `w: [L]` -> convex/linear combination of rows, `[d]`.
    WeightedSumRows { x: usize, w: usize },
}

/// Handle to one node of a [`Tape`]: an n-dimensional f64 array participating
/// in reverse-mode differentiation.
#[derive(Clone)]
pub struct DiffArray {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffArray")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input that participates in differentiation.
    pub fn leaf(&self, values: Array) -> DiffArray {
        self.push(values, Op::Leaf, true)
    }

    /// Record an input that gradients do not flow into.
    pub fn constant(&self, values: Array) -> DiffArray {
        self.push(values, Op::Leaf, false)
    }

    fn push(&self, values: Array, op: Op, requires_grad: bool) -> DiffArray {
        let (shape, data) = values.into_parts();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            values: data,
            grad: None,
            requires_grad,
            op,
        });
        DiffArray {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }
}

fn same_tape(a: &DiffArray, b: &DiffArray) -> bool {
    Rc::ptr_eq(&a.tape.inner, &b.tape.inner)
}

impl DiffArray {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Array {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Array::from_vec(node.shape.clone(), node.values.clone()).expect("node shape consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar node");
        self.tape.inner.borrow().nodes[self.id].values[0]
    }

    /// Gradient populated by a prior `backward()`, if any.
    pub fn grad(&self) -> Option<Array> {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.id]
            .grad
            .as_ref()
            .map(|g| Array::from_vec(self.shape.clone(), g.clone()).expect("grad shape matches"))
    }

    fn emit(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> DiffArray {
        self.tape.push(
            Array::from_vec(shape, values).expect("op output shape consistent"),
            op,
            requires_grad,
        )
    }

    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id].values)
    }

    fn binary_values<R>(&self, other: &DiffArray, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        assert!(same_tape(self, other), "operands recorded on different tapes");
        let inner = self.tape.inner.borrow();
        f(
            &inner.nodes[self.id].values,
            &inner.nodes[other.id].values,
        )
    }

    fn requires_with(&self, other: &DiffArray) -> bool {
        self.tape.requires(self.id) || self.tape.requires(other.id)
    }

    pub fn add(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out = self.binary_values(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>()
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    /// Add `other`, whose shape must be a suffix of `self`'s, tiled over the
    /// leading dimensions (bias and positional-term addition).
    pub fn add_broadcast(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        let sfx = other.shape.len();
        if sfx > self.shape.len() || self.shape[self.shape.len() - sfx..] != other.shape[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let bn = other.numel().max(1);
        let out = self.binary_values(other, |a, b| {
            let mut out = a.to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                *v += b[i % bn];
            }
            out
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::AddBroadcast {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    pub fn sub(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out = self.binary_values(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out = self.binary_values(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>()
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    pub fn scale(&self, c: f64) -> DiffArray {
        let out = self.with_values(|a| a.iter().map(|x| x * c).collect::<Vec<_>>());
        self.emit(
            self.shape.clone(),
            out,
            Op::Scale { a: self.id, c },
            self.tape.requires(self.id),
        )
    }

    /// Matrix product. `self` may be rank >= 1 with its leading dims flattened
    /// into rows; `other` must be rank 2. Rank-3 batched pairs go through
    /// [`DiffArray::batch_matmul`].
    pub fn matmul(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        if other.shape.len() != 2 || self.shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let k = *self.shape.last().unwrap();
        let (bk, n) = (other.shape[0], other.shape[1]);
        if k != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let rows = self.numel() / k;
        let out = self.binary_values(other, |a, b| {
            let mut out = vec![0.0; rows * n];
            matmul_into(a, b, &mut out, rows, k, n);
            out
        });
        let mut shape = self.shape[..self.shape.len() - 1].to_vec();
        shape.push(n);
        Ok(self.emit(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    /// Batched matrix product of two rank-3 operands with matching batch dim.
    pub fn batch_matmul(&self, other: &DiffArray) -> Result<DiffArray, TensorError> {
        let bad = self.shape.len() != 3
            || other.shape.len() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1];
        if bad {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (bsz, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let n = other.shape[2];
        let out = self.binary_values(other, |a, b| {
            let mut out = vec![0.0; bsz * m * n];
            for i in 0..bsz {
                matmul_into(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        });
        Ok(self.emit(
            vec![bsz, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
            },
            self.requires_with(other),
        ))
    }

    /// Temporal cross-correlation along axis 1 of `[L, T, C]`, one kernel row
    /// per channel (`kernel: [C, w]`), zero-padded to preserve length.
    pub fn conv1d_depthwise(&self, kernel: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape.len() != 3 || kernel.shape.len() != 2 || kernel.shape[0] != self.shape[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        }
        let w = kernel.shape[1];
        if w % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv1d kernel width must be odd, got {w}"
            )));
        }
        let (l, t, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let half = (w - 1) / 2;
        let out = self.binary_values(kernel, |x, k| {
            let mut out = vec![0.0; l * t * c];
            for li in 0..l {
                for ti in 0..t {
                    let o = (li * t + ti) * c;
                    for j in 0..w {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = (li * t + src as usize) * c;
                        for ci in 0..c {
                            out[o + ci] += k[ci * w + j] * x[s + ci];
                        }
                    }
                }
            }
            out
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::ConvDepthwise {
                x: self.id,
                k: kernel.id,
            },
            self.requires_with(kernel),
        ))
    }

    /// Full temporal convolution along axis 1 of `[L, T, C_in]` with kernel
    /// `[C_out, C_in, w]`, zero-padded to preserve length.
    pub fn conv1d_full(&self, kernel: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape.len() != 3 || kernel.shape.len() != 3 || kernel.shape[1] != self.shape[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_full",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        }
        let w = kernel.shape[2];
        if w % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv1d kernel width must be odd, got {w}"
            )));
        }
        let (l, t, cin) = (self.shape[0], self.shape[1], self.shape[2]);
        let cout = kernel.shape[0];
        let half = (w - 1) / 2;
        let out = self.binary_values(kernel, |x, k| {
            let mut out = vec![0.0; l * t * cout];
            for li in 0..l {
                for ti in 0..t {
                    let o = (li * t + ti) * cout;
                    for j in 0..w {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = (li * t + src as usize) * cin;
                        for co in 0..cout {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                acc += k[(co * cin + ci) * w + j] * x[s + ci];
                            }
                            out[o + co] += acc;
                        }
                    }
                }
            }
            out
        });
        Ok(self.emit(
            vec![l, t, cout],
            out,
            Op::ConvFull {
                x: self.id,
                k: kernel.id,
            },
            self.requires_with(kernel),
        ))
    }

    /// 1x1 channel mixing: per-position matmul of `[L, T, C_in]` by
    /// `[C_in, C_out]`.
    pub fn pointwise_conv(&self, weights: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "pointwise_conv",
                lhs: self.shape.clone(),
                rhs: weights.shape.clone(),
            });
        }
        self.matmul(weights)
    }

    pub fn sigmoid(&self) -> DiffArray {
        let out = self.with_values(|x| {
            x.iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect::<Vec<_>>()
        });
        self.emit(
            self.shape.clone(),
            out,
            Op::Sigmoid { x: self.id },
            self.tape.requires(self.id),
        )
    }

    pub fn relu(&self) -> DiffArray {
        let out = self.with_values(|x| x.iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
        self.emit(
            self.shape.clone(),
            out,
            Op::Relu { x: self.id },
            self.tape.requires(self.id),
        )
    }

    /// Numerically stable softmax (max-subtraction) along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<DiffArray, TensorError> {
        if axis >= self.shape.len() {
            return Err(TensorError::Config(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let lanes = LaneIter::new(&self.shape, axis);
        let out = self.with_values(|x| {
            let mut out = vec![0.0; x.len()];
            lanes.for_each(|idx| {
                let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &i in idx {
                    let e = (x[i] - max).exp();
                    out[i] = e;
                    sum += e;
                }
                for &i in idx {
                    out[i] /= sum;
                }
            });
            out
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::Softmax {
                x: self.id,
                axis,
            },
            self.tape.requires(self.id),
        ))
    }

    /// Zero-mean unit-variance normalization along `axis` (no affine terms),
    /// with epsilon 1e-5 added to the variance.
    pub fn layer_norm(&self, axis: usize) -> Result<DiffArray, TensorError> {
        if axis >= self.shape.len() {
            return Err(TensorError::Config(format!(
                "layer_norm axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.shape[axis] < 2 {
            return Err(TensorError::Degenerate(format!(
                "layer_norm over axis of length {}",
                self.shape[axis]
            )));
        }
        let lanes = LaneIter::new(&self.shape, axis);
        let n = self.shape[axis] as f64;
        let out = self.with_values(|x| {
            let mut out = vec![0.0; x.len()];
            lanes.for_each(|idx| {
                let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
                let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for &i in idx {
                    out[i] = (x[i] - mean) * inv;
                }
            });
            out
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::LayerNorm {
                x: self.id,
                axis,
            },
            self.tape.requires(self.id),
        ))
    }

    /// Slice `[L, T, D]` into overlapping temporal patches of length `patch`
    /// at the given stride: output `[L, T', patch*D]` with
    /// `T' = (T - patch)/stride + 1` and channels concatenated time-major.
    pub fn unfold(&self, patch: usize, stride: usize) -> Result<DiffArray, TensorError> {
        if self.shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "unfold",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (l, t, d) = (self.shape[0], self.shape[1], self.shape[2]);
        if patch > t {
            return Err(TensorError::Config(format!(
                "patch length {patch} exceeds sequence length {t}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("stride must be >= 1".into()));
        }
        let tp = (t - patch) / stride + 1;
        let out = self.with_values(|x| {
            let mut out = vec![0.0; l * tp * patch * d];
            for li in 0..l {
                for pi in 0..tp {
                    let base = (li * tp + pi) * patch * d;
                    let src = (li * t + pi * stride) * d;
                    out[base..base + patch * d].copy_from_slice(&x[src..src + patch * d]);
                }
            }
            out
        });
        Ok(self.emit(
            vec![l, tp, patch * d],
            out,
            Op::Unfold {
                x: self.id,
                patch,
                stride,
            },
            self.tape.requires(self.id),
        ))
    }

    /// Arithmetic mean over the given axes; those axes are dropped from the
    /// output shape. An empty result shape is a scalar.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<DiffArray, TensorError> {
        let rank = self.shape.len();
        let mut mask = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::Config(format!(
                    "mean axis {ax} out of range for shape {:?}",
                    self.shape
                )));
            }
            mask[ax] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|(&s, _)| s)
            .collect();
        let count: usize = self
            .shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&s, _)| s)
            .product();
        let map = reduce_index_map(&self.shape, &mask);
        let out_numel: usize = out_shape.iter().product();
        let out = self.with_values(|x| {
            let mut out = vec![0.0; out_numel.max(1)];
            for (i, &v) in x.iter().enumerate() {
                out[map[i]] += v;
            }
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
            out
        });
        Ok(self.emit(
            out_shape,
            out,
            Op::MeanAxes {
                x: self.id,
                mask,
            },
            self.tape.requires(self.id),
        ))
    }

    /// Mean over every axis.
    pub fn mean_all(&self) -> DiffArray {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.mean_axes(&axes).expect("axes in range")
    }

    /// Inverted dropout: in training mode zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); identity otherwise.
    pub fn dropout<R: Rng>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<DiffArray, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.with_values(|x| {
            x.iter().zip(&mask).map(|(v, m)| v * m).collect::<Vec<_>>()
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::Dropout {
                x: self.id,
                mask,
            },
            self.tape.requires(self.id),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<DiffArray, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let out = self.with_values(|x| x.to_vec());
        Ok(self.emit(shape, out, Op::Reshape { x: self.id }, self.tape.requires(self.id)))
    }

    /// Multiply by one element of a vector node (fusion-weight application).
    pub fn scale_by_elem(&self, s: &DiffArray, idx: usize) -> Result<DiffArray, TensorError> {
        if idx >= s.numel() {
            return Err(TensorError::Config(format!(
                "scale_by_elem index {idx} out of range for {:?}",
                s.shape
            )));
        }
        let out = self.binary_values(s, |x, sv| {
            let c = sv[idx];
            x.iter().map(|v| v * c).collect::<Vec<_>>()
        });
        Ok(self.emit(
            self.shape.clone(),
            out,
            Op::ScaleByElem {
                x: self.id,
                s: s.id,
                idx,
            },
            self.requires_with(s),
        ))
    }

    /// Weighted sum of the rows of `[L, d]` with weights `[L]`, yielding `[d]`.
    pub fn weighted_sum_rows(&self, w: &DiffArray) -> Result<DiffArray, TensorError> {
        if self.shape.len() != 2 || w.shape.len() != 1 || w.shape[0] != self.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum_rows",
                lhs: self.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let (l, d) = (self.shape[0], self.shape[1]);
        let out = self.binary_values(w, |x, wv| {
            let mut out = vec![0.0; d];
            for li in 0..l {
                let row = &x[li * d..(li + 1) * d];
                let c = wv[li];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += c * v;
                }
            }
            out
        });
        Ok(self.emit(
            vec![d],
            out,
            Op::WeightedSumRows {
                x: self.id,
                w: w.id,
            },
            self.requires_with(w),
        ))
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every reachable
    /// node with `requires_grad`; unreachable gradients are left untouched.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, &mut grads, i, &g);
            if nodes[i].requires_grad {
                nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }
}

/// Accumulating gradient buffer for node `j`, allocated on first touch.
fn buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
) -> &'a mut [f64] {
    let len: usize = nodes[j].shape.iter().product();
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(nodes: &mut [Node], grads: &mut Vec<Option<Vec<f64>>>, i: usize, g: &[f64]) {
    // Local copies of small metadata to appease the borrow checker where
    // values of inputs and grads of inputs are touched together.
    macro_rules! wants {
        ($j:expr) => {
            nodes[$j].requires_grad
        };
    }
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            if wants!(a) {
                axpy(buf(grads, nodes, a), g, 1.0);
            }
            if wants!(b) {
                axpy(buf(grads, nodes, b), g, 1.0);
            }
        }
        Op::AddBroadcast { a, b } => {
            let (a, b) = (*a, *b);
            if wants!(a) {
                axpy(buf(grads, nodes, a), g, 1.0);
            }
            if wants!(b) {
                let bn = nodes[b].values.len();
                let db = buf(grads, nodes, b);
                for (i, gv) in g.iter().enumerate() {
                    db[i % bn] += gv;
                }
            }
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            if wants!(a) {
                axpy(buf(grads, nodes, a), g, 1.0);
            }
            if wants!(b) {
                axpy(buf(grads, nodes, b), g, -1.0);
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if wants!(a) {
                let bv = std::mem::take(&mut nodes[b].values);
                let da = buf(grads, nodes, a);
                for ((d, gv), bvv) in da.iter_mut().zip(g).zip(&bv) {
                    *d += gv * bvv;
                }
                nodes[b].values = bv;
            }
            if wants!(b) {
                let av = std::mem::take(&mut nodes[a].values);
                let db = buf(grads, nodes, b);
                for ((d, gv), avv) in db.iter_mut().zip(g).zip(&av) {
                    *d += gv * avv;
                }
                nodes[a].values = av;
            }
        }
        Op::Scale { a, c } => {
            let (a, c) = (*a, *c);
            if wants!(a) {
                axpy(buf(grads, nodes, a), g, c);
            }
        }
        Op::MatMul { a, b } => {
            let (a, b) = (*a, *b);
            let k = *nodes[a].shape.last().unwrap();
            let n = nodes[b].shape[1];
            let rows = nodes[a].values.len() / k;
            if wants!(a) {
                let bv = std::mem::take(&mut nodes[b].values);
                let da = buf(grads, nodes, a);
                // dA = G . B^T
                for r in 0..rows {
                    for l in 0..k {
                        let mut acc = 0.0;
                        let gb = &g[r * n..(r + 1) * n];
                        let bb = &bv[l * n..(l + 1) * n];
                        for j in 0..n {
                            acc += gb[j] * bb[j];
                        }
                        da[r * k + l] += acc;
                    }
                }
                nodes[b].values = bv;
            }
            if wants!(b) {
                let av = std::mem::take(&mut nodes[a].values);
                let db = buf(grads, nodes, b);
                // dB = A^T . G
                for r in 0..rows {
                    let gb = &g[r * n..(r + 1) * n];
                    for l in 0..k {
                        let c = av[r * k + l];
                        if c != 0.0 {
                            let row = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                row[j] += c * gb[j];
                            }
                        }
                    }
                }
                nodes[a].values = av;
            }
        }
        Op::BatchMatMul { a, b } => {
            let (a, b) = (*a, *b);
            let (bsz, m, k) = (nodes[a].shape[0], nodes[a].shape[1], nodes[a].shape[2]);
            let n = nodes[b].shape[2];
            if wants!(a) {
                let bv = std::mem::take(&mut nodes[b].values);
                let da = buf(grads, nodes, a);
                for i in 0..bsz {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bv[i * k * n..(i + 1) * k * n];
                    let dab = &mut da[i * m * k..(i + 1) * m * k];
                    for r in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gb[r * n + j] * bb[l * n + j];
                            }
                            dab[r * k + l] += acc;
                        }
                    }
                }
                nodes[b].values = bv;
            }
            if wants!(b) {
                let av = std::mem::take(&mut nodes[a].values);
                let db = buf(grads, nodes, b);
                for i in 0..bsz {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let dbb = &mut db[i * k * n..(i + 1) * k * n];
                    for r in 0..m {
                        for l in 0..k {
                            let c = ab[r * k + l];
                            if c != 0.0 {
                                for j in 0..n {
                                    dbb[l * n + j] += c * gb[r * n + j];
                                }
                            }
                        }
                    }
                }
                nodes[a].values = av;
            }
        }
        Op::ConvDepthwise { x, k } => {
            let (x, kid) = (*x, *k);
            let (l, t, c) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let w = nodes[kid].shape[1];
            let half = (w - 1) / 2;
            if wants!(x) {
                let kv = std::mem::take(&mut nodes[kid].values);
                let dx = buf(grads, nodes, x);
                for li in 0..l {
                    for ti in 0..t {
                        let o = (li * t + ti) * c;
                        for j in 0..w {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = (li * t + src as usize) * c;
                            for ci in 0..c {
                                dx[s + ci] += kv[ci * w + j] * g[o + ci];
                            }
                        }
                    }
                }
                nodes[kid].values = kv;
            }
            if wants!(kid) {
                let xv = std::mem::take(&mut nodes[x].values);
                let dk = buf(grads, nodes, kid);
                for li in 0..l {
                    for ti in 0..t {
                        let o = (li * t + ti) * c;
                        for j in 0..w {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = (li * t + src as usize) * c;
                            for ci in 0..c {
                                dk[ci * w + j] += xv[s + ci] * g[o + ci];
                            }
                        }
                    }
                }
                nodes[x].values = xv;
            }
        }
        Op::ConvFull { x, k } => {
            let (x, kid) = (*x, *k);
            let (l, t, cin) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let (cout, w) = (nodes[kid].shape[0], nodes[kid].shape[2]);
            let half = (w - 1) / 2;
            if wants!(x) {
                let kv = std::mem::take(&mut nodes[kid].values);
                let dx = buf(grads, nodes, x);
                for li in 0..l {
                    for ti in 0..t {
                        let o = (li * t + ti) * cout;
                        for j in 0..w {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = (li * t + src as usize) * cin;
                            for co in 0..cout {
                                let gv = g[o + co];
                                if gv != 0.0 {
                                    for ci in 0..cin {
                                        dx[s + ci] += kv[(co * cin + ci) * w + j] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                nodes[kid].values = kv;
            }
            if wants!(kid) {
                let xv = std::mem::take(&mut nodes[x].values);
                let dk = buf(grads, nodes, kid);
                for li in 0..l {
                    for ti in 0..t {
                        let o = (li * t + ti) * cout;
                        for j in 0..w {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = (li * t + src as usize) * cin;
                            for co in 0..cout {
                                let gv = g[o + co];
                                if gv != 0.0 {
                                    for ci in 0..cin {
                                        dk[(co * cin + ci) * w + j] += xv[s + ci] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                nodes[x].values = xv;
            }
        }
        Op::Sigmoid { x } => {
            let x = *x;
            if wants!(x) {
                let yv = std::mem::take(&mut nodes[i].values);
                let dx = buf(grads, nodes, x);
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(&yv) {
                    *d += gv * y * (1.0 - y);
                }
                nodes[i].values = yv;
            }
        }
        Op::Relu { x } => {
            let x = *x;
            if wants!(x) {
                let xv = std::mem::take(&mut nodes[x].values);
                let dx = buf(grads, nodes, x);
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(&xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
                nodes[x].values = xv;
            }
        }
        Op::Softmax { x, axis } => {
            let (x, axis) = (*x, *axis);
            if wants!(x) {
                let yv = std::mem::take(&mut nodes[i].values);
                let shape = nodes[i].shape.clone();
                let dx = buf(grads, nodes, x);
                LaneIter::new(&shape, axis).for_each(|idx| {
                    let dot: f64 = idx.iter().map(|&j| g[j] * yv[j]).sum();
                    for &j in idx {
                        dx[j] += yv[j] * (g[j] - dot);
                    }
                });
                nodes[i].values = yv;
            }
        }
        Op::LayerNorm { x, axis } => {
            let (x, axis) = (*x, *axis);
            if wants!(x) {
                let xv = std::mem::take(&mut nodes[x].values);
                let shape = nodes[x].shape.clone();
                let n = shape[axis] as f64;
                let dx = buf(grads, nodes, x);
                LaneIter::new(&shape, axis).for_each(|idx| {
                    let mean = idx.iter().map(|&j| xv[j]).sum::<f64>() / n;
                    let var = idx.iter().map(|&j| (xv[j] - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = idx.iter().map(|&j| g[j]).sum::<f64>() / n;
                    let gx_mean = idx
                        .iter()
                        .map(|&j| g[j] * (xv[j] - mean) * inv)
                        .sum::<f64>()
                        / n;
                    for &j in idx {
                        let xh = (xv[j] - mean) * inv;
                        dx[j] += inv * (g[j] - g_mean - xh * gx_mean);
                    }
                });
                nodes[x].values = xv;
            }
        }
        Op::Unfold { x, patch, stride } => {
            let (x, patch, stride) = (*x, *patch, *stride);
            if wants!(x) {
                let (l, t, d) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
                let tp = (t - patch) / stride + 1;
                let dx = buf(grads, nodes, x);
                for li in 0..l {
                    for pi in 0..tp {
                        let base = (li * tp + pi) * patch * d;
                        let dst = (li * t + pi * stride) * d;
                        for off in 0..patch * d {
                            dx[dst + off] += g[base + off];
                        }
                    }
                }
            }
        }
        Op::MeanAxes { x, mask } => {
            let (x, mask) = (*x, mask.clone());
            if wants!(x) {
                let shape = nodes[x].shape.clone();
                let count: usize = shape
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &m)| m)
                    .map(|(&s, _)| s)
                    .product();
                let inv = 1.0 / count as f64;
                let map = reduce_index_map(&shape, &mask);
                let dx = buf(grads, nodes, x);
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[map[j]] * inv;
                }
            }
        }
        Op::Dropout { x, .. } => {
            let x = *x;
            let mask = std::mem::take(match &mut nodes[i].op {
                Op::Dropout { mask, .. } => mask,
                _ => unreachable!(),
            });
            if wants!(x) {
                let dx = buf(grads, nodes, x);
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(&mask) {
                    *d += gv * m;
                }
            }
            match &mut nodes[i].op {
                Op::Dropout { mask: m, .. } => *m = mask,
                _ => unreachable!(),
            }
        }
        Op::Reshape { x } => {
            let x = *x;
            if wants!(x) {
                axpy(buf(grads, nodes, x), g, 1.0);
            }
        }
        Op::ScaleByElem { x, s, idx } => {
            let (x, s, idx) = (*x, *s, *idx);
            let c = nodes[s].values[idx];
            if wants!(x) {
                axpy(buf(grads, nodes, x), g, c);
            }
            if wants!(s) {
                let xv = std::mem::take(&mut nodes[x].values);
                let acc: f64 = xv.iter().zip(g).map(|(v, gv)| v * gv).sum();
                buf(grads, nodes, s)[idx] += acc;
                nodes[x].values = xv;
            }
        }
        Op::WeightedSumRows { x, w } => {
            let (x, w) = (*x, *w);
            let (l, d) = (nodes[x].shape[0], nodes[x].shape[1]);
            if wants!(x) {
                let wv = std::mem::take(&mut nodes[w].values);
                let dx = buf(grads, nodes, x);
                for li in 0..l {
                    let c = wv[li];
                    for j in 0..d {
                        dx[li * d + j] += c * g[j];
                    }
                }
                nodes[w].values = wv;
            }
            if wants!(w) {
                let xv = std::mem::take(&mut nodes[x].values);
                let dw = buf(grads, nodes, w);
                for li in 0..l {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += xv[li * d + j] * g[j];
                    }
                    dw[li] += acc;
                }
                nodes[x].values = xv;
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Row-major `out[rows x n] += a[rows x k] . b[k x n]` (out starts zeroed).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Iterates the flat indices of each lane along `axis`.
struct LaneIter {
    outer: usize,
    len: usize,
    inner: usize,
}

impl LaneIter {
    fn new(shape: &[usize], axis: usize) -> Self {
        LaneIter {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn for_each(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0usize; self.len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (t, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.len + t) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

/// For each flat index of `shape`, the flat index in the reduced shape where
/// axes flagged in `mask` are dropped.
fn reduce_index_map(shape: &[usize], mask: &[bool]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    // Strides of the reduced output for each kept axis.
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1usize;
    for ax in (0..rank).rev() {
        if !mask[ax] {
            out_strides[ax] = stride;
            stride *= shape[ax];
        }
    }
    let mut map = vec![0usize; numel];
    let mut idx = vec![0usize; rank];
    for slot in map.iter_mut() {
        let mut o = 0;
        for ax in 0..rank {
            if !mask[ax] {
                o += idx[ax] * out_strides[ax];
            }
        }
        *slot = o;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
