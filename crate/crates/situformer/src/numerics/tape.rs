use std::collections::BTreeMap;

use thiserror::Error;

/// Errors raised at op boundaries.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: input contains a non-finite value")]
    NonFiniteInput { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: loss is detached from every differentiable leaf")]
    DetachedGraph,
    #[error("masked softmax: a row has every position masked")]
    AllMasked,
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("grad_check: function is not deterministic ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub(crate) usize);

/// Dense row-major tensor. Scalars are `[1]`, vectors `[n]`, matrices `[r, c]`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Recorded operations. Each variant knows how to push gradients back to its
/// inputs; constant payloads (masks, targets) are captured by value so replay
/// never depends on external state.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Minimum { a: TensorId, b: TensorId },
    Maximum { a: TensorId, b: TensorId },
    AddRow { x: TensorId, bias: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Abs { x: TensorId },
    Sqrt { x: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    SumAll { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    LogSoftmax { x: TensorId },
    MaskedSoftmaxRows { x: TensorId },
    NllSum { log_probs: TensorId, targets: Vec<usize> },
    BceWithLogitsSum { logits: TensorId, targets: Vec<f64> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    SliceRows { x: TensorId, start: usize, end: usize },
    SliceCols { x: TensorId, start: usize, end: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    Pick { x: TensorId, row: usize, col: usize },
    MulScalarT { x: TensorId, s: TensorId },
}

/// Append-only record of tensors and the ops that produced them. Inputs of
/// every op were recorded earlier, so a single reverse sweep is a valid
/// topological order for backpropagation.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

fn view_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, 1),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.tensors[id.0].data[0]
    }

    /// Record a leaf. Leaves are the only tensors whose `requires_grad` is
    /// chosen by the caller; interior nodes inherit it from their inputs.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                details: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteInput { op: "leaf" });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(vec![v], vec![1], false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        id
    }

    fn push_op(&mut self, op: &'static str, data: Vec<f64>, shape: Vec<usize>, inputs: &[TensorId], node: Op) -> Result<TensorId> {
        check_finite(op, &data)?;
        let needs = inputs.iter().any(|i| self.tensors[i.0].requires_grad);
        Ok(self.push(data, shape, needs, node))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.tensors[a.0].shape == self.tensors[b.0].shape {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.tensors[a.0].shape, self.tensors[b.0].shape),
            })
        }
    }

    // ── Forward ops ────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`, both inputs strictly 2-D.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", ash, bsh),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(&self.tensors[a.0].data, &self.tensors[b.0].data, m, k, n);
        self.push_op("matmul", data, vec![m, n], &[a, b], Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = &self.tensors[x.0].shape;
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                details: format!("{:?}", sh),
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let data = transpose_raw(&self.tensors[x.0].data, r, c);
        self.push_op("transpose", data, vec![c, r], &[x], Op::Transpose { x })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("add", data, shape, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("sub", data, shape, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("mul", data, shape, &[a, b], Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("div", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("div", data, shape, &[a, b], Op::Div { a, b })
    }

    /// Elementwise min; ties take the left argument (and its gradient).
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("minimum", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("minimum", data, shape, &[a, b], Op::Minimum { a, b })
    }

    /// Elementwise max; ties take the left argument (and its gradient).
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("maximum", a, b)?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_op("maximum", data, shape, &[a, b], Op::Maximum { a, b })
    }

    /// `[n,d] + [d]` row-broadcast bias.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = view_2d(&self.tensors[x.0].shape);
        let blen = self.tensors[bias.0].numel();
        if blen != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                details: format!("x cols {} vs bias len {}", c, blen),
            });
        }
        let bdata = &self.tensors[bias.0].data;
        let mut data = self.tensors[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bdata[j];
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("add_row", data, shape, &[x, bias], Op::AddRow { x, bias })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("relu", data, shape, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("sigmoid", data, shape, &[x], Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("abs", data, shape, &[x], Op::Abs { x })
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v.sqrt()).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("sqrt", data, shape, &[x], Op::Sqrt { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("scale", data, shape, &[x], Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("add_const", data, shape, &[x], Op::AddConst { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.tensors[x.0].data.iter().sum();
        self.push_op("sum_all", vec![s], vec![1], &[x], Op::SumAll { x })
    }

    /// Numerically stable softmax along `axis` (0 or 1 for matrices; vectors
    /// use axis 0). The max is subtracted before exponentiation.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sh = self.tensors[x.0].shape.clone();
        let (r, c) = view_2d(&sh);
        let row_wise = sh.len() == 1 || axis == 1;
        if sh.len() == 2 && axis > 1 || sh.len() == 1 && axis != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                details: format!("axis {} for shape {:?}", axis, sh),
            });
        }
        let src = &self.tensors[x.0].data;
        if !src.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteInput { op: "softmax" });
        }
        let mut data = vec![0.0; src.len()];
        if row_wise {
            for i in 0..r {
                softmax_row(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
            }
        } else {
            let mut col = vec![0.0; r];
            let mut out = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = src[i * c + j];
                }
                softmax_row(&col, &mut out);
                for i in 0..r {
                    data[i * c + j] = out[i];
                }
            }
        }
        self.push_op("softmax", data, sh, &[x], Op::Softmax { x, axis })
    }

    /// Row-wise log-softmax (matrices; a vector is one row).
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.tensors[x.0].shape.clone();
        let (r, c) = view_2d(&sh);
        let src = &self.tensors[x.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        self.push_op("log_softmax", data, sh, &[x], Op::LogSoftmax { x })
    }

    /// Row-wise softmax over the unmasked key positions only. Masked
    /// positions get probability exactly 0 and receive zero gradient, so a
    /// masked key/value row cannot influence the output at all.
    pub fn masked_softmax_rows(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let sh = self.tensors[x.0].shape.clone();
        let (r, c) = view_2d(&sh);
        if mask.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                details: format!("mask len {} vs {} cols", mask.len(), c),
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(TensorError::AllMasked);
        }
        let src = &self.tensors[x.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(mask)
                .filter(|(_, keep)| **keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - m).exp();
                    data[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        self.push_op(
            "masked_softmax",
            data,
            sh,
            &[x],
            Op::MaskedSoftmaxRows { x },
        )
    }

    /// Negative log-likelihood: `-sum_i log_probs[i, targets[i]]`.
    pub fn nll_sum(&mut self, log_probs: TensorId, targets: &[usize]) -> Result<TensorId> {
        let sh = self.tensors[log_probs.0].shape.clone();
        let (r, c) = view_2d(&sh);
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "nll_sum",
                details: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        let src = &self.tensors[log_probs.0].data;
        let mut s = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfBounds {
                    op: "nll_sum",
                    index: t,
                    shape: sh,
                });
            }
            s -= src[i * c + t];
        }
        self.push_op(
            "nll_sum",
            vec![s],
            vec![1],
            &[log_probs],
            Op::NllSum {
                log_probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Summed binary cross-entropy on raw logits, computed in the stable
    /// `max(l,0) - l*t + ln(1+exp(-|l|))` form.
    pub fn bce_with_logits_sum(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let n = self.tensors[logits.0].numel();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                details: format!("{} targets for {} logits", targets.len(), n),
            });
        }
        let src = &self.tensors[logits.0].data;
        let s: f64 = src
            .iter()
            .zip(targets)
            .map(|(l, t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        self.push_op(
            "bce_with_logits",
            vec![s],
            vec![1],
            &[logits],
            Op::BceWithLogitsSum {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Row-wise layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sh = self.tensors[x.0].shape.clone();
        let (r, c) = view_2d(&sh);
        if self.tensors[gamma.0].numel() != c || self.tensors[beta.0].numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "x cols {} vs gamma {} / beta {}",
                    c,
                    self.tensors[gamma.0].numel(),
                    self.tensors[beta.0].numel()
                ),
            });
        }
        let src = &self.tensors[x.0].data;
        let g = &self.tensors[gamma.0].data;
        let b = &self.tensors[beta.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push_op(
            "layer_norm",
            data,
            sh,
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, eps },
        )
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = view_2d(&self.tensors[x.0].shape);
        if start >= end || end > r {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                details: format!("rows {}..{} of {}", start, end, r),
            });
        }
        let data = self.tensors[x.0].data[start * c..end * c].to_vec();
        self.push_op(
            "slice_rows",
            data,
            vec![end - start, c],
            &[x],
            Op::SliceRows { x, start, end },
        )
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = view_2d(&self.tensors[x.0].shape);
        if start >= end || end > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                details: format!("cols {}..{} of {}", start, end, c),
            });
        }
        let src = &self.tensors[x.0].data;
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push_op(
            "slice_cols",
            data,
            vec![r, w],
            &[x],
            Op::SliceCols { x, start, end },
        )
    }

    /// Stack parts vertically; every part must share the column width.
    /// 1-D parts of length `d` count as a single `[1, d]` row.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                details: "no parts".into(),
            });
        }
        let (_, c) = view_2d(&self.tensors[parts[0].0].shape);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = view_2d(&self.tensors[p.0].shape);
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("column widths {} vs {}", c, pc),
                });
            }
            rows += pr;
            data.extend_from_slice(&self.tensors[p.0].data);
        }
        self.push_op(
            "concat_rows",
            data,
            vec![rows, c],
            parts,
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                details: "no parts".into(),
            });
        }
        let (r, _) = view_2d(&self.tensors[parts[0].0].shape);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| view_2d(&self.tensors[p.0].shape).1)
            .collect();
        for p in parts {
            let (pr, _) = view_2d(&self.tensors[p.0].shape);
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("row counts {} vs {}", r, pr),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = &self.tensors[p.0].data;
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push_op(
            "concat_cols",
            data,
            vec![r, total],
            parts,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    /// Extract one element as a `[1]` scalar.
    pub fn pick(&mut self, x: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let (r, c) = view_2d(&self.tensors[x.0].shape);
        if row >= r || col >= c {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index: row * c + col,
                shape: self.tensors[x.0].shape.clone(),
            });
        }
        let v = self.tensors[x.0].data[row * c + col];
        self.push_op("pick", vec![v], vec![1], &[x], Op::Pick { x, row, col })
    }

    /// Multiply every element of `x` by the `[1]` scalar tensor `s`.
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensors[s.0].numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_t",
                details: format!("scalar operand has shape {:?}", self.tensors[s.0].shape),
            });
        }
        let sv = self.tensors[s.0].data[0];
        let data: Vec<f64> = self.tensors[x.0].data.iter().map(|v| v * sv).collect();
        let shape = self.tensors[x.0].shape.clone();
        self.push_op("mul_scalar_t", data, shape, &[x, s], Op::MulScalarT { x, s })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are fully recomputed on
    /// every call (no accumulation between calls), so running backward twice
    /// on the same tape yields identical results. Returns the gradient of
    /// every `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<BTreeMap<TensorId, Vec<f64>>> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.tensors[loss.0].shape.clone(),
            });
        }
        if !self.tensors[loss.0].requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        let n = self.tensors.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.tensors[i].grad = Some(g.clone());
            let op = self.ops[i].clone();
            self.backprop_one(i, &g, &op, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.requires_grad && matches!(self.ops[i], Op::Leaf) {
                if let Some(g) = &t.grad {
                    out.insert(TensorId(i), g.clone());
                }
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.tensors[id.0].numel()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn backprop_one(&mut self, out_idx: usize, g: &[f64], op: &Op, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                let n = self.tensors[b.0].shape[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = transpose_raw(&self.tensors[b.0].data, k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(&self.tensors[a.0].data, m, k);
                let db = matmul_raw(&at, g, k, m, n);
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Transpose { x } => {
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                let gt = transpose_raw(g, c, r);
                self.accum(grads, *x, &gt);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(&self.tensors[b.0].data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.tensors[a.0].data).map(|(g, x)| g * x).collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Div { a, b } => {
                let bd = &self.tensors[b.0].data;
                let ad = &self.tensors[a.0].data;
                let da: Vec<f64> = g.iter().zip(bd).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Minimum { a, b } => {
                let ad = &self.tensors[a.0].data;
                let bd = &self.tensors[b.0].data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                    .collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Maximum { a, b } => {
                let ad = &self.tensors[a.0].data;
                let bd = &self.tensors[b.0].data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| if x >= y { *g } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| if x >= y { 0.0 } else { *g })
                    .collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::AddRow { x, bias } => {
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                self.accum(grads, *x, g);
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                self.accum(grads, *bias, &db);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[x.0].data)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[out_idx].data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[x.0].data)
                    .map(|(g, v)| g * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Sqrt { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[out_idx].data)
                    .map(|(g, s)| g / (2.0 * s))
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::AddConst { x } => {
                self.accum(grads, *x, g);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.tensors[x.0].numel()];
                self.accum(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let sh = self.tensors[x.0].shape.clone();
                let (r, c) = view_2d(&sh);
                let y = &self.tensors[out_idx].data;
                let mut dx = vec![0.0; y.len()];
                let row_wise = sh.len() == 1 || *axis == 1;
                if row_wise {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                } else {
                    for j in 0..c {
                        let mut dot = 0.0;
                        for i in 0..r {
                            dot += y[i * c + j] * g[i * c + j];
                        }
                        for i in 0..r {
                            dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LogSoftmax { x } => {
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                let ls = &self.tensors[out_idx].data;
                let mut dx = vec![0.0; ls.len()];
                for i in 0..r {
                    let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] - ls[i * c + j].exp() * gsum;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::MaskedSoftmaxRows { x } => {
                // masked entries have y == 0, which zeroes their gradient too
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                let y = &self.tensors[out_idx].data;
                let mut dx = vec![0.0; y.len()];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::NllSum { log_probs, targets } => {
                let (_, c) = view_2d(&self.tensors[log_probs.0].shape);
                let mut dx = vec![0.0; self.tensors[log_probs.0].numel()];
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] = -g[0];
                }
                self.accum(grads, *log_probs, &dx);
            }
            Op::BceWithLogitsSum { logits, targets } => {
                let dx: Vec<f64> = self.tensors[logits.0]
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(l, t)| g[0] * (1.0 / (1.0 + (-l).exp()) - t))
                    .collect();
                self.accum(grads, *logits, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                let src = &self.tensors[x.0].data;
                let gam = &self.tensors[gamma.0].data;
                let mut dx = vec![0.0; src.len()];
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                for i in 0..r {
                    let row = &src[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = (dxhat[j] - m1 - xhat[j] * m2) * inv;
                        dgam[j] += gr[j] * xhat[j];
                        dbet[j] += gr[j];
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gamma, &dgam);
                self.accum(grads, *beta, &dbet);
            }
            Op::SliceRows { x, start, end } => {
                let (_, c) = view_2d(&self.tensors[x.0].shape);
                let mut dx = vec![0.0; self.tensors[x.0].numel()];
                dx[start * c..end * c].copy_from_slice(g);
                self.accum(grads, *x, &dx);
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = view_2d(&self.tensors[x.0].shape);
                let w = end - start;
                let mut dx = vec![0.0; self.tensors[x.0].numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accum(grads, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.tensors[p.0].numel();
                    let slice = g[off..off + n].to_vec();
                    self.accum(grads, *p, &slice);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = view_2d(&self.tensors[out_idx].shape);
                let mut off = 0;
                for p in parts {
                    let (_, w) = view_2d(&self.tensors[p.0].shape);
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.accum(grads, *p, &dp);
                    off += w;
                }
            }
            Op::Pick { x, row, col } => {
                let (_, c) = view_2d(&self.tensors[x.0].shape);
                let mut dx = vec![0.0; self.tensors[x.0].numel()];
                dx[row * c + col] = g[0];
                self.accum(grads, *x, &dx);
            }
            Op::MulScalarT { x, s } => {
                let sv = self.tensors[s.0].data[0];
                let dx: Vec<f64> = g.iter().map(|g| g * sv).collect();
                let ds: f64 = g.iter().zip(&self.tensors[x.0].data).map(|(g, x)| g * x).sum();
                self.accum(grads, *x, &dx);
                self.accum(grads, *s, &[ds]);
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // i-k-j order keeps the inner loop streaming over contiguous rows
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    /// Central-difference gradient of a scalar-valued tape program, used as
    /// the oracle for every analytic backward rule below.
    fn fd_grads<F>(build: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> Vec<Vec<f64>>
    where
        F: Fn(&mut Tape, &[(Vec<f64>, Vec<usize>)]) -> TensorId,
    {
        let mut out = Vec::new();
        for p in 0..inputs.len() {
            let mut pg = vec![0.0; inputs[p].0.len()];
            for i in 0..inputs[p].0.len() {
                let mut plus = inputs.to_vec();
                plus[p].0[i] += eps;
                let mut tp = Tape::new();
                let lp = build(&mut tp, &plus);
                let vp = tp.scalar_value(lp);

                let mut minus = inputs.to_vec();
                minus[p].0[i] -= eps;
                let mut tm = Tape::new();
                let lm = build(&mut tm, &minus);
                let vm = tm.scalar_value(lm);

                pg[i] = (vp - vm) / (2.0 * eps);
            }
            out.push(pg);
        }
        out
    }

    fn check_op<F>(build: F, inputs: &[(Vec<f64>, Vec<usize>)], tol: f64)
    where
        F: Fn(&mut Tape, &[(Vec<f64>, Vec<usize>)]) -> TensorId,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, inputs);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = (0..inputs.len())
            .map(|i| tape.grad(TensorId(i)).unwrap().to_vec())
            .collect();
        let numeric = fd_grads(&build, inputs, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.iter().zip(n) {
                let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-4);
                assert!(rel < tol, "analytic {x} vs numeric {y} (rel {rel})");
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
            .unwrap();
        let a = tape
            .constant(vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0], vec![3, 3])
            .unwrap();
        let c = tape.matmul(eye, a).unwrap();
        assert_close(tape.data(c), tape.data(a), 1e-15);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2.0], vec![1, 1]).unwrap();
        let b = tape.constant(vec![3.0], vec![1, 1]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_vec(&mut rng, 4 * 5);
        let b = rand_vec(&mut rng, 5 * 3);
        // naive triple loop, indexed independently of matmul_raw
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let ta = tape.constant(a, vec![4, 5]).unwrap();
        let tb = tape.constant(b, vec![5, 3]).unwrap();
        let tc = tape.matmul(ta, tb).unwrap();
        assert_close(tape.data(tc), &expect, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = tape.constant(vec![1.0, 2.0, 3.0], vec![3, 1]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.7, 0.7, 0.7], vec![3]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_close(tape.data(y), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 6);
        let shifted: Vec<f64> = x.iter().map(|v| v + 13.25).collect();
        let mut tape = Tape::new();
        let a = tape.constant(x, vec![6]).unwrap();
        let b = tape.constant(shifted, vec![6]).unwrap();
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        assert_close(tape.data(ya), &tape.data(yb).to_vec(), 1e-12);
    }

    #[test]
    fn softmax_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 3.0f64.ln()], vec![2]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_close(tape.data(y), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 8);
            let mut tape = Tape::new();
            let a = tape.constant(x, vec![2, 4]).unwrap();
            let y = tape.softmax(a, 1).unwrap();
            for row in tape.data(y).chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        tape.tensors[x.0].data[0] = f64::NAN;
        assert!(tape.softmax(x, 0).is_err());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        assert!(tape.leaf(vec![f64::INFINITY], vec![1], false).is_err());
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true).unwrap();
        let y = tape.leaf(vec![3.0], vec![1], true).unwrap();
        let p = tape.mul(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_close(&grads[&x], &[3.0], 1e-15);
        assert_close(&grads[&y], &[2.0], 1e-15);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 0.5], vec![3], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads[&x], &[2.0, -4.0, 1.0], 1e-15);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_detached_graph_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0], vec![1]).unwrap();
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::DetachedGraph)));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_vec(&mut rng, 6);
        let wv = rand_vec(&mut rng, 6);
        let mut tape = Tape::new();
        let x = tape.leaf(xv, vec![2, 3], true).unwrap();
        let w = tape.leaf(wv, vec![3, 2], true).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 50.0, 2.0, -3.0, 99.0, 0.5], vec![2, 3]).unwrap();
        let y = tape.masked_softmax_rows(x, &[true, false, true]).unwrap();
        for row in tape.data(y).chunks(3) {
            assert_eq!(row[1], 0.0);
            assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        assert!(matches!(
            tape.masked_softmax_rows(x, &[false, false]),
            Err(TensorError::AllMasked)
        ));
    }

    // ── finite-difference checks for every differentiable op ──────────

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![
            (rand_vec(&mut rng, 6), vec![2, 3]),
            (rand_vec(&mut rng, 12), vec![3, 4]),
        ];
        check_op(
            |t, inp| {
                let a = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let b = t.leaf(inp[1].0.clone(), inp[1].1.clone(), true).unwrap();
                let c = t.matmul(a, b).unwrap();
                let s = t.sigmoid(c).unwrap();
                t.sum_all(s).unwrap()
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inputs = vec![
            (rand_vec(&mut rng, 8), vec![2, 4]),
            (
                rand_vec(&mut rng, 8).iter().map(|v| v + 2.5).collect(),
                vec![2, 4],
            ),
        ];
        check_op(
            |t, inp| {
                let a = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let b = t.leaf(inp[1].0.clone(), inp[1].1.clone(), true).unwrap();
                let s = t.sub(a, b).unwrap();
                let m = t.mul(s, a).unwrap();
                let d = t.div(m, b).unwrap();
                let mn = t.minimum(d, a).unwrap();
                let mx = t.maximum(mn, b).unwrap();
                let ab = t.abs(mx).unwrap();
                let p = t.add(ab, a).unwrap();
                t.sum_all(p).unwrap()
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let inputs = vec![(rand_vec(&mut rng, 12), vec![3, 4])];
        check_op(
            |t, inp| {
                let x = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let sm = t.softmax(x, 1).unwrap();
                let sm0 = t.softmax(x, 0).unwrap();
                let ls = t.log_softmax(x).unwrap();
                let a = t.mul(sm, ls).unwrap();
                let b = t.add(a, sm0).unwrap();
                let sq = t.mul(b, b).unwrap();
                t.sum_all(sq).unwrap()
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn grad_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let inputs = vec![(rand_vec(&mut rng, 8), vec![2, 4])];
        check_op(
            |t, inp| {
                let x = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let y = t.masked_softmax_rows(x, &[true, false, true, true]).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq).unwrap()
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let inputs = vec![
            (rand_vec(&mut rng, 12), vec![3, 4]),
            (rand_vec(&mut rng, 4), vec![4]),
            (rand_vec(&mut rng, 4), vec![4]),
        ];
        check_op(
            |t, inp| {
                let x = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let g = t.leaf(inp[1].0.clone(), inp[1].1.clone(), true).unwrap();
                let b = t.leaf(inp[2].0.clone(), inp[2].1.clone(), true).unwrap();
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq).unwrap()
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn grad_losses_and_structure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let inputs = vec![
            (rand_vec(&mut rng, 12), vec![3, 4]),
            (rand_vec(&mut rng, 3), vec![3]),
            (rand_vec(&mut rng, 4), vec![4]),
        ];
        check_op(
            |t, inp| {
                let x = t.leaf(inp[0].0.clone(), inp[0].1.clone(), true).unwrap();
                let lg = t.leaf(inp[1].0.clone(), inp[1].1.clone(), true).unwrap();
                let bias = t.leaf(inp[2].0.clone(), inp[2].1.clone(), true).unwrap();
                let xb = t.add_row(x, bias).unwrap();
                let ls = t.log_softmax(xb).unwrap();
                let nll = t.nll_sum(ls, &[1, 0, 3]).unwrap();
                let bce = t.bce_with_logits_sum(lg, &[1.0, 0.0, 0.5]).unwrap();
                let top = t.slice_rows(xb, 0, 2).unwrap();
                let left = t.slice_cols(top, 0, 2).unwrap();
                let right = t.slice_cols(top, 2, 4).unwrap();
                let cc = t.concat_cols(&[left, right]).unwrap();
                let rr = t.concat_rows(&[cc, cc]).unwrap();
                let tt = t.transpose(rr).unwrap();
                let s1 = t.sum_all(tt).unwrap();
                let pk = t.pick(xb, 1, 2).unwrap();
                let sc = t.scale(pk, 0.7).unwrap();
                let ac = t.add_const(sc, 0.3).unwrap();
                let rl = t.relu(ac).unwrap();
                let sq = t.mul(rl, rl).unwrap();
                let sr = t.add_const(sq, 1.0).unwrap();
                let root = t.sqrt(sr).unwrap();
                let ms = t.mul_scalar_t(s1, root).unwrap();
                let a = t.add(nll, bce).unwrap();
                let b = t.add(a, ms).unwrap();
                t.sum_all(b).unwrap()
            },
            &inputs,
            1e-5,
        );
    }
}
