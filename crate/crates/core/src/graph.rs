//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed op in creation order, which is already a
//! topological order: an op's inputs always exist before the op itself. The
//! backward pass walks the tape once in reverse and accumulates gradients
//! additively, so fan-out needs no special handling.
//!
//! A graph is single-use and single-threaded. Parallel evaluation builds one
//! graph per sample.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_into, Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cross-entropy target for one row of logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Target<F> {
    Class(usize),
    Soft(Vec<F>),
    /// Excluded from the loss; contributes zero value and zero gradient.
    Ignore,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, F),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<Vec<F>>>,
        probs: Vec<F>,
        denom: usize,
    },
    Mse(Var, Var),
    MaskMul {
        x: Var,
        mask: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (inputs under a gradient check, for example).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter as a tracked leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidShape {
                op,
                msg: format!("expected rank 2, got {s:?}"),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![F::ZERO; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let value = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        self.push("transpose", value, Op::Transpose(a), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push("add_row", Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "scale_by",
                msg: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[s, a]);
        self.push("scale_by", v, Op::ScaleBy(s, a), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let k = F::from_f64(k);
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push("scale", v, Op::Scale(a, k), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push("log", v, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > F::ZERO { x } else { F::ZERO });
        let rg = self.rg(&[a]);
        self.push("relu", v, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = F::from_f64(SQRT_2_OVER_PI);
        let k = F::from_f64(GELU_C);
        let half = F::from_f64(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (F::ONE + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push("gelu", v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push("sigmoid", v, Op::Sigmoid(a), rg)
    }

    /// Softmax along `axis`. `mask` (true = keep) either matches the input
    /// element-for-element or has the length of one slice and is broadcast.
    /// Masked entries come out exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let numel = outer * len * inner;
        if let Some(m) = mask {
            if m.len() != numel && !(m.len() == len && inner == 1) {
                return Err(Error::ShapeMismatch {
                    op: "softmax mask",
                    lhs: shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let keep = |flat: usize, pos: usize| -> bool {
            match mask {
                None => true,
                Some(m) if m.len() == numel => m[flat],
                Some(m) => m[pos],
            }
        };
        let src = self.value(x).data();
        let mut out = vec![F::ZERO; numel];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |p: usize| (o * len + p) * inner + i;
                let mut max: Option<F> = None;
                for p in 0..len {
                    if keep(idx(p), p) {
                        let v = src[idx(p)];
                        max = Some(match max {
                            Some(m) => m.max(v),
                            None => v,
                        });
                    }
                }
                let Some(max) = max else {
                    return Err(Error::FullyMasked { slice: o * inner + i });
                };
                let mut sum = F::ZERO;
                for p in 0..len {
                    if keep(idx(p), p) {
                        let e = (src[idx(p)] - max).exp();
                        out[idx(p)] = e;
                        sum += e;
                    }
                }
                for p in 0..len {
                    out[idx(p)] = out[idx(p)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, len, inner },
            rg,
        )
    }

    /// Normalizes over the last axis then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = F::from_f64(eps);
        let nf = F::from_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / n;
        let mut xhat = vec![F::ZERO; src.len()];
        let mut rstd = vec![F::ZERO; rows];
        let mut out = vec![F::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {n}", start + len),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidShape {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row `i` of the output is row `idx[i]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("row {bad} of {m}"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidShape {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = t.data().iter().copied().sum::<F>() / F::from_f64(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column-wise mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::InvalidShape {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let src = self.value(a).data();
        let mut out = vec![F::ZERO; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += src[r * n + j];
            }
        }
        let mf = F::from_f64(m as f64);
        for v in &mut out {
            *v = *v / mf;
        }
        let rg = self.rg(&[a]);
        self.push("mean_rows", Tensor::new(vec![1, n], out)?, Op::MeanRows(a), rg)
    }

    /// Mean cross-entropy over rows of `logits` whose target is not
    /// [`Target::Ignore`]; zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Target<F>]) -> Result<Var> {
        let (rows, c) = match self.shape(logits) {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    msg: format!("logits must be rank 1 or 2, got {s:?}"),
                })
            }
        };
        if targets.len() != rows {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::ZERO; rows * c];
        let mut dense = Vec::with_capacity(rows);
        let mut total = F::ZERO;
        let mut denom = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(row[0], F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            let t = match target {
                Target::Ignore => {
                    dense.push(None);
                    continue;
                }
                Target::Class(i) => {
                    if *i >= c {
                        return Err(Error::IndexOutOfRange { index: *i, len: c });
                    }
                    let mut t = vec![F::ZERO; c];
                    t[*i] = F::ONE;
                    t
                }
                Target::Soft(t) => {
                    if t.len() != c {
                        return Err(Error::InvalidShape {
                            op: "cross_entropy",
                            msg: format!("soft target of length {} for {c} classes", t.len()),
                        });
                    }
                    let s = t.iter().copied().sum::<F>().to_f64();
                    if (s - 1.0).abs() > 1e-4 {
                        return Err(Error::Invalid(format!("soft target sums to {s}, expected 1")));
                    }
                    t.clone()
                }
            };
            for j in 0..c {
                if t[j] != F::ZERO {
                    total -= t[j] * (row[j] - lse);
                }
            }
            denom += 1;
            dense.push(Some(t));
        }
        let value = if denom == 0 {
            F::ZERO
        } else {
            total / F::from_f64(denom as f64)
        };
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: dense,
                probs,
                denom,
            },
            rg,
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mse",
                msg: "empty tensors".into(),
            });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / F::from_f64(n as f64);
        let rg = self.rg(&[a, b]);
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("mask_mul", v, Op::MaskMul { x, mask }, rg)
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Allows another [`Graph::backward`] call.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Adds parameter gradients into `acc`, indexed like the [`ParamStore`].
    pub fn accumulate_param_grads(&self, acc: &mut [Vec<F>]) {
        for (id, var) in &self.params {
            if let Some(Some(g)) = self.grads.get(var.0) {
                for (a, &x) in acc[id.index()].iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::ZERO; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("rank 2");
                let n = self.nodes[b.0].value.cols();
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for (p, o) in ga[i * k..(i + 1) * k].iter_mut().enumerate() {
                            *o += dot(g_row, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == F::ZERO {
                                continue;
                            }
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *o += a_ip * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().expect("rank 2");
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = self.nodes[row.0].value.numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::ScaleBy(s, a) => {
                let (sv, av) = (val(*s)[0], val(*a));
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(av).map(|(&x, &y)| x * y).sum::<F>();
                });
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sv;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * *k;
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > F::ZERO {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let c = F::from_f64(SQRT_2_OVER_PI);
                let k = F::from_f64(GELU_C);
                let k3 = F::from_f64(3.0 * GELU_C);
                let half = F::from_f64(0.5);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let x = av[i];
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (F::ONE + t) + half * x * (F::ONE - t * t) * c * (F::ONE + k3 * x * x);
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (F::ONE - out[i]);
                }
            }),
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |p: usize| (o * len + p) * inner + i;
                            let mut dot = F::ZERO;
                            for p in 0..len {
                                dot += g[idx(p)] * out[idx(p)];
                            }
                            for p in 0..len {
                                gx[idx(p)] += out[idx(p)] * (g[idx(p)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let n = gv.len();
                let nf = F::from_f64(n as f64);
                acc(*gamma, &mut |gg| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += chunk[j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = F::ZERO;
                        let mut mean_dh = F::ZERO;
                        for j in 0..n {
                            let d = chunk[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let d = chunk[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (d - mean_d - h[j] * mean_dh);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.nodes[x.0].value.dims2().expect("rank 2");
                let len = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = F::from_f64(self.nodes[a.0].value.numel() as f64);
                acc(*a, &mut |ga| {
                    let d = g[0] / n;
                    for v in ga.iter_mut() {
                        *v += d;
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].value.rows();
                let mf = F::from_f64(m as f64);
                acc(*a, &mut |ga| {
                    for chunk in ga.chunks_mut(g.len()) {
                        for (x, &y) in chunk.iter_mut().zip(g) {
                            *x += y / mf;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                if *denom == 0 {
                    return;
                }
                let c = probs.len() / targets.len();
                let scale = g[0] / F::from_f64(*denom as f64);
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let mass = t.iter().copied().sum::<F>();
                        for j in 0..c {
                            gl[r * c + j] += scale * (probs[r * c + j] * mass - t[j]);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = F::from_f64(2.0) * g[0] / F::from_f64(av.len() as f64);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += k * (av[i] - bv[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= k * (av[i] - bv[i]);
                    }
                });
            }
            Op::MaskMul { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = F::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    lanes.iter().fold(s, |acc, &v| acc + v)
}
