//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] then walks the record in reverse and returns the
//! gradient of a scalar output with respect to every node that was created
//! with `requires_grad` (parameters, input features) or depends on one.
//!
//! The op set is exactly what the message-passing model, its losses and the
//! gradient-based attributions need; there is no general broadcasting.

mod tensor;

pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("batchnorm eval mode used before running statistics exist")]
    UninitializedRunningStats,
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Statistics a batchnorm node normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    /// Batch mean and variance.
    Batch,
    /// Running mean and variance.
    Fixed,
    /// Batch mean, running variance.
    Centered,
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Per-channel statistics of one training batch (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages of batch statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0 and variance 1 per channel.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// matrix plus a row vector added to every row
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    /// per row e: `out[e] = reshape(w[e], d x d) * x[e]`
    RowMatVec(Var, Var),
    ScatterMean {
        src: Var,
        targets: Vec<usize>,
        counts: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the output does not depend on `var` through a
    /// gradient-tracking path.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| AutodiffError::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Registers an input. Gradients are only reported for leaves created
    /// with `requires_grad` and for nodes depending on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Whether gradients flow back to `var`.
    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.get(var.0).is_some_and(|n| n.requires_grad)
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(var.0))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(!inputs_finite, "non-finite output from finite inputs: {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// `(r x k) * (k x c)`. A rank-1 left operand is treated as one row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (r, k) = dims(ta, "matmul")?;
        let (k2, c) = dims(tb, "matmul")?;
        if k != k2 || tb.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out_shape = if ta.shape().len() == 1 {
            vec![c]
        } else {
            vec![r, c]
        };
        let out = matmul_raw(ta.data(), tb.data(), r, k, c);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `row` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.check(a)?, self.check(row)?);
        let (r, c) = dims(ta, "add_row")?;
        if tr.numel() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    /// Mean over rows: `(r x c) -> (1 x c)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let (r, c) = dims(ta, "mean_rows")?;
        let mut out = vec![0.0; c];
        if r > 0 {
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(ta.row(i)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        let t = Tensor::matrix(1, c, out)?;
        Ok(self.push(t, Op::MeanRows(a), &[a]))
    }

    /// Mean over columns: `(r x c) -> (r x 1)`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let (r, c) = dims(ta, "mean_cols")?;
        let out = (0..r)
            .map(|i| {
                if c == 0 {
                    0.0
                } else {
                    ta.row(i).iter().sum::<f64>() / c as f64
                }
            })
            .collect();
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(t, Op::MeanCols(a), &[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.check(p)?;
            let (r, c) = dims(t, "concat_cols")?;
            match rows {
                None => rows = Some(r),
                Some(r0) if r0 != r => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        left: vec![r0],
                        right: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.check(a)?.reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[index[i]]`, row-wise.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.check(a)?;
        let (r, c) = dims(ta, "gather_rows")?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Batched matrix-vector product. `w` is `(n x d*d)`, each row a row-major
    /// `d x d` matrix; `x` is `(n x d)`. Row `e` of the result is
    /// `W_e * x_e`.
    pub fn row_matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.check(w)?, self.check(x)?);
        let (n, dd) = dims(tw, "row_matvec")?;
        let (n2, d) = dims(tx, "row_matvec")?;
        if n != n2 || d * d != dd {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_matvec",
                left: tw.shape().to_vec(),
                right: tx.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * d];
        for e in 0..n {
            let we = &tw.data()[e * dd..(e + 1) * dd];
            let xe = &tx.data()[e * d..(e + 1) * d];
            for i in 0..d {
                out[e * d + i] = we[i * d..(i + 1) * d]
                    .iter()
                    .zip(xe)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::RowMatVec(w, x), &[w, x]))
    }

    /// Grouped mean: row `k` of `src` is averaged into output row
    /// `targets[k]`. Output rows with no contributions are zero.
    pub fn scatter_mean(&mut self, src: Var, targets: &[usize], num_rows: usize) -> Result<Var> {
        let ts = self.check(src)?;
        let (r, c) = dims(ts, "scatter_mean")?;
        if r != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_mean",
                left: ts.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut counts = vec![0usize; num_rows];
        let mut out = vec![0.0; num_rows * c];
        for (k, &t) in targets.iter().enumerate() {
            if t >= num_rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_mean",
                    index: t,
                    len: num_rows,
                });
            }
            counts[t] += 1;
            for (o, x) in out[t * c..(t + 1) * c].iter_mut().zip(ts.row(k)) {
                *o += x;
            }
        }
        for (t, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[t * c..(t + 1) * c]
                    .iter_mut()
                    .for_each(|o| *o /= n as f64);
            }
        }
        let t = Tensor::matrix(num_rows, c, out)?;
        Ok(self.push(
            t,
            Op::ScatterMean {
                src,
                targets: targets.to_vec(),
                counts,
            },
            &[src],
        ))
    }

    fn batch_norm_inputs(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let tx = self.check(x)?;
        let (n, c) = dims(tx, "batch_norm")?;
        for p in [gamma, beta] {
            let tp = self.check(p)?;
            if tp.numel() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm",
                    left: tx.shape().to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
        }
        Ok((n, c))
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        kind: NormKind,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, c) = tx.dims2().expect("checked");
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut normalized = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let z = (tx.data()[i * c + j] - mean[j]) * inv_std[j];
                normalized[i * c + j] = z;
                out[i * c + j] = g[j] * z + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                kind,
            },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch normalization over the row dimension. Returns the
    /// batch statistics so the caller can update its running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        self.batch_norm_inputs(x, gamma, beta)?;
        let stats = self.batch_moments(x);
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let out = self.batch_norm_apply(x, gamma, beta, &stats.mean, inv_std, NormKind::Batch)?;
        Ok((out, stats))
    }

    /// Per-column mean and biased variance over the rows of `x`.
    fn batch_moments(&self, x: Var) -> BatchStats {
        let tx = &self.nodes[x.0].value;
        let (n, c) = tx.dims2().expect("checked");
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if n > 0 {
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(tx.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for i in 0..n {
                for ((s, v), m) in var.iter_mut().zip(tx.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
        }
        BatchStats { mean, var }
    }

    /// Eval-mode batch normalization with frozen statistics: an affine map
    /// per channel.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&RunningStats>,
    ) -> Result<Var> {
        let (_, c) = self.batch_norm_inputs(x, gamma, beta)?;
        let stats = stats.ok_or(AutodiffError::UninitializedRunningStats)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                left: vec![c],
                right: vec![stats.mean.len()],
            });
        }
        let inv_std = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        self.batch_norm_apply(x, gamma, beta, &stats.mean.clone(), inv_std, NormKind::Fixed)
    }

    /// Centers with the batch mean but scales with a fixed variance, e.g. a
    /// running average. Returns the batch statistics as well.
    pub fn batch_norm_centered(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        var: &[f64],
    ) -> Result<(Var, BatchStats)> {
        let (_, c) = self.batch_norm_inputs(x, gamma, beta)?;
        if var.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                left: vec![c],
                right: vec![var.len()],
            });
        }
        let stats = self.batch_moments(x);
        let inv_std = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let out = self.batch_norm_apply(x, gamma, beta, &stats.mean, inv_std, NormKind::Centered)?;
        Ok((out, stats))
    }

    /// Mean of the rows selected by `mask`, as a `(1 x c)` row. An empty
    /// selection yields the zero row.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.check(x)?;
        let (r, c) = dims(tx, "masked_mean")?;
        if mask.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_mean",
                left: tx.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut out = vec![0.0; c];
        if count > 0 {
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for (o, v) in out.iter_mut().zip(tx.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= count as f64);
        }
        let t = Tensor::matrix(1, c, out)?;
        Ok(self.push(
            t,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        ))
    }

    /// Smallest `|input|` over all ReLU applications on the tape: the
    /// distance of this forward pass from the nearest kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if out.numel() != 1 {
            return Err(AutodiffError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only tracked nodes carry meaningful gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.nodes[var.0].value.shape().to_vec(), data).expect("same shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k) = ta.dims2().expect("rank");
                let (_, c) = tb.dims2().expect("rank");
                if self.nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for p in 0..k {
                            let brow = &tb.data()[p * c..(p + 1) * c];
                            da[i * k + p] = gd[i * c..(i + 1) * c]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        let grow = &gd[i * c..(i + 1) * c];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != 0.0 {
                                for (d, gv) in db[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, self.like(*b, gd.to_vec()));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let c = self.value(*row).numel();
                let mut dr = vec![0.0; c];
                for chunk in gd.chunks(c.max(1)) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *row, self.like(*row, dr));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, self.like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, self.like(*a, gd.iter().map(|v| v * f).collect()));
            }
            Op::Relu(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank");
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j] / r as f64;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::MeanCols(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank");
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[i] / c as f64;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2().expect("rank");
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.value(*p).dims2().expect("rank");
                    let mut dp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        dp.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    self.accumulate(grads, *p, self.like(*p, dp));
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.value(*a).dims2().expect("rank");
                let mut da = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for (d, v) in da[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::RowMatVec(w, x) => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (n, d) = tx.dims2().expect("rank");
                let dd = d * d;
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; n * dd];
                    for e in 0..n {
                        let xe = &tx.data()[e * d..(e + 1) * d];
                        for i in 0..d {
                            let ge = gd[e * d + i];
                            for (o, xv) in dw[e * dd + i * d..e * dd + (i + 1) * d].iter_mut().zip(xe) {
                                *o = ge * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * d];
                    for e in 0..n {
                        let we = &tw.data()[e * dd..(e + 1) * dd];
                        for i in 0..d {
                            let ge = gd[e * d + i];
                            for (o, wv) in dx[e * d..(e + 1) * d].iter_mut().zip(&we[i * d..(i + 1) * d]) {
                                *o += ge * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::ScatterMean {
                src,
                targets,
                counts,
            } => {
                let (r, c) = self.value(*src).dims2().expect("rank");
                let mut ds = vec![0.0; r * c];
                for (k, &t) in targets.iter().enumerate() {
                    let n = counts[t] as f64;
                    for (d, v) in ds[k * c..(k + 1) * c].iter_mut().zip(&gd[t * c..(t + 1) * c]) {
                        *d = v / n;
                    }
                }
                self.accumulate(grads, *src, self.like(*src, ds));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                kind,
            } => {
                let (n, c) = self.value(*x).dims2().expect("rank");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dgamma[j] += gd[i * c + j] * normalized[i * c + j];
                        dbeta[j] += gd[i * c + j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * c];
                    if *kind == NormKind::Batch {
                        // dx = inv_std / n * (n * dz - sum(dz) - z * sum(dz * z)),
                        // dz = g * gamma
                        for j in 0..c {
                            let mut sum_dz = 0.0;
                            let mut sum_dz_z = 0.0;
                            for i in 0..n {
                                let dz = gd[i * c + j] * gam[j];
                                sum_dz += dz;
                                sum_dz_z += dz * normalized[i * c + j];
                            }
                            for i in 0..n {
                                let dz = gd[i * c + j] * gam[j];
                                dx[i * c + j] = inv_std[j] / n as f64
                                    * (n as f64 * dz - sum_dz - normalized[i * c + j] * sum_dz_z);
                            }
                        }
                    } else if *kind == NormKind::Centered {
                        for j in 0..c {
                            let sum_dz: f64 = (0..n).map(|i| gd[i * c + j] * gam[j]).sum();
                            for i in 0..n {
                                let dz = gd[i * c + j] * gam[j];
                                dx[i * c + j] = inv_std[j] * (dz - sum_dz / n as f64);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..c {
                                dx[i * c + j] = gd[i * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::MaskedMean { x, mask, count } => {
                let (r, c) = self.value(*x).dims2().expect("rank");
                let mut dx = vec![0.0; r * c];
                if *count > 0 {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (d, v) in dx[i * c..(i + 1) * c].iter_mut().zip(gd) {
                            *d = v / *count as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
