//! Reverse-mode gradient tape over 2-D matrices.
//!
//! Every value on the tape is a row-major matrix; vectors are [1, c] rows.
//! Ops record enough to replay the chain rule in reverse. One tape per
//! forward pass; separate tapes share nothing and may run in parallel.

use std::collections::BTreeMap;

use super::{ParameterStore, Tensor};
use crate::error::TensorError;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Probability clamp for cross-entropy style losses.
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    LeafParam(String),
    LeafInput,
    LeafConst,
    MatMul(usize, usize),
    /// a @ b^T with a:[m,k], b:[n,k]
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    DivElem(usize, usize),
    /// [n,c] plus a [1,c] row broadcast over rows
    AddBias(usize, usize),
    /// [n,c] times a [1,c] row broadcast over rows
    MulBias(usize, usize),
    /// y = mul*x + add, elementwise with constants; only mul matters in
    /// the backward pass
    Affine { x: usize, mul: f64 },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    /// Row-wise softmax of x plus an additive {0, -inf} mask. A row whose
    /// mask is entirely -inf falls back to the unmasked softmax of that row.
    MaskedSoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Mean over rows: [n,c] -> [1,c]
    MeanRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    GatherRows { x: usize, idx: Vec<usize> },
    Reshape(usize),
    /// Binary cross entropy of probabilities against constant targets,
    /// probabilities clamped to [PROB_CLAMP, 1-PROB_CLAMP].
    Bce {
        probs: usize,
        targets: Vec<f64>,
        divisor: f64,
    },
    /// Mean softmax cross entropy over rows against constant class indices.
    CeRows { logits: usize, targets: Vec<usize> },
    /// Symmetric Chamfer distance from a [n,2] point matrix to a constant
    /// point set; nearest neighbors (ties -> lowest index) saved forward.
    ChamferToConst {
        pred: usize,
        gt: Vec<(f64, f64)>,
        fwd_nn: Vec<usize>,
        rev_nn: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Build a forward computation, call [`Tape::backward`]
/// on a scalar, then read gradients per node or per parameter.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` target w.r.t. `v`. Empty slice if the
    /// node never received gradient.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Snapshot a named parameter from the store onto the tape.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, TensorError> {
        let t = store.get(name)?;
        let (rows, cols) = match t.shape.len() {
            1 => (1, t.shape[0]),
            2 => (t.shape[0], t.shape[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "param (1-D or 2-D only)",
                    lhs: t.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        Ok(self.push(
            rows,
            cols,
            t.data.clone(),
            true,
            Op::LeafParam(name.to_string()),
        ))
    }

    /// Input leaf; participates in gradients when `requires_grad`.
    pub fn input(&mut self, data: &[f64], rows: usize, cols: usize, requires_grad: bool) -> Var {
        let op = if requires_grad {
            Op::LeafInput
        } else {
            Op::LeafConst
        };
        self.push(rows, cols, data.to_vec(), requires_grad, op)
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        let (rows, cols) = match t.shape.len() {
            1 => (1, t.shape[0]),
            2 => (t.shape[0], t.shape[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "input_tensor (1-D or 2-D only)",
                    lhs: t.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        Ok(self.input(&t.data, rows, cols, t.requires_grad))
    }

    pub fn constant(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        self.input(data, rows, cols, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.input(&[v], 1, 1, false)
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, rg, Op::MatMul(a.0, b.0)))
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul_nt", (m, k), (n, k2)));
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &db[j * k..(j + 1) * k];
                out[i * n + j] = dot(ra, rb);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, rg, Op::MatMulNt(a.0, b.0)))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch(op_name, sa, sb));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa.0, sa.1, data, rg, op(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul_elem", a, b, |x, y| x * y, Op::MulElem)
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("div_elem", a, b, |x, y| x / y, Op::DivElem)
    }

    fn bias_like(
        &mut self,
        op_name: &'static str,
        x: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (n, c) = self.shape(x);
        let sb = self.shape(b);
        if sb != (1, c) {
            return Err(mismatch(op_name, (n, c), sb));
        }
        let xd = &self.nodes[x.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(f(xd[i * c + j], bd[j]));
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(n, c, data, rg, op(x.0, b.0)))
    }

    /// x + row-broadcast bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.bias_like("add_bias", x, b, |x, y| x + y, Op::AddBias)
    }

    /// x * row-broadcast scale.
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.bias_like("mul_bias", x, b, |x, y| x * y, Op::MulBias)
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| mul * v + add).collect();
        let rg = self.rg(x);
        self.push(r, c, data, rg, Op::Affine { x: x.0, mul })
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Var {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        self.push(r, c, data, rg, op(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh_of(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sin_of(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin)
    }

    pub fn cos_of(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos)
    }

    pub fn abs_of(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs)
    }

    /// Row-wise softmax of `x + mask` where mask entries are 0 or -inf.
    /// `None` means unmasked. A fully masked row uses the unmasked softmax
    /// for that row instead of producing NaN.
    pub fn masked_softmax_rows(
        &mut self,
        x: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var, TensorError> {
        let (n, m) = self.shape(x);
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax_rows",
                    lhs: vec![n, m],
                    rhs: vec![mk.len()],
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mrow = mask.map(|mk| &mk[i * m..(i + 1) * m]);
            let use_mask = mrow.map_or(false, |mr| mr.iter().any(|v| *v == 0.0));
            let out = &mut data[i * m..(i + 1) * m];
            softmax_row(row, if use_mask { mrow } else { None }, out);
        }
        let rg = self.rg(x);
        Ok(self.push(n, m, data, rg, Op::MaskedSoftmaxRows(x.0)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], rg, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s / n], rg, Op::MeanAll(x.0))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let rg = self.rg(x);
        self.push(1, c, data, rg, Op::MeanRows(x.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, c) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if c != cb {
            return Err(mismatch("concat_rows", (na, c), (nb, cb)));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(na + nb, c, data, rg, Op::ConcatRows(a.0, b.0)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if n != nb {
            return Err(mismatch("concat_cols", (n, ca), (nb, cb)));
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, ca + cb, data, rg, Op::ConcatCols(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.shape(x);
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows (index out of range)",
                lhs: vec![n, c],
                rhs: vec![*bad],
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            idx.len(),
            c,
            data,
            rg,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(mismatch("reshape", (r, c), (rows, cols)));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(rows, cols, data, rg, Op::Reshape(x.0)))
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Binary cross entropy of probabilities vs constant targets, reduced by
    /// mean or sum over all entries. Probabilities are clamped to
    /// [1e-7, 1-1e-7] before the logs.
    pub fn bce(
        &mut self,
        probs: Var,
        targets: &[f64],
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        let (n, c) = self.shape(probs);
        if targets.len() != n * c {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        let divisor = match reduction {
            Reduction::Mean => (n * c) as f64,
            Reduction::Sum => 1.0,
        };
        let mut total = 0.0;
        for (p, t) in self.nodes[probs.0].data.iter().zip(targets) {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            1,
            1,
            vec![total / divisor],
            rg,
            Op::Bce {
                probs: probs.0,
                targets: targets.to_vec(),
                divisor,
            },
        ))
    }

    /// Mean softmax cross entropy over rows of `logits` against constant
    /// class indices.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|t| **t >= c) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows (target out of range)",
                lhs: vec![n, c],
                rhs: vec![*bad],
            });
        }
        let xd = &self.nodes[logits.0].data;
        let mut total = 0.0;
        let mut buf = vec![0.0; c];
        for (i, &t) in targets.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            softmax_row(row, None, &mut buf);
            total -= buf[t].max(PROB_CLAMP).ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![total / n as f64],
            rg,
            Op::CeRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Symmetric Chamfer distance between a [n,2] point matrix on the tape
    /// and a constant point set: 0.5 * (mean nearest-neighbor distance each
    /// way). Nearest-neighbor ties break to the lowest index.
    pub fn chamfer_to_const(&mut self, pred: Var, gt: &[(f64, f64)]) -> Result<Var, TensorError> {
        let (n, c) = self.shape(pred);
        if c != 2 || n == 0 || gt.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "chamfer_to_const (needs nonempty [n,2] and nonempty gt)",
                lhs: vec![n, c],
                rhs: vec![gt.len(), 2],
            });
        }
        let pts: Vec<(f64, f64)> = self.nodes[pred.0]
            .data
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .collect();
        let mut fwd_nn = Vec::with_capacity(n);
        let mut acc = 0.0;
        for p in &pts {
            let (j, d) = nearest(*p, gt);
            fwd_nn.push(j);
            acc += d;
        }
        let fwd = acc / n as f64;
        let mut rev_nn = Vec::with_capacity(gt.len());
        let mut acc = 0.0;
        for g in gt {
            let (i, d) = nearest(*g, &pts);
            rev_nn.push(i);
            acc += d;
        }
        let rev = acc / gt.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            1,
            1,
            vec![0.5 * (fwd + rev)],
            rg,
            Op::ChamferToConst {
                pred: pred.0,
                gt: gt.to_vec(),
                fwd_nn,
                rev_nn,
            },
        ))
    }

    // ── Composite helpers ───────────────────────────────────────────────

    /// y = x @ w + b with b broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Single-head scaled dot-product attention with an optional additive
    /// {0,-inf} mask over [n_queries, n_keys]. Logits are scaled by
    /// 1/sqrt(d) for stability; fully masked rows fall back to unmasked
    /// attention (see `masked_softmax_rows`).
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var, TensorError> {
        let (_, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        let (nv, _) = self.shape(v);
        if d != dk || nk != nv {
            return Err(mismatch("masked_attention", (nk, dk), (nv, self.shape(v).1)));
        }
        let logits = self.matmul_nt(q, k)?;
        let scaled = self.affine(logits, 1.0 / (d as f64).sqrt(), 0.0);
        let weights = self.masked_softmax_rows(scaled, mask)?;
        self.matmul(weights, v)
    }

    /// Alternating linear/activation layers; the final layer is linear.
    pub fn mlp(
        &mut self,
        x: Var,
        layers: &[(Var, Var)],
        activation: Activation,
    ) -> Result<Var, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Config("mlp needs at least one layer".into()));
        }
        let mut h = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            h = self.linear(h, *w, *b)?;
            if i + 1 < layers.len() {
                h = match activation {
                    Activation::Relu => self.relu(h),
                    Activation::Tanh => self.tanh_of(h),
                };
            }
        }
        Ok(h)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar. Gradients accumulate into node buffers;
    /// repeated calls without a fresh tape keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: vec![r, c],
            });
        }
        // Propagate through a per-call flow buffer so repeated backward
        // calls accumulate instead of re-propagating stored gradients.
        let mut flow: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        flow[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || flow[i].is_empty() {
                continue;
            }
            self.backprop_node(i, &mut flow);
        }
        for (i, f) in flow.into_iter().enumerate() {
            if f.is_empty() {
                continue;
            }
            if self.nodes[i].grad.is_empty() {
                self.nodes[i].grad = f;
            } else {
                for (a, b) in self.nodes[i].grad.iter_mut().zip(&f) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Gradients of all parameter leaves, keyed by name. Leaves of the same
    /// parameter accumulate together.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for node in &self.nodes {
            if let Op::LeafParam(name) = &node.op {
                if node.grad.is_empty() {
                    continue;
                }
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&node.grad) {
                            *a += g;
                        }
                    }
                    None => {
                        out.insert(name.clone(), node.grad.clone());
                    }
                }
            }
        }
        out
    }

    /// Push parameter gradients into the store's grad accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) -> Result<(), TensorError> {
        for (name, g) in self.param_grads() {
            store.accumulate_grad(&name, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, flow: &mut [Vec<f64>]) {
        let gout = std::mem::take(&mut flow[i]);
        match &self.nodes[i].op {
            Op::LeafParam(_) | Op::LeafInput | Op::LeafConst => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                if self.nodes[a].requires_grad {
                    // dA = dC @ B^T; row j of B is the needed column slice
                    let mut da = vec![0.0; m * k];
                    {
                        let bd = &self.nodes[b].data;
                        for i2 in 0..m {
                            let g = &gout[i2 * n..(i2 + 1) * n];
                            for j in 0..k {
                                da[i2 * k + j] = dot(g, &bd[j * n..(j + 1) * n]);
                            }
                        }
                    }
                    self.add_flow(flow, a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T @ dC
                    let mut db = vec![0.0; k * n];
                    {
                        let ad = &self.nodes[a].data;
                        for p in 0..m {
                            let g = &gout[p * n..(p + 1) * n];
                            for j in 0..k {
                                let apj = ad[p * k + j];
                                if apj != 0.0 {
                                    for q in 0..n {
                                        db[j * n + q] += apj * g[q];
                                    }
                                }
                            }
                        }
                    }
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].rows;
                if self.nodes[a].requires_grad {
                    // dA = dC @ B
                    let mut da = vec![0.0; m * k];
                    matmul_into(&gout, &self.nodes[b].data, m, n, k, &mut da);
                    self.add_flow(flow, a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB = dC^T @ A
                    let mut db = vec![0.0; n * k];
                    {
                        let ad = &self.nodes[a].data;
                        for i2 in 0..m {
                            let g = &gout[i2 * n..(i2 + 1) * n];
                            let arow = &ad[i2 * k..(i2 + 1) * k];
                            for j in 0..n {
                                let gj = g[j];
                                if gj != 0.0 {
                                    for q in 0..k {
                                        db[j * k + q] += gj * arow[q];
                                    }
                                }
                            }
                        }
                    }
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::Add(a, b) => {
                if self.nodes[a].requires_grad {
                    self.add_flow(flow, a, &gout);
                }
                if self.nodes[b].requires_grad {
                    self.add_flow(flow, b, &gout);
                }
            }
            &Op::Sub(a, b) => {
                if self.nodes[a].requires_grad {
                    self.add_flow(flow, a, &gout);
                }
                if self.nodes[b].requires_grad {
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    self.add_flow(flow, b, &neg);
                }
            }
            &Op::MulElem(a, b) => {
                if self.nodes[a].requires_grad {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_flow(flow, a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::DivElem(a, b) => {
                if self.nodes[a].requires_grad {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(g, y)| g / y)
                        .collect();
                    self.add_flow(flow, a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(self.nodes[a].data.iter().zip(&self.nodes[b].data))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::AddBias(x, b) => {
                let (n, c) = (self.nodes[i].rows, self.nodes[i].cols);
                if self.nodes[x].requires_grad {
                    self.add_flow(flow, x, &gout);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; c];
                    for r2 in 0..n {
                        for j in 0..c {
                            db[j] += gout[r2 * c + j];
                        }
                    }
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::MulBias(x, b) => {
                let (n, c) = (self.nodes[i].rows, self.nodes[i].cols);
                if self.nodes[x].requires_grad {
                    let bd = &self.nodes[b].data;
                    let mut dx = vec![0.0; n * c];
                    for r2 in 0..n {
                        for j in 0..c {
                            dx[r2 * c + j] = gout[r2 * c + j] * bd[j];
                        }
                    }
                    self.add_flow(flow, x, &dx);
                }
                if self.nodes[b].requires_grad {
                    let xd = &self.nodes[x].data;
                    let mut db = vec![0.0; c];
                    for r2 in 0..n {
                        for j in 0..c {
                            db[j] += gout[r2 * c + j] * xd[r2 * c + j];
                        }
                    }
                    self.add_flow(flow, b, &db);
                }
            }
            &Op::Affine { x, mul } => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout.iter().map(|g| g * mul).collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Relu(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Sigmoid(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Tanh(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Sin(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, v)| g * v.cos())
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Cos(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, v)| -g * v.sin())
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Abs(x) => {
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, v)| g * sign(*v))
                        .collect();
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::MaskedSoftmaxRows(x) => {
                // dx_j = y_j * (g_j - sum_k g_k y_k); masked entries have
                // y_j = 0 so they receive no gradient automatically.
                if self.nodes[x].requires_grad {
                    let (n, m) = (self.nodes[i].rows, self.nodes[i].cols);
                    let yd = &self.nodes[i].data;
                    let mut dx = vec![0.0; n * m];
                    for r2 in 0..n {
                        let y = &yd[r2 * m..(r2 + 1) * m];
                        let g = &gout[r2 * m..(r2 + 1) * m];
                        let s = dot(y, g);
                        for j in 0..m {
                            dx[r2 * m + j] = y[j] * (g[j] - s);
                        }
                    }
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::SumAll(x) => {
                if self.nodes[x].requires_grad {
                    let dx = vec![gout[0]; self.nodes[x].data.len()];
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::MeanAll(x) => {
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].data.len();
                    let dx = vec![gout[0] / n as f64; n];
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::MeanRows(x) => {
                if self.nodes[x].requires_grad {
                    let (n, c) = (self.nodes[x].rows, self.nodes[x].cols);
                    let mut dx = vec![0.0; n * c];
                    for r2 in 0..n {
                        for j in 0..c {
                            dx[r2 * c + j] = gout[j] / n as f64;
                        }
                    }
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = self.nodes[a].data.len();
                if self.nodes[a].requires_grad {
                    self.add_flow(flow, a, &gout[..na]);
                }
                if self.nodes[b].requires_grad {
                    self.add_flow(flow, b, &gout[na..]);
                }
            }
            &Op::ConcatCols(a, b) => {
                let (n, ca) = (self.nodes[a].rows, self.nodes[a].cols);
                let cb = self.nodes[b].cols;
                let c = ca + cb;
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; n * ca];
                    for r2 in 0..n {
                        da[r2 * ca..(r2 + 1) * ca].copy_from_slice(&gout[r2 * c..r2 * c + ca]);
                    }
                    self.add_flow(flow, a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; n * cb];
                    for r2 in 0..n {
                        db[r2 * cb..(r2 + 1) * cb]
                            .copy_from_slice(&gout[r2 * c + ca..(r2 + 1) * c]);
                    }
                    self.add_flow(flow, b, &db);
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let c = self.nodes[x].cols;
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    for (r2, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += gout[r2 * c + j];
                        }
                    }
                    self.add_flow(flow, x, &dx);
                }
            }
            &Op::Reshape(x) => {
                if self.nodes[x].requires_grad {
                    self.add_flow(flow, x, &gout);
                }
            }
            Op::Bce {
                probs,
                targets,
                divisor,
            } => {
                let probs = *probs;
                let divisor = *divisor;
                if self.nodes[probs].requires_grad {
                    let g = gout[0];
                    let dx: Vec<f64> = self.nodes[probs]
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(p, t)| {
                            if *p < PROB_CLAMP || *p > 1.0 - PROB_CLAMP {
                                0.0 // clamped region is flat
                            } else {
                                g * (p - t) / (p * (1.0 - p)) / divisor
                            }
                        })
                        .collect();
                    self.add_flow(flow, probs, &dx);
                }
            }
            Op::CeRows { logits, targets } => {
                let logits = *logits;
                if self.nodes[logits].requires_grad {
                    let (n, c) = (self.nodes[logits].rows, self.nodes[logits].cols);
                    let g = gout[0] / n as f64;
                    let xd = &self.nodes[logits].data;
                    let mut dx = vec![0.0; n * c];
                    let mut buf = vec![0.0; c];
                    for (r2, &t) in targets.iter().enumerate() {
                        softmax_row(&xd[r2 * c..(r2 + 1) * c], None, &mut buf);
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dx[r2 * c + j] = g * (buf[j] - ind);
                        }
                    }
                    self.add_flow(flow, logits, &dx);
                }
            }
            Op::ChamferToConst {
                pred,
                gt,
                fwd_nn,
                rev_nn,
            } => {
                let pred = *pred;
                if self.nodes[pred].requires_grad {
                    let n = self.nodes[pred].rows;
                    let m = gt.len();
                    let g = gout[0] * 0.5;
                    let pd = &self.nodes[pred].data;
                    let mut dx = vec![0.0; n * 2];
                    for (i2, &j) in fwd_nn.iter().enumerate() {
                        let (px, py) = (pd[i2 * 2], pd[i2 * 2 + 1]);
                        let (gx, gy) = gt[j];
                        let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
                        if d > 0.0 {
                            dx[i2 * 2] += g * (px - gx) / d / n as f64;
                            dx[i2 * 2 + 1] += g * (py - gy) / d / n as f64;
                        }
                    }
                    for (j, &i2) in rev_nn.iter().enumerate() {
                        let (px, py) = (pd[i2 * 2], pd[i2 * 2 + 1]);
                        let (gx, gy) = gt[j];
                        let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
                        if d > 0.0 {
                            dx[i2 * 2] += g * (px - gx) / d / m as f64;
                            dx[i2 * 2 + 1] += g * (py - gy) / d / m as f64;
                        }
                    }
                    self.add_flow(flow, pred, &dx);
                }
            }
        }
        flow[i] = gout;
    }

    fn add_flow(&self, flow: &mut [Vec<f64>], target: usize, g: &[f64]) {
        if flow[target].is_empty() {
            flow[target] = vec![0.0; self.nodes[target].data.len()];
        }
        for (a, b) in flow[target].iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Index and distance of the nearest point, ties to the lowest index.
fn nearest(p: (f64, f64), pts: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, q) in pts.iter().enumerate() {
        let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// C += A @ B with A:[m,k], B:[k,n] (C must start zeroed by the caller).
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apk) in arow.iter().enumerate() {
            if apk == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += apk * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row, honoring an optional additive
/// {0,-inf} mask. The caller guarantees the mask has at least one 0 entry.
fn softmax_row(row: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        let masked = mask.map_or(false, |m| m[i] != 0.0);
        if !masked && *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0;
    for (i, v) in row.iter().enumerate() {
        let masked = mask.map_or(false, |m| m[i] != 0.0);
        let e = if masked { 0.0 } else { (v - max).exp() };
        out[i] = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
