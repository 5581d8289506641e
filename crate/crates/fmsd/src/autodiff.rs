//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Exactly the primitives the transformer needs: matmul (with transpose
//! flags), elementwise add/scale/mul, bias broadcast over rows, row softmax
//! with an additive mask, affine layer normalization, GELU, embedding-style
//! gather, row/column concatenation, and scalar reductions. Backward rules
//! are written out per operation so they stay auditable.

use crate::error::{Error, Result};

/// Element type of tensors: f64 for gradient checks, f32 for training.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite_s(self) -> bool;
    /// `c = alpha * op(a) @ op(b) + beta * c` over row-major buffers with
    /// explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn tanh(self) -> f32 {
        f32::tanh(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f32],
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha as f32,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta as f32,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask sentinel standing in for -infinity; large enough to zero the
/// softmax weight, small enough to avoid NaNs in f32.
pub const MASKED: f64 = -1e30;

// ── Tensor ───────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![S::from_f64(v)],
        }
    }

    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (1-D counts as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    RowSoftmaxMasked {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu {
        a: NodeId,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Sum {
        a: NodeId,
    },
    MeanSq {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Forward values plus the operation records needed to run one backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after `backward`; `None` for nodes outside the
    /// differentiated subgraph.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn dims2(&self, id: NodeId, t: bool) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        let (r, c) = (v.rows(), v.cols());
        if t {
            (c, r)
        } else {
            (r, c)
        }
    }

    /// `C = op(A) @ op(B)` where `op` transposes when the flag is set.
    pub fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, ta);
        let (kb, n) = self.dims2(b, tb);
        if ka != kb {
            return Err(shape_err(
                "matmul",
                &self.nodes[a.0].value.shape,
                &self.nodes[b.0].value.shape,
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            ta,
            tb,
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            0.0,
            &mut out.data,
        );
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, req))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, false)
    }

    /// `A @ B^T`, the attention-score shape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape.clone(),
            self.nodes[b.0].value.shape.clone(),
        );
        if sa != sb {
            return Err(shape_err("add", &sa, &sb));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o += v;
        }
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    /// Add a length-`n` bias vector to every row of an `(m, n)` tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.cols();
        if self.nodes[bias.0].value.numel() != n {
            return Err(shape_err(
                "add_bias",
                &self.nodes[a.0].value.shape,
                &self.nodes[bias.0].value.shape,
            ));
        }
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data.chunks_exact_mut(n) {
            for (o, &v) in row.iter_mut().zip(&self.nodes[bias.0].value.data) {
                *o += v;
            }
        }
        let req = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { a, bias }, req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        let cs = S::from_f64(c);
        for o in out.data.iter_mut() {
            *o = *o * cs;
        }
        let req = self.needs(a);
        self.push(out, Op::Scale { a, c }, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape.clone(),
            self.nodes[b.0].value.shape.clone(),
        );
        if sa != sb {
            return Err(shape_err("mul", &sa, &sb));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o = *o * v;
        }
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    /// Row-wise softmax of `a + mask`, where the mask holds 0 for visible
    /// entries and [`MASKED`] for forbidden ones. The mask is data, never
    /// differentiated.
    pub fn row_softmax_masked(&mut self, a: NodeId, mask: NodeId) -> Result<NodeId> {
        let (sa, sm) = (
            self.nodes[a.0].value.shape.clone(),
            self.nodes[mask.0].value.shape.clone(),
        );
        if sa != sm {
            return Err(shape_err("row_softmax_masked", &sa, &sm));
        }
        let n = self.nodes[a.0].value.cols();
        let mut out = self.nodes[a.0].value.clone();
        for (row, mrow) in out
            .data
            .chunks_exact_mut(n)
            .zip(self.nodes[mask.0].value.data.chunks_exact(n))
        {
            let mut maxv = f64::NEG_INFINITY;
            for i in 0..n {
                row[i] += mrow[i];
                maxv = maxv.max(row[i].to_f64());
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - S::from_f64(maxv)).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let req = self.needs(a);
        let _ = mask;
        Ok(self.push(out, Op::RowSoftmaxMasked { a }, req))
    }

    /// Row-wise `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.cols();
        if self.nodes[gain.0].value.numel() != n || self.nodes[bias.0].value.numel() != n {
            return Err(shape_err(
                "layer_norm",
                &self.nodes[a.0].value.shape,
                &self.nodes[gain.0].value.shape,
            ));
        }
        let rows = self.nodes[a.0].value.numel() / n;
        let mut out = self.nodes[a.0].value.clone();
        let mut xhat = vec![S::ZERO; out.numel()];
        let mut inv_std = vec![S::ZERO; rows];
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_n = S::from_f64(1.0 / n as f64);
        for r in 0..rows {
            let row = &mut out.data[r * n..(r + 1) * n];
            let mut mean = S::ZERO;
            for v in row.iter() {
                mean += *v;
            }
            mean = mean * inv_n;
            let mut var = S::ZERO;
            for v in row.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let is = S::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            for (i, v) in row.iter_mut().enumerate() {
                let xh = (*v - mean) * is;
                xhat[r * n + i] = xh;
                *v = self.nodes[gain.0].value.data[i] * xh + self.nodes[bias.0].value.data[i];
            }
        }
        let req = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = gelu_val(*v);
        }
        let req = self.needs(a);
        self.push(out, Op::Gelu { a }, req)
    }

    /// Select rows of `table` by index, producing `(indices.len(), n)`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let n = self.nodes[table.0].value.cols();
        let rows = self.nodes[table.0].value.rows();
        let mut out = Tensor::zeros(&[indices.len(), n]);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(Error::InvalidArg(format!(
                    "gather index {idx} out of range ({rows} rows)"
                )));
            }
            out.data[i * n..(i + 1) * n]
                .copy_from_slice(&self.nodes[table.0].value.data[idx * n..(idx + 1) * n]);
        }
        let req = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    /// Stack 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_rows of nothing".into()));
        }
        let n = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            if self.nodes[p.0].value.cols() != n {
                return Err(shape_err(
                    "concat_rows",
                    &self.nodes[parts[0].0].value.shape,
                    &self.nodes[p.0].value.shape,
                ));
            }
            rows += self.nodes[p.0].value.rows();
        }
        let mut out = Tensor::zeros(&[rows, n]);
        let mut at = 0;
        for &p in parts {
            let src = &self.nodes[p.0].value.data;
            out.data[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
        let req = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Concatenate 2-D tensors with equal row counts horizontally.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of nothing".into()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut n = 0;
        for &p in parts {
            if self.nodes[p.0].value.rows() != m {
                return Err(shape_err(
                    "concat_cols",
                    &self.nodes[parts[0].0].value.shape,
                    &self.nodes[p.0].value.shape,
                ));
            }
            n += self.nodes[p.0].value.cols();
        }
        let mut out = Tensor::zeros(&[m, n]);
        let mut col_at = 0;
        for &p in parts {
            let pc = self.nodes[p.0].value.cols();
            for r in 0..m {
                let src = &self.nodes[p.0].value.data[r * pc..(r + 1) * pc];
                out.data[r * n + col_at..r * n + col_at + pc].copy_from_slice(src);
            }
            col_at += pc;
        }
        let req = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = S::ZERO;
        for &v in &self.nodes[a.0].value.data {
            acc += v;
        }
        let req = self.needs(a);
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![acc],
            },
            Op::Sum { a },
            req,
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mean_sq(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape.clone(),
            self.nodes[b.0].value.shape.clone(),
        );
        if sa != sb {
            return Err(shape_err("mean_sq", &sa, &sb));
        }
        let n = self.nodes[a.0].value.numel();
        let mut acc = S::ZERO;
        for (&x, &y) in self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
        {
            let d = x - y;
            acc += d * d;
        }
        acc = acc * S::from_f64(1.0 / n as f64);
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![acc],
            },
            Op::MeanSq { a, b },
            req,
        ))
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<S> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![S::ZERO; numel])
    }

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    /// A second call without rebuilding the tape is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArg(
                "backward already ran on this tape; rebuild the forward pass first".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.backward_done = true;
        self.grad_buf(loss)[0] = S::ONE;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backprop_node(NodeId(i));
        }
        Ok(())
    }

    fn take_grad(&mut self, id: NodeId) -> Vec<S> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![S::ZERO; numel])
    }

    fn put_grad(&mut self, id: NodeId, buf: Vec<S>) {
        self.nodes[id.0].grad = Some(buf);
    }

    fn backprop_node(&mut self, id: NodeId) {
        // The op and the output gradient move out for the duration of the
        // node's backward rule and are restored afterwards, so input values
        // can be read by reference while input gradients are accumulated.
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        let g = self.nodes[id.0].grad.take().expect("grad present");
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (self.nodes[id.0].value.rows(), self.nodes[id.0].value.cols());
                let k = self.dims2(*a, *ta).1;
                if self.needs(*a) {
                    let mut ga = self.take_grad(*a);
                    let bv = &self.nodes[b.0].value.data;
                    match (ta, tb) {
                        // dA += G @ B^T
                        (false, false) => gemm_acc::<S>(m, n, k, &g, n as isize, 1, bv, 1, n as isize, &mut ga),
                        // C = A @ B^T  =>  dA += G @ B
                        (false, true) => gemm_acc::<S>(m, n, k, &g, n as isize, 1, bv, k as isize, 1, &mut ga),
                        // C = A^T @ B, A stored (k, m) => dA_stored += B @ G^T
                        (true, false) => gemm_acc::<S>(k, n, m, bv, n as isize, 1, &g, 1, n as isize, &mut ga),
                        // A stored (k, m) => dA_stored += B^T @ G^T
                        (true, true) => gemm_acc::<S>(k, n, m, bv, 1, k as isize, &g, 1, n as isize, &mut ga),
                    }
                    self.put_grad(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = self.take_grad(*b);
                    let av = &self.nodes[a.0].value.data;
                    match (ta, tb) {
                        // dB += A^T @ G
                        (false, false) => gemm_acc::<S>(k, m, n, av, 1, k as isize, &g, n as isize, 1, &mut gb),
                        // B stored (n, k) => dB_stored += G^T @ A
                        (false, true) => gemm_acc::<S>(n, m, k, &g, 1, n as isize, av, k as isize, 1, &mut gb),
                        // A stored (k, m): dB += A @ G
                        (true, false) => gemm_acc::<S>(k, m, n, av, m as isize, 1, &g, n as isize, 1, &mut gb),
                        // dB_stored += G^T @ A^T, A stored (k, m)
                        (true, true) => gemm_acc::<S>(n, m, k, &g, 1, n as isize, av, 1, m as isize, &mut gb),
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::Add { a, b } => {
                for &input in [a, b] {
                    if self.needs(input) {
                        let mut buf = self.take_grad(input);
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o += gv;
                        }
                        self.put_grad(input, buf);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    let mut buf = self.take_grad(*a);
                    for (o, &gv) in buf.iter_mut().zip(&g) {
                        *o += gv;
                    }
                    self.put_grad(*a, buf);
                }
                if self.needs(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut buf = self.take_grad(*bias);
                    for row in g.chunks_exact(n) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    self.put_grad(*bias, buf);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let cs = S::from_f64(*c);
                    let mut buf = self.take_grad(*a);
                    for (o, &gv) in buf.iter_mut().zip(&g) {
                        *o += gv * cs;
                    }
                    self.put_grad(*a, buf);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut buf = self.take_grad(*a);
                    let bv = &self.nodes[b.0].value.data;
                    for ((o, &gv), &v) in buf.iter_mut().zip(&g).zip(bv) {
                        *o += gv * v;
                    }
                    self.put_grad(*a, buf);
                }
                if self.needs(*b) {
                    let mut buf = self.take_grad(*b);
                    let av = &self.nodes[a.0].value.data;
                    for ((o, &gv), &v) in buf.iter_mut().zip(&g).zip(av) {
                        *o += gv * v;
                    }
                    self.put_grad(*b, buf);
                }
            }
            Op::RowSoftmaxMasked { a } => {
                if self.needs(*a) {
                    let n = self.nodes[id.0].value.cols();
                    let mut buf = self.take_grad(*a);
                    let y = &self.nodes[id.0].value.data;
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = S::ZERO;
                        for i in 0..n {
                            dot += yr[i] * gr[i];
                        }
                        let out = &mut buf[r * n..(r + 1) * n];
                        for i in 0..n {
                            out[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                    self.put_grad(*a, buf);
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.nodes[a.0].value.cols();
                let rows = self.nodes[a.0].value.numel() / n;
                if self.needs(*gain) {
                    let mut buf = self.take_grad(*gain);
                    for r in 0..rows {
                        for i in 0..n {
                            buf[i] += g[r * n + i] * xhat[r * n + i];
                        }
                    }
                    self.put_grad(*gain, buf);
                }
                if self.needs(*bias) {
                    let mut buf = self.take_grad(*bias);
                    for r in 0..rows {
                        for i in 0..n {
                            buf[i] += g[r * n + i];
                        }
                    }
                    self.put_grad(*bias, buf);
                }
                if self.needs(*a) {
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let mut buf = self.take_grad(*a);
                    let gain_v = &self.nodes[gain.0].value.data;
                    for r in 0..rows {
                        let mut mean_gdy = S::ZERO;
                        let mut mean_gdy_xhat = S::ZERO;
                        for i in 0..n {
                            let gdy = gain_v[i] * g[r * n + i];
                            mean_gdy += gdy;
                            mean_gdy_xhat += gdy * xhat[r * n + i];
                        }
                        mean_gdy = mean_gdy * inv_n;
                        mean_gdy_xhat = mean_gdy_xhat * inv_n;
                        for i in 0..n {
                            let gdy = gain_v[i] * g[r * n + i];
                            buf[r * n + i] +=
                                inv_std[r] * (gdy - mean_gdy - xhat[r * n + i] * mean_gdy_xhat);
                        }
                    }
                    self.put_grad(*a, buf);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let mut buf = self.take_grad(*a);
                    let x = &self.nodes[a.0].value.data;
                    for ((o, &gv), &xv) in buf.iter_mut().zip(&g).zip(x) {
                        *o += gv * gelu_grad(xv);
                    }
                    self.put_grad(*a, buf);
                }
            }
            Op::Gather { table, indices } => {
                if self.needs(*table) {
                    let n = self.nodes[table.0].value.cols();
                    let mut buf = self.take_grad(*table);
                    for (i, &idx) in indices.iter().enumerate() {
                        for c in 0..n {
                            buf[idx * n + c] += g[i * n + c];
                        }
                    }
                    self.put_grad(*table, buf);
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.needs(p) {
                        let mut buf = self.take_grad(p);
                        for (o, &gv) in buf.iter_mut().zip(&g[at..at + len]) {
                            *o += gv;
                        }
                        self.put_grad(p, buf);
                    }
                    at += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[id.0].value.rows();
                let n = self.nodes[id.0].value.cols();
                let mut col_at = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut buf = self.take_grad(p);
                        for r in 0..m {
                            for c in 0..pc {
                                buf[r * pc + c] += g[r * n + col_at + c];
                            }
                        }
                        self.put_grad(p, buf);
                    }
                    col_at += pc;
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let mut buf = self.take_grad(*a);
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                    self.put_grad(*a, buf);
                }
            }
            Op::MeanSq { a, b } => {
                let scale = S::from_f64(2.0 / self.nodes[a.0].value.numel() as f64);
                if self.needs(*a) {
                    let mut buf = self.take_grad(*a);
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    for i in 0..av.len() {
                        buf[i] += g[0] * scale * (av[i] - bv[i]);
                    }
                    self.put_grad(*a, buf);
                }
                if self.needs(*b) {
                    let mut buf = self.take_grad(*b);
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    for i in 0..av.len() {
                        buf[i] += -(g[0] * scale * (av[i] - bv[i]));
                    }
                    self.put_grad(*b, buf);
                }
            }
        }
        self.nodes[id.0].grad = Some(g);
        self.nodes[id.0].op = op;
    }
}

fn gelu_val<S: Scalar>(x: S) -> S {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}

/// gemm over logical `(m, k) @ (k, n)` with transpose flags resolved to strides.
fn gemm_into<S: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &Tensor<S>,
    b: &Tensor<S>,
    beta: f64,
    c: &mut [S],
) {
    let (rsa, csa) = if ta {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    S::gemm_strided(m, k, n, alpha, &a.data, rsa, csa, &b.data, rsb, csb, beta, c);
}

/// Accumulating gemm (`beta = 1`) with explicit input strides and row-major
/// output, used by the matmul backward rules.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    c: &mut [S],
) {
    S::gemm_strided(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c);
}

// ── Gradient checking ────────────────────────────────────────────────────────

/// Compare reverse-mode gradients of an arbitrary tensor program against
/// central finite differences. Returns the max relative error over all input
/// coordinates.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let loss = build(&mut t, &ids)?;
        Ok(t.value(loss).data[0])
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let ad = grads[i][j];
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
