//! Operation tape: forward builders plus reverse-mode backward.
//!
//! Every primitive appends one node holding the output value, the op kind
//! with whatever it saved for the backward pass, and a `tracked` flag that
//! marks whether any ancestor requires gradients. `backward` walks the node
//! list in reverse (strict reverse topological order, since inputs always
//! precede outputs) and accumulates vector-Jacobian products.
//!
//! Multi-head attention is a single fused node: the Q/K/V/output projections
//! and the per-sample scaled dot-product run inside one op, which keeps the
//! tape short for transformer stacks. Per-sample row ranges come in as
//! [`RowBlocks`], so one attention node serves a whole ragged batch.

use super::raw;
use super::{RowBlocks, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Projection weights for the fused attention primitive.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

struct AttnOp {
    xq: TensorId,
    xkv: TensorId,
    w: AttnWeights,
    heads: usize,
    q_blocks: RowBlocks,
    kv_blocks: RowBlocks,
    // saved forward intermediates
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    MatmulNT { a: TensorId, b: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalarT { x: TensorId, s: TensorId },
    Scale { x: TensorId, c: f64 },
    AddScalar { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Gelu { x: TensorId },
    L2NormRows { x: TensorId, norms: Vec<f64> },
    SoftmaxRows { x: TensorId },
    LogSoftmaxRows { x: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    SegmentMeanRows { x: TensorId, blocks: RowBlocks },
    ConcatCols { a: TensorId, b: TensorId },
    StackScalars { xs: Vec<TensorId> },
    GatherRows { x: TensorId, idx: Vec<usize> },
    GatherElems { x: TensorId, idx: Vec<usize> },
    MaskedFill { x: TensorId, keep: Vec<bool> },
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId, mu: Vec<f64>, rstd: Vec<f64> },
    Attention(Box<AttnOp>),
    Reshape { x: TensorId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations with reverse replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const EXP_MAX: f64 = 709.0;

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

    /// Register an input tensor; it is tracked iff `requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> TensorId {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    /// Register a constant (never tracked).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    /// Register a trainable parameter leaf (tracked, data cloned).
    pub fn param_from(&mut self, t: &Tensor) -> TensorId {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.input(c)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data[0]
    }

    /// Gradient of a tensor after `backward`, if it was reachable and tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    fn t2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── primitive forward builders ──────────────────────────────────────

    /// c[m,n] = a[m,k] · b[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.t2(a, "matmul")?;
        let (kb, n) = self.t2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        raw::mm_nn(self.data(a), self.data(b), m, ka, n, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b },
            tracked,
        ))
    }

    /// c[m,n] = a[m,k] · b[n,k]ᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.t2(a, "matmul_nt")?;
        let (n, kb) = self.t2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        raw::mm_nt(self.data(a), self.data(b), m, ka, n, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatmulNT { a, b },
            tracked,
        ))
    }

    /// y[m,n] = x[m,k] · w[k,n] + b[n]
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, kx) = self.t2(x, "linear")?;
        let (kw, n) = self.t2(w, "linear")?;
        if kx != kw || self.shape(b) != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        raw::mm_nn(self.data(x), self.data(w), m, kx, n, &mut out);
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Linear { x, w, b },
            tracked,
        ))
    }

    fn elementwise_pair(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, op, tracked))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// y = x * s where s is a scalar tensor on the tape (e.g. a learnable
    /// temperature factor).
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_t",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulScalarT { x, s }, tracked))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, c }, tracked))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddScalar { x }, tracked))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        if self.data(x).iter().any(|&v| v > EXP_MAX) {
            return Err(Error::domain("exp", "input exceeds overflow bound"));
        }
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Exp { x }, tracked))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "non-positive input"));
        }
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Log { x }, tracked))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| raw::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { x }, tracked))
    }

    /// L2-normalize each row of a 2-D tensor.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.t2(x, "l2_normalize_rows")?;
        let data = self.data(x);
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let norm = raw::dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::domain(
                    "l2_normalize_rows",
                    format!("zero-norm row {i}"),
                ));
            }
            norms[i] = norm;
            let inv = 1.0 / norm;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::L2NormRows { x, norms },
            tracked,
        ))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.t2(x, "softmax_rows")?;
        let data = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            raw::softmax_row(&data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("softmax_rows", "degenerate row"));
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::SoftmaxRows { x },
            tracked,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.t2(x, "log_softmax_rows")?;
        let data = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            raw::log_softmax_row(&data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LogSoftmaxRows { x },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, tracked))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean { x }, tracked))
    }

    /// Mean over each sample's rows of a flattened [total, d] tensor,
    /// producing [samples, d].
    pub fn segment_mean_rows(&mut self, x: TensorId, blocks: &RowBlocks) -> Result<TensorId> {
        let (total, d) = self.t2(x, "segment_mean_rows")?;
        if blocks.total() != total {
            return Err(Error::ShapeMismatch {
                op: "segment_mean_rows",
                left: vec![total, d],
                right: vec![blocks.total()],
            });
        }
        let data = self.data(x);
        let n = blocks.samples();
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            let orow = &mut out[s * d..(s + 1) * d];
            for r in blocks.range(s) {
                for (o, &v) in orow.iter_mut().zip(&data[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / blocks.lens[s] as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::SegmentMeanRows {
                x,
                blocks: blocks.clone(),
            },
            tracked,
        ))
    }

    /// Concatenate along the channel axis: [m,p] ++ [m,q] -> [m,p+q].
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, p) = self.t2(a, "concat_cols")?;
        let (mb, q) = self.t2(b, "concat_cols")?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; ma * (p + q)];
        for i in 0..ma {
            out[i * (p + q)..i * (p + q) + p].copy_from_slice(&da[i * p..(i + 1) * p]);
            out[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&db[i * q..(i + 1) * q]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![ma, p + q], out)?,
            Op::ConcatCols { a, b },
            tracked,
        ))
    }

    /// Stack scalar tensors into a vector [k].
    pub fn stack_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Input("stack_scalars: empty input".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut tracked = false;
        for &x in xs {
            if self.value(x).numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack_scalars",
                    left: self.shape(x).to_vec(),
                    right: vec![1],
                });
            }
            out.push(self.data(x)[0]);
            tracked |= self.tracked(x);
        }
        Ok(self.push(
            Tensor::new(vec![xs.len()], out)?,
            Op::StackScalars { xs: xs.to_vec() },
            tracked,
        ))
    }

    /// Gather rows of a 2-D tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.t2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Input("gather_rows: empty index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Input(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let data = self.data(x);
        let mut out = vec![0.0; idx.len() * n];
        for (o, &i) in out.chunks_mut(n).zip(idx) {
            o.copy_from_slice(&data[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// Gather elements by flat index, producing a vector [k].
    pub fn gather_elems(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let len = self.value(x).numel();
        if idx.is_empty() {
            return Err(Error::Input("gather_elems: empty index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Input(format!(
                "gather_elems: index {bad} out of range for {len} elements"
            )));
        }
        let data = self.data(x);
        let out: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// Replace elements where `mask` is true with `value`; gradient is zero
    /// at filled positions.
    pub fn masked_fill(&mut self, x: TensorId, mask: &[bool], value: f64) -> Result<TensorId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let keep: Vec<bool> = mask.iter().map(|&m| !m).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedFill { x, keep }, tracked))
    }

    /// Row-wise layer normalization with learnable gain and bias [d].
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = self.t2(x, "layer_norm_rows")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                left: vec![m, n],
                right: self.shape(gain).to_vec(),
            });
        }
        let data = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; m * n];
        let mut mu = vec![0.0; m];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            mu[i] = mean;
            rstd[i] = r;
            for (j, (o, &v)) in out[i * n..(i + 1) * n].iter_mut().zip(row).enumerate() {
                *o = (v - mean) * r * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                mu,
                rstd,
            },
            tracked,
        ))
    }

    /// Metadata-only reshape; element count must match.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let data = self.data(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { x }, tracked))
    }

    /// Fused multi-head attention over per-sample row blocks.
    ///
    /// `xq` [tq, d] supplies queries; `xkv` [tkv, d] supplies keys and
    /// values. Sample `i` attends from rows `q_blocks.range(i)` onto rows
    /// `kv_blocks.range(i)`; samples never attend across block boundaries.
    pub fn attention(
        &mut self,
        xq: TensorId,
        xkv: TensorId,
        q_blocks: &RowBlocks,
        kv_blocks: &RowBlocks,
        w: AttnWeights,
        heads: usize,
    ) -> Result<TensorId> {
        let (tq, d) = self.t2(xq, "attention")?;
        let (tkv, dkv) = self.t2(xkv, "attention")?;
        if d != dkv || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![tq, d],
                right: vec![tkv, dkv],
            });
        }
        if q_blocks.total() != tq || kv_blocks.total() != tkv || q_blocks.samples() != kv_blocks.samples()
        {
            return Err(Error::Input(
                "attention: row blocks do not cover the inputs".into(),
            ));
        }
        for &id in &[w.wq, w.wk, w.wv, w.wo] {
            if self.shape(id) != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    left: self.shape(id).to_vec(),
                    right: vec![d, d],
                });
            }
        }
        for &id in &[w.bq, w.bk, w.bv, w.bo] {
            if self.shape(id) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    left: self.shape(id).to_vec(),
                    right: vec![d],
                });
            }
        }

        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let project = |tape: &Tape, x: TensorId, wt: TensorId, bt: TensorId, rows: usize| {
            let mut out = vec![0.0; rows * d];
            raw::mm_nn(tape.data(x), tape.data(wt), rows, d, d, &mut out);
            let bias = tape.data(bt);
            for row in out.chunks_mut(d) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            out
        };
        let q = project(self, xq, w.wq, w.bq, tq);
        let k = project(self, xkv, w.wk, w.bk, tkv);
        let v = project(self, xkv, w.wv, w.bv, tkv);

        let mut probs = Vec::new();
        let mut ctx = vec![0.0; tq * d];
        for s in 0..q_blocks.samples() {
            let (qo, lq) = (q_blocks.offsets[s], q_blocks.lens[s]);
            let (ko, lk) = (kv_blocks.offsets[s], kv_blocks.lens[s]);
            for h in 0..heads {
                let hc = h * dh;
                let mut scores = vec![0.0; lq * lk];
                for r in 0..lq {
                    let qrow = &q[(qo + r) * d + hc..(qo + r) * d + hc + dh];
                    for c in 0..lk {
                        let krow = &k[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                        scores[r * lk + c] = raw::dot(qrow, krow) * scale;
                    }
                }
                for r in 0..lq {
                    let row = scores[r * lk..(r + 1) * lk].to_vec();
                    raw::softmax_row(&row, &mut scores[r * lk..(r + 1) * lk]);
                }
                for r in 0..lq {
                    let crow = qo + r;
                    for c in 0..lk {
                        let a = scores[r * lk + c];
                        let vrow = &v[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                        let orow = &mut ctx[crow * d + hc..crow * d + hc + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }

        let mut out = vec![0.0; tq * d];
        raw::mm_nn(&ctx, self.data(w.wo), tq, d, d, &mut out);
        let bo = self.data(w.bo);
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bo) {
                *o += bv;
            }
        }

        let tracked = self.tracked(xq)
            || self.tracked(xkv)
            || [w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo]
                .iter()
                .any(|&id| self.tracked(id));
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::Attention(Box::new(AttnOp {
                xq,
                xkv,
                w,
                heads,
                q_blocks: q_blocks.clone(),
                kv_blocks: kv_blocks.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            })),
            tracked,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// tracked tensor reachable from `loss`. A tape accepts exactly one
    /// backward call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (inputs, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.is_none() || !node.tracked {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let k = inputs[a.0].value.shape[1];
                    if inputs[a.0].tracked {
                        let mut da = vec![0.0; m * k];
                        raw::mm_nt_acc(g, &inputs[b.0].value.data, m, n, k, &mut da);
                        add_grad(inputs, *a, &da);
                    }
                    if inputs[b.0].tracked {
                        let mut db = vec![0.0; k * n];
                        raw::mm_tn_acc(&inputs[a.0].value.data, g, m, k, n, &mut db);
                        add_grad(inputs, *b, &db);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let k = inputs[a.0].value.shape[1];
                    if inputs[a.0].tracked {
                        let mut da = vec![0.0; m * k];
                        raw::mm_nn_acc(g, &inputs[b.0].value.data, m, n, k, &mut da);
                        add_grad(inputs, *a, &da);
                    }
                    if inputs[b.0].tracked {
                        let mut db = vec![0.0; n * k];
                        raw::mm_tn_acc(g, &inputs[a.0].value.data, m, n, k, &mut db);
                        add_grad(inputs, *b, &db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let k = inputs[x.0].value.shape[1];
                    if inputs[x.0].tracked {
                        let mut dx = vec![0.0; m * k];
                        raw::mm_nt_acc(g, &inputs[w.0].value.data, m, n, k, &mut dx);
                        add_grad(inputs, *x, &dx);
                    }
                    if inputs[w.0].tracked {
                        let mut dw = vec![0.0; k * n];
                        raw::mm_tn_acc(&inputs[x.0].value.data, g, m, k, n, &mut dw);
                        add_grad(inputs, *w, &dw);
                    }
                    if inputs[b.0].tracked {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (o, &gv) in db.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                        add_grad(inputs, *b, &db);
                    }
                }
                Op::Add { a, b } => {
                    add_grad(inputs, *a, g);
                    add_grad(inputs, *b, g);
                }
                Op::Sub { a, b } => {
                    add_grad(inputs, *a, g);
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    add_grad(inputs, *b, &neg);
                }
                Op::Mul { a, b } => {
                    if inputs[a.0].tracked {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&inputs[b.0].value.data)
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        add_grad(inputs, *a, &da);
                    }
                    if inputs[b.0].tracked {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&inputs[a.0].value.data)
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        add_grad(inputs, *b, &db);
                    }
                }
                Op::MulScalarT { x, s } => {
                    let sv = inputs[s.0].value.data[0];
                    if inputs[x.0].tracked {
                        let dx: Vec<f64> = g.iter().map(|&gv| gv * sv).collect();
                        add_grad(inputs, *x, &dx);
                    }
                    if inputs[s.0].tracked {
                        let ds: f64 = g
                            .iter()
                            .zip(&inputs[x.0].value.data)
                            .map(|(&gv, &xv)| gv * xv)
                            .sum();
                        add_grad(inputs, *s, &[ds]);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                    add_grad(inputs, *x, &dx);
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    add_grad(inputs, *x, g);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> = g.iter().zip(&val.data).map(|(&gv, &y)| gv * y).collect();
                    add_grad(inputs, *x, &dx);
                }
                Op::Log { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&inputs[x.0].value.data)
                        .map(|(&gv, &xv)| gv / xv)
                        .collect();
                    add_grad(inputs, *x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&inputs[x.0].value.data)
                        .map(|(&gv, &xv)| gv * raw::gelu_grad(xv))
                        .collect();
                    add_grad(inputs, *x, &dx);
                }
                Op::L2NormRows { x, norms } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &val.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gy = raw::dot(gr, y);
                        let inv = 1.0 / norms[i];
                        for ((o, &gv), &yv) in dx[i * n..(i + 1) * n].iter_mut().zip(gr).zip(y) {
                            *o = (gv - gy * yv) * inv;
                        }
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &val.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gy = raw::dot(gr, y);
                        for ((o, &gv), &yv) in dx[i * n..(i + 1) * n].iter_mut().zip(gr).zip(y) {
                            *o = yv * (gv - gy);
                        }
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::LogSoftmaxRows { x } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &val.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &gv), &yv) in dx[i * n..(i + 1) * n].iter_mut().zip(gr).zip(y) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    let dx = vec![gv; inputs[x.0].value.numel()];
                    add_grad(inputs, *x, &dx);
                }
                Op::Mean { x } => {
                    let numel = inputs[x.0].value.numel();
                    let gv = g[0] / numel as f64;
                    let dx = vec![gv; numel];
                    add_grad(inputs, *x, &dx);
                }
                Op::SegmentMeanRows { x, blocks } => {
                    let d = val.shape[1];
                    let mut dx = vec![0.0; inputs[x.0].value.numel()];
                    for s in 0..blocks.samples() {
                        let gr = &g[s * d..(s + 1) * d];
                        let inv = 1.0 / blocks.lens[s] as f64;
                        for r in blocks.range(s) {
                            for (o, &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                                *o += gv * inv;
                            }
                        }
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::ConcatCols { a, b } => {
                    let m = val.shape[0];
                    let p = inputs[a.0].value.shape[1];
                    let q = inputs[b.0].value.shape[1];
                    if inputs[a.0].tracked {
                        let mut da = vec![0.0; m * p];
                        for i in 0..m {
                            da[i * p..(i + 1) * p]
                                .copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                        }
                        add_grad(inputs, *a, &da);
                    }
                    if inputs[b.0].tracked {
                        let mut db = vec![0.0; m * q];
                        for i in 0..m {
                            db[i * q..(i + 1) * q]
                                .copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                        }
                        add_grad(inputs, *b, &db);
                    }
                }
                Op::StackScalars { xs } => {
                    let xs = xs.clone();
                    for (j, x) in xs.iter().enumerate() {
                        add_grad(inputs, *x, &[g[j]]);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let n = val.shape[1];
                    let mut dx = vec![0.0; inputs[x.0].value.numel()];
                    for (gr, &i) in g.chunks(n).zip(idx) {
                        for (o, &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::GatherElems { x, idx } => {
                    let mut dx = vec![0.0; inputs[x.0].value.numel()];
                    for (&gv, &i) in g.iter().zip(idx) {
                        dx[i] += gv;
                    }
                    add_grad(inputs, *x, &dx);
                }
                Op::MaskedFill { x, keep } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(keep)
                        .map(|(&gv, &kp)| if kp { gv } else { 0.0 })
                        .collect();
                    add_grad(inputs, *x, &dx);
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    mu,
                    rstd,
                } => {
                    let (m, n) = (val.shape[0], val.shape[1]);
                    let xd = &inputs[x.0].value.data;
                    let gd = &inputs[gain.0].value.data;
                    let mut dx = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xd[i * n..(i + 1) * n];
                        let (mean, r) = (mu[i], rstd[i]);
                        // xhat_j = (x_j - mean) * r; dxhat_j = g_j * gain_j
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            let xh = (xr[j] - mean) * r;
                            let dxh = gr[j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgain[j] += gr[j] * xh;
                            dbias[j] += gr[j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xh = (xr[j] - mean) * r;
                            let dxh = gr[j] * gd[j];
                            dx[i * n + j] = r * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                        }
                    }
                    add_grad(inputs, *x, &dx);
                    add_grad(inputs, *gain, &dgain);
                    add_grad(inputs, *bias, &dbias);
                }
                Op::Attention(op) => {
                    attention_backward(inputs, op, g);
                }
            }
        }
        Ok(())
    }
}

fn add_grad(nodes: &mut [Node], id: TensorId, contrib: &[f64]) {
    let node = &mut nodes[id.0];
    if !node.tracked {
        return;
    }
    let len = node.value.data.len();
    debug_assert_eq!(len, contrib.len());
    let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
    for (a, b) in g.iter_mut().zip(contrib) {
        *a += b;
    }
}

fn attention_backward(inputs: &mut [Node], op: &AttnOp, g: &[f64]) {
    let d = inputs[op.w.wq.0].value.shape[0];
    let heads = op.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let tq = op.q.len() / d;
    let tkv = op.k.len() / d;

    // out = ctx * Wo + bo
    let mut dctx = vec![0.0; tq * d];
    raw::mm_nt_acc(g, &inputs[op.w.wo.0].value.data, tq, d, d, &mut dctx);
    if inputs[op.w.wo.0].tracked {
        let mut dwo = vec![0.0; d * d];
        raw::mm_tn_acc(&op.ctx, g, tq, d, d, &mut dwo);
        add_grad(inputs, op.w.wo, &dwo);
    }
    if inputs[op.w.bo.0].tracked {
        let mut dbo = vec![0.0; d];
        for row in g.chunks(d) {
            for (o, &gv) in dbo.iter_mut().zip(row) {
                *o += gv;
            }
        }
        add_grad(inputs, op.w.bo, &dbo);
    }

    let mut dq = vec![0.0; tq * d];
    let mut dk = vec![0.0; tkv * d];
    let mut dv = vec![0.0; tkv * d];

    let mut probs_off = 0;
    for s in 0..op.q_blocks.samples() {
        let (qo, lq) = (op.q_blocks.offsets[s], op.q_blocks.lens[s]);
        let (ko, lk) = (op.kv_blocks.offsets[s], op.kv_blocks.lens[s]);
        for h in 0..heads {
            let hc = h * dh;
            let probs = &op.probs[probs_off..probs_off + lq * lk];
            probs_off += lq * lk;
            for r in 0..lq {
                let a_row = &probs[r * lk..(r + 1) * lk];
                let dctx_row = &dctx[(qo + r) * d + hc..(qo + r) * d + hc + dh];
                // dA[c] = dot(dctx_row, v_head_c); dV_head_c += A[c] * dctx_row
                let mut da = vec![0.0; lk];
                for c in 0..lk {
                    let vrow = &op.v[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                    da[c] = raw::dot(dctx_row, vrow);
                    let dvrow = &mut dv[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                    let a = a_row[c];
                    for (o, &gv) in dvrow.iter_mut().zip(dctx_row) {
                        *o += a * gv;
                    }
                }
                // softmax backward on the row
                let gy = raw::dot(&da, a_row);
                // dS[c] = A[c] * (dA[c] - gy); fold the 1/sqrt(dh) into dQ/dK
                let qrow_base = (qo + r) * d + hc;
                for c in 0..lk {
                    let ds = a_row[c] * (da[c] - gy) * scale;
                    let krow = &op.k[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                    let dqrow = &mut dq[qrow_base..qrow_base + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    let qrow = &op.q[qrow_base..qrow_base + dh];
                    let dkrow = &mut dk[(ko + c) * d + hc..(ko + c) * d + hc + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }

    // Q = xq*Wq + bq, K/V analogous on xkv.
    let mut backprop_projection = |dp: &[f64],
                                   x: TensorId,
                                   rows: usize,
                                   wt: TensorId,
                                   bt: TensorId,
                                   dx_acc: &mut Vec<f64>| {
        raw::mm_nt_acc(dp, &inputs[wt.0].value.data, rows, d, d, dx_acc);
        if inputs[wt.0].tracked {
            let mut dw = vec![0.0; d * d];
            raw::mm_tn_acc(&inputs[x.0].value.data, dp, rows, d, d, &mut dw);
            add_grad(inputs, wt, &dw);
        }
        if inputs[bt.0].tracked {
            let mut db = vec![0.0; d];
            for row in dp.chunks(d) {
                for (o, &gv) in db.iter_mut().zip(row) {
                    *o += gv;
                }
            }
            add_grad(inputs, bt, &db);
        }
    };

    let mut dxq = vec![0.0; tq * d];
    backprop_projection(&dq, op.xq, tq, op.w.wq, op.w.bq, &mut dxq);
    let mut dxkv = vec![0.0; tkv * d];
    backprop_projection(&dk, op.xkv, tkv, op.w.wk, op.w.bk, &mut dxkv);
    backprop_projection(&dv, op.xkv, tkv, op.w.wv, op.w.bv, &mut dxkv);

    add_grad(inputs, op.xq, &dxq);
    add_grad(inputs, op.xkv, &dxkv);
}
