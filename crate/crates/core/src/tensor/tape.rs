use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families with a backward rule. Used for reporting and for
/// fault injection in the gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    ScaleBy,
    AddConst,
    Tanh,
    Gelu,
    SoftmaxRows,
    LayerNorm,
    Embedding,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    MeanRows,
    Sum,
    CrossEntropy,
    CosineRows,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::AddConst,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::CosineRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::AddConst => "add_const",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding_lookup",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy_logits",
            OpKind::CosineRows => "cosine_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddConst(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    CosineRows {
        x: Var,
        target: Var,
        norms: Vec<f64>,
        target_norm: f64,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::AddConst(..) => OpKind::AddConst,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Gelu(..) => OpKind::Gelu,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::CosineRows { .. } => OpKind::CosineRows,
        })
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Linear differentiation record. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let c = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), c)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Rolls the record back to its first `len` nodes. Lets a worker bind
    /// parameters once and reuse them across several forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    /// Verification hook: negate the backward contribution of every `kind`
    /// operation. The gradient-check harness uses this to prove it catches a
    /// broken rule.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ── forward operations ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = kernels::transpose(self.value(a), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `row` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if self.value(row).len() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_exact_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, factor), rg)
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * f).collect();
        let rg = self.rg(&[x, s]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ScaleBy(x, s), rg))
    }

    /// Adds a constant (non-differentiable) tensor, e.g. an attention mask.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddConst(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Tanh(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax over the last axis, max-subtracted. `-inf` entries
    /// (masked scores) map to probability zero.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("softmax_rows input".into()));
        }
        let (_, c) = dims2(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        if c > 0 {
            kernels::softmax_rows_into(self.value(x), &mut out, c);
        }
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalisation over the last axis followed by `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = dims2(self.shape(x));
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| dims2(self.shape(p)).1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| dims2(self.shape(p)).0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Mean over rows: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if m == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let v = self.value(x);
        let mut out = vec![0.0; n];
        for row in v.chunks_exact(n) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n], out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// `-Σ_{i: mask[i]} log softmax(logits[i])[targets[i]]`.
    ///
    /// This is where non-finite activations are detected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.mat(logits, "cross_entropy_logits")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                lhs: vec![n, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateLoss);
        }
        let lv = self.value(logits);
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("logits".into()));
        }
        let mut probs = vec![0.0; n * v];
        kernels::softmax_rows_into(lv, &mut probs, v);
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss -= row[t] - lse;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity of every row of `x: [N×D]` with `target: [D]`.
    pub fn cosine_rows(&mut self, x: Var, target: Var) -> Result<Var> {
        let (n, d) = dims2(self.shape(x));
        if self.value(target).len() != d {
            return Err(Error::Shape {
                op: "cosine_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let t = self.value(target);
        let tn = kernels::dot(t, t).sqrt();
        if tn == 0.0 {
            return Err(Error::Norm("cosine target"));
        }
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for row in xv.chunks_exact(d) {
            let rn = kernels::dot(row, row).sqrt();
            if rn == 0.0 {
                return Err(Error::Norm("cosine row"));
            }
            norms.push(rn);
            out.push(kernels::dot(row, t) / (rn * tn));
        }
        let rg = self.rg(&[x, target]);
        Ok(self.push(
            vec![n],
            out,
            Op::CosineRows {
                x,
                target,
                norms,
                target_norm: tn,
            },
            rg,
        ))
    }

    /// Cosine similarity of two `[D]` vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.cosine_rows(a, b)?;
        Ok(self.sum(c))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Replays the record in reverse from the scalar `loss`, filling the
    /// gradient of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(i, &g, &mut grads);
            // Intermediate gradients are not kept.
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].shape);
                let n = dims2(&nodes[b.0].shape).1;
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, &nodes[b.0].value, ga, m, n, k);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::matmul_tn_acc(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(&nodes[a.0].shape);
                let n = dims2(&nodes[b.0].shape).0;
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_acc(g, &nodes[b.0].value, ga, m, n, k);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, n * k);
                    kernels::matmul_tn_acc(g, &nodes[a.0].value, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = dims2(&nodes[a.0].shape);
                    // node is [n×m]; gradient back to [m×n]
                    let gt = kernels::transpose(g, n, m);
                    add_into(acc(grads, *a, m * n), &gt);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(acc(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if wants(*row) {
                    let c = nodes[row.0].value.len();
                    let gr = acc(grads, *row, c);
                    for chunk in g.chunks_exact(c.max(1)) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    kernels::axpy(*f, g, acc(grads, *x, g.len()));
                }
            }
            Op::ScaleBy(x, s) => {
                let f = nodes[s.0].value[0];
                if wants(*x) {
                    kernels::axpy(f, g, acc(grads, *x, g.len()));
                }
                if wants(*s) {
                    let d = kernels::dot(g, &nodes[x.0].value);
                    acc(grads, *s, 1)[0] += d;
                }
            }
            Op::AddConst(x) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let gx = acc(grads, *x, g.len());
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let (_, c) = dims2(&node.shape);
                    let gx = acc(grads, *x, g.len());
                    for ((gr, yr), or) in g
                        .chunks_exact(c)
                        .zip(node.value.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                    {
                        let s = kernels::dot(gr, yr);
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = dims2(&node.shape);
                let gv = &nodes[gain.0].value;
                if wants(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                }
                if wants(*x) {
                    let gx = acc(grads, *x, r * d);
                    let mut dh = vec![0.0; d];
                    for row in 0..r {
                        let gr = &g[row * d..(row + 1) * d];
                        let hr = &xhat[row * d..(row + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = kernels::dot(&dh, hr) / d as f64;
                        let rs = rstd[row];
                        let or = &mut gx[row * d..(row + 1) * d];
                        for j in 0..d {
                            or[j] += rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let (v, d) = dims2(&nodes[table.0].shape);
                    let gt = acc(grads, *table, v * d);
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(*p) {
                        add_into(acc(grads, *p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = dims2(&nodes[p.0].shape).1;
                    if wants(*p) {
                        let gp = acc(grads, *p, rows * w);
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let (r, c) = dims2(&nodes[x.0].shape);
                    let gx = acc(grads, *x, r * c);
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = dims2(&nodes[x.0].shape);
                    let len = dims2(&node.shape).1;
                    let gx = acc(grads, *x, r * c);
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let (m, n) = dims2(&nodes[x.0].shape);
                    let inv = 1.0 / m as f64;
                    let gx = acc(grads, *x, m * n);
                    for chunk in gx.chunks_exact_mut(n) {
                        kernels::axpy(inv, g, chunk);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = nodes[x.0].value.len();
                    acc(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                if wants(*logits) {
                    let (n, v) = dims2(&nodes[logits.0].shape);
                    let gl = acc(grads, *logits, n * v);
                    for i in 0..n {
                        if !mask[i] {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        kernels::axpy(g[0], &probs[i * v..(i + 1) * v], row);
                        row[targets[i]] -= g[0];
                    }
                }
            }
            Op::CosineRows {
                x,
                target,
                norms,
                target_norm,
            } => {
                let d = nodes[target.0].value.len();
                let t = &nodes[target.0].value;
                let xv = &nodes[x.0].value;
                let tn = *target_norm;
                if wants(*x) {
                    let gx = acc(grads, *x, xv.len());
                    for (i, ((row, or), &rn)) in xv
                        .chunks_exact(d)
                        .zip(gx.chunks_exact_mut(d))
                        .zip(norms)
                        .enumerate()
                    {
                        let c = node.value[i];
                        let a = g[i] / (rn * tn);
                        let b = g[i] * c / (rn * rn);
                        for ((o, ti), xi) in or.iter_mut().zip(t).zip(row) {
                            *o += a * ti - b * xi;
                        }
                    }
                }
                if wants(*target) {
                    let gt = acc(grads, *target, d);
                    for (i, (row, &rn)) in xv.chunks_exact(d).zip(norms).enumerate() {
                        let c = node.value[i];
                        let a = g[i] / (rn * tn);
                        let b = g[i] * c / (tn * tn);
                        for ((o, ti), xi) in gt.iter_mut().zip(t).zip(row) {
                            *o += a * xi - b * ti;
                        }
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = tape.leaf(&Tensor::identity(3));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2, 1], vec![1.0, 1.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]);
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);
        assert_eq!(v[4], 0.0);
        let nan = leaf(&mut tape, &[1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(tape.softmax_rows(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.leaf(&Tensor::new(&[4], vec![1.0; 4]).unwrap());
        let zeros = tape.leaf(&Tensor::zeros(&[4]));
        let x = leaf(&mut tape, &[1, 4], vec![2.5; 4]);
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));

        let ones = tape.leaf(&Tensor::new(&[2], vec![1.0; 2]).unwrap());
        let zeros = tape.leaf(&Tensor::zeros(&[2]));
        let x = leaf(&mut tape, &[1, 2], vec![1.0, -1.0]);
        let y = tape.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(tape.value(y), &[1.0, -1.0]);
    }

    #[test]
    fn embedding_duplicate_ids_accumulate() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, &[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let first = tape.embedding(table, &[0]).unwrap();
        assert_eq!(tape.value(first), &[0.0, 1.0]);
        let e = tape.embedding(table, &[2, 2]).unwrap();
        assert_eq!(tape.value(e), &[4.0, 5.0, 4.0, 5.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        let err = tape.embedding(table, &[1, 7]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 7, .. }));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        // Large margins drive the loss to zero in f64.
        let logits = leaf(&mut tape, &[2, 3], vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]);
        let l = tape.cross_entropy(logits, &[0, 2], &[true, true]).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let uniform = leaf(&mut tape, &[2, 4], vec![0.3; 8]);
        let l = tape.cross_entropy(uniform, &[1, 3], &[false, true]).unwrap();
        assert!((tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(uniform, &[1, 3], &[false, false]),
            Err(Error::DegenerateLoss)
        ));
        let bad = leaf(&mut tape, &[1, 2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(
            tape.cross_entropy(bad, &[0], &[true]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::identity(2));
        let x = leaf(&mut tape, &[1, 2], vec![1.0, 2.0]);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn clear_drops_everything() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.clear();
        assert!(tape.is_empty());
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
