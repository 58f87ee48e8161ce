use rand::Rng;

use super::kernels::{self, gemm, AttentionSpec, ROW, TRANS};
use super::{rows_cols, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
    MeanLastDim(Var),
    ConcatRows(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    GroupMeanRows(Var, usize),
    Entropy(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Probabilities below this contribute nothing to [`Tape::entropy`].
pub const ENTROPY_EPS: f64 = 1e-12;

/// Dynamic reverse-mode tape. Single-threaded; build one per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_finite(op: &'static str, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(TensorError::Numeric {
            op,
            detail: format!("non-finite input {} at index {i}", x[i]),
        }),
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf holding a copy of `t`; it tracks gradient iff `t`
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(vec![value], vec![1], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Saved attention probabilities of an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ROW(k), self.value(b), ROW(n), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ROW(k), self.value(b), TRANS(k), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMulBT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(b) != [cols] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(a, c)| a + c))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::ScalarMul(x, c), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Log(x), rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    /// Mean of all entries. An empty input yields 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(x);
        self.push(vec![m], vec![1], Op::Mean(x), rg)
    }

    fn reduced_shape(shape: &[usize]) -> Vec<usize> {
        if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let out = self.value(x).chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        let shape = Self::reduced_shape(self.shape(x));
        let rg = self.rg(x);
        self.push(out, shape, Op::SumLastDim(x), rg)
    }

    pub fn mean_lastdim(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .map(|r| r.iter().sum::<f64>() / cols as f64)
            .collect();
        let shape = Self::reduced_shape(self.shape(x));
        let rg = self.rg(x);
        self.push(out, shape, Op::MeanLastDim(x), rg)
    }

    /// Stacks tensors along the first dimension; trailing dimensions must
    /// agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(out, shape, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` while
    /// training; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = self.value(x).iter().zip(&keep).map(|(a, k)| a * k).collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Dropout(x, keep), rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax_lastdim", self.value(x))?;
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Softmax(x), rg))
    }

    /// `x - max - ln sum exp(x - max)` per row.
    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        check_finite("log_softmax_lastdim", self.value(x))?;
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LogSoftmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance (biased, with `eps`
    /// added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(out, self.shape(x).to_vec(), op, rg))
    }

    /// Gathers rows of a 2-D tensor. The backward pass scatter-adds, so a
    /// repeated index receives the sum of its output gradients.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(shape_err("gather_rows", s, &[ids.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(out, vec![ids.len(), cols], Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Embedding lookup by item id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &ids)
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if idx.len() != rows {
            return Err(shape_err("pick", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index {
                op: "pick",
                index: bad,
                bound: cols,
            });
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(out, vec![rows], Op::Pick(x, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Reshape(x), rg))
    }

    /// Averages consecutive groups of `group` rows of a 2-D tensor.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(shape_err("group_mean_rows", s, &[group]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows / group * cols];
        for r in 0..rows {
            let dst = &mut out[(r / group) * cols..][..cols];
            dst.iter_mut()
                .zip(&xv[r * cols..(r + 1) * cols])
                .for_each(|(o, v)| *o += v / group as f64);
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![rows / group, cols], Op::GroupMeanRows(x, group), rg))
    }

    /// Shannon entropy (natural log) of each probability row. Entries below
    /// [`ENTROPY_EPS`] contribute zero.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(p));
        let mut out = Vec::new();
        for (r, row) in self.value(p).chunks(cols.max(1)).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-4 || row.iter().any(|v| *v < 0.0) {
                return Err(TensorError::Contract(format!(
                    "entropy row {r} is not a probability vector (sum {total})"
                )));
            }
            out.push(
                -row.iter()
                    .filter(|&&v| v >= ENTROPY_EPS)
                    .map(|v| v * v.ln())
                    .sum::<f64>(),
            );
        }
        let shape = Self::reduced_shape(self.shape(p));
        let rg = self.rg(p);
        Ok(self.push(out, shape, Op::Entropy(p), rg))
    }

    /// Multi-head attention; see [`AttentionSpec`] for the masking rules.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        rng: &mut R,
    ) -> Result<Var> {
        let sk = self.shape(k).to_vec();
        let sq = self.shape(q).to_vec();
        let t = spec.seq_len;
        if sk.len() != 2 || t == 0 || spec.query_len == 0 || spec.query_len > t {
            return Err(shape_err("attention", &sq, &sk));
        }
        let dim = sk[1];
        let batch = spec.key_pad.len() / t;
        if spec.heads == 0
            || !dim.is_multiple_of(spec.heads)
            || spec.key_pad.len() != batch * t
            || sk[0] != batch * t
            || self.shape(v) != sk.as_slice()
            || sq != [batch * spec.query_len, dim]
        {
            return Err(shape_err("attention", &sq, &sk));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(TensorError::Contract(format!(
                "dropout rate {} outside [0, 1)",
                spec.dropout
            )));
        }
        let probs = kernels::attention_probs(self.value(q), self.value(k), dim, &spec);
        let keep = if spec.train && spec.dropout > 0.0 {
            let scale = 1.0 / (1.0 - spec.dropout);
            Some(
                (0..probs.len())
                    .map(|_| if rng.random::<f64>() < spec.dropout { 0.0 } else { scale })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let out = match &keep {
            Some(kp) => {
                let w: Vec<f64> = probs.iter().zip(kp).map(|(a, b)| a * b).collect();
                kernels::attention_apply(&w, self.value(v), dim, &spec)
            }
            None => kernels::attention_apply(&probs, self.value(v), dim, &spec),
        };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let shape = vec![batch * spec.query_len, dim];
        let op = Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
            keep,
        };
        Ok(self.push(out, shape, op, rg))
    }

    /// Value-equal copy with no backward path to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::Leaf, false)
    }

    // ----- backward --------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into the `grad` of
    /// every reachable leaf that requires grad. Calling it twice without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let da = slot(adj, *a, m * k);
                    gemm(m, n, k, g, ROW(n), self.value(*b), TRANS(n), 1.0, da);
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, k * n);
                    gemm(k, m, n, self.value(*a), TRANS(k), g, ROW(n), 1.0, db);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    let da = slot(adj, *a, m * k);
                    gemm(m, n, k, g, ROW(n), self.value(*b), ROW(k), 1.0, da);
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, n * k);
                    gemm(n, m, k, g, TRANS(n), self.value(*a), ROW(k), 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let d = slot(adj, v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    let d = slot(adj, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.rg(*b) {
                    let cols = len(*b);
                    let d = slot(adj, *b, cols);
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let d = slot(adj, *a, g.len());
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let d = slot(adj, *b, g.len());
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                }
            }
            Op::ScalarMul(x, c) => {
                let d = slot(adj, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
            Op::Exp(x) => {
                let d = slot(adj, *x, g.len());
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = slot(adj, *x, g.len());
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g / x;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = slot(adj, *x, g.len());
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Sum(x) => {
                let d = slot(adj, *x, len(*x));
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = len(*x);
                let d = slot(adj, *x, n);
                d.iter_mut().for_each(|d| *d += g[0] / n as f64);
            }
            Op::SumLastDim(x) | Op::MeanLastDim(x) => {
                let (_, cols) = rows_cols(self.shape(*x));
                let scale = match node.op {
                    Op::MeanLastDim(_) => 1.0 / cols as f64,
                    _ => 1.0,
                };
                let d = slot(adj, *x, len(*x));
                for (row, g) in d.chunks_mut(cols.max(1)).zip(g) {
                    row.iter_mut().for_each(|d| *d += g * scale);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if self.rg(p) {
                        let d = slot(adj, p, n);
                        d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::Dropout(x, keep) => {
                let d = slot(adj, *x, g.len());
                for ((d, g), k) in d.iter_mut().zip(g).zip(keep) {
                    *d += g * k;
                }
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(self.shape(*x));
                let d = slot(adj, *x, g.len());
                for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let inner: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for c in 0..cols {
                        d[c] += y[c] * (g[c] - inner);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = rows_cols(self.shape(*x));
                let d = slot(adj, *x, g.len());
                for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let total: f64 = g.iter().sum();
                    for c in 0..cols {
                        d[c] += g[c] - y[c].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = len(*gain);
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let d = slot(adj, *gain, cols);
                    for (g, h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += g[c] * h[c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let d = slot(adj, *bias, cols);
                    for g in g.chunks(cols) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
                if self.rg(*x) {
                    let d = slot(adj, *x, g.len());
                    let mut dh = vec![0.0; cols];
                    for (r, (drow, (grow, hrow))) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols).zip(xhat.chunks(cols)))
                        .enumerate()
                    {
                        for c in 0..cols {
                            dh[c] = grow[c] * gv[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / cols as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            drow[c] += inv_std[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let cols = self.shape(*table)[1];
                let d = slot(adj, *table, len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id * cols..(id + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Pick(x, idx) => {
                let (_, cols) = rows_cols(self.shape(*x));
                let d = slot(adj, *x, len(*x));
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] += g[r];
                }
            }
            Op::Reshape(x) => {
                let d = slot(adj, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::GroupMeanRows(x, group) => {
                let cols = self.shape(*x)[1];
                let rows = self.shape(*x)[0];
                let d = slot(adj, *x, rows * cols);
                for r in 0..rows {
                    let src = &g[(r / group) * cols..][..cols];
                    d[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, g)| *d += g / *group as f64);
                }
            }
            Op::Entropy(p) => {
                let (_, cols) = rows_cols(self.shape(*p));
                let pv = self.value(*p);
                let d = slot(adj, *p, pv.len());
                for (r, (drow, prow)) in d.chunks_mut(cols).zip(pv.chunks(cols)).enumerate() {
                    for c in 0..cols {
                        if prow[c] >= ENTROPY_EPS {
                            drow[c] -= g[r] * (prow[c].ln() + 1.0);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                keep,
            } => {
                let dim = self.shape(*k)[1];
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    dim,
                    spec,
                    probs,
                    keep.as_deref(),
                    g,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        let d = slot(adj, var, grad.len());
                        d.iter_mut().zip(&grad).for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
    }
}
