//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Parameters live in a [`ParamStore`] and are addressed by [`ParamId`]
//! handles. A forward pass records nodes on a [`Tape`]; `backward` walks the
//! tape in reverse and returns one gradient per parameter of the store,
//! exactly zero for parameters the forward pass never touched.

use std::collections::BTreeMap;

use super::tensor::{gelu, gelu_grad, matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient per parameter of a store; untouched parameters hold zeros.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

/// Per-token GRPO surrogate inputs that stay constant under differentiation.
#[derive(Clone, Debug)]
pub struct SurrogateTerms {
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    pub advantage: Vec<f64>,
    /// Per-token averaging weight (1/(|o_i|·G·B) in the usual normalization).
    pub weight: Vec<f64>,
    pub clip: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per-row (mean, inv_std) saved for backward.
        stats: Vec<(f64, f64)>,
    },
    Softmax(NodeId),
    CausalAttention {
        qkv: NodeId,
        heads: usize,
        /// Attention probabilities `[heads][T][T]` (lower triangle used).
        probs: Vec<f64>,
    },
    Gather(NodeId, Vec<usize>),
    ScatterAddRows {
        base: NodeId,
        src: NodeId,
        rows: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaskedMean {
        x: NodeId,
        mask: Vec<f64>,
        count: f64,
    },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    WeightedSum(NodeId, Vec<f64>),
    LogSoftmaxPick {
        logits: NodeId,
        targets: Vec<usize>,
        /// Softmax probabilities per row, saved for backward.
        probs: Vec<f64>,
    },
    Surrogate {
        logp: NodeId,
        terms: SurrogateTerms,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleConst(..) => "scale_const",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Gather(..) => "gather",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::LogSoftmaxPick { .. } => "log_softmax_pick",
            Op::Surrogate { .. } => "grpo_surrogate",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(shape_err("add_row", format!("bias {:?} for {n} columns", self.value(bias).shape())));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(t, Op::AddRow(x, bias))
    }

    /// Multiplies `x` by a one-element node.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale", format!("scalar node has shape {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| sv * v);
        self.push(t, Op::Scale(x, s))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(x).map(|v| c * v);
        self.push(t, Op::ScaleConst(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", format!("gain/bias must have {n} values")));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
            stats.push((mean, inv));
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, stats })
    }

    /// Softmax over the last axis (each row of a matrix, or a whole vector).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let data: Vec<f64> = v.data().chunks_exact(n).flat_map(super::tensor::softmax).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(x))
    }

    /// Multi-head causal self-attention from packed `[T, 3D]` query/key/value rows.
    pub fn causal_attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let (t_len, d3) = self.value(qkv).dims2()?;
        if d3 % 3 != 0 || (d3 / 3) % heads != 0 {
            return Err(shape_err("causal_attention", format!("width {d3} with {heads} heads")));
        }
        let d = d3 / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut out = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let qo = h * hd;
            let ko = d + h * hd;
            let vo = 2 * d + h * hd;
            for i in 0..t_len {
                let q = &x[i * d3 + qo..i * d3 + qo + hd];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &x[j * d3 + ko..j * d3 + ko + hd];
                    let s = super::tensor::dot(q, k) * scale;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let orow = &mut out[i * d + qo..i * d + qo + hd];
                for j in 0..=i {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let v = &x[j * d3 + vo..j * d3 + vo + hd];
                    for (o, vv) in orow.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![t_len, d], out)?;
        self.push(t, Op::CausalAttention { qkv, heads, probs })
    }

    /// Selects rows of an `[N, D]` matrix (embedding lookup when `table` is a parameter).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (n, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("row {bad} out of {n}")));
        }
        if ids.is_empty() {
            return Err(shape_err("gather", "empty index list".into()));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(t, Op::Gather(table, ids.to_vec()))
    }

    /// `base` with `src[i]` added onto row `rows[i]`.
    pub fn scatter_add_rows(&mut self, base: NodeId, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, d) = self.value(base).dims2()?;
        let (s, d2) = self.value(src).dims2()?;
        if d != d2 || s != rows.len() || rows.iter().any(|&r| r >= m) {
            return Err(shape_err("scatter_add_rows", format!("base [{m}x{d}], src [{s}x{d2}], {} rows", rows.len())));
        }
        let mut t = self.value(base).clone();
        let sv = self.value(src).data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..d {
                t.data_mut()[r * d + c] += sv[i * d + c];
            }
        }
        self.push(t, Op::ScatterAddRows { base, src, rows: rows.to_vec() })
    }

    /// Same-size 2-D convolution with circular padding.
    ///
    /// `x` is `[Cin, H, W]`, `w` is `[Cout, Cin, K, K]` with odd `K`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel {ws:?} for input {:?}", self.value(x).shape())));
        }
        let cout = ws[0];
        if self.value(b).len() != cout {
            return Err(shape_err("conv2d", format!("bias needs {cout} values")));
        }
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), cin, cout, h, wd, ws[2]);
        let t = Tensor::new(vec![cout, h, wd], out)?;
        self.push(t, Op::Conv2d { x, w, b })
    }

    /// Per-channel mean of `[C, H, W]` over pixels where `mask` is nonzero.
    /// Returns `None` for an empty mask.
    pub fn masked_mean(&mut self, x: NodeId, mask: &Tensor) -> Result<Option<NodeId>> {
        let (c, h, w) = self.value(x).dims3()?;
        if mask.shape() != [h, w] {
            return Err(shape_err("masked_mean", format!("mask {:?} for map {h}x{w}", mask.shape())));
        }
        let count = mask.data().iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Ok(None);
        }
        let mvec: Vec<f64> = mask.data().iter().map(|&m| if m != 0.0 { 1.0 } else { 0.0 }).collect();
        let xv = self.value(x);
        let out: Vec<f64> = (0..c)
            .map(|ch| {
                let plane = xv.plane(ch);
                plane.iter().zip(&mvec).filter(|(_, &m)| m != 0.0).map(|(v, _)| v).sum::<f64>() / count as f64
            })
            .collect();
        let node = self.push(Tensor::from_vec(out), Op::MaskedMean { x, mask: mvec, count: count as f64 })?;
        Ok(Some(node))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        if data.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        self.push(Tensor::from_vec(data), Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ_i weights[i] · x[i]` over the flattened values.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", format!("{} weights for {} values", weights.len(), self.value(x).len())));
        }
        let s = super::tensor::dot(self.value(x).data(), weights);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()))
    }

    /// Log-probability of `targets[t]` under the softmax of logits row `t`.
    pub fn log_softmax_pick(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || targets.iter().any(|&t| t >= v) {
            return Err(shape_err("log_softmax_pick", format!("{} targets for [{m}x{v}] logits", targets.len())));
        }
        let mut probs = Vec::with_capacity(m * v);
        let mut out = Vec::with_capacity(m);
        for (r, &tgt) in targets.iter().enumerate() {
            let row = self.value(logits).row(r);
            let ls = super::tensor::log_softmax(row);
            out.push(ls[tgt]);
            probs.extend(ls.iter().map(|l| l.exp()));
        }
        self.push(Tensor::from_vec(out), Op::LogSoftmaxPick { logits, targets: targets.to_vec(), probs })
    }

    /// Clipped-ratio policy surrogate with a per-token KL penalty, as a loss to minimize.
    ///
    /// Per token: `-(min(r·A, clip(r, 1-ε, 1+ε)·A) - β·k3)` weighted by `weight`,
    /// where `r = exp(logp - old)` and `k3 = exp(ref - logp) - (ref - logp) - 1`.
    pub fn grpo_surrogate(&mut self, logp: NodeId, terms: SurrogateTerms) -> Result<NodeId> {
        let n = self.value(logp).len();
        if [terms.old_logp.len(), terms.ref_logp.len(), terms.advantage.len(), terms.weight.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(shape_err("grpo_surrogate", format!("term lengths must equal {n}")));
        }
        let lp = self.value(logp).data();
        let mut loss = 0.0;
        for t in 0..n {
            let (obj, _) = surrogate_token(lp[t], &terms, t);
            loss -= terms.weight[t] * obj;
        }
        self.push(Tensor::scalar(loss), Op::Surrogate { logp, terms })
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(store);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |id: NodeId| self.value(id);
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.value(id).len();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                for (o, v) in out.grads[pid.0].data_mut().iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| matmul_bt_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_acc(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    acc(id, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
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
            Op::AddRow(x, bias) => {
                let n = val(*bias).len();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Scale(x, s) => {
                let sv = val(*s).data()[0];
                let xv = val(*x).data();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += sv * b));
                let gs: f64 = xv.iter().zip(g).map(|(a, b)| a * b).sum();
                acc(*s, &mut |gsv| gsv[0] += gs);
            }
            Op::ScaleConst(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (m, n) = val(*x).dims2()?;
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let mut gx_local = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    let (mean, inv) = stats[r];
                    let xhat: Vec<f64> = (0..n).map(|c| (xv[r * n + c] - mean) * inv).collect();
                    let gr = &g[r * n..(r + 1) * n];
                    let dxhat: Vec<f64> = (0..n).map(|c| gr[c] * gv[c]).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gg[c] += gr[c] * xhat[c];
                        gb[c] += gr[c];
                        gx_local[r * n + c] = inv / n as f64 * (n as f64 * dxhat[c] - s1 - xhat[c] * s2);
                    }
                }
                acc(*x, &mut |gx| gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b));
                acc(*gain, &mut |ga| ga.iter_mut().zip(&gg).for_each(|(a, b)| *a += b));
                acc(*bias, &mut |ga| ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let (t_len, d3) = val(*qkv).dims2()?;
                let d = d3 / 3;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let x = val(*qkv).data();
                let mut gx_local = vec![0.0; t_len * d3];
                let mut dp = vec![0.0; t_len];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                    for i in 0..t_len {
                        let prow = &probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                        let go = &g[i * d + qo..i * d + qo + hd];
                        // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                        let mut s = 0.0;
                        for j in 0..=i {
                            let v = &x[j * d3 + vo..j * d3 + vo + hd];
                            dp[j] = super::tensor::dot(go, v);
                            s += prow[j] * dp[j];
                            for c in 0..hd {
                                gx_local[j * d3 + vo + c] += prow[j] * go[c];
                            }
                        }
                        // dS_ij = P_ij (dP_ij - Σ_k P_ik dP_ik), scores = scale q·k
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..hd {
                                gx_local[i * d3 + qo + c] += ds * x[j * d3 + ko + c];
                                gx_local[j * d3 + ko + c] += ds * x[i * d3 + qo + c];
                            }
                        }
                    }
                }
                acc(*qkv, &mut |gx| gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b));
            }
            Op::Gather(table, ids) => {
                let (_, d) = val(*table).dims2()?;
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows { base, src, rows } => {
                let (_, d) = val(*base).dims2()?;
                acc(*base, &mut |gb| gb.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(*src, &mut |gs| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            gs[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (cin, h, wd) = val(*x).dims3()?;
                let ws = val(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let (gx_local, gw_local, gb_local) =
                    conv2d_backward(val(*x).data(), val(*w).data(), g, cin, cout, h, wd, k);
                acc(*x, &mut |gx| gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b));
                acc(*w, &mut |gw| gw.iter_mut().zip(&gw_local).for_each(|(a, b)| *a += b));
                acc(*b, &mut |gbv| gbv.iter_mut().zip(&gb_local).for_each(|(a, b)| *a += b));
            }
            Op::MaskedMean { x, mask, count } => {
                let hw = mask.len();
                acc(*x, &mut |gx| {
                    for (ch, gc) in g.iter().enumerate() {
                        let scaled = gc / count;
                        for (p, m) in mask.iter().enumerate() {
                            if *m != 0.0 {
                                gx[ch * hw + p] += scaled;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    let seg = &g[off..off + len];
                    acc(p, &mut |gp| gp.iter_mut().zip(seg).for_each(|(a, b)| *a += b));
                    off += len;
                }
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::WeightedSum(x, w) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(w).for_each(|(a, b)| *a += g[0] * b));
            }
            Op::LogSoftmaxPick { logits, targets, probs } => {
                let (_, v) = val(*logits).dims2()?;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..v {
                            gl[r * v + c] -= gr * probs[r * v + c];
                        }
                        gl[r * v + t] += gr;
                    }
                });
            }
            Op::Surrogate { logp, terms } => {
                let lp = val(*logp).data();
                acc(*logp, &mut |gl| {
                    for t in 0..gl.len() {
                        let (_, dobj) = surrogate_token(lp[t], terms, t);
                        gl[t] -= g[0] * terms.weight[t] * dobj;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Per-token surrogate objective (to maximize) and its derivative w.r.t. `logp`.
fn surrogate_token(logp: f64, terms: &SurrogateTerms, t: usize) -> (f64, f64) {
    let adv = terms.advantage[t];
    let ratio = (logp - terms.old_logp[t]).exp();
    let lo = 1.0 - terms.clip;
    let hi = 1.0 + terms.clip;
    let clipped = ratio.clamp(lo, hi);
    let unclipped_obj = ratio * adv;
    let clipped_obj = clipped * adv;
    // min picks the clipped branch only when it is strictly smaller; its slope is then zero
    // whenever the ratio sits outside the clip range.
    let (pg, dpg) = if clipped_obj < unclipped_obj {
        let slope = if ratio > lo && ratio < hi { ratio * adv } else { 0.0 };
        (clipped_obj, slope)
    } else {
        (unclipped_obj, ratio * adv)
    };
    let diff = terms.ref_logp[t] - logp;
    let kl = diff.exp() - diff - 1.0;
    // d kl / d logp = -exp(diff) + 1
    let dkl = 1.0 - diff.exp();
    (pg - terms.beta * kl, dpg - terms.beta * dkl)
}

/// Per-token `k3` KL estimate `exp(ref - logp) - (ref - logp) - 1`.
pub fn kl_k3(logp: f64, ref_logp: f64) -> f64 {
    let diff = ref_logp - logp;
    diff.exp() - diff - 1.0
}

/// True when the clipped branch of the surrogate is active for this token.
pub fn is_clipped(logp: f64, old_logp: f64, advantage: f64, clip: f64) -> bool {
    let ratio = (logp - old_logp).exp();
    (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let hw = h * wd;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let oplane = &mut out[co * hw..(co + 1) * hw];
        oplane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let iplane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                        let orow = &mut oplane[y * wd..(y + 1) * wd];
                        let irow = &iplane[sy * wd..(sy + 1) * wd];
                        for (xo, o) in orow.iter_mut().enumerate() {
                            let sx = (xo as isize + dx).rem_euclid(wd as isize) as usize;
                            *o += wv * irow[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = (k / 2) as isize;
    let hw = h * wd;
    let mut gx = vec![0.0; cin * hw];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &g[co * hw..(co + 1) * hw];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let iplane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    let mut gwacc = 0.0;
                    for y in 0..h {
                        let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                        for xo in 0..wd {
                            let sx = (xo as isize + dx).rem_euclid(wd as isize) as usize;
                            let gv = gplane[y * wd + xo];
                            gwacc += gv * iplane[sy * wd + sx];
                            gx[ci * hw + sy * wd + sx] += gv * wv;
                        }
                    }
                    gw[widx] += gwacc;
                }
            }
        }
    }
    (gx, gw, gb)
}
