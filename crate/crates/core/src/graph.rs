//! Reverse-mode autodiff over a tape of tensor operations.
//!
//! A `Graph` records every forward op in construction order, which is already
//! topological, so the backward pass is a single reverse sweep that visits
//! each node exactly once. Forward values are checked finite after every op;
//! NaN/Inf is an error state, never silently propagated.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probabilities fed to the BCE loss are clamped to [EPS, 1-EPS] so log(0)
/// can never occur.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node (and its output tensor) in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// The closed set of recorded operations.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul,
    /// Elementwise add, or matrix + (1, n) bias row.
    Add,
    Mul,
    Concat { axis: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax { axis: usize },
    /// Row gather from an embedding matrix; `ids` are the rows to pick.
    EmbeddingLookup { ids: Vec<usize> },
    /// Mean binary cross-entropy of predictions against constant targets.
    BceLoss,
    Mean,
    Sum,
    Transpose,
    Scale { factor: f64 },
    Abs,
    /// Per-row layer normalization with learned gain/bias inputs.
    LayerNorm { eps: f64 },
    /// Hard threshold at 0.5 with a straight-through (identity) backward.
    /// Excluded from finite-difference gradcheck: its defined gradient is the
    /// surrogate, not the a.e.-zero true derivative.
    SteThreshold,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat { .. } => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::EmbeddingLookup { .. } => "embedding-lookup",
            Op::BceLoss => "bce-loss",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Transpose => "transpose",
            Op::Scale { .. } => "scale",
            Op::Abs => "abs",
            Op::LayerNorm { .. } => "layer-norm",
            Op::SteThreshold => "ste-threshold",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    value: Tensor,
    /// True when any leaf under this node requires a gradient; backward skips
    /// the rest of the tape.
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by tensor id.
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs_grad = t.requires_grad;
        self.push(Op::Leaf, vec![], t, needs_grad)
    }

    /// Insert a non-trainable constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, vec![], t, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op, inputs, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Record one forward op. Checks shapes per kind and that the output is
    /// finite.
    pub fn apply(&mut self, op: Op, inputs: &[TensorId]) -> Result<TensorId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::contract(format!("unknown tensor id {}", id.0)));
            }
        }
        let value = self.eval(&op, inputs)?;
        if !value.all_finite() {
            return Err(Error::Numeric(op.kind_name().to_string()));
        }
        let needs_grad = match op {
            // Targets of the BCE never receive gradients.
            Op::BceLoss => self.nodes[inputs[0].0].needs_grad,
            _ => inputs.iter().any(|id| self.nodes[id.0].needs_grad),
        };
        Ok(self.push(op, inputs.to_vec(), value, needs_grad))
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn embedding_lookup(&mut self, emb: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.apply(Op::EmbeddingLookup { ids: ids.to_vec() }, &[emb])
    }

    pub fn bce_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.apply(Op::BceLoss, &[pred, target])
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Abs, &[x])
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn ste_threshold(&mut self, relaxed: TensorId) -> Result<TensorId> {
        self.apply(Op::SteThreshold, &[relaxed])
    }

    fn dim_err(op: &'static str, detail: String) -> Error {
        Error::Dimension { op, detail }
    }

    fn eval(&self, op: &Op, inputs: &[TensorId]) -> Result<Tensor> {
        let arity_err = |want: &str| {
            Error::contract(format!("{} expects {want} inputs, got {}", op.kind_name(), inputs.len()))
        };
        let t = |i: usize| &self.nodes[inputs[i].0].value;
        match op {
            Op::Leaf => Err(Error::contract("leaf nodes are inserted, not applied".into())),
            Op::MatMul => {
                if inputs.len() != 2 {
                    return Err(arity_err("2"));
                }
                t(0).matmul(t(1))
            }
            Op::Add => {
                if inputs.len() != 2 {
                    return Err(arity_err("2"));
                }
                let (a, b) = (t(0), t(1));
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), data)
                } else if a.is_matrix()
                    && b.is_matrix()
                    && b.rows() == 1
                    && b.cols() == a.cols()
                {
                    // bias-add: broadcast the (1, n) row over every row of a
                    let n = a.cols();
                    let data = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x + b.data()[i % n])
                        .collect();
                    Tensor::new(a.shape().to_vec(), data)
                } else {
                    Err(Self::dim_err(
                        "add",
                        format!("incompatible shapes {:?} + {:?}", a.shape(), b.shape()),
                    ))
                }
            }
            Op::Mul => {
                if inputs.len() != 2 {
                    return Err(arity_err("2"));
                }
                let (a, b) = (t(0), t(1));
                if a.shape() != b.shape() {
                    return Err(Self::dim_err(
                        "mul",
                        format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(arity_err(">= 1"));
                }
                let axis = *axis;
                if axis > 1 {
                    return Err(Self::dim_err("concat", format!("axis {axis} out of range")));
                }
                let first = t(0);
                if !first.is_matrix() {
                    return Err(Self::dim_err("concat", "need 2-d inputs".into()));
                }
                let fixed = if axis == 0 { first.cols() } else { first.rows() };
                for i in 1..inputs.len() {
                    let other = if axis == 0 { t(i).cols() } else { t(i).rows() };
                    if !t(i).is_matrix() || other != fixed {
                        return Err(Self::dim_err(
                            "concat",
                            format!("input {i} shape {:?} incompatible on axis {axis}", t(i).shape()),
                        ));
                    }
                }
                if axis == 0 {
                    let cols = fixed;
                    let rows: usize = (0..inputs.len()).map(|i| t(i).rows()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..inputs.len() {
                        data.extend_from_slice(t(i).data());
                    }
                    Tensor::new(vec![rows, cols], data)
                } else {
                    let rows = fixed;
                    let cols: usize = (0..inputs.len()).map(|i| t(i).cols()).sum();
                    let mut data = vec![0.0; rows * cols];
                    let mut offset = 0;
                    for i in 0..inputs.len() {
                        let w = t(i).cols();
                        for r in 0..rows {
                            data[r * cols + offset..r * cols + offset + w]
                                .copy_from_slice(&t(i).data()[r * w..(r + 1) * w]);
                        }
                        offset += w;
                    }
                    Tensor::new(vec![rows, cols], data)
                }
            }
            Op::Sigmoid => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| sigmoid(x)).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
            Op::Tanh => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| x.tanh()).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
            Op::Relu => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| x.max(0.0)).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
            Op::Softmax { axis } => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let x = t(0);
                if !x.is_matrix() || *axis > 1 {
                    return Err(Self::dim_err(
                        "softmax",
                        format!("need 2-d input and axis in {{0,1}}, got {:?} axis {axis}", x.shape()),
                    ));
                }
                let (rows, cols) = (x.rows(), x.cols());
                let mut out = vec![0.0; rows * cols];
                if *axis == 1 {
                    for r in 0..rows {
                        softmax_slice(&x.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
                    }
                } else {
                    let mut col_in = vec![0.0; rows];
                    let mut col_out = vec![0.0; rows];
                    for c in 0..cols {
                        for r in 0..rows {
                            col_in[r] = x.data()[r * cols + c];
                        }
                        softmax_slice(&col_in, &mut col_out);
                        for r in 0..rows {
                            out[r * cols + c] = col_out[r];
                        }
                    }
                }
                Tensor::new(vec![rows, cols], out)
            }
            Op::EmbeddingLookup { ids } => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let emb = t(0);
                if !emb.is_matrix() {
                    return Err(Self::dim_err("embedding-lookup", "embedding matrix must be 2-d".into()));
                }
                let (v, d) = (emb.rows(), emb.cols());
                if ids.is_empty() {
                    return Err(Error::contract("embedding-lookup with empty id list".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Self::dim_err(
                            "embedding-lookup",
                            format!("id {id} out of range for vocab {v}"),
                        ));
                    }
                    data.extend_from_slice(&emb.data()[id * d..(id + 1) * d]);
                }
                Tensor::new(vec![ids.len(), d], data)
            }
            Op::BceLoss => {
                if inputs.len() != 2 {
                    return Err(arity_err("2 (pred, target)"));
                }
                let (p, y) = (t(0), t(1));
                if p.shape() != y.shape() {
                    return Err(Self::dim_err(
                        "bce-loss",
                        format!("pred {:?} vs target {:?}", p.shape(), y.shape()),
                    ));
                }
                let n = p.numel() as f64;
                let mut acc = 0.0;
                for (&pi, &yi) in p.data().iter().zip(y.data()) {
                    let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    acc -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
                }
                Ok(Tensor::scalar(acc / n))
            }
            Op::Mean => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let x = t(0);
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            Op::Sum => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                Ok(Tensor::scalar(t(0).data().iter().sum::<f64>()))
            }
            Op::Transpose => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                t(0).transpose()
            }
            Op::Scale { factor } => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| x * factor).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
            Op::Abs => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| x.abs()).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
            Op::LayerNorm { eps } => {
                if inputs.len() != 3 {
                    return Err(arity_err("3 (x, gamma, beta)"));
                }
                let (x, g, b) = (t(0), t(1), t(2));
                if !x.is_matrix() {
                    return Err(Self::dim_err("layer-norm", "x must be 2-d".into()));
                }
                let n = x.cols();
                let row_shape = [1, n];
                if g.shape() != row_shape || b.shape() != row_shape {
                    return Err(Self::dim_err(
                        "layer-norm",
                        format!("gamma/beta must be (1, {n}), got {:?}/{:?}", g.shape(), b.shape()),
                    ));
                }
                let rows = x.rows();
                let mut out = vec![0.0; rows * n];
                for r in 0..rows {
                    let row = &x.data()[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let s = (var + eps).sqrt();
                    for j in 0..n {
                        out[r * n + j] = (row[j] - mu) / s * g.data()[j] + b.data()[j];
                    }
                }
                Tensor::new(vec![rows, n], out)
            }
            Op::SteThreshold => {
                if inputs.len() != 1 {
                    return Err(arity_err("1"));
                }
                let data = t(0).data().iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
                Tensor::new(t(0).shape().to_vec(), data)
            }
        }
    }

    /// Reverse sweep from a scalar loss. Every gradient-requiring tensor
    /// reachable from the loss receives a gradient; the rest stay untouched.
    pub fn backward(&self, loss: TensorId) -> Result<GradientMap> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract(format!("unknown tensor id {}", loss.0)))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        // Mark nodes reachable from loss that also need gradients.
        let mut live = vec![false; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            live[loss.0] = true;
            let mut stack = vec![loss.0];
            while let Some(i) = stack.pop() {
                for inp in &self.nodes[i].inputs {
                    if self.nodes[inp.0].needs_grad && !live[inp.0] {
                        live[inp.0] = true;
                        stack.push(inp.0);
                    }
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if live[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..self.nodes.len()).rev() {
            if !live[i] || grads[i].is_none() {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(GradientMap { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: impl Iterator<Item = f64>, len: usize) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) -> Result<()> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if wants(0) {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += gout[r * n + c] * b.data()[p * n + c];
                            }
                            da[r * k + p] = acc;
                        }
                    }
                    Self::accumulate(grads, node.inputs[0].0, da.into_iter(), m * k);
                }
                if wants(1) {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for r in 0..m {
                            let av = a.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                db[p * n + c] += av * gout[r * n + c];
                            }
                        }
                    }
                    Self::accumulate(grads, node.inputs[1].0, db.into_iter(), k * n);
                }
            }
            Op::Add => {
                let (a, b) = (input(0), input(1));
                if wants(0) {
                    Self::accumulate(grads, node.inputs[0].0, gout.iter().copied(), a.numel());
                }
                if wants(1) {
                    if a.shape() == b.shape() {
                        Self::accumulate(grads, node.inputs[1].0, gout.iter().copied(), b.numel());
                    } else {
                        // bias row: sum over broadcast rows
                        let n = b.numel();
                        let mut db = vec![0.0; n];
                        for (idx, g) in gout.iter().enumerate() {
                            db[idx % n] += g;
                        }
                        Self::accumulate(grads, node.inputs[1].0, db.into_iter(), n);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                if wants(0) {
                    let delta = gout.iter().zip(b.data()).map(|(g, y)| g * y);
                    Self::accumulate(grads, node.inputs[0].0, delta, a.numel());
                }
                if wants(1) {
                    let delta = gout.iter().zip(a.data()).map(|(g, x)| g * x);
                    Self::accumulate(grads, node.inputs[1].0, delta, b.numel());
                }
            }
            Op::Concat { axis } => {
                let cols_total = node.value.cols();
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let part = input(k);
                    let (pr, pc) = (part.rows(), part.cols());
                    if *axis == 0 {
                        if wants(k) {
                            let start = offset * cols_total;
                            let delta = gout[start..start + pr * pc].iter().copied();
                            Self::accumulate(grads, node.inputs[k].0, delta, pr * pc);
                        }
                        offset += pr;
                    } else {
                        if wants(k) {
                            let mut dp = vec![0.0; pr * pc];
                            for r in 0..pr {
                                dp[r * pc..(r + 1) * pc]
                                    .copy_from_slice(&gout[r * cols_total + offset..r * cols_total + offset + pc]);
                            }
                            Self::accumulate(grads, node.inputs[k].0, dp.into_iter(), pr * pc);
                        }
                        offset += pc;
                    }
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let y = node.value.data();
                    let delta = gout.iter().zip(y).map(|(g, &v)| g * v * (1.0 - v));
                    Self::accumulate(grads, node.inputs[0].0, delta, y.len());
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let y = node.value.data();
                    let delta = gout.iter().zip(y).map(|(g, &v)| g * (1.0 - v * v));
                    Self::accumulate(grads, node.inputs[0].0, delta, y.len());
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = input(0).data();
                    let delta = gout.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 });
                    Self::accumulate(grads, node.inputs[0].0, delta, x.len());
                }
            }
            Op::Softmax { axis } => {
                if wants(0) {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; rows * cols];
                    if *axis == 1 {
                        for r in 0..rows {
                            let yr = &y.data()[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                dx[r * cols + c] = yr[c] * (gr[c] - dot);
                            }
                        }
                    } else {
                        for c in 0..cols {
                            let mut dot = 0.0;
                            for r in 0..rows {
                                dot += y.data()[r * cols + c] * gout[r * cols + c];
                            }
                            for r in 0..rows {
                                let v = y.data()[r * cols + c];
                                dx[r * cols + c] = v * (gout[r * cols + c] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, node.inputs[0].0, dx.into_iter(), rows * cols);
                }
            }
            Op::EmbeddingLookup { ids } => {
                if wants(0) {
                    let emb = input(0);
                    let (v, d) = (emb.rows(), emb.cols());
                    let mut demb = vec![0.0; v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            demb[id * d + j] += gout[row * d + j];
                        }
                    }
                    Self::accumulate(grads, node.inputs[0].0, demb.into_iter(), v * d);
                }
            }
            Op::BceLoss => {
                if wants(0) {
                    let (p, y) = (input(0), input(1));
                    let n = p.numel() as f64;
                    let g = gout[0];
                    let delta = p.data().iter().zip(y.data()).map(|(&pi, &yi)| {
                        if pi < BCE_CLAMP || pi > 1.0 - BCE_CLAMP {
                            0.0 // clamped region: constant loss locally
                        } else {
                            g * (pi - yi) / (pi * (1.0 - pi)) / n
                        }
                    });
                    Self::accumulate(grads, node.inputs[0].0, delta, p.numel());
                }
            }
            Op::Mean => {
                if wants(0) {
                    let n = input(0).numel();
                    let g = gout[0] / n as f64;
                    Self::accumulate(grads, node.inputs[0].0, std::iter::repeat(g).take(n), n);
                }
            }
            Op::Sum => {
                if wants(0) {
                    let n = input(0).numel();
                    let g = gout[0];
                    Self::accumulate(grads, node.inputs[0].0, std::iter::repeat(g).take(n), n);
                }
            }
            Op::Transpose => {
                if wants(0) {
                    let x = input(0);
                    let (m, n) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] = gout[c * m + r];
                        }
                    }
                    Self::accumulate(grads, node.inputs[0].0, dx.into_iter(), m * n);
                }
            }
            Op::Scale { factor } => {
                if wants(0) {
                    let f = *factor;
                    let n = input(0).numel();
                    Self::accumulate(grads, node.inputs[0].0, gout.iter().map(|g| g * f), n);
                }
            }
            Op::Abs => {
                if wants(0) {
                    let x = input(0).data();
                    let delta = gout.iter().zip(x).map(|(g, &v)| g * v.signum());
                    Self::accumulate(grads, node.inputs[0].0, delta, x.len());
                }
            }
            Op::LayerNorm { eps } => {
                let (x, g) = (input(0), input(1));
                let (rows, n) = (x.rows(), x.cols());
                let nf = n as f64;
                let mut dx = vec![0.0; rows * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let row = &x.data()[r * n..(r + 1) * n];
                    let grow = &gout[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let s = (var + eps).sqrt();
                    // xhat_j = (x_j - mu) / s
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / s).collect();
                    let gm: Vec<f64> = grow.iter().zip(g.data()).map(|(go, &ga)| go * ga).collect();
                    let mean_gm = gm.iter().sum::<f64>() / nf;
                    let mean_gm_xhat = gm.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[r * n + j] = (gm[j] - mean_gm - xhat[j] * mean_gm_xhat) / s;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if wants(0) {
                    Self::accumulate(grads, node.inputs[0].0, dx.into_iter(), rows * n);
                }
                if wants(1) {
                    Self::accumulate(grads, node.inputs[1].0, dgamma.into_iter(), n);
                }
                if wants(2) {
                    Self::accumulate(grads, node.inputs[2].0, dbeta.into_iter(), n);
                }
            }
            Op::SteThreshold => {
                if wants(0) {
                    // straight-through: gradient passes unchanged
                    let n = input(0).numel();
                    Self::accumulate(grads, node.inputs[0].0, gout.iter().copied(), n);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        g.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap());
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn nonfinite_output_is_numeric_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e308));
        let b = g.constant(Tensor::scalar(1e308));
        match g.add(a, b) {
            Err(Error::Numeric(op)) => assert_eq!(op, "add"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn backward_square() {
        // loss = x*x at x=3 -> dloss/dx = 6
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.sigmoid(x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![2.0]);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn linear_gradient_is_input() {
        // loss = w . x -> dloss/dw = x exactly
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![1, 3], vec![0.5, -1.0, 2.0]);
        let x = g.constant(Tensor::new(vec![3, 1], vec![1.5, 2.5, -3.5]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.5, 2.5, -3.5]);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, -2.0]);
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        // loss depends only on c; x participates in no op
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for r in 0..3 {
            let s: f64 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(v.data()[r * 4..(r + 1) * 4].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn bce_loss_clamps_extremes() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let y = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let loss = g.bce_loss(p, y).unwrap();
        // perfectly confident & correct -> loss ~= -ln(1 - eps) ~ 1e-7
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn ste_threshold_forward_and_surrogate_backward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![0.2, 0.6, 0.8]);
        let hard = g.ste_threshold(x).unwrap();
        assert_eq!(g.value(hard).data(), &[0.0, 1.0, 1.0]);
        let loss = g.sum(hard).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, vec![2, 1], vec![5.0, 6.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut g = Graph::new();
        let emb = leaf(&mut g, vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let x = g.embedding_lookup(emb, &[2, 1, 2]).unwrap();
        assert_eq!(g.value(x).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        // row 2 used twice, row 1 once, row 0 never
        assert_eq!(grads.get(emb).unwrap(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
