//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded eagerly: applying a primitive validates shapes,
//! computes the output immediately, and appends a node to the tape. The tape
//! can be re-run (`forward`) after changing leaf values, which is what the
//! finite-difference gradient check does, and walked backwards (`backward`)
//! to accumulate gradients into every trainable leaf. Gradients sum across
//! multiple uses of the same leaf; a named parameter is inserted once per
//! graph and reused, so parameter sharing falls out of the node identity.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    MatMul,
    /// [m,n] x [n] -> [m]
    MatVec,
    Add,
    Sub,
    Mul,
    /// n-ary elementwise sum
    AddN,
    Scale(f64),
    /// tensor scaled by a scalar node
    ScaleBy,
    /// [n] . [n] -> [1]
    Dot,
    Tanh,
    Sigmoid,
    /// 1-D softmax with max subtraction
    Softmax,
    /// 1-D concatenation
    Concat,
    /// row lookup into a [V,E] table
    Embed(usize),
    /// log softmax(x)[k], fused so log(0) never occurs
    PickLogSoftmax(usize),
    /// sum of all elements -> [1]
    Sum,
    /// weighted sum of vectors: inputs [alpha, v_1..v_T] -> sum alpha_t v_t
    WeightedSum,
    /// elementwise multiply by a fixed mask (inverted dropout)
    Dropout(Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddN => "add_n",
            Op::Scale(_) => "scale",
            Op::ScaleBy => "scale_by",
            Op::Dot => "dot",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Concat => "concat",
            Op::Embed(_) => "embed",
            Op::PickLogSoftmax(_) => "pick_log_softmax",
            Op::Sum => "sum",
            Op::WeightedSum => "weighted_sum",
            Op::Dropout(_) => "dropout",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    name: Option<String>,
    trainable: bool,
}

/// Gradients keyed by leaf name, in sorted order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: std::collections::BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise accumulate `other` into `self`. Missing entries are inserted.
    pub fn add(&mut self, other: &Gradients) {
        for (name, grad) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                None => {
                    self.map.insert(name.clone(), grad.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.map.values_mut() {
            for g in grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Non-trainable named leaf.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.leaf(Some(name.into()), value, false)
    }

    /// Unnamed constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(None, value, false)
    }

    /// Trainable named leaf. Inserting the same name twice returns the
    /// existing node, so every use of a parameter shares one gradient
    /// accumulator.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&idx) = self.by_name.get(name) {
            debug_assert_eq!(self.nodes[idx].value.shape(), value.shape());
            return NodeId(idx);
        }
        self.leaf(Some(name.to_string()), value.clone(), true)
    }

    fn leaf(&mut self, name: Option<String>, value: Tensor, trainable: bool) -> NodeId {
        let idx = self.nodes.len();
        if let Some(n) = &name {
            self.by_name.insert(n.clone(), idx);
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            name,
            trainable,
        });
        NodeId(idx)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>) -> Result<NodeId> {
        let idx = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < idx));
        let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval(&op, &in_vals).map_err(|e| at_node(e, idx, op.name()))?;
        if value.has_nan() {
            return Err(Error::Nan {
                node: idx,
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            name: None,
            trainable: false,
        });
        Ok(NodeId(idx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a.0, b.0])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec, vec![w.0, x.0])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a.0, b.0])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a.0, b.0])
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::AddN, xs.iter().map(|id| id.0).collect())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![x.0])
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::ScaleBy, vec![x.0, s.0])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot, vec![a.0, b.0])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![x.0])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![x.0])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![x.0])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, xs.iter().map(|id| id.0).collect())
    }

    pub fn embed(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        self.push(Op::Embed(row), vec![table.0])
    }

    /// `log softmax(logits)[pick]`, the fused cross-entropy building block.
    pub fn pick_log_softmax(&mut self, logits: NodeId, pick: usize) -> Result<NodeId> {
        self.push(Op::PickLogSoftmax(pick), vec![logits.0])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x.0])
    }

    /// `sum_t alpha[t] * v_t` over vectors of equal length.
    pub fn weighted_sum(&mut self, alpha: NodeId, vs: &[NodeId]) -> Result<NodeId> {
        let mut inputs = Vec::with_capacity(vs.len() + 1);
        inputs.push(alpha.0);
        inputs.extend(vs.iter().map(|id| id.0));
        self.push(Op::WeightedSum, inputs)
    }

    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Dropout(mask), vec![x.0])
    }

    /// Recompute every non-leaf node from the current leaf values, in
    /// construction order. Identical inputs produce bit-identical outputs.
    pub fn forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[idx];
                let in_vals: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                eval(&node.op, &in_vals).map_err(|e| at_node(e, idx, node.op.name()))?
            };
            if value.has_nan() {
                return Err(Error::Nan {
                    node: idx,
                    op: self.nodes[idx].op.name().to_string(),
                });
            }
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Bind new values to named leaves, re-run the tape, and return the value
    /// at `output`.
    pub fn forward_eval(
        &mut self,
        inputs: &std::collections::BTreeMap<String, Tensor>,
        output: NodeId,
    ) -> Result<Tensor> {
        for (name, value) in inputs {
            self.set_leaf(name, value.clone())?;
        }
        self.forward()?;
        Ok(self.value(output).clone())
    }

    pub fn set_leaf(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::data(format!("no leaf named {name:?}")))?;
        if self.nodes[idx].value.shape() != value.shape() {
            return Err(Error::data(format!(
                "leaf {name:?} has shape {:?}, got {:?}",
                self.nodes[idx].value.shape(),
                value.shape()
            )));
        }
        self.nodes[idx].value = value;
        Ok(())
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once and
    /// returns the gradient for every trainable named leaf (as summed over
    /// all of its uses).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::data(format!(
                "backward requires a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                let in_vals: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let in_grads = backprop(&node.op, &in_vals, &node.value, &g);
                for (&input_idx, ig) in node.inputs.iter().zip(in_grads) {
                    let slot = grads[input_idx]
                        .get_or_insert_with(|| vec![0.0; self.nodes[input_idx].value.numel()]);
                    for (a, b) in slot.iter_mut().zip(&ig) {
                        *a += b;
                    }
                }
            } else if node.trainable {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if let Some(name) = &node.name {
                    let data = grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    out.map.insert(
                        name.clone(),
                        Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"),
                    );
                }
            }
        }
        Ok(out)
    }

    /// Compare analytic gradients against central finite differences over
    /// every entry of every trainable leaf. Returns the maximum relative
    /// error `|analytic - central| / (|analytic| + |central| + 1e-12)`.
    /// A graph with no trainable leaves measures 0.
    pub fn finite_diff_check(&mut self, loss: NodeId, epsilon: f64) -> Result<f64> {
        assert!(epsilon > 0.0, "epsilon must be positive");
        let analytic = self.backward(loss)?;
        let names: Vec<String> = analytic.map.keys().cloned().collect();
        let mut max_rel = 0.0f64;
        for name in names {
            let idx = self.by_name[&name];
            let numel = self.nodes[idx].value.numel();
            for k in 0..numel {
                let orig = self.nodes[idx].value.data()[k];
                self.nodes[idx].value.data_mut()[k] = orig + epsilon;
                self.forward()?;
                let f_plus = self.nodes[loss.0].value.item();
                self.nodes[idx].value.data_mut()[k] = orig - epsilon;
                self.forward()?;
                let f_minus = self.nodes[loss.0].value.item();
                self.nodes[idx].value.data_mut()[k] = orig;
                let central = (f_plus - f_minus) / (2.0 * epsilon);
                let a = analytic.map[&name].data()[k];
                let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        self.forward()?;
        Ok(max_rel)
    }
}

fn at_node(e: Error, node: usize, op: &str) -> Error {
    match e {
        Error::Data(details) => Error::Shape {
            node,
            op: op.to_string(),
            details,
        },
        other => other,
    }
}

fn require(cond: bool, details: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Data(details()))
    }
}

fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            require(a.shape().len() == 2 && b.shape().len() == 2, || {
                format!("matmul needs 2-D operands, got {:?} x {:?}", a.shape(), b.shape())
            })?;
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            require(k == k2, || {
                format!("matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape())
            })?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a.data()[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b.data()[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Op::MatVec => {
            let (w, x) = (inputs[0], inputs[1]);
            require(w.shape().len() == 2 && x.shape().len() == 1, || {
                format!("matvec needs [m,n] x [n], got {:?} x {:?}", w.shape(), x.shape())
            })?;
            let (m, n) = (w.shape()[0], w.shape()[1]);
            require(n == x.shape()[0], || {
                format!("matvec dims differ: {:?} x {:?}", w.shape(), x.shape())
            })?;
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &w.data()[i * n..(i + 1) * n];
                out[i] = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            }
            Ok(Tensor::vector(out))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            require(a.shape() == b.shape(), || {
                format!("elementwise op on {:?} vs {:?}", a.shape(), b.shape())
            })?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::AddN => {
            require(!inputs.is_empty(), || "add_n of zero tensors".to_string())?;
            let shape = inputs[0].shape().to_vec();
            for t in inputs.iter().skip(1) {
                require(t.shape() == shape.as_slice(), || {
                    format!("add_n mixes shapes {:?} and {:?}", shape, t.shape())
                })?;
            }
            let mut data = inputs[0].data().to_vec();
            for t in inputs.iter().skip(1) {
                for (a, b) in data.iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            Tensor::new(shape, data)
        }
        Op::Scale(c) => Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| x * c).collect(),
        ),
        Op::ScaleBy => {
            let (x, s) = (inputs[0], inputs[1]);
            require(s.is_scalar(), || {
                format!("scale_by needs a scalar, got {:?}", s.shape())
            })?;
            let c = s.item();
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            require(a.shape().len() == 1 && a.shape() == b.shape(), || {
                format!("dot on {:?} vs {:?}", a.shape(), b.shape())
            })?;
            Ok(Tensor::scalar(
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum(),
            ))
        }
        Op::Tanh => Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| x.tanh()).collect(),
        ),
        Op::Sigmoid => Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        ),
        Op::Softmax => {
            let x = inputs[0];
            require(x.shape().len() == 1 && x.numel() > 0, || {
                format!("softmax needs a non-empty vector, got {:?}", x.shape())
            })?;
            Ok(Tensor::vector(softmax_stable(x.data())))
        }
        Op::Concat => {
            require(!inputs.is_empty(), || "concat of zero tensors".to_string())?;
            let mut data = Vec::new();
            for t in inputs {
                require(t.shape().len() == 1, || {
                    format!("concat needs vectors, got {:?}", t.shape())
                })?;
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::vector(data))
        }
        Op::Embed(row) => {
            let table = inputs[0];
            require(table.shape().len() == 2, || {
                format!("embed needs a 2-D table, got {:?}", table.shape())
            })?;
            require(*row < table.shape()[0], || {
                format!("embed row {} out of range for table {:?}", row, table.shape())
            })?;
            Ok(Tensor::vector(table.row(*row).to_vec()))
        }
        Op::PickLogSoftmax(k) => {
            let x = inputs[0];
            require(x.shape().len() == 1 && *k < x.numel(), || {
                format!("pick_log_softmax index {} for shape {:?}", k, x.shape())
            })?;
            let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = x.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(Tensor::scalar(x.data()[*k] - m - lse))
        }
        Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::WeightedSum => {
            let alpha = inputs[0];
            require(
                alpha.shape().len() == 1 && alpha.numel() == inputs.len() - 1,
                || {
                    format!(
                        "weighted_sum of {} vectors with weights {:?}",
                        inputs.len() - 1,
                        alpha.shape()
                    )
                },
            )?;
            require(inputs.len() > 1, || "weighted_sum of zero vectors".to_string())?;
            let dim = inputs[1].numel();
            let mut out = vec![0.0; dim];
            for (t, &a) in inputs[1..].iter().zip(alpha.data()) {
                require(t.shape() == inputs[1].shape(), || {
                    format!("weighted_sum mixes shapes {:?} and {:?}", inputs[1].shape(), t.shape())
                })?;
                for (o, &v) in out.iter_mut().zip(t.data()) {
                    *o += a * v;
                }
            }
            Ok(Tensor::vector(out))
        }
        Op::Dropout(mask) => {
            let x = inputs[0];
            require(mask.len() == x.numel(), || {
                format!("dropout mask of {} entries on {:?}", mask.len(), x.shape())
            })?;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(mask).map(|(v, m)| v * m).collect(),
            )
        }
    }
}

fn softmax_stable(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-op vector-Jacobian products. Returns one gradient per input, in order.
fn backprop(op: &Op, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * b.data()[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            for p in 0..k {
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += a.data()[i * k + p] * g[i * n + j];
                    }
                    db[p * n + j] = s;
                }
            }
            vec![da, db]
        }
        Op::MatVec => {
            let (w, x) = (inputs[0], inputs[1]);
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut dw = vec![0.0; m * n];
            let mut dx = vec![0.0; n];
            for i in 0..m {
                let gi = g[i];
                let wrow = &w.data()[i * n..(i + 1) * n];
                let drow = &mut dw[i * n..(i + 1) * n];
                for j in 0..n {
                    drow[j] = gi * x.data()[j];
                    dx[j] += wrow[j] * gi;
                }
            }
            vec![dw, dx]
        }
        Op::Add => vec![g.to_vec(), g.to_vec()],
        Op::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                g.iter().zip(b.data()).map(|(gv, bv)| gv * bv).collect(),
                g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect(),
            ]
        }
        Op::AddN => inputs.iter().map(|_| g.to_vec()).collect(),
        Op::Scale(c) => vec![g.iter().map(|v| v * c).collect()],
        Op::ScaleBy => {
            let (x, s) = (inputs[0], inputs[1]);
            let c = s.item();
            vec![
                g.iter().map(|v| v * c).collect(),
                vec![g.iter().zip(x.data()).map(|(gv, xv)| gv * xv).sum()],
            ]
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            let gv = g[0];
            vec![
                b.data().iter().map(|v| gv * v).collect(),
                a.data().iter().map(|v| gv * v).collect(),
            ]
        }
        Op::Tanh => vec![g
            .iter()
            .zip(output.data())
            .map(|(gv, y)| gv * (1.0 - y * y))
            .collect()],
        Op::Sigmoid => vec![g
            .iter()
            .zip(output.data())
            .map(|(gv, y)| gv * y * (1.0 - y))
            .collect()],
        Op::Softmax => {
            let y = output.data();
            let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
            vec![y.iter().zip(g).map(|(yv, gv)| yv * (gv - dot)).collect()]
        }
        Op::Concat => {
            let mut out = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let len = t.numel();
                out.push(g[offset..offset + len].to_vec());
                offset += len;
            }
            out
        }
        Op::Embed(row) => {
            let table = inputs[0];
            let cols = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            dt[row * cols..(row + 1) * cols].copy_from_slice(g);
            vec![dt]
        }
        Op::PickLogSoftmax(k) => {
            let x = inputs[0];
            let p = softmax_stable(x.data());
            let gv = g[0];
            vec![p
                .iter()
                .enumerate()
                .map(|(i, &pi)| gv * (if i == *k { 1.0 } else { 0.0 } - pi))
                .collect()]
        }
        Op::Sum => vec![vec![g[0]; inputs[0].numel()]],
        Op::WeightedSum => {
            let alpha = inputs[0];
            let mut dalpha = vec![0.0; alpha.numel()];
            let mut out = Vec::with_capacity(inputs.len());
            for (t, da) in inputs[1..].iter().zip(dalpha.iter_mut()) {
                *da = g.iter().zip(t.data()).map(|(gv, tv)| gv * tv).sum();
            }
            out.push(dalpha);
            for (t, &a) in inputs[1..].iter().zip(alpha.data()) {
                let _ = t;
                out.push(g.iter().map(|gv| gv * a).collect());
            }
            out
        }
        Op::Dropout(mask) => vec![g.iter().zip(mask).map(|(gv, m)| gv * m).collect()],
    }
}
