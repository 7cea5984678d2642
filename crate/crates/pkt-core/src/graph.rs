//! Recording tape for reverse-mode gradients over [`Array`] values.
//!
//! A `Graph` records every operation in execution order; `backward` walks
//! the record in reverse and accumulates gradients into the nodes that can
//! reach a trainable parameter. Nodes created with [`Graph::constant`]
//! never receive gradient, which is how frozen backbone weights stay
//! untouched while prefix parameters train.

use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Array};
use crate::{PktError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// A @ B^T with B stored row-major as [n, k].
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [m,n] plus a length-n bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Weighted mean of per-row cross-entropy against integer targets.
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Array,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Operation tape. One graph per logical training step; graphs are not
/// shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that never receives gradient (inputs, frozen weights, masks).
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf. `backward` populates its gradient slot.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after `backward`. Zero for any node the loss does
    /// not reach, including all constants.
    pub fn grad(&self, id: NodeId) -> Array {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Array::new(node.value.shape().to_vec(), g.clone()).unwrap(),
            None => Array::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn shape_err(op: &'static str, a: &Array, b: &Array) -> PktError {
        PktError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Self::shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, av, bv, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(vec![m, n], out)?,
            needs,
            Op::Matmul(a, b),
        ))
    }

    /// A @ B^T where B is stored as [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Self::shape_err("matmul_nt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_into(&mut out, av, bv, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(vec![m, n], out)?,
            needs,
            Op::MatmulNt(a, b),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("add", av, bv));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(av.shape().to_vec(), data)?,
            needs,
            Op::Add(a, b),
        ))
    }

    /// [m,n] + bias[n], broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape().len() != 1 || bv.cols() != av.cols() {
            return Err(Self::shape_err("add_bias", av, bv));
        }
        let n = av.cols();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % n])
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Array::new(av.shape().to_vec(), data)?,
            needs,
            Op::AddBias(a, bias),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("mul", av, bv));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(av.shape().to_vec(), data)?,
            needs,
            Op::Mul(a, b),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|x| x * c).collect();
        let arr = Array::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(arr, needs, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|x| x.tanh()).collect();
        let arr = Array::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(arr, needs, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|&x| gelu(x)).collect();
        let arr = Array::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(arr, needs, Op::Gelu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&av.data()[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let arr = Array::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(arr, needs, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with affine gain/bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(Self::shape_err("layer_norm", xv, gv));
        }
        let m = xv.rows();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mean, istd) = row_stats(row);
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * istd * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Array::new(xv.shape().to_vec(), data)?,
            needs,
            Op::LayerNormRows { x, gain, bias },
        ))
    }

    /// Gather rows of `table` by id. Gradient scatter-adds into the table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (rows, dim) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(PktError::Shape {
                op: "embedding",
                detail: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        if ids.is_empty() {
            return Err(PktError::Shape {
                op: "embedding",
                detail: "empty id list".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Array::new(vec![ids.len(), dim], data)?,
            needs,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > n || len == 0 {
            return Err(PktError::Shape {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {n} cols", start + len),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Array::new(vec![m, len], data)?,
            needs,
            Op::SliceCols { x, start, len },
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Self::shape_err("concat_rows", av, bv));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let shape = vec![av.rows() + bv.rows(), av.cols()];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, data)?, needs, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Self::shape_err("concat_cols", av, bv));
        }
        let (m, na, nb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * na..(i + 1) * na]);
            data.extend_from_slice(&bv.data()[i * nb..(i + 1) * nb]);
        }
        let shape = vec![m, na + nb];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, data)?, needs, Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(total), needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let total: f64 = av.data().iter().sum();
        let val = total / av.len() as f64;
        let needs = self.needs(a);
        self.push(Array::scalar(val), needs, Op::Mean(a))
    }

    /// Mean weighted cross-entropy of rows of `logits` against `targets`.
    /// Weight 0 removes a position from the loss entirely.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        if targets.len() != m || weights.len() != m {
            return Err(PktError::Shape {
                op: "cross_entropy",
                detail: format!("{m} rows vs {} targets / {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(PktError::Shape {
                op: "cross_entropy",
                detail: format!("target {bad} out of range for {n} classes"),
            });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(PktError::Data("cross_entropy: no weighted positions".into()));
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; n];
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            softmax_row(&lv.data()[i * n..(i + 1) * n], &mut probs);
            total += weights[i] * -(probs[targets[i]].ln());
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Array::scalar(total / wsum),
            needs,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean of scalar nodes, folded left to right.
    pub fn mean_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(PktError::Data("mean_scalars: empty list".into()));
        }
        let mut acc = items[0];
        for &item in &items[1..] {
            acc = self.add(acc, item)?;
        }
        Ok(self.scale(acc, 1.0 / items.len() as f64))
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn take_grad(&self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].grad.clone()
    }

    /// Reverse pass from a scalar loss node. Gradient slots are reset
    /// first, so repeated calls reproduce identical gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(PktError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        self.zero_grads();
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = self.take_grad(NodeId(idx)) else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_op(NodeId(idx), &op, &out_grad)?;
        }
        Ok(())
    }

    fn backprop_op(&mut self, out: NodeId, op: &Op, og: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.needs(a) {
                    // dA = dC @ B^T
                    let og_arr = Array::new(vec![m, n], og.to_vec())?;
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(&mut da, &og_arr, self.value(b), m, n, k);
                    add_into(self.grad_buf(a), &da);
                }
                if self.needs(b) {
                    // dB = A^T @ dC
                    let a_data = self.value(a).data().to_vec();
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(&mut db, &a_data, og, k, m, n);
                    add_into(self.grad_buf(b), &db);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                if self.needs(a) {
                    // dA = dC @ B
                    let og_arr = Array::new(vec![m, n], og.to_vec())?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(&mut da, &og_arr, self.value(b), m, n, k);
                    add_into(self.grad_buf(a), &da);
                }
                if self.needs(b) {
                    // dB = dC^T @ A
                    let a_data = self.value(a).data().to_vec();
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(&mut db, og, &a_data, n, m, k);
                    add_into(self.grad_buf(b), &db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    add_into(self.grad_buf(a), og);
                }
                if self.needs(b) {
                    add_into(self.grad_buf(b), og);
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(a) {
                    add_into(self.grad_buf(a), og);
                }
                if self.needs(bias) {
                    let n = self.value(bias).len();
                    let buf = self.grad_buf(bias);
                    for (i, &g) in og.iter().enumerate() {
                        buf[i % n] += g;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bdata = self.value(b).data().to_vec();
                    let buf = self.grad_buf(a);
                    for i in 0..og.len() {
                        buf[i] += og[i] * bdata[i];
                    }
                }
                if self.needs(b) {
                    let adata = self.value(a).data().to_vec();
                    let buf = self.grad_buf(b);
                    for i in 0..og.len() {
                        buf[i] += og[i] * adata[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for i in 0..og.len() {
                        buf[i] += og[i] * c;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(a) {
                    let y = self.nodes[out.0].value.data().to_vec();
                    let buf = self.grad_buf(a);
                    for i in 0..og.len() {
                        buf[i] += og[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(a) {
                    let x = self.value(a).data().to_vec();
                    let buf = self.grad_buf(a);
                    for i in 0..og.len() {
                        buf[i] += og[i] * gelu_deriv(x[i]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    let y = self.nodes[out.0].value.clone();
                    let (m, n) = (y.rows(), y.cols());
                    let buf = self.grad_buf(a);
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &og[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            buf[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = self.value(x).clone();
                let gv = self.value(gain).clone();
                let (m, n) = (xv.rows(), xv.cols());
                for i in 0..m {
                    let row = &xv.data()[i * n..(i + 1) * n];
                    let (mean, istd) = row_stats(row);
                    let gr = &og[i * n..(i + 1) * n];
                    if self.needs(bias) {
                        let buf = self.grad_buf(bias);
                        for j in 0..n {
                            buf[j] += gr[j];
                        }
                    }
                    if self.needs(gain) {
                        let buf = self.grad_buf(gain);
                        for j in 0..n {
                            buf[j] += gr[j] * (row[j] - mean) * istd;
                        }
                    }
                    if self.needs(x) {
                        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv.data()[j];
                        }
                        let mean_dx: f64 = dxhat.iter().sum::<f64>() / n as f64;
                        let mut mean_dxx = 0.0;
                        for j in 0..n {
                            mean_dxx += dxhat[j] * (row[j] - mean) * istd;
                        }
                        mean_dxx /= n as f64;
                        let buf = self.grad_buf(x);
                        for j in 0..n {
                            let xhat = (row[j] - mean) * istd;
                            buf[i * n + j] += istd * (dxhat[j] - mean_dx - xhat * mean_dxx);
                        }
                    }
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.needs(table) {
                    let dim = self.value(table).cols();
                    let buf = self.grad_buf(table);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            buf[id * dim + j] += og[row * dim + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(x) {
                    let n = self.value(x).cols();
                    let m = self.value(x).rows();
                    let buf = self.grad_buf(x);
                    for i in 0..m {
                        for j in 0..len {
                            buf[i * n + start + j] += og[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let alen = self.value(a).len();
                if self.needs(a) {
                    add_into(self.grad_buf(a), &og[..alen]);
                }
                if self.needs(b) {
                    add_into(self.grad_buf(b), &og[alen..]);
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = (self.value(a).rows(), self.value(a).cols());
                let nb = self.value(b).cols();
                let stride = na + nb;
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for i in 0..m {
                        for j in 0..na {
                            buf[i * na + j] += og[i * stride + j];
                        }
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for i in 0..m {
                        for j in 0..nb {
                            buf[i * nb + j] += og[i * stride + na + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let g = og[0];
                    let buf = self.grad_buf(a);
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let g = og[0] / self.value(a).len() as f64;
                    let buf = self.grad_buf(a);
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                ref targets,
                ref weights,
            } => {
                if self.needs(logits) {
                    let lv = self.value(logits).clone();
                    let (m, n) = (lv.rows(), lv.cols());
                    let wsum: f64 = weights.iter().sum();
                    let upstream = og[0];
                    let mut probs = vec![0.0; n];
                    let buf = self.grad_buf(logits);
                    for i in 0..m {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        softmax_row(&lv.data()[i * n..(i + 1) * n], &mut probs);
                        let scale = upstream * weights[i] / wsum;
                        for j in 0..n {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            buf[i * n + j] += scale * (probs[j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    debug_assert_eq!(buf.len(), src.len());
    for (b, &s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max relative error between analytic gradients of `build`'s scalar output
/// and central finite differences, over every element of every parameter.
///
/// `build` must construct the same function each call from the parameter
/// arrays it is given; the analytic side records one graph and runs
/// `backward`, the numeric side re-evaluates the loss at `p ± h`.
pub fn grad_check<F>(build: F, params: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(PktError::Config(format!("grad_check: h must be positive, got {h}")));
    }
    let eval = |ps: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).scalar_value();
        if !v.is_finite() {
            return Err(PktError::Numeric(format!("non-finite loss {v} at perturbed point")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Array> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work).map_err(|e| {
                PktError::Numeric(format!("param {pi} element {ei} (+h): {e}"))
            })?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work).map_err(|e| {
                PktError::Numeric(format!("param {pi} element {ei} (-h): {e}"))
            })?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
