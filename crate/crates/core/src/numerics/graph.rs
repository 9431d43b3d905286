use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Recorded operation. Inputs are node ids; values live on the node itself.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C[m,n] = A[m,k] · B[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// y[m] = M[m,n] · v[n]
    MatVec { m: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Elementwise (Hadamard) product.
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f32 },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    /// One row of a rank-2 table, as a rank-1 vector.
    Row { table: NodeId, index: usize },
    /// Contiguous sub-vector of a rank-1 node.
    Slice { a: NodeId, start: usize, len: usize },
    /// Concatenation of two rank-1 nodes.
    Concat { a: NodeId, b: NodeId },
    /// Scalar cosine similarity of two rank-1 nodes.
    Cosine { a: NodeId, b: NodeId },
    /// Scalar max(0, margin - pos + neg).
    Hinge { pos: NodeId, neg: NodeId, margin: f32 },
    /// Scalar mean of scalar nodes.
    Mean { terms: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// True when gradients must flow through this node (a `requires_grad`
    /// leaf or any op with a tracked input).
    tracked: bool,
    grad: Vec<f32>,
}

/// Append-only computation tape. Ops evaluate eagerly on record; `backward`
/// replays the tape in strict reverse append order, accumulating gradients
/// additively into every tracked node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Register a tensor as a leaf. Gradients are tracked iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let tracked = value.requires_grad();
        self.push(Op::Leaf, value, tracked)
    }

    /// Untracked rank-1 constant.
    pub fn constant(&mut self, data: Vec<f32>) -> NodeId {
        self.push(Op::Leaf, Tensor::vector(data), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a shape-[1] node.
    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient of the last `backward` call w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        let node = &self.nodes[id.0];
        if node.tracked && node.grad.len() == node.value.numel() {
            Some(&node.grad)
        } else {
            None
        }
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            tracked,
            grad: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    // ── Op constructors ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, ak) = self.value(a).dims2().ok_or_else(|| {
            Error::shape("matmul", format!("lhs must be rank 2, got {:?}", self.value(a).shape()))
        })?;
        let (bk, bn) = self.value(b).dims2().ok_or_else(|| {
            Error::shape("matmul", format!("rhs must be rank 2, got {:?}", self.value(b).shape()))
        })?;
        if ak != bk {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: [{am}x{ak}] vs [{bk}x{bn}]"),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; am * bn];
        for i in 0..am {
            for j in 0..bn {
                let mut acc = 0.0f64;
                for p in 0..ak {
                    acc += ad[i * ak + p] as f64 * bd[p * bn + j] as f64;
                }
                out[i * bn + j] = acc as f32;
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Op::Matmul { a, b },
            Tensor::from_parts(vec![am, bn], out),
            tracked,
        ))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).dims2().ok_or_else(|| {
            Error::shape("matvec", format!("matrix must be rank 2, got {:?}", self.value(m).shape()))
        })?;
        if self.value(v).rank() != 1 || self.value(v).numel() != cols {
            return Err(Error::shape(
                "matvec",
                format!("[{rows}x{cols}] · {:?}", self.value(v).shape()),
            ));
        }
        let (md, vd) = (self.value(m).data(), self.value(v).data());
        let mut out = vec![0.0f32; rows];
        for i in 0..rows {
            let row = &md[i * cols..(i + 1) * cols];
            let mut acc = 0.0f64;
            for (w, x) in row.iter().zip(vd) {
                acc += *w as f64 * *x as f64;
            }
            out[i] = acc as f32;
        }
        let tracked = self.tracked(m) || self.tracked(v);
        Ok(self.push(Op::MatVec { m, v }, Tensor::vector(out), tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, |g| Op::Add { a: g.0, b: g.1 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, |g| Op::Mul { a: g.0, b: g.1 })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: impl Fn((NodeId, NodeId)) -> Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(op((a, b)), Tensor::from_parts(shape, out), tracked))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Op::Scale { a, factor }, Tensor::from_parts(shape, out), tracked)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Op::Sigmoid { a }, Tensor::from_parts(shape, out), tracked)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Op::Tanh { a }, Tensor::from_parts(shape, out), tracked)
    }

    pub fn row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(table).dims2().ok_or_else(|| {
            Error::shape("row", format!("table must be rank 2, got {:?}", self.value(table).shape()))
        })?;
        if index >= rows {
            return Err(Error::shape("row", format!("row {index} of {rows}")));
        }
        let out = self.value(table).data()[index * cols..(index + 1) * cols].to_vec();
        let tracked = self.tracked(table);
        Ok(self.push(Op::Row { table, index }, Tensor::vector(out), tracked))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if self.value(a).rank() != 1 || start + len > self.value(a).numel() || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}..{}] of {:?}", start + len, self.value(a).shape()),
            ));
        }
        let out = self.value(a).data()[start..start + len].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Op::Slice { a, start, len }, Tensor::vector(out), tracked))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).rank() != 1 || self.value(b).rank() != 1 {
            return Err(Error::shape(
                "concat",
                format!("{:?} ++ {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Concat { a, b }, Tensor::vector(out), tracked))
    }

    /// Cosine similarity of two equal-length rank-1 nodes, as a scalar node.
    /// Errors if either vector has zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).rank() != 1 || self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (dot, na, nb) = cosine_parts(self.value(a).data(), self.value(b).data());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector);
        }
        let cos = (dot / (na * nb)) as f32;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Cosine { a, b }, Tensor::scalar(cos), tracked))
    }

    /// max(0, margin - pos + neg) over scalar similarity nodes.
    pub fn hinge(&mut self, pos: NodeId, neg: NodeId, margin: f32) -> Result<NodeId> {
        if self.value(pos).numel() != 1 || self.value(neg).numel() != 1 {
            return Err(Error::shape("hinge", "pos/neg must be scalars".to_string()));
        }
        if margin <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "hinge margin must be positive, got {margin}"
            )));
        }
        let value = (margin - self.scalar_value(pos) + self.scalar_value(neg)).max(0.0);
        let tracked = self.tracked(pos) || self.tracked(neg);
        Ok(self.push(Op::Hinge { pos, neg, margin }, Tensor::scalar(value), tracked))
    }

    /// Mean of scalar nodes, as a scalar node.
    pub fn mean(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::EmptyInput("mean over zero terms"));
        }
        let mut acc = 0.0f64;
        for &t in terms {
            if self.value(t).numel() != 1 {
                return Err(Error::shape("mean", "terms must be scalars".to_string()));
            }
            acc += self.scalar_value(t) as f64;
        }
        let value = (acc / terms.len() as f64) as f32;
        let tracked = terms.iter().any(|&t| self.tracked(t));
        Ok(self.push(
            Op::Mean {
                terms: terms.to_vec(),
            },
            Tensor::scalar(value),
            tracked,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Resets all gradients first, so
    /// repeated calls on the same graph are bit-identical.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        for node in &mut self.nodes {
            if node.tracked {
                node.grad.clear();
                node.grad.resize(node.value.numel(), 0.0);
            }
        }
        if !self.nodes[loss.0].tracked {
            // Constant loss: every gradient stays exactly zero.
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].tracked || self.nodes[idx].grad.is_empty() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => self.backward_matmul(idx, a, b),
                Op::MatVec { m, v } => self.backward_matvec(idx, m, v),
                Op::Add { a, b } => {
                    self.accumulate(a, idx, |up, _| up.to_vec());
                    self.accumulate(b, idx, |up, _| up.to_vec());
                }
                Op::Mul { a, b } => {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    self.accumulate(a, idx, |up, _| {
                        up.iter().zip(&bd).map(|(u, y)| u * y).collect()
                    });
                    let ad = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(b, idx, |up, _| {
                        up.iter().zip(&ad).map(|(u, x)| u * x).collect()
                    });
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, idx, |up, _| up.iter().map(|u| u * factor).collect());
                }
                Op::Sigmoid { a } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    self.accumulate(a, idx, |up, _| {
                        up.iter().zip(&y).map(|(u, s)| u * s * (1.0 - s)).collect()
                    });
                }
                Op::Tanh { a } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    self.accumulate(a, idx, |up, _| {
                        up.iter().zip(&y).map(|(u, t)| u * (1.0 - t * t)).collect()
                    });
                }
                Op::Row { table, index } => {
                    if self.tracked(table) {
                        let cols = self.nodes[idx].value.numel();
                        let up = self.nodes[idx].grad.clone();
                        let grad = &mut self.nodes[table.0].grad;
                        for (j, u) in up.iter().enumerate() {
                            grad[index * cols + j] += u;
                        }
                    }
                }
                Op::Slice { a, start, len } => {
                    if self.tracked(a) {
                        debug_assert_eq!(self.nodes[idx].value.numel(), len);
                        let up = self.nodes[idx].grad.clone();
                        let grad = &mut self.nodes[a.0].grad;
                        for (j, u) in up.iter().enumerate() {
                            grad[start + j] += u;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let split = self.nodes[a.0].value.numel();
                    self.accumulate(a, idx, |up, _| up[..split].to_vec());
                    self.accumulate(b, idx, |up, _| up[split..].to_vec());
                }
                Op::Cosine { a, b } => self.backward_cosine(idx, a, b),
                Op::Hinge { pos, neg, margin } => {
                    // Subgradient 0 at the kink: only propagate when the
                    // margin is strictly violated.
                    let active = margin - self.scalar_value(pos) + self.scalar_value(neg) > 0.0;
                    if active {
                        let up = self.nodes[idx].grad[0];
                        if self.tracked(pos) {
                            self.nodes[pos.0].grad[0] -= up;
                        }
                        if self.tracked(neg) {
                            self.nodes[neg.0].grad[0] += up;
                        }
                    }
                }
                Op::Mean { terms } => {
                    let share = self.nodes[idx].grad[0] / terms.len() as f32;
                    for t in terms {
                        if self.tracked(t) {
                            self.nodes[t.0].grad[0] += share;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, from: usize, f: impl Fn(&[f32], &Tensor) -> Vec<f32>) {
        if !self.tracked(target) {
            return;
        }
        let contribution = f(&self.nodes[from].grad, &self.nodes[target.0].value);
        let grad = &mut self.nodes[target.0].grad;
        debug_assert_eq!(grad.len(), contribution.len());
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn backward_matmul(&mut self, idx: usize, a: NodeId, b: NodeId) {
        let (m, k) = self.nodes[a.0].value.dims2().unwrap();
        let (_, n) = self.nodes[b.0].value.dims2().unwrap();
        let up = self.nodes[idx].grad.clone();
        if self.tracked(a) {
            let bd = self.nodes[b.0].value.data().to_vec();
            let grad = &mut self.nodes[a.0].grad;
            // dA = dC · B^T
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += up[i * n + j] as f64 * bd[p * n + j] as f64;
                    }
                    grad[i * k + p] += acc as f32;
                }
            }
        }
        if self.tracked(b) {
            let ad = self.nodes[a.0].value.data().to_vec();
            let grad = &mut self.nodes[b.0].grad;
            // dB = A^T · dC
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i in 0..m {
                        acc += ad[i * k + p] as f64 * up[i * n + j] as f64;
                    }
                    grad[p * n + j] += acc as f32;
                }
            }
        }
    }

    fn backward_matvec(&mut self, idx: usize, m: NodeId, v: NodeId) {
        let (rows, cols) = self.nodes[m.0].value.dims2().unwrap();
        let up = self.nodes[idx].grad.clone();
        if self.tracked(m) {
            let vd = self.nodes[v.0].value.data().to_vec();
            let grad = &mut self.nodes[m.0].grad;
            for i in 0..rows {
                let u = up[i];
                if u != 0.0 {
                    for j in 0..cols {
                        grad[i * cols + j] += u * vd[j];
                    }
                }
            }
        }
        if self.tracked(v) {
            let md = self.nodes[m.0].value.data().to_vec();
            let grad = &mut self.nodes[v.0].grad;
            for j in 0..cols {
                let mut acc = 0.0f64;
                for i in 0..rows {
                    acc += up[i] as f64 * md[i * cols + j] as f64;
                }
                grad[j] += acc as f32;
            }
        }
    }

    fn backward_cosine(&mut self, idx: usize, a: NodeId, b: NodeId) {
        let up = self.nodes[idx].grad[0] as f64;
        let ad: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| *x as f64).collect();
        let bd: Vec<f64> = self.nodes[b.0].value.data().iter().map(|x| *x as f64).collect();
        let (dot, na, nb) = cosine_parts(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let cos = dot / (na * nb);
        if self.tracked(a) {
            let grad = &mut self.nodes[a.0].grad;
            for i in 0..ad.len() {
                grad[i] += (up * (bd[i] / (na * nb) - cos * ad[i] / (na * na))) as f32;
            }
        }
        if self.tracked(b) {
            let grad = &mut self.nodes[b.0].grad;
            for i in 0..bd.len() {
                grad[i] += (up * (ad[i] / (na * nb) - cos * bd[i] / (nb * nb))) as f32;
            }
        }
    }

    /// Error if any node value or gradient is non-finite.
    pub fn assert_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::NonFinite(format!("node {i} value")));
            }
            if !node.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("node {i} gradient")));
            }
        }
        Ok(())
    }
}

/// (dot, |a|, |b|) accumulated in f64.
pub(crate) fn cosine_parts(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na2 = 0.0f64;
    let mut nb2 = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na2 += *x as f64 * *x as f64;
        nb2 += *y as f64 * *y as f64;
    }
    (dot, na2.sqrt(), nb2.sqrt())
}

/// Weight node ids for one LSTM direction: `w_x` is [4h x d_in], `w_h` is
/// [4h x h], `bias` is [4h]. Gate blocks are ordered input, forget, cell
/// candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellWeights {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
}

/// One LSTM step: returns (h, c).
///
/// gates = w_x·x + w_h·h_prev + bias;
/// c = sigmoid(f)·c_prev + sigmoid(i)·tanh(g); h = sigmoid(o)·tanh(c).
pub fn lstm_cell(
    g: &mut Graph,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    w: &LstmCellWeights,
) -> Result<(NodeId, NodeId)> {
    let (rows, _) = g
        .value(w.w_x)
        .dims2()
        .ok_or_else(|| Error::shape("lstm_cell", "w_x must be rank 2".to_string()))?;
    if rows % 4 != 0 {
        return Err(Error::shape(
            "lstm_cell",
            format!("gate matrix rows must be 4*h, got {rows}"),
        ));
    }
    let hidden = rows / 4;
    if g.value(h_prev).numel() != hidden || g.value(c_prev).numel() != hidden {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "state dims {:?}/{:?} incompatible with hidden size {hidden}",
                g.value(h_prev).shape(),
                g.value(c_prev).shape()
            ),
        ));
    }

    let from_x = g.matvec(w.w_x, x)?;
    let from_h = g.matvec(w.w_h, h_prev)?;
    let pre = g.add(from_x, from_h)?;
    let gates = g.add(pre, w.bias)?;

    let i_gate = g.slice(gates, 0, hidden)?;
    let f_gate = g.slice(gates, hidden, hidden)?;
    let g_cand = g.slice(gates, 2 * hidden, hidden)?;
    let o_gate = g.slice(gates, 3 * hidden, hidden)?;

    let i_act = g.sigmoid(i_gate);
    let f_act = g.sigmoid(f_gate);
    let g_act = g.tanh(g_cand);
    let o_act = g.sigmoid(o_gate);

    let keep = g.mul(f_act, c_prev)?;
    let write = g.mul(i_act, g_act)?;
    let c = g.add(keep, write)?;
    let c_tanh = g.tanh(c);
    let h = g.mul(o_act, c_tanh)?;
    Ok((h, c))
}
