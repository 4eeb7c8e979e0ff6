//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. Nodes can only
//! refer to earlier nodes, so creation order is a topological order and the
//! backward pass simply walks the node list in reverse.
//!
//! Binary elementwise ops broadcast their right operand when it is a scalar
//! or a vector matching the trailing dimension of the left operand.

use std::collections::BTreeMap;

use super::tensor::matmul_into;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{MdrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    Select(NodeId, Vec<usize>),
    RowNormalize(NodeId, Vec<f64>),
}

/// Coarse operation kinds, for structural inspection of a recorded graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Sqrt,
    Abs,
    Square,
    Sum,
    Mean,
    SumRows,
    Select,
    RowNormalize,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(_) => OpKind::Relu,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumRows(_) => OpKind::SumRows,
            Op::Select(..) => OpKind::Select,
            Op::RowNormalize(..) => OpKind::RowNormalize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the parameters recorded on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Smallest distance of any input to the kink of a relu/hinge or abs node.
    ///
    /// Gradient checks use this to skip instances where a central difference
    /// would straddle a non-differentiable point.
    pub fn min_kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Abs(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).numel() == 1 && sb.len() <= 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            Ok(Broadcast::Row)
        } else {
            Err(MdrError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn zip_with(
        &self,
        a: NodeId,
        b: NodeId,
        mode: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let rhs = vb.data();
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Broadcast::Same => rhs[i],
                    Broadcast::Scalar => rhs[0],
                    Broadcast::Row => rhs[i % cols],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast("add", a, b)?;
        let value = self.zip_with(a, b, mode, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b, mode)))
    }

    /// `a − b`, broadcasting `b` over `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast("sub", a, b)?;
        let value = self.zip_with(a, b, mode, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b, mode)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast("mul", a, b)?;
        let value = self.zip_with(a, b, mode, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b, mode)))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `max(x, 0)`; same primitive as [`Tape::relu`].
    pub fn hinge(&mut self, a: NodeId) -> NodeId {
        self.relu(a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mean = if v.numel() == 0 {
            0.0
        } else {
            v.sum() / v.numel() as f64
        };
        self.push(Tensor::scalar(mean), Op::Mean(a))
    }

    /// Sums each row of a matrix, producing a vector.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(MdrError::Shape {
                op: "sum_rows",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let value = Tensor::vector(v.row_iter().map(|r| r.iter().sum()).collect());
        Ok(self.push(value, Op::SumRows(a)))
    }

    /// Gathers entries (rank 1) or rows (rank 2) by index.
    pub fn select(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(MdrError::Shape {
                op: "select",
                left: vec![],
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(MdrError::Usage(format!(
                "select index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let value = v.select_rows(&idx);
        Ok(self.push(value, Op::Select(a, idx)))
    }

    /// Scales every row of a matrix to unit two-norm.
    ///
    /// Rows with norm below `eps` carry no direction; they are replaced by the
    /// constant unit vector `1/sqrt(D)` and receive no gradient.
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(MdrError::Shape {
                op: "row_normalize",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.numel());
        for row in v.row_iter() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < eps {
                log::warn!("row_normalize: row with norm {n:e} replaced by a constant unit vector");
                norms.push(0.0);
                data.extend(std::iter::repeat_n(1.0 / (cols as f64).sqrt(), cols));
            } else {
                norms.push(n);
                data.extend(row.iter().map(|x| x / n));
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RowNormalize(a, norms)))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Every parameter recorded on the tape gets an entry, zero when the loss
    /// does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(MdrError::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(MdrError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                if let Op::Param(pid) = node.op {
                    out.by_param
                        .entry(pid)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => match out.by_param.get_mut(pid) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.by_param.insert(*pid, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g.data(), vb.transpose().data(), &mut ga, n, m, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_into(va.transpose().data(), g.data(), &mut gb, k, n, m);
                    accumulate(&mut grads, *a, Tensor::new(vec![n, k], ga)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, m], gb)?);
                }
                Op::Add(a, b, mode) => {
                    let gb = reduce_broadcast(&g, self.value(*b), *mode);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b, mode) => {
                    let gb = reduce_broadcast(&g, self.value(*b), *mode).map(|x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b, mode) => {
                    let ga = self.zip_with_grad(&g, *b, *mode);
                    let gfull = elementwise(&g, self.value(*a), |g, x| g * x);
                    let gb = reduce_broadcast(&gfull, self.value(*b), *mode);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let ga = elementwise(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga =
                        elementwise(
                            &g,
                            &node.value,
                            |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 },
                        );
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::filled(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel().max(1) as f64;
                    let ga = Tensor::filled(self.value(*a).shape(), g.item() / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let va = self.value(*a);
                    let cols = va.cols();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, cols))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data)?);
                }
                Op::Select(a, idx) => {
                    let va = self.value(*a);
                    let cols = va.cols();
                    let mut ga = Tensor::zeros(va.shape());
                    let dst = ga.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dst[src * cols + c] += g.data()[r * cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, norms) => {
                    // d(x/|x|) = (I − y yᵀ) g / |x|
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = Tensor::zeros(y.shape());
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] = (gr[c] - dot * yr[c]) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }

    fn zip_with_grad(&self, g: &Tensor, b: NodeId, mode: Broadcast) -> Tensor {
        let rhs = self.value(b).data();
        let cols = g.cols();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| {
                gi * match mode {
                    Broadcast::Same => rhs[i],
                    Broadcast::Scalar => rhs[0],
                    Broadcast::Row => rhs[i % cols],
                }
            })
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| f(g, x))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
}

fn reduce_broadcast(g: &Tensor, target: &Tensor, mode: Broadcast) -> Tensor {
    match mode {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::filled(target.shape(), g.sum()),
        Broadcast::Row => {
            let cols = target.numel();
            let mut acc = vec![0.0; cols];
            for row in g.data().chunks(cols) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::vector(acc)
        }
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}
