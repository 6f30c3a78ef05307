use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MulConst(NodeId, Matrix),
    AddRowBroadcast(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    GatherRows(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Single-threaded computation graph for reverse-mode differentiation.
/// Nodes are appended in topological order; backward walks them in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op, value: Matrix) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        NodeId(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A leaf whose gradient the caller does not intend to read.
    pub fn constant(&self, value: Matrix) -> NodeId {
        self.leaf(value)
    }

    pub fn value(&self, id: NodeId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes.borrow()[id.0].value.shape()
    }

    fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, |x, y| x + y)))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, |x, y| x - y)))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, |x, y| x * y)))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, |x, y| x / y)))?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let v = self.with_value(a, |av| av.map(|x| x * c));
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&self, a: NodeId, c: &Matrix) -> Result<NodeId> {
        let v = self.with_value(a, |av| av.zip(c, |x, y| x + y))?;
        Ok(self.push(Op::AddConst(a), v))
    }

    pub fn add_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let v = self.with_value(a, |av| av.map(|x| x + c));
        self.push(Op::AddConst(a), v)
    }

    pub fn mul_const(&self, a: NodeId, c: &Matrix) -> Result<NodeId> {
        let v = self.with_value(a, |av| av.zip(c, |x, y| x * y))?;
        Ok(self.push(Op::MulConst(a, c.clone()), v))
    }

    /// a (n x m) + b (1 x m), b added to every row of a.
    pub fn add_row_broadcast(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| -> Result<Matrix> {
            self.with_value(b, |bv| {
                if bv.rows != 1 || bv.cols != av.cols {
                    return Err(Error::Shape(format!(
                        "add_row_broadcast {}x{} + {}x{}",
                        av.rows, av.cols, bv.rows, bv.cols
                    )));
                }
                Ok(Matrix::from_fn(av.rows, av.cols, |r, c| {
                    av.get(r, c) + bv.get(0, c)
                }))
            })
        })?;
        Ok(self.push(Op::AddRowBroadcast(a, b), v))
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.matmul(bv)))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// a * b^T.
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.matmul_nt(bv)))?;
        Ok(self.push(Op::MatMulNT(a, b), v))
    }

    pub fn softmax_rows(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| av.softmax_rows());
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log(&self, a: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| -> Result<Matrix> {
            if av.data.iter().any(|x| *x <= 0.0) {
                return Err(Error::Numeric("log of non-positive entry".into()));
            }
            Ok(av.map(f64::ln))
        })?;
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| av.map(f64::exp));
        self.push(Op::Exp(a), v)
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| av.map(f64::tanh));
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| av.map(|x| x.max(0.0)));
        self.push(Op::Relu(a), v)
    }

    pub fn abs(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| av.map(f64::abs));
        self.push(Op::Abs(a), v)
    }

    pub fn min(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, f64::min)))?;
        Ok(self.push(Op::Min(a, b), v))
    }

    pub fn max(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av.zip(bv, f64::max)))?;
        Ok(self.push(Op::Max(a, b), v))
    }

    pub fn sum(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| Matrix::scalar(av.sum()));
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| Matrix::scalar(av.sum() / av.data.len() as f64));
        self.push(Op::Mean(a), v)
    }

    /// m x n -> m x 1 (sum along each row).
    pub fn row_sum(&self, a: NodeId) -> NodeId {
        let v = self.with_value(a, |av| {
            Matrix::from_fn(av.rows, 1, |r, _| av.row(r).iter().sum())
        });
        self.push(Op::RowSum(a), v)
    }

    pub fn gather_rows(&self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.with_value(a, |av| -> Result<Matrix> {
            let mut out = Matrix::zeros(indices.len(), av.cols);
            for (r, idx) in indices.iter().enumerate() {
                if *idx >= av.rows {
                    return Err(Error::Shape(format!(
                        "gather_rows index {} out of {} rows",
                        idx, av.rows
                    )));
                }
                out.data[r * av.cols..(r + 1) * av.cols].copy_from_slice(av.row(*idx));
            }
            Ok(out)
        })?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), v))
    }

    /// Reverse pass from a scalar loss node. Returns adjoints for every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward expects a 1x1 loss, got {}x{}",
                loss_node.value.rows, loss_node.value.cols
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; nodes.len()];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
                match &mut adj[id.0] {
                    Some(m) => m.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            }
            let mut acc = |id: NodeId, delta: Matrix| accumulate(&mut adj, id, delta);
            match &node.op {
                // leaves keep their adjoint so callers can read it back
                Op::Leaf => acc(NodeId(i), g.clone()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&nodes[b.0].value, |x, y| x * y)?;
                    let db = g.zip(&nodes[a.0].value, |x, y| x * y)?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[b.0].value;
                    let av = &nodes[a.0].value;
                    let da = g.zip(bv, |x, y| x / y)?;
                    let db = Matrix::from_fn(g.rows, g.cols, |r, c| {
                        -g.get(r, c) * av.get(r, c) / (bv.get(r, c) * bv.get(r, c))
                    });
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
                Op::AddConst(a) => acc(*a, g.clone()),
                Op::MulConst(a, c) => acc(*a, g.zip(c, |x, y| x * y)?),
                Op::AddRowBroadcast(a, b) => {
                    acc(*a, g.clone());
                    let db = Matrix::from_fn(1, g.cols, |_, c| {
                        (0..g.rows).map(|r| g.get(r, c)).sum()
                    });
                    acc(*b, db);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&nodes[b.0].value)?;
                    let db = nodes[a.0].value.matmul_tn(&g)?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul(&nodes[b.0].value)?;
                    let db = g.matmul_tn(&nodes[a.0].value)?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, dx);
                }
                Op::Log(a) => acc(*a, g.zip(&nodes[a.0].value, |x, y| x / y)?),
                Op::Exp(a) => acc(*a, g.zip(&node.value, |x, y| x * y)?),
                Op::Tanh(a) => acc(*a, g.zip(&node.value, |x, y| x * (1.0 - y * y))?),
                Op::Relu(a) => {
                    acc(*a, g.zip(&nodes[a.0].value, |x, y| if y > 0.0 { x } else { 0.0 })?)
                }
                Op::Abs(a) => acc(
                    *a,
                    g.zip(&nodes[a.0].value, |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })?,
                ),
                Op::Min(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let da = Matrix::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) <= bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    let db = Matrix::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) > bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Max(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let da = Matrix::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) >= bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    let db = Matrix::from_fn(g.rows, g.cols, |r, c| {
                        if av.get(r, c) < bv.get(r, c) {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Sum(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    let s = g.as_scalar();
                    acc(*a, Matrix::from_fn(rows, cols, |_, _| s));
                }
                Op::Mean(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    let s = g.as_scalar() / (rows * cols) as f64;
                    acc(*a, Matrix::from_fn(rows, cols, |_, _| s));
                }
                Op::RowSum(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    acc(*a, Matrix::from_fn(rows, cols, |r, _| g.get(r, 0)));
                }
                Op::GatherRows(a, indices) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for (r, idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da.data[idx * cols + c] += g.get(r, c);
                        }
                    }
                    acc(*a, da);
                }
            }
        }

        Ok(Gradients { adjoints: adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to the given node; zero matrix if the node did
    /// not contribute to the loss.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Matrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = tape.shape(id);
                Matrix::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(a * b), d/da = ones * b^T
        let t = Tape::new();
        let a = t.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        let da = g.wrt(&t, a);
        // row sums of b
        assert_eq!(da.data, vec![11.0, 15.0, 11.0, 15.0]);
        let db = g.wrt(&t, b);
        // column sums of a
        assert_eq!(db.data, vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let t = Tape::new();
        let a = t.leaf(Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = t.gather_rows(a, &[2, 0, 2]).unwrap();
        let loss = t.sum(g);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.wrt(&t, a).data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_log_sum_is_shift_invariant_in_grad() {
        let t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![0.1, -0.4, 0.7]).unwrap());
        let s = t.softmax_rows(x);
        let ls = t.log(s).unwrap();
        let loss = t.sum(ls);
        let g = t.backward(loss).unwrap().wrt(&t, x);
        // gradient of sum(log softmax) sums to 0 per row
        assert!(g.data.iter().sum::<f64>().abs() < 1e-12);
    }
}
