//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation eagerly: each op computes its forward
//! value at creation time and remembers its parents, so `eval` is a lookup
//! and `grad` is a single reverse sweep. Two backward modes exist:
//!
//! * [`Tape::grad`] - plain reverse sweep producing gradient [`Tensor`]s.
//! * [`Tape::grad_vars`] - appends the adjoint computation to the tape
//!   itself, returning gradient [`Var`]s that later ops (e.g. a descent
//!   update) can consume. Because every backward rule is expressed in the
//!   same primitive op set, gradients of gradients come out of the ordinary
//!   sweep; this is what lets a matching loss differentiate through an
//!   unrolled run of gradient descent.
//!
//! Tapes are single-threaded; distinct tapes may live on distinct threads.

use std::cell::{Cell, RefCell};

use super::tensor::{matmul_raw, transpose_raw, NumError, Tensor};

/// Handle to a node on a tape. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Relu(usize),
    /// Heaviside step of the input; derivative is zero almost everywhere,
    /// which is exactly what differentiating a ReLU backward pass needs.
    Step(usize),
    Sum(usize),
    ColSum(usize),
    RepeatRow(usize, usize),
    /// Scalar broadcast to a full shape.
    Fill(usize),
    /// Contiguous row-major slice of the source, reshaped.
    View {
        src: usize,
        offset: usize,
    },
    /// Source placed at `offset` inside a zero tensor of the node's shape.
    Embed {
        src: usize,
        offset: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Operation tape; see the module docs.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    last_backward_visits: Cell<usize>,
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
            last_backward_visits: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes examined by the most recent `grad`/`grad_vars` sweep.
    pub fn last_backward_visits(&self) -> usize {
        self.last_backward_visits.get()
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Forward value of a node. With eager recording this is the cached
    /// result of the op; leaves return their bound tensor.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Scalar forward value; panics if the node is not scalar-shaped.
    pub fn value_item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.item()
    }

    /// Places a tensor on the tape as a differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Alias for [`Tape::leaf`] used for inputs nobody differentiates.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t)
    }

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (value, ok) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            if va.shape() != vb.shape() {
                return Err(NumError::ShapeMismatch {
                    op: op_name,
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(va.shape().to_vec(), data).expect("same shape"),
                true,
            )
        };
        debug_assert!(ok);
        Ok(self.push(op, value))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// Rank-2 matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            let (m, k) = va.dims2();
            let n = vb.dims2().1;
            Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n)).expect("matmul")
        };
        Ok(self.push(Op::MatMul(a.id, b.id), value))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            if va.shape().len() != 2 {
                return Err(NumError::InvalidShape {
                    shape: va.shape().to_vec(),
                    reason: "transpose needs rank 2".into(),
                });
            }
            let (r, c) = va.dims2();
            Tensor::new(vec![c, r], transpose_raw(va.data(), r, c)).expect("transpose")
        };
        Ok(self.push(Op::Transpose(a.id), value))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            Tensor::new(
                va.shape().to_vec(),
                va.data().iter().map(|&x| x * c).collect(),
            )
            .expect("scale")
        };
        self.push(Op::Scale(a.id, c), value)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            Tensor::new(
                va.shape().to_vec(),
                va.data().iter().map(|&x| x.max(0.0)).collect(),
            )
            .expect("relu")
        };
        self.push(Op::Relu(a.id), value)
    }

    pub fn step(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            Tensor::new(
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect(),
            )
            .expect("step")
        };
        self.push(Op::Step(a.id), value)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.id].value.data().iter().sum())
        };
        self.push(Op::Sum(a.id), value)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.id].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a rank-2 tensor: `(r, c) -> (c)`.
    pub fn col_sum(&self, a: Var) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            if va.shape().len() != 2 {
                return Err(NumError::InvalidShape {
                    shape: va.shape().to_vec(),
                    reason: "col_sum needs rank 2".into(),
                });
            }
            let (r, c) = va.dims2();
            let mut out = vec![0.0; c];
            for row in va.data().chunks(c).take(r) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(vec![c], out).expect("col_sum")
        };
        Ok(self.push(Op::ColSum(a.id), value))
    }

    /// Tiles a rank-1 tensor into `rows` identical rows: `(c) -> (rows, c)`.
    pub fn repeat_row(&self, a: Var, rows: usize) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            if va.shape().len() != 1 {
                return Err(NumError::InvalidShape {
                    shape: va.shape().to_vec(),
                    reason: "repeat_row needs rank 1".into(),
                });
            }
            let c = va.numel();
            let mut out = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                out.extend_from_slice(va.data());
            }
            Tensor::new(vec![rows, c], out).expect("repeat_row")
        };
        Ok(self.push(Op::RepeatRow(a.id, rows), value))
    }

    /// Broadcasts a scalar node to a full shape.
    pub fn fill(&self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            if !va.is_scalar() {
                return Err(NumError::InvalidShape {
                    shape: va.shape().to_vec(),
                    reason: "fill source must be scalar".into(),
                });
            }
            let numel: usize = shape.iter().product();
            Tensor::new(shape, vec![va.item(); numel])?
        };
        self.push(Op::Fill(a.id), value);
        Ok(Var { id: self.len() - 1 })
    }

    /// Contiguous row-major slice `[offset, offset + prod(shape))` of the
    /// source's data, reshaped to `shape`.
    pub fn view(&self, a: Var, offset: usize, shape: Vec<usize>) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            let len: usize = shape.iter().product();
            if offset + len > va.numel() {
                return Err(NumError::ViewOutOfBounds {
                    offset,
                    len,
                    source_len: va.numel(),
                });
            }
            Tensor::new(shape, va.data()[offset..offset + len].to_vec())?
        };
        Ok(self.push(Op::View { src: a.id, offset }, value))
    }

    /// Embeds the source's data at `offset` of a zero rank-1 tensor of
    /// length `total_len`. Adjoint of [`Tape::view`].
    pub fn embed(&self, a: Var, offset: usize, total_len: usize) -> Result<Var, NumError> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.id].value;
            if offset + va.numel() > total_len {
                return Err(NumError::ViewOutOfBounds {
                    offset,
                    len: va.numel(),
                    source_len: total_len,
                });
            }
            let mut out = vec![0.0; total_len];
            out[offset..offset + va.numel()].copy_from_slice(va.data());
            Tensor::new(vec![total_len], out)?
        };
        Ok(self.push(Op::Embed { src: a.id, offset }, value))
    }

    fn mark_ancestors(&self, root: Var) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut marked = vec![false; nodes.len()];
        marked[root.id] = true;
        for id in (0..=root.id).rev() {
            if !marked[id] {
                continue;
            }
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                    marked[*a] = true;
                    marked[*b] = true;
                }
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::Relu(a)
                | Op::Step(a)
                | Op::Sum(a)
                | Op::ColSum(a)
                | Op::RepeatRow(a, _)
                | Op::Fill(a)
                | Op::View { src: a, .. }
                | Op::Embed { src: a, .. } => marked[*a] = true,
            }
        }
        marked
    }

    /// Gradients of a scalar root with respect to the requested leaves.
    ///
    /// Unreachable leaves get zero gradients. Each node at or below the root
    /// is visited exactly once; nodes that do not feed the root receive no
    /// gradient work.
    pub fn grad(&self, root: Var, leaves: &[Var]) -> Result<Vec<Tensor>, NumError> {
        {
            let nodes = self.nodes.borrow();
            if !nodes[root.id].value.is_scalar() {
                return Err(NumError::NonScalarRoot {
                    shape: nodes[root.id].value.shape().to_vec(),
                });
            }
        }
        let marked = self.mark_ancestors(root);
        let wanted: std::collections::HashSet<usize> = leaves.iter().map(|l| l.id).collect();
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adj[root.id] = Some(vec![1.0]);
        let mut visits = 0usize;

        for id in (0..=root.id).rev() {
            visits += 1;
            if !marked[id] {
                continue;
            }
            // Adjoints of requested nodes survive the sweep; the rest are
            // dropped once propagated.
            let taken = if wanted.contains(&id) {
                adj[id].clone()
            } else {
                adj[id].take()
            };
            let Some(g) = taken else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, contribution: Vec<f64>| match &mut adj[target] {
                Some(buf) => {
                    for (o, v) in buf.iter_mut().zip(&contribution) {
                        *o += v;
                    }
                }
                slot @ None => *slot = Some(contribution),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, g.iter().zip(vb).map(|(gv, y)| gv * y).collect());
                    acc(*b, g.iter().zip(va).map(|(gv, x)| gv * x).collect());
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = va.dims2();
                    let n = vb.dims2().1;
                    // dA = g . B^T ; dB = A^T . g
                    let bt = transpose_raw(vb.data(), k, n);
                    acc(*a, matmul_raw(&g, &bt, m, n, k));
                    let at = transpose_raw(va.data(), m, k);
                    acc(*b, matmul_raw(&at, &g, k, m, n));
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[id].value.dims2();
                    acc(*a, transpose_raw(&g, r, c));
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Relu(a) => {
                    let va = nodes[*a].value.data();
                    acc(
                        *a,
                        g.iter()
                            .zip(va)
                            .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Step(_) => {}
                Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.numel()]),
                Op::ColSum(a) => {
                    let (r, c) = nodes[*a].value.dims2();
                    let mut out = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        out.extend_from_slice(&g[..c]);
                    }
                    acc(*a, out);
                }
                Op::RepeatRow(a, rows) => {
                    let c = nodes[*a].value.numel();
                    let mut out = vec![0.0; c];
                    for i in 0..*rows {
                        for j in 0..c {
                            out[j] += g[i * c + j];
                        }
                    }
                    acc(*a, out);
                }
                Op::Fill(a) => acc(*a, vec![g.iter().sum()]),
                Op::View { src, offset } => {
                    let total = nodes[*src].value.numel();
                    let mut out = vec![0.0; total];
                    out[*offset..*offset + g.len()].copy_from_slice(&g);
                    acc(*src, out);
                }
                Op::Embed { src, offset } => {
                    let len = nodes[*src].value.numel();
                    acc(*src, g[*offset..*offset + len].to_vec());
                }
            }
        }
        self.last_backward_visits.set(visits);

        Ok(leaves
            .iter()
            .map(|leaf| {
                let shape = nodes[leaf.id].value.shape().to_vec();
                match adj.get(leaf.id).and_then(|a| a.clone()) {
                    Some(data) => Tensor::new(shape, data).expect("adjoint shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    /// Like [`Tape::grad`], but records the adjoint computation on the tape
    /// so the returned gradients are themselves differentiable.
    pub fn grad_vars(&self, root: Var, leaves: &[Var]) -> Result<Vec<Var>, NumError> {
        {
            let nodes = self.nodes.borrow();
            if !nodes[root.id].value.is_scalar() {
                return Err(NumError::NonScalarRoot {
                    shape: nodes[root.id].value.shape().to_vec(),
                });
            }
        }
        let marked = self.mark_ancestors(root);
        let snapshot: Vec<Op> = {
            let nodes = self.nodes.borrow();
            nodes[..=root.id].iter().map(|n| n.op.clone()).collect()
        };
        let mut adj: Vec<Option<Var>> = vec![None; root.id + 1];
        adj[root.id] = Some(self.constant(Tensor::scalar(1.0)));
        let mut visits = 0usize;

        for id in (0..=root.id).rev() {
            visits += 1;
            if !marked[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let acc = |adj: &mut Vec<Option<Var>>, target: usize, c: Var| -> Result<(), NumError> {
                adj[target] = Some(match adj[target] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
                Ok(())
            };
            match &snapshot[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g)?;
                    acc(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g)?;
                    let neg = self.scale(g, -1.0);
                    acc(&mut adj, *b, neg)?;
                }
                Op::Mul(a, b) => {
                    let ca = self.mul(g, Var { id: *b })?;
                    acc(&mut adj, *a, ca)?;
                    let cb = self.mul(g, Var { id: *a })?;
                    acc(&mut adj, *b, cb)?;
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(Var { id: *b })?;
                    let ca = self.matmul(g, bt)?;
                    acc(&mut adj, *a, ca)?;
                    let at = self.transpose(Var { id: *a })?;
                    let cb = self.matmul(at, g)?;
                    acc(&mut adj, *b, cb)?;
                }
                Op::Transpose(a) => {
                    let c = self.transpose(g)?;
                    acc(&mut adj, *a, c)?;
                }
                Op::Scale(a, k) => {
                    let c = self.scale(g, *k);
                    acc(&mut adj, *a, c)?;
                }
                Op::Relu(a) => {
                    let gate = self.step(Var { id: *a });
                    let c = self.mul(g, gate)?;
                    acc(&mut adj, *a, c)?;
                }
                Op::Step(_) => {}
                Op::Sum(a) => {
                    let shape = self.shape_of(Var { id: *a });
                    let c = self.fill(g, shape)?;
                    acc(&mut adj, *a, c)?;
                }
                Op::ColSum(a) => {
                    let rows = self.shape_of(Var { id: *a })[0];
                    let c = self.repeat_row(g, rows)?;
                    acc(&mut adj, *a, c)?;
                }
                Op::RepeatRow(a, _) => {
                    let c = self.col_sum(g)?;
                    acc(&mut adj, *a, c)?;
                }
                Op::Fill(a) => {
                    let c = self.sum(g);
                    acc(&mut adj, *a, c)?;
                }
                Op::View { src, offset } => {
                    let total = self.shape_of(Var { id: *src }).iter().product();
                    let c = self.embed(g, *offset, total)?;
                    acc(&mut adj, *src, c)?;
                }
                Op::Embed { src, offset } => {
                    let shape = self.shape_of(Var { id: *src });
                    let c = self.view(g, *offset, shape)?;
                    acc(&mut adj, *src, c)?;
                }
            }
        }
        self.last_backward_visits.set(visits);

        leaves
            .iter()
            .map(|leaf| match adj.get(leaf.id).and_then(|a| *a) {
                Some(v) => Ok(v),
                None => {
                    let shape = self.shape_of(*leaf);
                    Ok(self.constant(Tensor::zeros(shape)))
                }
            })
            .collect()
    }
}
