//! Operation tape and backward rules.
//!
//! A [`Graph`] is an append-only tape: node ids are handed out in creation
//! order, ops may only consume existing ids, so index order is already a
//! topological order and backward is a single reverse sweep. Each backward
//! invocation propagates through a fresh set of pass buffers and then adds
//! the result into every node's persistent gradient, so calling backward
//! twice without zeroing doubles the stored gradients.

use super::{gelu_grad_scalar, gelu_scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a [m,k] | [B,m,k]` times `b [k,n]`.
    MatMul { a: NodeId, b: NodeId },
    /// Affine map along the last axis: `out[..,j] = sum_k w[j,k] x[..,k] + b[j]`.
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Per-(batch, channel) max over the token axis of a `[B,N,C]` tensor.
    /// `argmax[b*C+c]` records the winning token (first index on ties).
    ReduceMax { x: NodeId, argmax: Vec<usize> },
    ReduceMean { x: NodeId },
    /// `split` is the last-axis width of the first input.
    ConcatLast { a: NodeId, b: NodeId, split: usize },
    Gelu { x: NodeId },
    /// `[B,D] -> [B,N,D]`, every token slice a copy of the input row.
    BroadcastRows { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    SumAll { x: NodeId },
    /// Gather along the token axis; indices may repeat (backward scatter-adds).
    SelectTokens { x: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node is a grad-requiring leaf or depends on one.
    needs_grad: bool,
}

/// Reverse-mode tape over [`Tensor`] values.
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

    /// Registers a trainable leaf; gradients accumulate into it on backward.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t.with_requires_grad(true))
    }

    /// Registers a non-trainable leaf. Gradient still flows *through* ops that
    /// consume it whenever some other input requires grad.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t.with_requires_grad(false))
    }

    fn push_leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        if needs_grad {
            value.ensure_grad();
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Accumulated gradient of a node, if it is on a differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn finite_or(&self, data: &[f64], op: &'static str) -> Result<(), TensorError> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// `a [m,k] | [B,m,k]` times `b [k,n] -> [m,n] | [B,m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul rhs must be rank 2, got {bsh:?}"
            )));
        }
        let (batch, m, k) = match ash.as_slice() {
            [m, k] => (1, *m, *k),
            [bt, m, k] => (*bt, *m, *k),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul lhs must be rank 2 or 3, got {ash:?}"
                )))
            }
        };
        if bsh[0] != k {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims disagree: {ash:?} x {bsh:?}"
            )));
        }
        let n = bsh[1];
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bt in 0..batch {
            for i in 0..m {
                for kk in 0..k {
                    let x = av[(bt * m + i) * k + kk];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &bv[kk * n..(kk + 1) * n];
                    let dst = &mut out[(bt * m + i) * n..(bt * m + i + 1) * n];
                    for (d, w) in dst.iter_mut().zip(row) {
                        *d += x * w;
                    }
                }
            }
        }
        self.finite_or(&out, "matmul")?;
        let shape: Vec<usize> = if ash.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    /// `out[..,j] = sum_k w[j,k] x[..,k] + b[j]` with `x [r,k] | [B,r,k]`, `w [m,k]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let (xsh, wsh) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if wsh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "linear weight must be rank 2, got {wsh:?}"
            )));
        }
        let (m, k) = (wsh[0], wsh[1]);
        let rows: usize = match xsh.as_slice() {
            [_, kk] | [_, _, kk] if *kk == k => xsh[..xsh.len() - 1].iter().product(),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear input {xsh:?} does not match weight {wsh:?}"
                )))
            }
        };
        if let Some(bid) = b {
            if self.shape(bid) != [m] {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias must have shape [{m}], got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let xv = self.data(x);
        let wv = self.data(w);
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let xin = &xv[r * k..(r + 1) * k];
            for j in 0..m {
                let wrow = &wv[j * k..(j + 1) * k];
                out[r * m + j] = wrow.iter().zip(xin).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(bid) = b {
            let bv = self.data(bid);
            for r in 0..rows {
                for j in 0..m {
                    out[r * m + j] += bv[j];
                }
            }
        }
        self.finite_or(&out, "linear")?;
        let mut shape = xsh.clone();
        *shape.last_mut().unwrap() = m;
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|bid| self.needs(bid));
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Max over the token axis of `[B,N,C] -> [B,C]`; grad routes to the argmax.
    pub fn reduce_max(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (bsz, n, c) = self.rank3(x, "reduce_max")?;
        if n == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let xv = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; bsz * c];
        let mut argmax = vec![0usize; bsz * c];
        for b in 0..bsz {
            for nn in 0..n {
                for cc in 0..c {
                    let v = xv[(b * n + nn) * c + cc];
                    // strict > keeps the first index on ties
                    if v > out[b * c + cc] {
                        out[b * c + cc] = v;
                        argmax[b * c + cc] = nn;
                    }
                }
            }
        }
        self.finite_or(&out, "reduce_max")?;
        let value = Tensor::from_vec(&[bsz, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ReduceMax { x, argmax }, needs))
    }

    /// Arithmetic mean over the token axis of `[B,N,C] -> [B,C]`.
    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (bsz, n, c) = self.rank3(x, "reduce_mean")?;
        if n == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let xv = self.data(x);
        let mut out = vec![0.0; bsz * c];
        for b in 0..bsz {
            for nn in 0..n {
                for cc in 0..c {
                    out[b * c + cc] += xv[(b * n + nn) * c + cc];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.finite_or(&out, "reduce_mean")?;
        let value = Tensor::from_vec(&[bsz, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ReduceMean { x }, needs))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != bsh.len()
            || ash.is_empty()
            || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(TensorError::ShapeMismatch(format!(
                "concat_last leading shapes disagree: {ash:?} vs {bsh:?}"
            )));
        }
        let (p, q) = (*ash.last().unwrap(), *bsh.last().unwrap());
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = p + q;
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatLast { a, b, split: p }, needs))
    }

    /// Elementwise exact-CDF GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        self.finite_or(&out, "gelu")?;
        let value = Tensor::from_vec(&self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gelu { x }, needs))
    }

    /// `[B,D] -> [B,N,D]` by repeating each row `n` times.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let xsh = self.shape(x).to_vec();
        let [bsz, d] = xsh.as_slice() else {
            return Err(TensorError::ShapeMismatch(format!(
                "broadcast_rows expects rank 2, got {xsh:?}"
            )));
        };
        if n == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let (bsz, d) = (*bsz, *d);
        let xv = self.data(x);
        let mut out = Vec::with_capacity(bsz * n * d);
        for b in 0..bsz {
            for _ in 0..n {
                out.extend_from_slice(&xv[b * d..(b + 1) * d]);
            }
        }
        let value = Tensor::from_vec(&[bsz, n, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::BroadcastRows { x }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch(format!(
                "{name} needs equal shapes: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.finite_or(&out, name)?;
        let value = Tensor::from_vec(&self.shape(a).to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op(a, b), needs))
    }

    /// Multiplies every entry by a compile-time-known constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        self.finite_or(&out, "scale")?;
        let value = Tensor::from_vec(&self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Scale { x, factor }, needs))
    }

    /// Sum of every entry, as a shape-`[1]` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let total: f64 = self.data(x).iter().sum();
        self.finite_or(&[total], "sum_all")?;
        let value = Tensor::from_vec(&[1], vec![total])?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SumAll { x }, needs))
    }

    /// Gathers tokens `indices` from a `[B,N,C]` tensor into `[B,M,C]`.
    pub fn select_tokens(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (bsz, n, c) = self.rank3(x, "select_tokens")?;
        for &ix in indices {
            if ix >= n {
                return Err(TensorError::IndexOutOfBounds { index: ix, len: n });
            }
        }
        let xv = self.data(x);
        let m = indices.len();
        let mut out = Vec::with_capacity(bsz * m * c);
        for b in 0..bsz {
            for &ix in indices {
                out.extend_from_slice(&xv[(b * n + ix) * c..(b * n + ix + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[bsz, m, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::SelectTokens {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = Tensor::from_vec(shape, self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    fn rank3(&self, x: NodeId, op: &str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape(x) {
            [b, n, c] => Ok((*b, *n, *c)),
            other => Err(TensorError::ShapeMismatch(format!(
                "{op} expects a [B,N,C] tensor, got {other:?}"
            ))),
        }
    }

    /// Reverse sweep from a scalar root. Accumulates into persistent node
    /// gradients: a second call without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut pass: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        pass[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = pass[id].take() else { continue };
            self.propagate(id, &g, &mut pass);
            let node = &mut self.nodes[id];
            let store = node.value.ensure_grad();
            for (s, gi) in store.iter_mut().zip(&g) {
                *s += gi;
            }
        }
        Ok(())
    }

    /// Adds this node's pass gradient into its parents' pass buffers.
    fn propagate(&self, id: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let ensure = |pass: &mut [Option<Vec<f64>>], pid: NodeId, len: usize| {
            pass[pid.0].get_or_insert_with(|| vec![0.0; len]);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ash = self.shape(*a);
                let (batch, m, k) = match ash {
                    [m, k] => (1, *m, *k),
                    [bt, m, k] => (*bt, *m, *k),
                    _ => unreachable!(),
                };
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    ensure(pass, *a, batch * m * k);
                    let bv = self.data(*b);
                    let ga = pass[a.0].as_mut().unwrap();
                    for bt in 0..batch {
                        for i in 0..m {
                            for j in 0..n {
                                let go = g[(bt * m + i) * n + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    ga[(bt * m + i) * k + kk] += go * bv[kk * n + j];
                                }
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    ensure(pass, *b, k * n);
                    let av = self.data(*a);
                    let gb = pass[b.0].as_mut().unwrap();
                    for bt in 0..batch {
                        for i in 0..m {
                            for kk in 0..k {
                                let x = av[(bt * m + i) * k + kk];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[kk * n + j] += x * g[(bt * m + i) * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let wsh = self.shape(*w);
                let (m, k) = (wsh[0], wsh[1]);
                let rows = self.value(*x).numel() / k;
                if self.needs(*x) {
                    ensure(pass, *x, rows * k);
                    let wv = self.data(*w);
                    let gx = pass[x.0].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..m {
                            let go = g[r * m + j];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                gx[r * k + kk] += go * wv[j * k + kk];
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    ensure(pass, *w, m * k);
                    let xv = self.data(*x);
                    let gw = pass[w.0].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..m {
                            let go = g[r * m + j];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                gw[j * k + kk] += go * xv[r * k + kk];
                            }
                        }
                    }
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        ensure(pass, *bid, m);
                        let gb = pass[bid.0].as_mut().unwrap();
                        for r in 0..rows {
                            for j in 0..m {
                                gb[j] += g[r * m + j];
                            }
                        }
                    }
                }
            }
            Op::ReduceMax { x, argmax } => {
                if self.needs(*x) {
                    let [bsz, n, c] = self.shape(*x) else { unreachable!() };
                    let (bsz, n, c) = (*bsz, *n, *c);
                    ensure(pass, *x, bsz * n * c);
                    let gx = pass[x.0].as_mut().unwrap();
                    for b in 0..bsz {
                        for cc in 0..c {
                            let nn = argmax[b * c + cc];
                            gx[(b * n + nn) * c + cc] += g[b * c + cc];
                        }
                    }
                }
            }
            Op::ReduceMean { x } => {
                if self.needs(*x) {
                    let [bsz, n, c] = self.shape(*x) else { unreachable!() };
                    let (bsz, n, c) = (*bsz, *n, *c);
                    ensure(pass, *x, bsz * n * c);
                    let gx = pass[x.0].as_mut().unwrap();
                    let inv = 1.0 / n as f64;
                    for b in 0..bsz {
                        for nn in 0..n {
                            for cc in 0..c {
                                gx[(b * n + nn) * c + cc] += g[b * c + cc] * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatLast { a, b, split } => {
                let p = *split;
                let total = *self.shape_of_concat(id).last().unwrap();
                let q = total - p;
                let rows = g.len() / total;
                if self.needs(*a) {
                    ensure(pass, *a, rows * p);
                    let ga = pass[a.0].as_mut().unwrap();
                    for r in 0..rows {
                        for i in 0..p {
                            ga[r * p + i] += g[r * total + i];
                        }
                    }
                }
                if self.needs(*b) {
                    ensure(pass, *b, rows * q);
                    let gb = pass[b.0].as_mut().unwrap();
                    for r in 0..rows {
                        for i in 0..q {
                            gb[r * q + i] += g[r * total + p + i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    ensure(pass, *x, g.len());
                    let xv = self.data(*x);
                    let gx = pass[x.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                    }
                }
            }
            Op::BroadcastRows { x } => {
                if self.needs(*x) {
                    let [bsz, d] = self.shape(*x) else { unreachable!() };
                    let (bsz, d) = (*bsz, *d);
                    let n = g.len() / (bsz * d);
                    ensure(pass, *x, bsz * d);
                    let gx = pass[x.0].as_mut().unwrap();
                    for b in 0..bsz {
                        for nn in 0..n {
                            for dd in 0..d {
                                gx[b * d + dd] += g[(b * n + nn) * d + dd];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for pid in [a, b] {
                    if self.needs(*pid) {
                        ensure(pass, *pid, g.len());
                        let gp = pass[pid.0].as_mut().unwrap();
                        for (gi, go) in gp.iter_mut().zip(g) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    ensure(pass, *a, g.len());
                    let ga = pass[a.0].as_mut().unwrap();
                    for (gi, go) in ga.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
                if self.needs(*b) {
                    ensure(pass, *b, g.len());
                    let gb = pass[b.0].as_mut().unwrap();
                    for (gi, go) in gb.iter_mut().zip(g) {
                        *gi -= go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    ensure(pass, *a, g.len());
                    let bv = self.data(*b);
                    let ga = pass[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    ensure(pass, *b, g.len());
                    let av = self.data(*a);
                    let gb = pass[b.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    ensure(pass, *x, g.len());
                    let gx = pass[x.0].as_mut().unwrap();
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += go * factor;
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let len = self.value(*x).numel();
                    ensure(pass, *x, len);
                    let gx = pass[x.0].as_mut().unwrap();
                    for gi in gx.iter_mut() {
                        *gi += g[0];
                    }
                }
            }
            Op::SelectTokens { x, indices } => {
                if self.needs(*x) {
                    let [bsz, n, c] = self.shape(*x) else { unreachable!() };
                    let (bsz, n, c) = (*bsz, *n, *c);
                    ensure(pass, *x, bsz * n * c);
                    let gx = pass[x.0].as_mut().unwrap();
                    for b in 0..bsz {
                        for (m, &ix) in indices.iter().enumerate() {
                            for cc in 0..c {
                                gx[(b * n + ix) * c + cc] +=
                                    g[(b * indices.len() + m) * c + cc];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    ensure(pass, *x, g.len());
                    let gx = pass[x.0].as_mut().unwrap();
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
            }
        }
    }

    fn shape_of_concat(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reduce_max_takes_first_on_ties_and_routes_grad() {
        let mut g = Graph::new();
        // B=1, N=3, C=2; channel 0 ties at tokens 0 and 2.
        let x = g.param(t(&[1, 3, 2], &[5.0, 1.0, 2.0, 7.0, 5.0, 3.0]));
        let m = g.reduce_max(x).unwrap();
        assert_eq!(g.data(m), &[5.0, 7.0]);
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        // channel 0 grad goes to token 0 (first max), channel 1 to token 1
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_mean_constant_tokens() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 1], &[2.5, 2.5, 2.5, 2.5]));
        let m = g.reduce_mean(x).unwrap();
        assert_eq!(g.data(m), &[2.5]);
    }

    #[test]
    fn reduce_over_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 0, 2]).unwrap());
        assert!(matches!(g.reduce_max(x), Err(TensorError::EmptyAxis)));
        assert!(matches!(g.reduce_mean(x), Err(TensorError::EmptyAxis)));
    }

    #[test]
    fn concat_roundtrips_through_select() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 4], &[7.0; 8]));
        let cat = g.concat_last(a, b).unwrap();
        assert_eq!(g.shape(cat), &[2, 7]);
        assert_eq!(g.data(cat)[..3], [1.0, 2.0, 3.0]);
        assert_eq!(g.data(cat)[7..10], [4.0, 5.0, 6.0]);
    }

    #[test]
    fn broadcast_rows_copies_every_slice() {
        let mut g = Graph::new();
        let q = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.broadcast_rows(q, 3).unwrap();
        assert_eq!(g.shape(m), &[2, 3, 2]);
        for n in 0..3 {
            assert_eq!(g.value(m).at(&[0, n, 0]), 1.0);
            assert_eq!(g.value(m).at(&[1, n, 1]), 4.0);
        }
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[3.0, -1.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        let first: Vec<f64> = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let second: Vec<f64> = g.grad(x).unwrap().to_vec();
        assert_eq!(first, vec![6.0, -2.0]);
        assert_eq!(second, vec![12.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn gradient_flows_through_frozen_weights() {
        // x (param) -> linear with constant w -> sum; grad must reach x.
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let y = g.linear(x, w, None).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn select_tokens_gathers_and_scatter_adds() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 3, 1], &[10.0, 20.0, 30.0]));
        let y = g.select_tokens(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(y), &[30.0, 10.0, 30.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // token 2 selected twice -> grad 2
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn select_tokens_checks_bounds() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 1]).unwrap());
        assert!(matches!(
            g.select_tokens(x, &[3]),
            Err(TensorError::IndexOutOfBounds { index: 3, len: 3 })
        ));
    }

    #[test]
    fn overflowing_op_reports_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(
            g.mul(x, x),
            Err(TensorError::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn scale_by_one_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let y = g.scale(x, 1.0).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.25, -3.5]));
        let z = g.constant(Tensor::zeros(&[2]).unwrap());
        let y = g.add(x, z).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }
}
