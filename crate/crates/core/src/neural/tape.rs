//! Reverse-mode gradient tape over vector-valued nodes.
//!
//! Nodes hold `Vec<f64>` values; scalars are length-1 vectors. Operations are
//! recorded during the forward pass and adjoints are propagated in reverse.
//! Registering the same [`ParamId`] twice returns the same leaf, so a shared
//! parameter used on every edge of a graph accumulates one gradient.

use std::collections::HashMap;

use super::math;
use super::NeuralError;

/// Reference to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef(usize);

/// Stable identity of a trainable parameter tensor across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    Const,
    Param,
    MatVec { w: usize, x: usize, rows: usize, cols: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Scalar node `s` times vector node `v`.
    Scale { s: usize, v: usize },
    /// Vector node `v` divided by scalar node `s`.
    DivScalar { v: usize, s: usize },
    Concat(Vec<usize>),
    Sum(usize),
    Dot(usize, usize),
    LeakyRelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), needs_grad: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, node: NodeRef) -> &[f64] {
        &self.values[node.0]
    }

    pub fn scalar_value(&self, node: NodeRef) -> f64 {
        debug_assert_eq!(self.values[node.0].len(), 1);
        self.values[node.0][0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> NodeRef {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        NodeRef(self.ops.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeRef {
        self.push(Op::Const, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeRef {
        self.constant(vec![value])
    }

    /// Register a trainable leaf; repeated registration of the same id
    /// returns the existing node.
    pub fn param(&mut self, id: ParamId, values: &[f64]) -> NodeRef {
        if let Some(&idx) = self.params.get(&id) {
            debug_assert_eq!(self.values[idx].len(), values.len());
            return NodeRef(idx);
        }
        let node = self.push(Op::Param, values.to_vec(), true);
        self.params.insert(id, node.0);
        node
    }

    pub fn matvec(&mut self, w: NodeRef, x: NodeRef, rows: usize, cols: usize) -> NodeRef {
        assert_eq!(self.values[w.0].len(), rows * cols, "weight size");
        assert_eq!(self.values[x.0].len(), cols, "input size");
        let value = math::matvec(&self.values[w.0], &self.values[x.0], rows, cols);
        let ng = self.needs_grad[w.0] || self.needs_grad[x.0];
        self.push(Op::MatVec { w: w.0, x: x.0, rows, cols }, value, ng)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeRef,
        b: NodeRef,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> NodeRef {
        assert_eq!(self.values[a.0].len(), self.values[b.0].len(), "length mismatch");
        let value =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(op(a.0, b.0), value, ng)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elementwise(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elementwise(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elementwise(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, s: NodeRef, v: NodeRef) -> NodeRef {
        assert_eq!(self.values[s.0].len(), 1, "scale factor must be scalar");
        let sv = self.values[s.0][0];
        let value = self.values[v.0].iter().map(|x| sv * x).collect();
        let ng = self.needs_grad[s.0] || self.needs_grad[v.0];
        self.push(Op::Scale { s: s.0, v: v.0 }, value, ng)
    }

    pub fn div_scalar(&mut self, v: NodeRef, s: NodeRef) -> NodeRef {
        assert_eq!(self.values[s.0].len(), 1, "divisor must be scalar");
        let sv = self.values[s.0][0];
        let value = self.values[v.0].iter().map(|x| x / sv).collect();
        let ng = self.needs_grad[s.0] || self.needs_grad[v.0];
        self.push(Op::DivScalar { v: v.0, s: s.0 }, value, ng)
    }

    pub fn concat(&mut self, parts: &[NodeRef]) -> NodeRef {
        let mut value = Vec::new();
        let mut ng = false;
        for p in parts {
            value.extend_from_slice(&self.values[p.0]);
            ng |= self.needs_grad[p.0];
        }
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), value, ng)
    }

    pub fn sum(&mut self, v: NodeRef) -> NodeRef {
        let value = vec![self.values[v.0].iter().sum()];
        let ng = self.needs_grad[v.0];
        self.push(Op::Sum(v.0), value, ng)
    }

    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        assert_eq!(self.values[a.0].len(), self.values[b.0].len(), "length mismatch");
        let value =
            vec![self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x * y).sum()];
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Op::Dot(a.0, b.0), value, ng)
    }

    fn unary_elementwise(&mut self, x: NodeRef, op: fn(usize) -> Op, f: fn(f64) -> f64) -> NodeRef {
        let value = self.values[x.0].iter().map(|v| f(*v)).collect();
        let ng = self.needs_grad[x.0];
        self.push(op(x.0), value, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeRef) -> NodeRef {
        self.unary_elementwise(x, Op::LeakyRelu, math::leaky_relu)
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        self.unary_elementwise(x, Op::Relu, math::relu)
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        self.unary_elementwise(x, Op::Sigmoid, math::sigmoid)
    }

    pub fn softplus(&mut self, x: NodeRef) -> NodeRef {
        self.unary_elementwise(x, Op::Softplus, math::softplus)
    }

    /// Propagate adjoints from a scalar loss back to every parameter leaf.
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients, NeuralError> {
        if self.values[loss.0].len() != 1 {
            return Err(NeuralError::NotScalarLoss);
        }
        let mut adjoints: Vec<Vec<f64>> = vec![Vec::new(); self.ops.len()];
        adjoints[loss.0] = vec![1.0];

        fn acc(adjoints: &mut [Vec<f64>], idx: usize, len: usize) -> &mut Vec<f64> {
            if adjoints[idx].is_empty() {
                adjoints[idx] = vec![0.0; len];
            }
            &mut adjoints[idx]
        }

        for i in (0..=loss.0).rev() {
            if adjoints[i].is_empty() || !self.needs_grad[i] {
                continue;
            }
            let g = std::mem::take(&mut adjoints[i]);
            match &self.ops[i] {
                Op::Const | Op::Param => {
                    adjoints[i] = g; // keep leaf adjoints for extraction
                    continue;
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = &self.values[*x];
                    if self.needs_grad[*w] {
                        let gw = acc(&mut adjoints, *w, rows * cols);
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for c in 0..*cols {
                                    gw[r * cols + c] += gr * xv[c];
                                }
                            }
                        }
                    }
                    if self.needs_grad[*x] {
                        let wv = &self.values[*w];
                        let gx = acc(&mut adjoints, *x, *cols);
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for c in 0..*cols {
                                    gx[c] += gr * wv[r * cols + c];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad[*a] {
                        let ga = acc(&mut adjoints, *a, g.len());
                        for (d, s) in ga.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if self.needs_grad[*b] {
                        let gb = acc(&mut adjoints, *b, g.len());
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad[*a] {
                        let ga = acc(&mut adjoints, *a, g.len());
                        for (d, s) in ga.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if self.needs_grad[*b] {
                        let gb = acc(&mut adjoints, *b, g.len());
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad[*a] {
                        let bv = self.values[*b].clone();
                        let ga = acc(&mut adjoints, *a, g.len());
                        for ((d, s), v) in ga.iter_mut().zip(&g).zip(&bv) {
                            *d += s * v;
                        }
                    }
                    if self.needs_grad[*b] {
                        let av = self.values[*a].clone();
                        let gb = acc(&mut adjoints, *b, g.len());
                        for ((d, s), v) in gb.iter_mut().zip(&g).zip(&av) {
                            *d += s * v;
                        }
                    }
                }
                Op::Scale { s, v } => {
                    let sv = self.values[*s][0];
                    if self.needs_grad[*s] {
                        let contrib: f64 =
                            g.iter().zip(&self.values[*v]).map(|(gi, vi)| gi * vi).sum();
                        acc(&mut adjoints, *s, 1)[0] += contrib;
                    }
                    if self.needs_grad[*v] {
                        let gv = acc(&mut adjoints, *v, g.len());
                        for (d, gi) in gv.iter_mut().zip(&g) {
                            *d += gi * sv;
                        }
                    }
                }
                Op::DivScalar { v, s } => {
                    let sv = self.values[*s][0];
                    if self.needs_grad[*v] {
                        let gv = acc(&mut adjoints, *v, g.len());
                        for (d, gi) in gv.iter_mut().zip(&g) {
                            *d += gi / sv;
                        }
                    }
                    if self.needs_grad[*s] {
                        let contrib: f64 = g
                            .iter()
                            .zip(&self.values[*v])
                            .map(|(gi, vi)| -gi * vi / (sv * sv))
                            .sum();
                        acc(&mut adjoints, *s, 1)[0] += contrib;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.values[*p].len();
                        if self.needs_grad[*p] {
                            let gp = acc(&mut adjoints, *p, len);
                            for (d, s) in gp.iter_mut().zip(&g[offset..offset + len]) {
                                *d += s;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Sum(v) => {
                    if self.needs_grad[*v] {
                        let len = self.values[*v].len();
                        let gv = acc(&mut adjoints, *v, len);
                        for d in gv.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    if self.needs_grad[*a] {
                        let bv = self.values[*b].clone();
                        let ga = acc(&mut adjoints, *a, bv.len());
                        for (d, v) in ga.iter_mut().zip(&bv) {
                            *d += g[0] * v;
                        }
                    }
                    if self.needs_grad[*b] {
                        let av = self.values[*a].clone();
                        let gb = acc(&mut adjoints, *b, av.len());
                        for (d, v) in gb.iter_mut().zip(&av) {
                            *d += g[0] * v;
                        }
                    }
                }
                Op::LeakyRelu(x) => {
                    if self.needs_grad[*x] {
                        let xv = self.values[*x].clone();
                        let gx = acc(&mut adjoints, *x, g.len());
                        for ((d, gi), v) in gx.iter_mut().zip(&g).zip(&xv) {
                            *d += gi * math::leaky_relu_grad(*v);
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.needs_grad[*x] {
                        let xv = self.values[*x].clone();
                        let gx = acc(&mut adjoints, *x, g.len());
                        for ((d, gi), v) in gx.iter_mut().zip(&g).zip(&xv) {
                            *d += gi * math::relu_grad(*v);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs_grad[*x] {
                        let yv = self.values[i].clone();
                        let gx = acc(&mut adjoints, *x, g.len());
                        for ((d, gi), y) in gx.iter_mut().zip(&g).zip(&yv) {
                            *d += gi * y * (1.0 - y);
                        }
                    }
                }
                Op::Softplus(x) => {
                    if self.needs_grad[*x] {
                        let xv = self.values[*x].clone();
                        let gx = acc(&mut adjoints, *x, g.len());
                        for ((d, gi), v) in gx.iter_mut().zip(&g).zip(&xv) {
                            *d += gi * math::sigmoid(*v);
                        }
                    }
                }
            }
        }

        let mut by_param = HashMap::new();
        for (id, idx) in &self.params {
            if !adjoints[*idx].is_empty() {
                by_param.insert(*id, std::mem::take(&mut adjoints[*idx]));
            }
        }
        Ok(Gradients { by_param })
    }
}

/// Gradients keyed by parameter id; absent entries are exactly zero.
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    /// Accumulate into a flat buffer laid out as `(id, offset, len)` chunks.
    pub fn accumulate_flat(&self, layout: &[(ParamId, usize, usize)], out: &mut [f64]) {
        for (id, offset, len) in layout {
            if let Some(g) = self.get(*id) {
                debug_assert_eq!(g.len(), *len);
                for (d, s) in out[*offset..*offset + *len].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}
