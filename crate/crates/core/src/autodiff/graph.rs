//! Reverse-mode tape over dense tensors.
//!
//! A `Graph` is a per-evaluation tape: values are computed eagerly as nodes
//! are appended, and `backward` replays the tape in reverse to accumulate
//! adjoints. Nodes can only reference earlier nodes, so the graph is acyclic
//! by construction. Graphs are rebuilt per step; distinct graphs are
//! independent and may live on different threads.

use super::params::{ParamId, ParamStore};
use super::tensor::{Shape, Tensor};
use super::AutodiffError;
use std::collections::BTreeMap;

type NodeId = usize;

/// Handle to a tape node. Cheap to copy; only valid for the graph that
/// created it.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: NodeId,
    shape: Shape,
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }
}

enum Op {
    Const,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Powf(NodeId, f64),
    Sum(NodeId),
    MatVec(NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    /// Vector scaled by a scalar node (broadcast multiply).
    MulScalar(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Parameter gradients produced by one backward pass, sorted by id.
pub struct Gradients {
    entries: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .binary_search_by_key(&id, |(pid, _)| *pid)
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_cache: BTreeMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Graph<'p> {
        Graph {
            store,
            nodes: Vec::new(),
            param_cache: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        let shape = value.shape();
        self.nodes.push(Node { op, value });
        Var { id, shape }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.id].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value.item()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::vector(data))
    }

    /// Load a parameter as a leaf. Repeated loads of the same parameter
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(Op::Param(id), value);
        self.param_cache.insert(id, v);
        v
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(a.shape, b.shape, "shape mismatch in binary op");
        let out: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, Tensor::new(a.shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.id, b.id))
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, Tensor::new(a.shape, out))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.id))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.id, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a.id, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.id))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.id))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a.id))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus(a.id))
    }

    /// Elementwise absolute value with the subgradient convention
    /// d|x|/dx = sign(x), sign(0) = 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.id))
    }

    /// Elementwise power with constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a.id, p))
    }

    // ── Reductions and structure ────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum(a.id), Tensor::scalar(s))
    }

    /// Matrix-vector product: `w` is (m, n), `x` is a length-n vector.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (m, n) = match w.shape {
            Shape::Matrix(m, n) => (m, n),
            other => panic!("matvec weight must be a matrix, got {other:?}"),
        };
        assert_eq!(x.shape, Shape::Vector(n), "matvec input mismatch");
        let wd = self.value(w);
        let xd = self.value(x);
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &wd[r * n..(r + 1) * n];
            let mut acc = 0.0;
            for c in 0..n {
                acc += row[c] * xd[c];
            }
            out[r] = acc;
        }
        self.push(Op::MatVec(w.id, x.id), Tensor::vector(out))
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let data = self.value(a);
        let out: Vec<f64> = indices
            .iter()
            .map(|&i| {
                assert!(i < data.len(), "gather index {i} out of range");
                data[i]
            })
            .collect();
        self.push(Op::Gather(a.id, indices.to_vec()), Tensor::vector(out))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Op::Concat(ids), Tensor::vector(out))
    }

    /// Broadcast multiply: every element of `a` times the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert!(s.shape.is_scalar(), "mul_scalar needs a scalar second arg");
        let sv = self.scalar_value(s);
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * sv).collect();
        self.push(Op::MulScalar(a.id, s.id), Tensor::new(a.shape, out))
    }

    // ── Composites ──────────────────────────────────────────────────────

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Squared Euclidean norm.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let m = self.mul(a, a);
        self.sum(m)
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let m = self.abs(a);
        self.sum(m)
    }

    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root with seed 1. Returns accumulated
    /// parameter gradients; node adjoints are local to this call, so
    /// backward may run repeatedly for different roots on one tape.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let (grads, _) = self.backward_wrt(root, &[])?;
        Ok(grads)
    }

    /// Like `backward`, additionally returning the adjoint of each listed
    /// node (e.g. the gradient with respect to a non-parameter input).
    pub fn backward_wrt(
        &self,
        root: Var,
        wrt: &[Var],
    ) -> Result<(Gradients, Vec<Vec<f64>>), AutodiffError> {
        if !root.shape.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { shape: root.shape });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.id] = Some(vec![1.0]);
        let mut wrt_grads: Vec<Vec<f64>> = wrt
            .iter()
            .map(|v| vec![0.0; v.shape.len()])
            .collect();

        for id in (0..=root.id).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Adjoint of `id` is complete once we visit it.
            for (slot, v) in wrt_grads.iter_mut().zip(wrt.iter()) {
                if v.id == id {
                    slot.copy_from_slice(&g);
                }
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Const | Op::Param(_) => {
                    adj[id] = Some(g); // keep for extraction below
                }
                Op::Add(a, b) => {
                    self.bump(&mut adj, *a, &g, |gi, _| gi);
                    self.bump(&mut adj, *b, &g, |gi, _| gi);
                }
                Op::Sub(a, b) => {
                    self.bump(&mut adj, *a, &g, |gi, _| gi);
                    self.bump(&mut adj, *b, &g, |gi, _| -gi);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bd = self.nodes[b].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi * bd[i]);
                    let ad = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, b, &g, |i, gi| gi * ad[i]);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let ad = self.nodes[a].value.data();
                    let bd = self.nodes[b].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi / bd[i]);
                    self.bump_idx(&mut adj, b, &g, |i, gi| -gi * ad[i] / (bd[i] * bd[i]));
                }
                Op::Neg(a) => self.bump(&mut adj, *a, &g, |gi, _| -gi),
                Op::Scale(a, c) => {
                    let c = *c;
                    self.bump(&mut adj, *a, &g, move |gi, _| gi * c);
                }
                Op::Offset(a, _) => self.bump(&mut adj, *a, &g, |gi, _| gi),
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.bump_idx(&mut adj, *a, &g, |i, gi| gi * y[i]);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi / xd[i]);
                }
                Op::Sin(a) => {
                    let a = *a;
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi * xd[i].cos());
                }
                Op::Cos(a) => {
                    let a = *a;
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| -gi * xd[i].sin());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.bump_idx(&mut adj, *a, &g, |i, gi| gi * (1.0 - y[i] * y[i]));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.bump_idx(&mut adj, *a, &g, |i, gi| gi * y[i] * (1.0 - y[i]));
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi * stable_sigmoid(xd[i]));
                }
                Op::Abs(a) => {
                    let a = *a;
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi * sign0(xd[i]));
                }
                Op::Powf(a, p) => {
                    let (a, p) = (*a, *p);
                    let xd = self.nodes[a].value.data();
                    self.bump_idx(&mut adj, a, &g, |i, gi| gi * p * xd[i].powf(p - 1.0));
                }
                Op::Sum(a) => {
                    let a = *a;
                    let gs = g[0];
                    let len = self.nodes[a].value.len();
                    let slot = ensure_slice(&mut adj, a, len);
                    for x in slot.iter_mut() {
                        *x += gs;
                    }
                }
                Op::MatVec(w, x) => {
                    let (w, x) = (*w, *x);
                    let (m, n) = match self.nodes[w].value.shape() {
                        Shape::Matrix(m, n) => (m, n),
                        _ => unreachable!(),
                    };
                    let wd = self.nodes[w].value.data();
                    let xd = self.nodes[x].value.data();
                    {
                        let gw = ensure(&mut adj, w, m * n);
                        for r in 0..m {
                            let gr = g[r];
                            let row = &mut gw[r * n..(r + 1) * n];
                            for c in 0..n {
                                row[c] += gr * xd[c];
                            }
                        }
                    }
                    {
                        let gx = ensure(&mut adj, x, n);
                        for r in 0..m {
                            let gr = g[r];
                            let row = &wd[r * n..(r + 1) * n];
                            for c in 0..n {
                                gx[c] += gr * row[c];
                            }
                        }
                    }
                }
                Op::Gather(a, indices) => {
                    let a = *a;
                    let len = self.nodes[a].value.len();
                    let ga = ensure(&mut adj, a, len);
                    for (k, &i) in indices.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        let gp = ensure(&mut adj, p, len);
                        for i in 0..len {
                            gp[i] += g[off + i];
                        }
                        off += len;
                    }
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s].value.item();
                    self.bump_idx(&mut adj, a, &g, |_, gi| gi * sv);
                    let ad = self.nodes[a].value.data();
                    let acc: f64 = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).sum();
                    let gs = ensure(&mut adj, s, 1);
                    gs[0] += acc;
                }
            }
        }

        let mut entries: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (&pid, var) in &self.param_cache {
            if var.id <= root.id {
                if let Some(g) = adj[var.id].take() {
                    entries.push((pid, g));
                }
            }
        }
        // param_cache is a BTreeMap, so entries are already sorted by id.
        Ok((Gradients { entries }, wrt_grads))
    }

    fn bump(
        &self,
        adj: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        let len = self.nodes[target].value.len();
        let slot = ensure_slice(adj, target, len);
        for (i, gi) in g.iter().enumerate() {
            slot[i] += f(*gi, i);
        }
    }

    fn bump_idx(
        &self,
        adj: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let len = self.nodes[target].value.len();
        let slot = ensure_slice(adj, target, len);
        for (i, gi) in g.iter().enumerate() {
            slot[i] += f(i, *gi);
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    if adj[id].is_none() {
        adj[id] = Some(vec![0.0; len]);
    }
    adj[id].as_mut().unwrap()
}

fn ensure_slice<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut [f64] {
    ensure(adj, id, len).as_mut_slice()
}
