//! Append-only scalar tape for reverse-mode differentiation.
//!
//! Every tracked value is a node holding its value and a list of
//! `(parent, local partial)` edges. Nodes can only reference nodes created
//! before them, so the tape order is already a topological order and the
//! backward sweep is a single reverse pass.
//!
//! Untracked values are carried as [`Scalar::Const`] and never touch the
//! tape; operations whose operands are all constant fold to constants.
//! Detaching a value (see [`Tape::detach`]) is how stop-gradient is expressed.

use super::special::{sigmoid, softminus, softplus};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A value that is either a tracked tape node or a plain constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scalar {
    Const(f64),
    Node(NodeId),
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Const(v)
    }
}

impl Scalar {
    pub fn is_const(self) -> bool {
        matches!(self, Scalar::Const(_))
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    parent: u32,
    partial: f64,
}

/// A contiguous block of leaf nodes, typically one network's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Leaves {
    first: u32,
    len: u32,
}

impl Leaves {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Scalar {
        debug_assert!(i < self.len());
        Scalar::Node(NodeId(self.first + i as u32))
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    values: Vec<f64>,
    /// `edge_end[i]` is one past the last edge of node `i`.
    edge_end: Vec<u32>,
    edges: Vec<Edge>,
    open: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, s: Scalar) -> f64 {
        match s {
            Scalar::Const(_) => 0.0,
            Scalar::Node(id) => self.adj[id.index()],
        }
    }

    pub fn leaves(&self, leaves: Leaves) -> &[f64] {
        let start = leaves.first as usize;
        &self.adj[start..start + leaves.len()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Tape {
            values: Vec::with_capacity(nodes),
            edge_end: Vec::with_capacity(nodes),
            edges: Vec::with_capacity(edges),
            open: false,
        }
    }

    /// Drop every node but keep the allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.edge_end.clear();
        self.edges.clear();
        self.open = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, s: Scalar) -> f64 {
        match s {
            Scalar::Const(v) => v,
            Scalar::Node(id) => self.values[id.index()],
        }
    }

    pub fn values(&self, xs: &[Scalar]) -> Vec<f64> {
        xs.iter().map(|&s| self.value(s)).collect()
    }

    pub fn leaf(&mut self, value: f64) -> Scalar {
        self.begin();
        Scalar::Node(self.finish(value))
    }

    pub fn leaves(&mut self, values: &[f64]) -> Leaves {
        let first = self.values.len() as u32;
        for &v in values {
            self.leaf(v);
        }
        Leaves {
            first,
            len: values.len() as u32,
        }
    }

    /// Stop-gradient: the same value, severed from the graph.
    pub fn detach(&self, s: Scalar) -> Scalar {
        Scalar::Const(self.value(s))
    }

    // Low-level node construction, used by fused operations such as affine layers.

    pub(crate) fn begin(&mut self) {
        assert!(!self.open, "tape node already under construction");
        self.open = true;
    }

    #[inline]
    pub(crate) fn edge(&mut self, parent: NodeId, partial: f64) {
        debug_assert!(self.open);
        // Parents always precede the node being built, which keeps the graph acyclic.
        assert!(
            parent.index() < self.values.len(),
            "edge to a node that does not precede it"
        );
        self.edges.push(Edge {
            parent: parent.0,
            partial,
        });
    }

    pub(crate) fn finish(&mut self, value: f64) -> NodeId {
        debug_assert!(self.open);
        self.open = false;
        let id = self.values.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.values.push(value);
        self.edge_end.push(self.edges.len() as u32);
        NodeId(id as u32)
    }

    fn unary(&mut self, x: Scalar, value: f64, partial: f64) -> Scalar {
        match x {
            Scalar::Const(_) => Scalar::Const(value),
            Scalar::Node(id) => {
                self.begin();
                self.edge(id, partial);
                Scalar::Node(self.finish(value))
            }
        }
    }

    fn binary(&mut self, a: Scalar, b: Scalar, value: f64, da: f64, db: f64) -> Scalar {
        if a.is_const() && b.is_const() {
            return Scalar::Const(value);
        }
        self.begin();
        if let Scalar::Node(id) = a {
            self.edge(id, da);
        }
        if let Scalar::Node(id) = b {
            self.edge(id, db);
        }
        Scalar::Node(self.finish(value))
    }

    pub fn add(&mut self, a: Scalar, b: Scalar) -> Scalar {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Scalar, b: Scalar) -> Scalar {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Scalar, b: Scalar) -> Scalar {
        let (va, vb) = (self.value(a), self.value(b));
        self.binary(a, b, va * vb, vb, va)
    }

    pub fn div(&mut self, a: Scalar, b: Scalar) -> Scalar {
        let (va, vb) = (self.value(a), self.value(b));
        self.binary(a, b, va / vb, 1.0 / vb, -va / (vb * vb))
    }

    pub fn neg(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        self.unary(x, -v, -1.0)
    }

    pub fn scale(&mut self, x: Scalar, c: f64) -> Scalar {
        let v = self.value(x);
        self.unary(x, c * v, c)
    }

    pub fn offset(&mut self, x: Scalar, c: f64) -> Scalar {
        let v = self.value(x);
        self.unary(x, v + c, 1.0)
    }

    pub fn square(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        self.unary(x, v * v, 2.0 * v)
    }

    pub fn exp(&mut self, x: Scalar) -> Scalar {
        let e = self.value(x).exp();
        self.unary(x, e, e)
    }

    pub fn ln(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        self.unary(x, v.ln(), 1.0 / v)
    }

    pub fn tanh(&mut self, x: Scalar) -> Scalar {
        let t = self.value(x).tanh();
        self.unary(x, t, 1.0 - t * t)
    }

    /// `max(0, x)` with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        if v > 0.0 {
            self.unary(x, v, 1.0)
        } else if v <= 0.0 {
            self.unary(x, 0.0, 0.0)
        } else {
            self.unary(x, v, v)
        }
    }

    /// `max(0, x)^3`, derivative `3 max(0, x)^2`.
    pub fn relu_cubed(&mut self, x: Scalar) -> Scalar {
        let r = self.value(x).max(0.0);
        self.unary(x, r * r * r, 3.0 * r * r)
    }

    pub fn softplus(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        self.unary(x, softplus(v), sigmoid(v))
    }

    pub fn softminus(&mut self, x: Scalar) -> Scalar {
        let v = self.value(x);
        self.unary(x, softminus(v), sigmoid(-v))
    }

    pub fn sum(&mut self, xs: &[Scalar]) -> Scalar {
        let total: f64 = xs.iter().map(|&s| self.value(s)).sum();
        if xs.iter().all(|s| s.is_const()) {
            return Scalar::Const(total);
        }
        self.begin();
        for &s in xs {
            if let Scalar::Node(id) = s {
                self.edge(id, 1.0);
            }
        }
        Scalar::Node(self.finish(total))
    }

    /// `sum_i a_i * b_i` as one node.
    pub fn dot(&mut self, a: &[Scalar], b: &[Scalar]) -> Scalar {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let va: Vec<f64> = self.values(a);
        let vb: Vec<f64> = self.values(b);
        let total: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        if a.iter().chain(b).all(|s| s.is_const()) {
            return Scalar::Const(total);
        }
        self.begin();
        for i in 0..a.len() {
            if let Scalar::Node(id) = a[i] {
                self.edge(id, vb[i]);
            }
            if let Scalar::Node(id) = b[i] {
                self.edge(id, va[i]);
            }
        }
        Scalar::Node(self.finish(total))
    }

    /// Reverse sweep seeded with `d output / d output = 1`.
    ///
    /// Node values are left untouched; the adjoints are returned separately so
    /// the same tape can be differentiated from several outputs.
    pub fn backward(&self, output: Scalar) -> Adjoints {
        assert!(!self.open, "backward on a tape with an unfinished node");
        let mut adj = vec![0.0; self.values.len()];
        let out = match output {
            Scalar::Const(_) => return Adjoints { adj },
            Scalar::Node(id) => id.index(),
        };
        adj[out] = 1.0;
        for node in (0..=out).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            let start = if node == 0 { 0 } else { self.edge_end[node - 1] as usize };
            let end = self.edge_end[node] as usize;
            for e in &self.edges[start..end] {
                adj[e.parent as usize] += a * e.partial;
            }
        }
        Adjoints { adj }
    }
}
