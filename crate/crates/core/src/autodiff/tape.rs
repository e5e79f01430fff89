//! Lane-batched Wengert tape with differentiable backward passes.
//!
//! Every node holds either a single value or a fixed number of *lanes*.
//! Operations broadcast a one-lane operand across the lanes of the other, so
//! independent samples (time steps, sequences) can share one graph while the
//! parameters stay one-lane leaves. Gradients follow "sum over lanes"
//! semantics: `grad(y, x)` is the derivative of the lane sum of `y`, shaped
//! like `x`. For computations that never mix lanes this is exactly the
//! per-lane derivative.
//!
//! [`Tape::grad_graph`] records the backward pass itself on the tape, so the
//! returned derivatives can be differentiated again. This is what allows
//! losses built from stresses (`∂ψ/∂ε`) to be differentiated with respect to
//! network parameters, and Newton Jacobians to be unrolled inside training.

use std::cell::RefCell;
use std::fmt;

type Id = u32;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Identity(Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    AddScalar(Id),
    MulScalar(Id, f64),
    Softplus(Id),
    Sigmoid(Id),
    Tanh(Id),
    Exp(Id),
    Ln(Id),
    Powf(Id, f64),
    Powi(Id, i32),
    Abs(Id),
    SumLanes(Id),
    Expand(Id),
    Slice(Id, u32),
    /// Lane concatenation; operands are `args[start..start + count]`.
    Concat(u32, u32),
    /// n-ary sum; operands are `args[start..start + count]`.
    Sum(u32, u32),
    /// Inner product; operands are pairs `(args[start + 2k], args[start + 2k + 1])`.
    Dot(u32, u32),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    args: Vec<Id>,
}

/// Recording tape. Create one per independent evaluation; it is not `Sync`.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.values();
        if vals.len() == 1 {
            write!(f, "Var#{}({})", self.id, vals[0])
        } else {
            write!(f, "Var#{}({:?})", self.id, vals)
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcast_len(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("lane mismatch: {a} vs {b}")
    }
}

#[inline(always)]
fn lane(vals: &[f64], node: &Node, i: usize) -> f64 {
    if node.len == 1 {
        vals[node.off]
    } else {
        vals[node.off + i]
    }
}

#[inline(always)]
fn bcast(x: &[f64], i: usize) -> f64 {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
    }
}

/// `dst[i] += x[i] * y[i]`, broadcasting one-lane operands.
fn axpy_lanes(dst: &mut [f64], x: &[f64], y: &[f64]) {
    match (x.len() == 1, y.len() == 1) {
        (true, true) => {
            let p = x[0] * y[0];
            dst.iter_mut().for_each(|d| *d += p);
        }
        (true, false) => {
            let a = x[0];
            dst.iter_mut().zip(y).for_each(|(d, &b)| *d += a * b);
        }
        (false, true) => {
            let b = y[0];
            dst.iter_mut().zip(x).for_each(|(d, &a)| *d += a * b);
        }
        (false, false) => {
            dst.iter_mut()
                .zip(x.iter().zip(y))
                .for_each(|(d, (&a, &b))| *d += a * b);
        }
    }
}

/// Accumulate `f(0..n)` into `adj[at..]`, summing lanes into a one-lane slot.
#[inline(always)]
fn scatter(adj: &mut [f64], at: usize, len: usize, n: usize, f: impl Fn(usize) -> f64) {
    if len == 1 && n > 1 {
        let mut s = 0.0;
        for i in 0..n {
            s += f(i);
        }
        adj[at] += s;
    } else {
        for (i, v) in adj[at..at + n].iter_mut().enumerate() {
            *v += f(i);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all nodes but keep the allocations.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.vals.clear();
        inner.args.clear();
    }

    fn push_values(&self, op: Op, values: &[f64]) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let off = g.vals.len();
        g.vals.extend_from_slice(values);
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op,
            off,
            len: values.len(),
        });
        Var { tape: self, id }
    }

    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push_values(Op::Leaf, &[value])
    }

    pub fn leaf_lanes(&self, values: &[f64]) -> Var<'_> {
        assert!(!values.is_empty());
        self.push_values(Op::Leaf, values)
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push_values(Op::Const, &[value])
    }

    pub fn constant_lanes(&self, values: &[f64]) -> Var<'_> {
        assert!(!values.is_empty());
        self.push_values(Op::Const, values)
    }

    pub fn zeros(&self, lanes: usize) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let off = g.vals.len();
        g.vals.resize(off + lanes, 0.0);
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op: Op::Const,
            off,
            len: lanes,
        });
        Var { tape: self, id }
    }

    fn node(&self, id: Id) -> Node {
        self.inner.borrow().nodes[id as usize]
    }

    fn unary(&self, a: Id, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let na = g.nodes[a as usize];
        let off = g.vals.len();
        g.vals.reserve(na.len);
        for i in 0..na.len {
            let x = g.vals[na.off + i];
            g.vals.push(f(x));
        }
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op,
            off,
            len: na.len,
        });
        Var { tape: self, id }
    }

    fn binary(&self, a: Id, b: Id, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let na = g.nodes[a as usize];
        let nb = g.nodes[b as usize];
        let n = broadcast_len(na.len, nb.len);
        let off = g.vals.len();
        g.vals.resize(off + n, 0.0);
        let (src, dst) = g.vals.split_at_mut(off);
        match (na.len == 1, nb.len == 1) {
            (true, true) => dst[0] = f(src[na.off], src[nb.off]),
            (true, false) => {
                let x = src[na.off];
                for (d, &y) in dst.iter_mut().zip(&src[nb.off..nb.off + n]) {
                    *d = f(x, y);
                }
            }
            (false, true) => {
                let y = src[nb.off];
                for (d, &x) in dst.iter_mut().zip(&src[na.off..na.off + n]) {
                    *d = f(x, y);
                }
            }
            (false, false) => {
                let xs = &src[na.off..na.off + n];
                let ys = &src[nb.off..nb.off + n];
                for ((d, &x), &y) in dst.iter_mut().zip(xs).zip(ys) {
                    *d = f(x, y);
                }
            }
        }
        let id = g.nodes.len() as Id;
        g.nodes.push(Node { op, off, len: n });
        Var { tape: self, id }
    }

    fn push_args(g: &mut Inner, ids: impl Iterator<Item = Id>) -> (u32, u32) {
        let start = g.args.len();
        g.args.extend(ids);
        (start as u32, (g.args.len() - start) as u32)
    }

    /// Concatenate the lanes of `parts` in order.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let mut g = self.inner.borrow_mut();
        let (start, count) = Self::push_args(&mut g, parts.iter().map(|v| v.id));
        let off = g.vals.len();
        let mut len = 0;
        for p in parts {
            let np = g.nodes[p.id as usize];
            g.vals.extend_from_within(np.off..np.off + np.len);
            len += np.len;
        }
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op: Op::Concat(start, count),
            off,
            len,
        });
        Var { tape: self, id }
    }

    /// Sum of `terms` (lane-broadcasting).
    pub fn sum<'t>(&'t self, terms: &[Var<'t>]) -> Var<'t> {
        assert!(!terms.is_empty());
        if terms.len() == 1 {
            return terms[0];
        }
        let mut g = self.inner.borrow_mut();
        let n = terms
            .iter()
            .fold(1, |n, t| broadcast_len(n, g.nodes[t.id as usize].len));
        let (start, count) = Self::push_args(&mut g, terms.iter().map(|v| v.id));
        let off = g.vals.len();
        g.vals.resize(off + n, 0.0);
        for t in terms {
            let nt = g.nodes[t.id as usize];
            for i in 0..n {
                let x = lane(&g.vals, &nt, i);
                g.vals[off + i] += x;
            }
        }
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op: Op::Sum(start, count),
            off,
            len: n,
        });
        Var { tape: self, id }
    }

    /// Inner product `Σ a_k b_k` recorded as a single node.
    pub fn dot<'t>(&'t self, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        let mut g = self.inner.borrow_mut();
        let mut n = 1;
        for (x, y) in a.iter().zip(b) {
            n = broadcast_len(n, g.nodes[x.id as usize].len);
            n = broadcast_len(n, g.nodes[y.id as usize].len);
        }
        let (start, count) =
            Self::push_args(&mut g, a.iter().zip(b).flat_map(|(x, y)| [x.id, y.id]));
        let off = g.vals.len();
        g.vals.resize(off + n, 0.0);
        for (x, y) in a.iter().zip(b) {
            let nx = g.nodes[x.id as usize];
            let ny = g.nodes[y.id as usize];
            let (src, dst) = g.vals.split_at_mut(off);
            axpy_lanes(
                dst,
                &src[nx.off..nx.off + nx.len],
                &src[ny.off..ny.off + ny.len],
            );
        }
        let id = g.nodes.len() as Id;
        g.nodes.push(Node {
            op: Op::Dot(start, count / 2),
            off,
            len: n,
        });
        Var { tape: self, id }
    }

    /// Marks every node in `start..=out` that depends on one of `wrt`.
    fn dependency_mask(&self, out: Id, wrt: &[Var<'_>]) -> (Id, Vec<bool>, Vec<bool>) {
        let start = wrt.iter().map(|v| v.id).min().unwrap_or(out).min(out);
        let size = (out - start + 1) as usize;
        let mut mask = vec![false; size];
        let mut is_wrt = vec![false; size];
        for w in wrt {
            if w.id <= out {
                mask[(w.id - start) as usize] = true;
                is_wrt[(w.id - start) as usize] = true;
            }
        }
        let g = self.inner.borrow();
        let marked = |mask: &[bool], p: Id| p >= start && mask[(p - start) as usize];
        for id in start..=out {
            let k = (id - start) as usize;
            if mask[k] {
                continue;
            }
            let hit = match g.nodes[id as usize].op {
                Op::Leaf | Op::Const => false,
                Op::Identity(a)
                | Op::Neg(a)
                | Op::AddScalar(a)
                | Op::MulScalar(a, _)
                | Op::Softplus(a)
                | Op::Sigmoid(a)
                | Op::Tanh(a)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Powf(a, _)
                | Op::Powi(a, _)
                | Op::Abs(a)
                | Op::SumLanes(a)
                | Op::Expand(a)
                | Op::Slice(a, _) => marked(&mask, a),
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    marked(&mask, a) || marked(&mask, b)
                }
                Op::Concat(s, c) | Op::Sum(s, c) => g.args[s as usize..(s + c) as usize]
                    .iter()
                    .any(|&p| marked(&mask, p)),
                Op::Dot(s, c) => g.args[s as usize..(s + 2 * c) as usize]
                    .iter()
                    .any(|&p| marked(&mask, p)),
            };
            mask[k] = hit;
        }
        (start, mask, is_wrt)
    }

    /// Reverse sweep with plain floating-point adjoints.
    ///
    /// Returns the lanes of `∂(Σ out)/∂w` for every `w` in `wrt`. Nodes in
    /// `wrt` are treated as independent leaves even if one was computed from
    /// another.
    pub fn grad_values<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Vec<Vec<f64>> {
        let adj = self.backward_values(out, wrt);
        let g = self.inner.borrow();
        wrt.iter()
            .map(|w| {
                let n = g.nodes[w.id as usize];
                match &adj {
                    Some((base, a)) if n.off >= *base => {
                        a[n.off - base..n.off - base + n.len].to_vec()
                    }
                    _ => vec![0.0; n.len],
                }
            })
            .collect()
    }

    /// Gradient of a one-lane output with respect to one-lane leaves
    /// (typically network parameters).
    pub fn grad_scalars<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Vec<f64> {
        let adj = self.backward_values(out, wrt);
        let g = self.inner.borrow();
        wrt.iter()
            .map(|w| {
                let n = g.nodes[w.id as usize];
                match &adj {
                    Some((base, a)) if n.off >= *base => {
                        a[n.off - base..n.off - base + n.len].iter().sum()
                    }
                    _ => 0.0,
                }
            })
            .collect()
    }

    fn backward_values(&self, out: Var<'_>, wrt: &[Var<'_>]) -> Option<(usize, Vec<f64>)> {
        if wrt.is_empty() || wrt.iter().all(|w| w.id > out.id) {
            return None;
        }
        let (start, mask, is_wrt) = self.dependency_mask(out.id, wrt);
        let g = self.inner.borrow();
        let base = g.nodes[start as usize].off;
        let nout = g.nodes[out.id as usize];
        let mut adj = vec![0.0; nout.off + nout.len - base];
        adj[nout.off - base..].fill(1.0);
        let vals = &g.vals;
        let live = |p: Id| p >= start && mask[(p - start) as usize];
        let mut d: Vec<f64> = Vec::new();

        for id in (start..=out.id).rev() {
            let k = (id - start) as usize;
            if !mask[k] || is_wrt[k] {
                continue;
            }
            let node = g.nodes[id as usize];
            let (o, n) = (node.off, node.len);
            d.clear();
            d.extend_from_slice(&adj[o - base..o - base + n]);
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out_v = &vals[o..o + n];
            // Push lane contributions into the adjoint of an operand.
            macro_rules! push {
                ($p:expr, |$i:ident| $e:expr) => {{
                    let p: Id = $p;
                    if live(p) {
                        let np = g.nodes[p as usize];
                        scatter(&mut adj, np.off - base, np.len, n, |$i| $e);
                    }
                }};
            }
            let arg = |p: Id| {
                let np = g.nodes[p as usize];
                &vals[np.off..np.off + np.len]
            };
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Identity(a) | Op::AddScalar(a) => push!(a, |i| d[i]),
                Op::Neg(a) => push!(a, |i| -d[i]),
                Op::MulScalar(a, c) => push!(a, |i| c * d[i]),
                Op::Add(a, b) => {
                    push!(a, |i| d[i]);
                    push!(b, |i| d[i]);
                }
                Op::Sub(a, b) => {
                    push!(a, |i| d[i]);
                    push!(b, |i| -d[i]);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (arg(a), arg(b));
                    push!(a, |i| d[i] * bcast(xb, i));
                    push!(b, |i| d[i] * bcast(xa, i));
                }
                Op::Div(a, b) => {
                    let xb = arg(b);
                    push!(a, |i| d[i] / bcast(xb, i));
                    push!(b, |i| -d[i] * out_v[i] / bcast(xb, i));
                }
                Op::Softplus(a) => {
                    let x = arg(a);
                    push!(a, |i| d[i] * sigmoid(x[i]));
                }
                Op::Sigmoid(a) => push!(a, |i| d[i] * out_v[i] * (1.0 - out_v[i])),
                Op::Tanh(a) => push!(a, |i| d[i] * (1.0 - out_v[i] * out_v[i])),
                Op::Exp(a) => push!(a, |i| d[i] * out_v[i]),
                Op::Ln(a) => {
                    let x = arg(a);
                    push!(a, |i| d[i] / x[i]);
                }
                Op::Powf(a, p) => {
                    let x = arg(a);
                    push!(a, |i| d[i] * p * x[i].powf(p - 1.0));
                }
                Op::Powi(a, p) => {
                    let x = arg(a);
                    push!(a, |i| d[i] * p as f64 * x[i].powi(p - 1));
                }
                Op::Abs(a) => {
                    let x = arg(a);
                    push!(a, |i| d[i] * sign(x[i]));
                }
                Op::SumLanes(a) => {
                    let na = g.nodes[a as usize];
                    if live(a) {
                        for v in &mut adj[na.off - base..na.off - base + na.len] {
                            *v += d[0];
                        }
                    }
                }
                Op::Expand(a) => {
                    let s: f64 = d.iter().sum();
                    if live(a) {
                        adj[g.nodes[a as usize].off - base] += s;
                    }
                }
                Op::Slice(a, s) => {
                    if live(a) {
                        let at = g.nodes[a as usize].off - base + s as usize;
                        for (v, &x) in adj[at..at + n].iter_mut().zip(&d) {
                            *v += x;
                        }
                    }
                }
                Op::Concat(s, c) => {
                    let mut pos = 0;
                    for &p in &g.args[s as usize..(s + c) as usize] {
                        let np = g.nodes[p as usize];
                        if live(p) {
                            let at = np.off - base;
                            for (v, &x) in adj[at..at + np.len].iter_mut().zip(&d[pos..]) {
                                *v += x;
                            }
                        }
                        pos += np.len;
                    }
                }
                Op::Sum(s, c) => {
                    for &p in &g.args[s as usize..(s + c) as usize] {
                        push!(p, |i| d[i]);
                    }
                }
                Op::Dot(s, c) => {
                    let pairs = &g.args[s as usize..(s + 2 * c) as usize];
                    for pair in pairs.chunks_exact(2) {
                        let (x, y) = (pair[0], pair[1]);
                        let (vx, vy) = (arg(x), arg(y));
                        push!(x, |i| d[i] * bcast(vy, i));
                        push!(y, |i| d[i] * bcast(vx, i));
                    }
                }
            }
        }
        Some((base, adj))
    }

    /// Reverse sweep recorded on the tape.
    ///
    /// Same semantics as [`Tape::grad_values`], but each returned derivative
    /// is a [`Var`] that can itself be differentiated. Results always have the
    /// lane count of the corresponding `wrt` node.
    pub fn grad_graph<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let zeros = |w: &Var<'t>| self.zeros(w.lanes());
        if wrt.is_empty() {
            return Vec::new();
        }
        if wrt.iter().all(|w| w.id > out.id) {
            return wrt.iter().map(zeros).collect();
        }
        let (start, mask, is_wrt) = self.dependency_mask(out.id, wrt);
        let size = mask.len();
        let mut adj: Vec<Option<Var<'t>>> = vec![None; size];
        let live = |p: Id| p >= start && mask[(p - start) as usize];
        let var = |id: Id| Var { tape: self, id };

        let acc = |adj: &mut Vec<Option<Var<'t>>>, p: Id, v: Var<'t>| {
            if !live(p) {
                return;
            }
            let plen = self.node(p).len;
            let v = if plen == 1 && v.lanes() > 1 {
                v.sum_lanes()
            } else {
                v
            };
            let slot = &mut adj[(p - start) as usize];
            *slot = Some(match *slot {
                Some(prev) => prev + v,
                None => v,
            });
        };

        adj[size - 1] = Some(self.constant(1.0));
        for id in (start..=out.id).rev() {
            let k = (id - start) as usize;
            if !mask[k] || is_wrt[k] {
                continue;
            }
            let Some(d) = adj[k] else { continue };
            let node = self.node(id);
            let c = var(id);
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Identity(a) | Op::AddScalar(a) => acc(&mut adj, a, d),
                Op::Neg(a) => acc(&mut adj, a, -d),
                Op::MulScalar(a, s) => acc(&mut adj, a, d * s),
                Op::Add(a, b) => {
                    acc(&mut adj, a, d);
                    acc(&mut adj, b, d);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, a, d);
                    acc(&mut adj, b, -d);
                }
                Op::Mul(a, b) => {
                    if live(a) {
                        acc(&mut adj, a, d * var(b));
                    }
                    if live(b) {
                        acc(&mut adj, b, d * var(a));
                    }
                }
                Op::Div(a, b) => {
                    if live(a) {
                        acc(&mut adj, a, d / var(b));
                    }
                    if live(b) {
                        acc(&mut adj, b, -(d * c / var(b)));
                    }
                }
                Op::Softplus(a) => acc(&mut adj, a, d * var(a).sigmoid()),
                Op::Sigmoid(_) => {
                    let Op::Sigmoid(a) = node.op else {
                        unreachable!()
                    };
                    acc(&mut adj, a, d * c * (1.0 - c));
                }
                Op::Tanh(a) => acc(&mut adj, a, d * (1.0 - c * c)),
                Op::Exp(a) => acc(&mut adj, a, d * c),
                Op::Ln(a) => acc(&mut adj, a, d / var(a)),
                Op::Powf(a, p) => {
                    let v = if p == 1.0 {
                        d
                    } else if p == 2.0 {
                        d * var(a) * 2.0
                    } else {
                        d * var(a).powf(p - 1.0) * p
                    };
                    acc(&mut adj, a, v);
                }
                Op::Powi(a, p) => match p {
                    0 => {}
                    1 => acc(&mut adj, a, d),
                    2 => acc(&mut adj, a, d * var(a) * 2.0),
                    _ => acc(&mut adj, a, d * var(a).powi(p - 1) * p as f64),
                },
                Op::Abs(a) => {
                    let signs: Vec<f64> = var(a).values().into_iter().map(sign).collect();
                    acc(&mut adj, a, d * self.constant_lanes(&signs));
                }
                Op::SumLanes(a) => acc(&mut adj, a, d),
                Op::Expand(a) => {
                    let v = if d.lanes() > 1 { d.sum_lanes() } else { d };
                    acc(&mut adj, a, v);
                }
                Op::Slice(a, s) => {
                    let total = self.node(a).len;
                    let d = d.expand_to(node.len);
                    let s = s as usize;
                    let mut parts = Vec::with_capacity(3);
                    if s > 0 {
                        parts.push(self.zeros(s));
                    }
                    parts.push(d);
                    if s + node.len < total {
                        parts.push(self.zeros(total - s - node.len));
                    }
                    acc(&mut adj, a, self.concat(&parts));
                }
                Op::Concat(s, cnt) => {
                    let parts: Vec<Id> = {
                        let g = self.inner.borrow();
                        g.args[s as usize..(s + cnt) as usize].to_vec()
                    };
                    let d = d.expand_to(node.len);
                    let mut pos = 0;
                    for p in parts {
                        let plen = self.node(p).len;
                        if live(p) {
                            acc(&mut adj, p, d.slice(pos, plen));
                        }
                        pos += plen;
                    }
                }
                Op::Sum(s, cnt) => {
                    let parts: Vec<Id> = {
                        let g = self.inner.borrow();
                        g.args[s as usize..(s + cnt) as usize].to_vec()
                    };
                    for p in parts {
                        acc(&mut adj, p, d);
                    }
                }
                Op::Dot(s, cnt) => {
                    let pairs: Vec<Id> = {
                        let g = self.inner.borrow();
                        g.args[s as usize..(s + 2 * cnt) as usize].to_vec()
                    };
                    for pair in pairs.chunks_exact(2) {
                        let (x, y) = (pair[0], pair[1]);
                        if live(x) {
                            acc(&mut adj, x, d * var(y));
                        }
                        if live(y) {
                            acc(&mut adj, y, d * var(x));
                        }
                    }
                }
            }
        }
        wrt.iter()
            .map(|w| {
                if w.id < start || w.id > out.id {
                    return zeros(w);
                }
                match adj[(w.id - start) as usize] {
                    Some(v) => v.expand_to(w.lanes()),
                    None => zeros(w),
                }
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Value of the first lane.
    pub fn value(&self) -> f64 {
        let g = self.tape.inner.borrow();
        g.vals[g.nodes[self.id as usize].off]
    }

    pub fn values(&self) -> Vec<f64> {
        let g = self.tape.inner.borrow();
        let n = g.nodes[self.id as usize];
        g.vals[n.off..n.off + n.len].to_vec()
    }

    pub fn lanes(&self) -> usize {
        self.tape.node(self.id).len
    }

    /// Fresh node with the same value; used to make derivative targets
    /// independent of how their inputs were computed.
    pub fn alias(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Identity(self.id), |x| x)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Ln(self.id), f64::ln)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn powi(self, p: i32) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Powi(self.id, p), |x| x.powi(p))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Abs(self.id), f64::abs)
    }

    pub fn sum_lanes(self) -> Var<'t> {
        let total: f64 = self.values().iter().sum();
        self.tape.push_values(Op::SumLanes(self.id), &[total])
    }

    /// Broadcast a one-lane value to `lanes` lanes (no-op if already sized).
    pub fn expand_to(self, lanes: usize) -> Var<'t> {
        let n = self.lanes();
        if n == lanes {
            return self;
        }
        assert_eq!(n, 1, "can only expand one-lane values");
        let v = self.value();
        self.tape.push_values(Op::Expand(self.id), &vec![v; lanes])
    }

    /// Lanes `start..start + len`.
    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let vals = self.values();
        assert!(start + len <= vals.len());
        self.tape
            .push_values(Op::Slice(self.id, start as u32), &vals[start..start + len])
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:ident, $f:expr) => {
        impl<'t> std::ops::$tr<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                self.tape
                    .binary(self.id, rhs.id, Op::$op(self.id, rhs.id), $f)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + c)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::MulScalar(self.id, c), |x| x * c)
    }
}

impl<'t> std::ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self * (1.0 / c)
    }
}

impl<'t> std::ops::Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> std::ops::Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        -v + self
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> std::ops::Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        v.powi(-1) * self
    }
}
