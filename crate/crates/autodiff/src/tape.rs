use std::cell::{Ref, RefCell};
use std::cmp::Ordering;
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::kernels::{
    broadcast_shape, broadcast_strides, expand, for_each2, gemm, lanes, layout, sum_to_shape,
    zip_map, Layout,
};
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine { x: usize, scale: f64 },
    PowF(usize, f64),
    Square(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Relu(usize),
    MatMul(usize, usize),
    /// `keep_shape` is the result shape with reduced axes kept as size 1.
    Sum { x: usize, keep_shape: Vec<usize> },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Gather { x: usize, axis: usize, indices: Vec<usize> },
    /// `perm[o]` is the source position along `axis` of output element `o`.
    Sort { x: usize, axis: usize, perm: Vec<usize> },
    /// `src[o]` is the source position along `axis` of output element `o`.
    Pick { x: usize, axis: usize, src: Vec<usize> },
    PairwiseDistance(usize, usize),
    Softmax { x: usize, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation as a linear sequence of nodes for reverse-mode
/// differentiation.
///
/// Nodes are appended in evaluation order, so the tape is always a valid
/// topological order of the graph. A tape is meant to be built once per forward
/// pass and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input; `backward` reports a gradient for every leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input (data, noise, expert statistics).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        for v in vars {
            if !std::ptr::eq(v.tape, self) {
                return Err(AutodiffError::ForeignVar);
            }
        }
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for v in vars {
            let s = nodes[v.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in vars {
                let t = &nodes[v.id].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let requires_grad = vars.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        let value = Tensor::new(out_shape, data)?;
        let inputs = vars.iter().map(|v| v.id).collect();
        Ok(self.push(value, Op::Concat { inputs, axis }, requires_grad))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf recorded before `loss` receives an entry in the result; leaves
    /// the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if !shape.is_empty() {
            return Err(AutodiffError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.push(Some(Tensor::new(node.value.shape().to_vec(), data)?));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`, shaped like the leaf. `None` if `leaf` is not a leaf.
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.by_id(leaf.node_id())
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics for non-leaf variables.
    pub fn wrt(&self, leaf: Var<'_>) -> &Tensor {
        self.get(leaf).expect("gradient requested for a non-leaf variable")
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Gradient contribution for one side of a broadcasting binary op.
///
/// `f(g, a, b)` is the local partial derivative times the upstream gradient.
fn binary_side_grad(
    out_shape: &[usize],
    to_lhs: bool,
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape && b.shape() == out_shape {
        return (0..g.len()).map(|o| f(g[o], ad[o], bd[o])).collect();
    }
    let target = if to_lhs { a } else { b };
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    if target.shape() == out_shape {
        let mut out = vec![0.0; target.numel()];
        for_each2(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(g[o], ad[ia], bd[ib]));
        return out;
    }
    let other_full = if to_lhs { b.shape() == out_shape } else { a.shape() == out_shape };
    if let (true, Layout::Repeat(r)) = (other_full, layout(target.shape(), out_shape)) {
        return target
            .data()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                (i * r..(i + 1) * r)
                    .map(|o| if to_lhs { f(g[o], t, bd[o]) } else { f(g[o], ad[o], t) })
                    .sum()
            })
            .collect();
    }
    // Materialize both operands at full size, then reduce onto the target.
    let full_a = expand(ad, a.shape(), out_shape);
    let full_b = expand(bd, b.shape(), out_shape);
    let full: Vec<f64> = (0..g.len()).map(|o| f(g[o], full_a[o], full_b[o])).collect();
    sum_to_shape(&full, out_shape, target.shape())
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value;
    let wants = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &nodes[j].value;

    fn unary_grad(
        x: &Tensor,
        y: &Tensor,
        g: &[f64],
        slot: &mut Option<Vec<f64>>,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (xd, yd) = (x.data(), y.data());
        let contrib = g.iter().zip(xd).zip(yd).map(|((&g, &x), &y)| f(g, x, y)).collect();
        accumulate(slot, contrib);
    }
    macro_rules! unary {
        ($x:expr, $grads:expr, $f:expr) => {
            unary_grad(&nodes[$x].value, out, g, &mut $grads[$x], $f)
        };
    }

    match node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(a) {
                accumulate(&mut grads[a], sum_to_shape(g, out.shape(), val(a).shape()));
            }
            if wants(b) {
                let mut gb = sum_to_shape(g, out.shape(), val(b).shape());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut grads[b], gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if wants(a) {
                let c = binary_side_grad(out.shape(), true, ta, tb, g, |g, _, y| g * y);
                accumulate(&mut grads[a], c);
            }
            if wants(b) {
                let c = binary_side_grad(out.shape(), false, ta, tb, g, |g, x, _| g * x);
                accumulate(&mut grads[b], c);
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if wants(a) {
                let c = binary_side_grad(out.shape(), true, ta, tb, g, |g, _, y| g / y);
                accumulate(&mut grads[a], c);
            }
            if wants(b) {
                let c = binary_side_grad(out.shape(), false, ta, tb, g, |g, x, y| {
                    -g * x / (y * y)
                });
                accumulate(&mut grads[b], c);
            }
        }
        Op::Neg(x) => accumulate(&mut grads[x], g.iter().map(|v| -v).collect()),
        Op::Affine { x, scale } => accumulate(&mut grads[x], g.iter().map(|v| v * scale).collect()),
        Op::PowF(x, p) => unary_grad(&nodes[x].value, out, g, &mut grads[x], |g, x, _| g * p * x.powf(p - 1.0)),
        Op::Square(x) => unary!(x, grads, |g, x, _| 2.0 * g * x),
        Op::Exp(x) => unary!(x, grads, |g, _, y| g * y),
        Op::Ln(x) => unary!(x, grads, |g, x, _| g / x),
        Op::Sqrt(x) => unary!(x, grads, |g, _, y| g / (2.0 * y)),
        Op::Abs(x) => unary!(x, grads, |g, x, _| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }),
        Op::Sigmoid(x) => unary!(x, grads, |g, _, y| g * y * (1.0 - y)),
        Op::Softplus(x) => unary!(x, grads, |g, x, _| g * sigmoid(x)),
        Op::Tanh(x) => unary!(x, grads, |g, _, y| g * (1.0 - y * y)),
        Op::Relu(x) => unary!(x, grads, |g, x, _| if x > 0.0 { g } else { 0.0 }),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let k = tb.shape()[0];
            let n = tb.shape()[1];
            let m = ta.numel() / k.max(1);
            if wants(a) {
                let mut ga = vec![0.0; ta.numel()];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                accumulate(&mut grads[a], ga);
            }
            if wants(b) {
                let mut gb = vec![0.0; tb.numel()];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                accumulate(&mut grads[b], gb);
            }
        }
        Op::Sum { x, ref keep_shape } => {
            accumulate(&mut grads[x], expand(g, keep_shape, val(x).shape()));
        }
        Op::Reshape(x) => accumulate(&mut grads[x], g.to_vec()),
        Op::Concat { ref inputs, axis } => {
            let (outer, total, inner) = lanes(out.shape(), axis);
            let mut offset = 0;
            for &x in inputs {
                let len = val(x).shape()[axis];
                if wants(x) {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(&mut grads[x], gx);
                }
                offset += len;
            }
        }
        Op::Gather {
            x,
            axis,
            ref indices,
        } => {
            let (outer, len, inner) = lanes(val(x).shape(), axis);
            let mut gx = vec![0.0; val(x).numel()];
            let picked = indices.len();
            if let Some(first) = contiguous(indices) {
                let block = picked * inner;
                for o in 0..outer {
                    let src_base = (o * len + first) * inner;
                    gx[src_base..src_base + block].copy_from_slice(&g[o * block..(o + 1) * block]);
                }
            } else {
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let dst_base = (o * picked + j) * inner;
                        let src_base = (o * len + src) * inner;
                        for t in 0..inner {
                            gx[src_base + t] += g[dst_base + t];
                        }
                    }
                }
            }
            accumulate(&mut grads[x], gx);
        }
        Op::Sort { x, axis, ref perm } => {
            let (outer, len, inner) = lanes(out.shape(), axis);
            let mut gx = vec![0.0; out.numel()];
            for o in 0..outer {
                for t in 0..inner {
                    let base = o * len * inner + t;
                    for j in 0..len {
                        let dst = base + j * inner;
                        gx[base + perm[dst] * inner] += g[dst];
                    }
                }
            }
            accumulate(&mut grads[x], gx);
        }
        Op::Pick { x, axis, ref src } => {
            let (outer, len, inner) = lanes(val(x).shape(), axis);
            let picked = out.shape()[axis];
            let mut gx = vec![0.0; val(x).numel()];
            for o in 0..outer {
                for j in 0..picked {
                    for t in 0..inner {
                        let e = (o * picked + j) * inner + t;
                        gx[(o * len + src[e]) * inner + t] += g[e];
                    }
                }
            }
            accumulate(&mut grads[x], gx);
        }
        Op::PairwiseDistance(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (batch, n, m, d) = pairwise_dims(ta.shape(), tb.shape());
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            let (ad, bd, od) = (ta.data(), tb.data(), out.data());
            for l in 0..batch {
                for i in 0..n {
                    let ai = (l * n + i) * d;
                    for j in 0..m {
                        let o = (l * n + i) * m + j;
                        let dist = od[o];
                        if dist == 0.0 {
                            continue;
                        }
                        let bj = (l * m + j) * d;
                        let coef = g[o] / dist;
                        for c in 0..d {
                            let diff = coef * (ad[ai + c] - bd[bj + c]);
                            ga[ai + c] += diff;
                            gb[bj + c] -= diff;
                        }
                    }
                }
            }
            if wants(a) {
                accumulate(&mut grads[a], ga);
            }
            if wants(b) {
                accumulate(&mut grads[b], gb);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), axis);
            let y = out.data();
            let mut gx = vec![0.0; out.numel()];
            for o in 0..outer {
                for t in 0..inner {
                    let base = o * len * inner + t;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let e = base + j * inner;
                        gx[e] = y[e] * (g[e] - dot);
                    }
                }
            }
            accumulate(&mut grads[x], gx);
        }
    }
}

/// Ascending by value (total order), ties by original position.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Places the elements of rank `ranks` (sorted, relative to `offset`) at
/// their final positions in `lane`.
fn multiselect(lane: &mut [(f64, usize)], offset: usize, ranks: &[usize]) {
    if ranks.is_empty() {
        return;
    }
    let mid = ranks.len() / 2;
    let at = ranks[mid] - offset;
    lane.select_nth_unstable_by(at, rank_order);
    let (left, right) = lane.split_at_mut(at);
    multiselect(left, offset, &ranks[..mid]);
    multiselect(&mut right[1..], offset + at + 1, &ranks[mid + 1..]);
}

/// Start of `indices` when they form an ascending run `a, a+1, ..`.
fn contiguous(indices: &[usize]) -> Option<usize> {
    let first = *indices.first()?;
    indices
        .iter()
        .enumerate()
        .all(|(j, &i)| i == first + j)
        .then_some(first)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (batch, n, m, d) for pairwise distances between `[.., n, d]` and `[.., m, d]`.
fn pairwise_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    let nd = a.len();
    let batch = a[..nd - 2].iter().product();
    (batch, a[nd - 2], b[nd - 2], a[nd - 1])
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node_id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item().expect("item() on a multi-element tensor")
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn binary(self, rhs: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "subtract",
            Binary::Mul => "multiply",
            Binary::Div => "divide",
        };
        let out_shape = broadcast_shape(a.value.shape(), b.value.shape()).ok_or_else(|| {
            AutodiffError::ShapeMismatch {
                op: name,
                lhs: a.value.shape().to_vec(),
                rhs: b.value.shape().to_vec(),
            }
        })?;
        let (ad, ash, bd, bsh) = (a.value.data(), a.value.shape(), b.value.data(), b.value.shape());
        let data = match kind {
            Binary::Add => zip_map(ad, ash, bd, bsh, &out_shape, |x, y| x + y),
            Binary::Sub => zip_map(ad, ash, bd, bsh, &out_shape, |x, y| x - y),
            Binary::Mul => zip_map(ad, ash, bd, bsh, &out_shape, |x, y| x * y),
            Binary::Div => zip_map(ad, ash, bd, bsh, &out_shape, |x, y| x / y),
        };
        let requires_grad = a.requires_grad || b.requires_grad;
        drop(nodes);
        let (x, y) = (self.id, rhs.id);
        let op = match kind {
            Binary::Add => Op::Add(x, y),
            Binary::Sub => Op::Sub(x, y),
            Binary::Mul => Op::Mul(x, y),
            Binary::Div => Op::Div(x, y),
        };
        Ok(self.tape.push(Tensor::new(out_shape, data)?, op, requires_grad))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let value = node.value.map(f);
        let requires_grad = node.requires_grad;
        drop(nodes);
        self.tape.push(value, op, requires_grad)
    }

    fn check_domain(&self, op: &'static str, ok: impl Fn(f64) -> bool, what: &str) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        if let Some(bad) = nodes[self.id].value.data().iter().find(|&&v| !ok(v)) {
            return Err(AutodiffError::Domain {
                op,
                detail: format!("{what}, got {bad}"),
            });
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(move |v| scale * v + shift, Op::Affine { x: self.id, scale })
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.affine(1.0, c)
    }

    pub fn powf(self, exponent: f64) -> Var<'t> {
        self.unary(move |v| v.powf(exponent), Op::PowF(self.id, exponent))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, Op::Square(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Natural logarithm; negative inputs are a domain error, zero maps to `-inf`.
    pub fn ln(self) -> Result<Var<'t>> {
        self.check_domain("logarithm", |v| !(v < 0.0), "negative input")?;
        Ok(self.unary(f64::ln, Op::Ln(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.check_domain("square-root", |v| !(v < 0.0), "negative input")?;
        Ok(self.unary(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln1p(e^-|x|)`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    /// `[.., m, k] × [k, n] → [.., m, n]`; leading axes of `self` are batch axes.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let (sa, sb) = (a.value.shape(), b.value.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matrix-multiply",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = a.value.numel() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, a.value.data(), false, b.value.data(), false, &mut data, false);
        let requires_grad = a.requires_grad || b.requires_grad;
        drop(nodes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(value, Op::MatMul(self.id, rhs.id), requires_grad))
    }

    fn check_axes(&self, op: &'static str, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!("repeated axis in {axes:?}"),
            });
        }
        if let Some(&axis) = sorted.iter().find(|&&a| a >= shape.len()) {
            return Err(AutodiffError::InvalidAxis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Sum over `axes`; with `keep_dims` the reduced axes stay as size 1.
    pub fn sum(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        let shape = self.check_axes("sum", axes)?;
        let keep_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let data = {
            let nodes = self.tape.nodes.borrow();
            sum_to_shape(nodes[self.id].value.data(), &shape, &keep_shape)
        };
        let out_shape = if keep_dims {
            keep_shape.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let requires_grad = self.requires_grad();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(
            value,
            Op::Sum {
                x: self.id,
                keep_shape,
            },
            requires_grad,
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false).expect("all axes are valid")
    }

    pub fn mean(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        let shape = self.check_axes("mean", axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        Ok(self.sum(axes, keep_dims)?.mul_scalar(1.0 / count as f64))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Population variance (divide by N) over `axes`.
    pub fn variance(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        let centered = self.sub(self.mean(axes, true)?)?;
        centered.square().mean(axes, keep_dims)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        let requires_grad = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), requires_grad))
    }

    /// Selects `indices` (in order, repeats allowed) along `axis`.
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.check_axes("gather", &[axis])?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                detail: format!("index {bad} out of range for axis of size {}", shape[axis]),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        {
            let nodes = self.tape.nodes.borrow();
            let src = nodes[self.id].value.data();
            if let Some(first) = contiguous(indices) {
                let block = indices.len() * inner;
                for o in 0..outer {
                    let start = (o * len + first) * inner;
                    data.extend_from_slice(&src[start..start + block]);
                }
            } else {
                for o in 0..outer {
                    for &i in indices {
                        let start = (o * len + i) * inner;
                        data.extend_from_slice(&src[start..start + inner]);
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let requires_grad = self.requires_grad();
        let value = Tensor::new(out_shape, data)?;
        let op = Op::Gather {
            x: self.id,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.tape.push(value, op, requires_grad))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        if start > end {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                detail: format!("empty range {start}..{end}"),
            });
        }
        let indices: Vec<usize> = (start..end).collect();
        self.gather(axis, &indices)
    }

    /// Stable ascending sort along `axis`; gradients follow the permutation.
    pub fn sort(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axes("sort-along-axis", &[axis])?;
        let (outer, len, inner) = lanes(&shape, axis);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        let mut perm = vec![0usize; n];
        {
            let nodes = self.tape.nodes.borrow();
            let src = nodes[self.id].value.data();
            // Ties break on position, which makes the unstable sort stable.
            let mut lane: Vec<(f64, usize)> = Vec::with_capacity(len);
            for o in 0..outer {
                for t in 0..inner {
                    let base = o * len * inner + t;
                    lane.clear();
                    lane.extend((0..len).map(|i| (src[base + i * inner], i)));
                    lane.sort_unstable_by(rank_order);
                    for (j, &(v, i)) in lane.iter().enumerate() {
                        data[base + j * inner] = v;
                        perm[base + j * inner] = i;
                    }
                }
            }
        }
        let requires_grad = self.requires_grad();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(value, Op::Sort { x: self.id, axis, perm }, requires_grad))
    }

    /// Values of rank `ranks[j]` (0-based, ascending) along `axis`, i.e.
    /// `sort(axis)` followed by `gather(axis, ranks)`, computed by selection.
    pub fn order_statistics(self, axis: usize, ranks: &[usize]) -> Result<Var<'t>> {
        let shape = self.check_axes("order-statistics", &[axis])?;
        let (outer, len, inner) = lanes(&shape, axis);
        if let Some(&bad) = ranks.iter().find(|&&r| r >= len) {
            return Err(AutodiffError::InvalidArgument {
                op: "order-statistics",
                detail: format!("rank {bad} out of range for axis of size {len}"),
            });
        }
        let mut wanted = ranks.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let k = ranks.len();
        let mut data = vec![0.0; outer * k * inner];
        let mut src = vec![0usize; outer * k * inner];
        {
            let nodes = self.tape.nodes.borrow();
            let values = nodes[self.id].value.data();
            let mut lane: Vec<(f64, usize)> = Vec::with_capacity(len);
            for o in 0..outer {
                for t in 0..inner {
                    let base = o * len * inner + t;
                    lane.clear();
                    lane.extend((0..len).map(|i| (values[base + i * inner], i)));
                    multiselect(&mut lane, 0, &wanted);
                    for (j, &r) in ranks.iter().enumerate() {
                        let e = (o * k + j) * inner + t;
                        data[e] = lane[r].0;
                        src[e] = lane[r].1;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = k;
        let requires_grad = self.requires_grad();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(value, Op::Pick { x: self.id, axis, src }, requires_grad))
    }

    /// Euclidean distances between the rows of `[.., n, d]` and `[.., m, d]`,
    /// giving `[.., n, m]`. Leading axes must match exactly.
    ///
    /// The gradient at zero distance is taken as zero.
    pub fn pairwise_distance(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let (sa, sb) = (a.value.shape(), b.value.shape());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "pairwise-distance",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, n, m, d) = pairwise_dims(sa, sb);
        let (ad, bd) = (a.value.data(), b.value.data());
        let mut data = Vec::with_capacity(batch * n * m);
        for l in 0..batch {
            for i in 0..n {
                let ai = &ad[(l * n + i) * d..(l * n + i + 1) * d];
                for j in 0..m {
                    let bj = &bd[(l * m + j) * d..(l * m + j + 1) * d];
                    let sq: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                    data.push(sq.sqrt());
                }
            }
        }
        let mut out_shape = sa[..nd - 2].to_vec();
        out_shape.extend([n, m]);
        let requires_grad = a.requires_grad || b.requires_grad;
        drop(nodes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self
            .tape
            .push(value, Op::PairwiseDistance(self.id, rhs.id), requires_grad))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axes("softmax", &[axis])?;
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        {
            let nodes = self.tape.nodes.borrow();
            let src = nodes[self.id].value.data();
            for o in 0..outer {
                for t in 0..inner {
                    let base = o * len * inner + t;
                    let max = (0..len)
                        .map(|j| src[base + j * inner])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (src[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        total += e;
                    }
                    for j in 0..len {
                        data[base + j * inner] /= total;
                    }
                }
            }
        }
        let requires_grad = self.requires_grad();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(value, Op::Softmax { x: self.id, axis }, requires_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.square();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).item(), Some(6.0));
    }

    #[test]
    fn mean_square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let loss = x.sub(c).unwrap().square().mean_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let grads = tape.backward(x.sum_all()).unwrap();
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![3, 2]
            }
        );
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, -0.5]));
        assert!(matches!(x.ln(), Err(AutodiffError::Domain { .. })));
        assert!(matches!(x.sqrt(), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!((x.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = tape.constant(Tensor::scalar(1000.0));
        assert_eq!(big.softplus().item(), 1000.0);
    }

    #[test]
    fn mean_over_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.mean(&[0], false).unwrap().item(), 2.5);
    }

    #[test]
    fn sort_routes_gradient_through_permutation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 1.0, 2.0]));
        let sorted = x.sort(0).unwrap();
        assert_eq!(sorted.value().data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let grads = tape.backward(sorted.mul(w).unwrap().sum_all()).unwrap();
        // upstream (10, 20, 30) lands at positions given by the inverse permutation
        assert_eq!(grads.wrt(x).data(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let sorted = x.sort(0).unwrap();
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let grads = tape.backward(sorted.mul(w).unwrap().sum_all()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 1.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = c.slice(1, 1, 3).unwrap();
        assert_eq!(back.value().data(), b.value().data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 800.0]).unwrap());
        let y = x.softmax(1).unwrap();
        let v = y.value();
        for row in v.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_is_population() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 2.0]));
        assert_eq!(x.variance(&[0], false).unwrap().item(), 1.0);
    }

    #[test]
    fn foreign_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.constant(Tensor::scalar(1.0));
        let b = t2.constant(Tensor::scalar(1.0));
        assert_eq!(a.add(b).unwrap_err(), AutodiffError::ForeignVar);
    }
}
