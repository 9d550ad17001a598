//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends one node; inputs always precede outputs, so a
//! single reverse sweep over the node list is a valid topological traversal.

use std::cell::RefCell;
use std::fmt;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-12;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale { x: usize, s: f32 },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Transpose(usize),
    GatherRows { x: usize, idx: Vec<usize> },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    PoolRows { x: usize, groups: Vec<Vec<usize>> },
    NormalizeRows { x: usize, norms: Vec<f32> },
    RowNorm(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        ranges: Vec<(usize, usize)>,
        probs: Vec<f32>,
        offsets: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
    // f64 shadow of one-element results, kept so finite differences of a
    // loss are not limited by f32 rounding of the final reduction
    precise: Option<f64>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Operation record for one forward/backward pass. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
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

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            precise: None,
        });
        inner.grads.push(None);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn set_precise(&self, v: Var<'_>, p: f64) {
        self.inner.borrow_mut().nodes[v.id].precise = Some(p);
    }

    fn precise(&self, id: usize) -> Option<f64> {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id];
        (n.value.len() == 1).then(|| n.precise.unwrap_or(n.value[0] as f64))
    }

    /// Records a leaf; it participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that always participates in differentiation.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *guard;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        match &mut grads[loss.id] {
            Some(g) => g[0] += 1.0,
            None => grads[loss.id] = Some(vec![1.0]),
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, grads, id, &g);
        }
        Ok(())
    }

    /// Gradient of a leaf (zeros when nothing has flowed into it).
    pub fn grad(&self, v: Var<'_>) -> Vec<f32> {
        let inner = self.inner.borrow();
        inner.grads[v.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; inner.nodes[v.id].value.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&self, x: Var<'_>) -> (Vec<usize>, bool) {
        let inner = self.inner.borrow();
        let n = &inner.nodes[x.id];
        (n.shape.clone(), n.requires_grad)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn check_tape(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variables from different tapes");
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f32>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: usize, g: &[f32]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, tb } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = node.shape[1];
            let bv = &nodes[*b].value;
            if let Some(da) = acc(grads, nodes, *a) {
                // dA = dC * B^T
                gemm(m, n, k, g, false, bv, !*tb, da, true);
            }
            let av = &nodes[*a].value;
            if let Some(db) = acc(grads, nodes, *b) {
                if *tb {
                    // B is n x k: dB = dC^T * A
                    gemm(n, m, k, g, true, av, false, db, true);
                } else {
                    gemm(k, m, n, av, true, g, false, db, true);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                add_into(d, g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                add_into(d, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                add_into(d, g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(d) = acc(grads, nodes, *x) {
                add_into(d, g);
            }
            if let Some(d) = acc(grads, nodes, *bias) {
                let n = d.len();
                for row in g.chunks_exact(n) {
                    add_into(d, row);
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(d) = acc(grads, nodes, p) {
                    add_into(d, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = *node.shape.last().unwrap();
            if let Some(d) = acc(grads, nodes, *x) {
                add_into(&mut d[start * cols..start * cols + g.len()], g);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            if let Some(d) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let cols = *node.shape.last().unwrap();
            if let Some(d) = acc(grads, nodes, *x) {
                for (i, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * cols..(src + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            }
        }
        Op::Softmax(x) => {
            let cols = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(d) = acc(grads, nodes, *x) {
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(cols)
                    .zip(y.chunks_exact(cols))
                    .zip(g.chunks_exact(cols))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let cols = *node.shape.last().unwrap();
            let gv = &nodes[*gamma].value;
            if let Some(d) = acc(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for j in 0..cols {
                        d[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(d) = acc(grads, nodes, *beta) {
                for gr in g.chunks_exact(cols) {
                    add_into(d, gr);
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let inv_n = 1.0 / cols as f32;
                let mut dxhat = vec![0.0f32; cols];
                for (r, ((dr, gr), xr)) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(xhat.chunks_exact(cols))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for j in 0..cols {
                        dr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            if let Some(d) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            if let Some(d) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                let s = g[0] / d.len() as f32;
                d.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::PoolRows { x, groups } => {
            let cols = *node.shape.last().unwrap();
            if let Some(d) = acc(grads, nodes, *x) {
                for (gi, rows) in groups.iter().enumerate() {
                    let w = 1.0 / rows.len() as f32;
                    let gr = &g[gi * cols..(gi + 1) * cols];
                    for &r in rows {
                        d[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, b)| *a += w * b);
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let cols = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(d) = acc(grads, nodes, *x) {
                for (r, ((dr, yr), gr)) in d
                    .chunks_exact_mut(cols)
                    .zip(y.chunks_exact(cols))
                    .zip(g.chunks_exact(cols))
                    .enumerate()
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let inv = 1.0 / norms[r];
                    for j in 0..cols {
                        dr[j] += (gr[j] - yr[j] * dot) * inv;
                    }
                }
            }
        }
        Op::RowNorm(x) => {
            let cols = *nodes[*x].shape.last().unwrap();
            let xv = &nodes[*x].value;
            let norms = &node.value;
            if let Some(d) = acc(grads, nodes, *x) {
                for r in 0..norms.len() {
                    let s = g[r] / norms[r].max(NORM_EPS);
                    for j in 0..cols {
                        d[r * cols + j] += s * xv[r * cols + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let cols = *nodes[*logits].shape.last().unwrap();
            if let Some(d) = acc(grads, nodes, *logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    let pr = &probs[r * cols..(r + 1) * cols];
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += s * pr[j];
                    }
                    dr[t] -= s;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            ranges,
            probs,
            offsets,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, ranges, probs, offsets),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    g: &[f32],
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    ranges: &[(usize, usize)],
    probs: &[f32],
    offsets: &[usize],
) {
    let dim = nodes[q].shape[1];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let nk = nodes[k].value.len();
    let mut dq = vec![0.0f32; qv.len()];
    let mut dk = vec![0.0f32; nk];
    let mut dv = vec![0.0f32; nk];
    let mut dp = Vec::new();
    for (i, &(lo, hi)) in ranges.iter().enumerate() {
        for h in 0..heads {
            let p = &probs[offsets[i * heads + h]..offsets[i * heads + h] + (hi - lo)];
            let go = &g[i * dim + h * dh..i * dim + (h + 1) * dh];
            dp.clear();
            for (jj, j) in (lo..hi).enumerate() {
                let vr = &vv[j * dim + h * dh..j * dim + (h + 1) * dh];
                let dvr = &mut dv[j * dim + h * dh..j * dim + (h + 1) * dh];
                let mut s = 0.0;
                for c in 0..dh {
                    dvr[c] += p[jj] * go[c];
                    s += go[c] * vr[c];
                }
                dp.push(s);
            }
            let dot: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qr = &qv[i * dim + h * dh..i * dim + (h + 1) * dh];
            for (jj, j) in (lo..hi).enumerate() {
                let ds = p[jj] * (dp[jj] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kr = &kv[j * dim + h * dh..j * dim + (h + 1) * dh];
                let dkr = &mut dk[j * dim + h * dh..j * dim + (h + 1) * dh];
                for c in 0..dh {
                    dq[i * dim + h * dh + c] += ds * kr[c];
                    dkr[c] += ds * qr[c];
                }
            }
        }
    }
    if let Some(d) = acc(grads, nodes, q) {
        add_into(d, &dq);
    }
    if let Some(d) = acc(grads, nodes, k) {
        add_into(d, &dk);
    }
    if let Some(d) = acc(grads, nodes, v) {
        add_into(d, &dv);
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f32 {
        self.tape.inner.borrow().nodes[self.id].value[0]
    }

    /// Like [`Var::item`], but from the f64 accumulator when the producing
    /// reduction kept one.
    pub fn item_f64(&self) -> f64 {
        self.tape.precise(self.id).unwrap_or(self.item() as f64)
    }

    pub fn grad(&self) -> Vec<f32> {
        self.tape.grad(*self)
    }

    fn with_values<R>(&self, f: impl FnOnce(&[usize], &[f32]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        f(&n.shape, &n.value)
    }

    fn matmul_impl(&self, other: &Var<'t>, tb: bool) -> Result<Var<'t>> {
        self.tape.check_tape(*other);
        let (sa, sb) = (self.shape(), other.shape());
        let ok = sa.len() == 2
            && sb.len() == 2
            && if tb { sa[1] == sb[1] } else { sa[1] == sb[0] };
        if !ok {
            return Err(Error::Shape {
                op: if tb { "matmul_t" } else { "matmul" },
                left: sa,
                right: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if tb { sb[0] } else { sb[1] };
        let mut out = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            gemm(
                m,
                k,
                n,
                &inner.nodes[self.id].value,
                false,
                &inner.nodes[other.id].value,
                tb,
                &mut out,
                false,
            );
        }
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                tb,
            },
            rg,
        ))
    }

    /// `self [m,k] x other [k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self [m,k] x other^T` where `other` is `[n,k]`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        f64_op: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.tape.check_tape(*other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Shape {
                op: name,
                left: sa,
                right: sb,
            });
        }
        let out: Vec<f32> = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        let precise = self
            .tape
            .precise(self.id)
            .zip(self.tape.precise(other.id))
            .map(|(a, b)| f64_op(a, b));
        let v = self.tape.push(sa, out, op(self.id, other.id), rg);
        if let Some(p) = precise {
            self.tape.set_precise(v, p);
        }
        Ok(v)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, |a, b| a * b, Op::Mul)
    }

    /// Adds a length-`n` vector to every row of `self [.., n]`.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.tape.check_tape(*bias);
        let (sx, sb) = (self.shape(), bias.shape());
        if sb.iter().product::<usize>() != *sx.last().unwrap() {
            return Err(Error::Shape {
                op: "add_row",
                left: sx,
                right: sb,
            });
        }
        let out: Vec<f32> = {
            let inner = self.tape.inner.borrow();
            let b = &inner.nodes[bias.id].value;
            let n = b.len();
            let mut out = inner.nodes[self.id].value.clone();
            for row in out.chunks_exact_mut(n) {
                add_into(row, b);
            }
            out
        };
        let rg = self.tape.rg(&[self.id, bias.id]);
        Ok(self.tape.push(
            sx,
            out,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let out = self.with_values(|_, v| v.iter().map(|x| x * s).collect());
        let precise = self.tape.precise(self.id).map(|p| p * s as f64);
        let v = self.tape.push(shape, out, Op::Scale { x: self.id, s }, rg);
        if let Some(p) = precise {
            self.tape.set_precise(v, p);
        }
        v
    }

    /// Stacks matrices with equal row length along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero parts"))?;
        let tape = first.tape;
        let cols = *first.shape().last().unwrap();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            tape.check_tape(*p);
            let s = p.shape();
            if *s.last().unwrap() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: s,
                });
            }
            p.with_values(|_, v| data.extend_from_slice(v));
            rows += s.iter().product::<usize>() / cols;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(vec![rows, cols], data, Op::ConcatRows(ids), rg))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if len == 0 || start + len > rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: shape,
                right: vec![start, len],
            });
        }
        let out = self.with_values(|_, v| v[start * cols..(start + len) * cols].to_vec());
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![len, cols], out, Op::SliceRows { x: self.id, start }, rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: shape,
                right: vec![],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let out = self.with_values(|_, v| {
            let mut t = vec![0.0; v.len()];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = v[i * c + j];
                }
            }
            t
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![c, r], out, Op::Transpose(self.id), rg))
    }

    /// Row lookup; doubles as the embedding gather.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: shape,
                right: vec![bad],
            });
        }
        let out = self.with_values(|_, v| {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
            }
            out
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(&self) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let cols = *shape.last().unwrap();
        let out = self.with_values(|_, v| {
            let mut out = v.to_vec();
            for row in out.chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
            out
        });
        self.tape.push(shape, out, Op::Softmax(self.id), rg)
    }

    /// Layer normalization over the last axis followed by a per-feature
    /// affine map.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f32) -> Result<Var<'t>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        for p in [gamma, beta] {
            self.tape.check_tape(*p);
            if p.shape().iter().product::<usize>() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: shape,
                    right: p.shape(),
                });
            }
        }
        let (out, xhat, rstd) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let gv = &inner.nodes[gamma.id].value;
            let bv = &inner.nodes[beta.id].value;
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = Vec::with_capacity(x.len() / cols);
            for (r, row) in x.chunks_exact(cols).enumerate() {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + eps as f64).sqrt();
                rstd.push(rs as f32);
                for j in 0..cols {
                    let h = ((row[j] as f64 - mean) * rs) as f32;
                    xhat[r * cols + j] = h;
                    out[r * cols + j] = h * gv[j] + bv[j];
                }
            }
            (out, xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let out = self.with_values(|_, v| v.iter().map(|&x| gelu(x)).collect());
        self.tape.push(shape, out, Op::Gelu(self.id), rg)
    }

    pub fn relu(&self) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let out = self.with_values(|_, v| v.iter().map(|&x| x.max(0.0)).collect());
        self.tape.push(shape, out, Op::Relu(self.id), rg)
    }

    pub fn sum(&self) -> Var<'t> {
        let rg = self.requires_grad();
        let s = self.with_values(|_, v| v.iter().map(|&x| x as f64).sum::<f64>());
        let v = self.tape.push(vec![1], vec![s as f32], Op::Sum(self.id), rg);
        self.tape.set_precise(v, s);
        v
    }

    pub fn mean(&self) -> Var<'t> {
        let rg = self.requires_grad();
        let s = self.with_values(|_, v| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64);
        let v = self.tape.push(vec![1], vec![s as f32], Op::Mean(self.id), rg);
        self.tape.set_precise(v, s);
        v
    }

    /// Mean of each group of rows; output row `i` pools `groups[i]`.
    pub fn pool_rows(&self, groups: &[Vec<usize>]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::invalid("pool_rows requires non-empty groups"));
        }
        if let Some(&bad) = groups.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::Shape {
                op: "pool_rows",
                left: shape,
                right: vec![bad],
            });
        }
        let out = self.with_values(|_, v| {
            let mut out = vec![0.0f32; groups.len() * cols];
            for (gi, rs) in groups.iter().enumerate() {
                let o = &mut out[gi * cols..(gi + 1) * cols];
                for &r in rs {
                    add_into(o, &v[r * cols..(r + 1) * cols]);
                }
                let w = 1.0 / rs.len() as f32;
                o.iter_mut().for_each(|x| *x *= w);
            }
            out
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![groups.len(), cols],
            out,
            Op::PoolRows {
                x: self.id,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&self) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let cols = *shape.last().unwrap();
        let (out, norms) = self.with_values(|_, v| {
            let mut out = v.to_vec();
            let mut norms = Vec::with_capacity(v.len() / cols);
            for row in out.chunks_exact_mut(cols) {
                let n = (row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32)
                    .max(NORM_EPS);
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            (out, norms)
        });
        self.tape.push(
            shape,
            out,
            Op::NormalizeRows {
                x: self.id,
                norms,
            },
            rg,
        )
    }

    /// Per-row L2 norm, shape `[rows, 1]`.
    pub fn row_norms(&self) -> Var<'t> {
        let (shape, rg) = self.tape.unary(*self);
        let (rows, cols) = rows_cols(&shape);
        let out = self.with_values(|_, v| {
            v.chunks_exact(cols)
                .map(|r| r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32)
                .collect()
        });
        self.tape.push(vec![rows, 1], out, Op::RowNorm(self.id), rg)
    }

    /// Cosine-similarity matrix between the rows of `self` and `other`.
    pub fn cosine_matrix(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.normalize_rows().matmul_t(&other.normalize_rows())
    }

    /// `sum_i w_i * -log softmax(self_i)[targets_i]`, computed with log-sum-exp.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f32]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::invalid(format!(
                "cross_entropy target {bad} out of range for {cols} classes"
            )));
        }
        let (loss, probs) = self.with_values(|_, v| {
            let mut probs = v.to_vec();
            let mut loss = 0.0f64;
            for (r, row) in probs.chunks_exact_mut(cols).enumerate() {
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse = row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln()
                    + max as f64;
                loss += weights[r] as f64 * (lse - row[targets[r]] as f64);
                row.iter_mut().for_each(|x| *x = ((*x as f64) - lse).exp() as f32);
            }
            (loss, probs)
        });
        let rg = self.requires_grad();
        let v = self.tape.push(
            vec![1],
            vec![loss as f32],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        );
        self.tape.set_precise(v, loss);
        Ok(v)
    }

    /// Multi-head scaled dot-product attention. Query row `i` attends to key
    /// rows `ranges[i].0 .. ranges[i].1`; masking (padding, causality,
    /// sequence packing) is expressed entirely through these ranges.
    pub fn attention(
        q: &Var<'t>,
        k: &Var<'t>,
        v: &Var<'t>,
        heads: usize,
        ranges: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        let tape = q.tape;
        tape.check_tape(*k);
        tape.check_tape(*v);
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::Shape {
                op: "attention",
                left: sq,
                right: sk,
            });
        }
        let (nq, dim, nk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: width {dim} not divisible by {heads} heads"
            )));
        }
        if ranges.len() != nq {
            return Err(Error::Shape {
                op: "attention ranges",
                left: sq,
                right: vec![ranges.len()],
            });
        }
        if let Some(r) = ranges.iter().find(|&&(lo, hi)| lo >= hi || hi > nk) {
            return Err(Error::invalid(format!(
                "attention: key range {r:?} invalid for {nk} keys"
            )));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (out, probs, offsets) = {
            let inner = tape.inner.borrow();
            let (qv, kv, vv) = (
                &inner.nodes[q.id].value,
                &inner.nodes[k.id].value,
                &inner.nodes[v.id].value,
            );
            let mut out = vec![0.0f32; nq * dim];
            let mut probs = Vec::new();
            let mut offsets = Vec::with_capacity(nq * heads);
            for (i, &(lo, hi)) in ranges.iter().enumerate() {
                for h in 0..heads {
                    let off = probs.len();
                    offsets.push(off);
                    let qr = &qv[i * dim + h * dh..i * dim + (h + 1) * dh];
                    for j in lo..hi {
                        let kr = &kv[j * dim + h * dh..j * dim + (h + 1) * dh];
                        probs.push(qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale);
                    }
                    let p = &mut probs[off..];
                    softmax_in_place(p);
                    let o = &mut out[i * dim + h * dh..i * dim + (h + 1) * dh];
                    for (jj, j) in (lo..hi).enumerate() {
                        let vr = &vv[j * dim + h * dh..j * dim + (h + 1) * dh];
                        let w = p[jj];
                        o.iter_mut().zip(vr).for_each(|(a, b)| *a += w * b);
                    }
                }
            }
            (out, probs, offsets)
        };
        let rg = tape.rg(&[q.id, k.id, v.id]);
        Ok(tape.push(
            vec![nq, dim],
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                ranges: ranges.to_vec(),
                probs,
                offsets,
            },
            rg,
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
