use std::cell::RefCell;

use super::{sigmoid, softmax_slice, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    SmoothL1(usize),
    Softmax(usize),
    Sum { input: usize, axes: Vec<usize> },
    Reshape(usize),
    TransposeLast2(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Stack(Vec<usize>),
    Narrow { input: usize, axis: usize, start: usize },
    ExpandLeading(usize),
    RowNormalize(usize),
    ScaleBatch(usize, usize),
    MaskMul(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass. Single-threaded; build one tape
/// per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    /// Registers a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, value: Tensor, op: Op, operands: &[usize]) -> Var<'_> {
        let needs = self.needs(operands);
        self.push(value, op, needs)
    }

    /// Reverse sweep from a scalar `loss`. Every leaf gets a gradient buffer;
    /// leaves the loss does not depend on read as zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape.clone();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let k = bv.shape[0];
            let n = bv.shape[1];
            let rows = av.len() / k;
            accumulate(grads, nodes, *a, |ga| {
                // dA = dC · Bᵀ
                for r in 0..rows {
                    let grow = &g[r * n..(r + 1) * n];
                    let garow = &mut ga[r * k..(r + 1) * k];
                    for (p, gap) in garow.iter_mut().enumerate() {
                        let brow = &bv.data[p * n..(p + 1) * n];
                        *gap += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                // dB = Aᵀ · dC, summed over leading axes
                for r in 0..rows {
                    let arow = &av.data[r * k..(r + 1) * k];
                    let grow = &g[r * n..(r + 1) * n];
                    for (p, &ap) in arow.iter().enumerate() {
                        if ap == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for (x, &y) in gbrow.iter_mut().zip(grow) {
                            *x += ap * y;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, *a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            let blen = nodes[*b].value.len();
            accumulate(grads, nodes, *b, |gb| {
                for (i, &y) in g.iter().enumerate() {
                    gb[i % blen] += sign * y;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value.data;
            let bv = &nodes[*b].value.data;
            let blen = bv.len();
            accumulate(grads, nodes, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv[i % blen];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, &y) in g.iter().enumerate() {
                    gb[i % blen] += y * av[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += c * y;
            }
        }),
        Op::Relu(a) => {
            let av = &nodes[*a].value.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                let s = out.data[i];
                ga[i] += g[i] * s * (1.0 - s);
            }
        }),
        Op::Abs(a) => {
            let av = &nodes[*a].value.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * s;
                }
            });
        }
        Op::Square(a) => {
            let av = &nodes[*a].value.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            });
        }
        Op::SmoothL1(a) => {
            let av = &nodes[*a].value.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    let d = if av[i].abs() < 1.0 { av[i] } else { av[i].signum() };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Softmax(a) => {
            let n = *out.shape.last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for (row, (yr, gr)) in out.data.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gy)| y * gy).sum();
                    for j in 0..n {
                        ga[row * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Sum { input, axes } => {
            let in_shape = &nodes[*input].value.shape;
            let map = reduce_map(in_shape, axes);
            accumulate(grads, nodes, *input, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[map[i]];
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += y;
            }
        }),
        Op::TransposeLast2(a) => {
            let s = &nodes[*a].value.shape;
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            accumulate(grads, nodes, *a, |ga| {
                for b in 0..ga.len() / (m * n) {
                    let base = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            ga[base + i * n + j] += g[base + j * m + i];
                        }
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape[..*axis].iter().product();
            let inner: usize = out.shape[axis + 1..].iter().product();
            let out_block = out.shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let block = nodes[inp].value.shape[*axis] * inner;
                accumulate(grads, nodes, inp, |gi| {
                    for o in 0..outer {
                        let src = &g[o * out_block + offset..o * out_block + offset + block];
                        for (x, &y) in gi[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
                offset += block;
            }
        }
        Op::Stack(inputs) => {
            let len = nodes[inputs[0]].value.len();
            for (k, &inp) in inputs.iter().enumerate() {
                accumulate(grads, nodes, inp, |gi| {
                    for (x, &y) in gi.iter_mut().zip(&g[k * len..(k + 1) * len]) {
                        *x += y;
                    }
                });
            }
        }
        Op::Narrow { input, axis, start } => {
            let in_shape = &nodes[*input].value.shape;
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let in_block = in_shape[*axis] * inner;
            let block = out.shape[*axis] * inner;
            accumulate(grads, nodes, *input, |gi| {
                for o in 0..outer {
                    let dst = &mut gi[o * in_block + start * inner..o * in_block + start * inner + block];
                    for (x, &y) in dst.iter_mut().zip(&g[o * block..(o + 1) * block]) {
                        *x += y;
                    }
                }
            });
        }
        Op::ExpandLeading(a) => {
            let len = nodes[*a].value.len();
            accumulate(grads, nodes, *a, |ga| {
                for chunk in g.chunks(len) {
                    for (x, &y) in ga.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            });
        }
        Op::RowNormalize(a) => {
            let av = &nodes[*a].value.data;
            let n = *out.shape.last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..av.len() / n {
                    let row = &av[r * n..(r + 1) * n];
                    let s: f64 = row.iter().sum();
                    if s <= 0.0 {
                        continue;
                    }
                    let yr = &out.data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gy)| y * gy).sum();
                    for j in 0..n {
                        ga[r * n + j] += (gr[j] - dot) / s;
                    }
                }
            });
        }
        Op::ScaleBatch(a, s) => {
            let av = &nodes[*a].value.data;
            let sv = &nodes[*s].value.data;
            let per = av.len() / sv.len();
            accumulate(grads, nodes, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * sv[i / per];
                }
            });
            accumulate(grads, nodes, *s, |gs| {
                for (b, x) in gs.iter_mut().enumerate() {
                    *x += (b * per..(b + 1) * per).map(|i| g[i] * av[i]).sum::<f64>();
                }
            });
        }
        Op::MaskMul(a, mask) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * mask[i];
            }
        }),
    }
}

/// Maps each flat input index to the flat output index after summing `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_strides[d] = stride;
            stride *= shape[d];
        }
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_ok(left: &[usize], right: &[usize]) -> bool {
    left == right || right.iter().product::<usize>() == 1 || (right.len() < left.len() && left.ends_with(right))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape);
        v.data[0]
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    /// `[..., m, k] × [k, n] → [..., m, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.with2(other, |a, b| {
            let (ar, br) = (a.rank(), b.rank());
            if ar < 2 || br != 2 || a.shape[ar - 1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let k = b.shape[0];
            let n = b.shape[1];
            let rows = a.len() / k;
            let mut data = vec![0.0; rows * n];
            for r in 0..rows {
                let arow = &a.data[r * k..(r + 1) * k];
                let crow = &mut data[r * n..(r + 1) * n];
                for (p, &ap) in arow.iter().enumerate() {
                    if ap == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += ap * bv;
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape[ar - 1] = n;
            Ok(Tensor { shape, data })
        })?;
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.with2(other, |a, b| {
            if !broadcast_ok(&a.shape, &b.shape) {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let blen = b.len();
            let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % blen])).collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.tape.record(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.record(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Hadamard product (with the same broadcast rule as `add`).
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape.record(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.with(|a| a.map(|x| c * x));
        self.tape.record(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| if x > 0.0 { x } else { 0.0 }));
        self.tape.record(v, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.with(|a| a.map(sigmoid));
        self.tape.record(v, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.with(|a| a.map(f64::abs));
        self.tape.record(v, Op::Abs(self.id), &[self.id])
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x * x));
        self.tape.record(v, Op::Square(self.id), &[self.id])
    }

    /// Huber loss with threshold 1: `0.5x²` inside, `|x| − 0.5` outside.
    pub fn smooth_l1(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 }));
        self.tape.record(v, Op::SmoothL1(self.id), &[self.id])
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if a.data.iter().any(|x| x.is_nan()) {
                return Err(TensorError::NaN { op: "softmax" });
            }
            let n = *a.shape.last().unwrap();
            let data = a.data.chunks(n).flat_map(softmax_slice).collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })?;
        Ok(self.tape.record(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Sums over `axes`, removing them. Removing every axis yields shape `[1]`.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let (v, axes) = self.with(|a| {
            let mut axes = axes.to_vec();
            axes.sort_unstable();
            axes.dedup();
            if let Some(&bad) = axes.iter().find(|&&d| d >= a.rank()) {
                return Err(TensorError::InvalidAxis {
                    op: "sum",
                    axis: bad,
                    rank: a.rank(),
                });
            }
            let mut shape: Vec<usize> = (0..a.rank()).filter(|d| !axes.contains(d)).map(|d| a.shape[d]).collect();
            if shape.is_empty() {
                shape.push(1);
            }
            let map = reduce_map(&a.shape, &axes);
            let mut data = vec![0.0; shape.iter().product()];
            for (i, &x) in a.data.iter().enumerate() {
                data[map[i]] += x;
            }
            Ok((Tensor { shape, data }, axes))
        })?;
        Ok(self.tape.record(v, Op::Sum { input: self.id, axes }, &[self.id]))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if let Some(&bad) = axes.iter().find(|&&d| d >= shape.len()) {
            return Err(TensorError::InvalidAxis {
                op: "mean",
                axis: bad,
                rank: shape.len(),
            });
        }
        let mut uniq = axes.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let count: usize = uniq.iter().map(|&d| shape[d]).product();
        Ok(self.sum_axes(&uniq)?.scale(1.0 / count as f64))
    }

    pub fn sum(&self) -> Var<'t> {
        let rank = self.with(Tensor::rank);
        self.sum_axes(&(0..rank).collect::<Vec<_>>()).expect("all axes valid")
    }

    pub fn mean(&self) -> Var<'t> {
        let rank = self.with(Tensor::rank);
        self.mean_axes(&(0..rank).collect::<Vec<_>>()).expect("all axes valid")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if shape.iter().product::<usize>() != a.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    left: a.shape.clone(),
                    right: shape.to_vec(),
                });
            }
            Ok(Tensor {
                shape: shape.to_vec(),
                data: a.data.clone(),
            })
        })?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Swaps the last two axes (a plain transpose for matrices).
    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.with(|a| {
            let r = a.rank();
            if r < 2 {
                return Err(TensorError::InvalidAxis {
                    op: "transpose",
                    axis: 1,
                    rank: r,
                });
            }
            let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
            let mut data = vec![0.0; a.len()];
            for b in 0..a.len() / (m * n) {
                let base = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        data[base + j * m + i] = a.data[base + i * n + j];
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.swap(r - 2, r - 1);
            Ok(Tensor { shape, data })
        })?;
        Ok(self.tape.record(v, Op::TransposeLast2(self.id), &[self.id]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "concat",
                reason: "no operands".into(),
            })?
            .tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = {
            let nodes = tape.nodes.borrow();
            let first = &nodes[ids[0]].value;
            if axis >= first.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "concat",
                    axis,
                    rank: first.rank(),
                });
            }
            let mut total = 0;
            for &id in &ids {
                let s = &nodes[id].value.shape;
                let compatible = s.len() == first.rank()
                    && s.iter().zip(&first.shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: first.shape.clone(),
                        right: s.clone(),
                    });
                }
                total += s[axis];
            }
            let outer: usize = first.shape[..axis].iter().product();
            let inner: usize = first.shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &id in &ids {
                    let t = &nodes[id].value;
                    let block = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.shape.clone();
            shape[axis] = total;
            Tensor { shape, data }
        };
        Ok(tape.record(v, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    /// Stacks equal-shaped operands along a new leading axis.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "stack",
                reason: "no operands".into(),
            })?
            .tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = {
            let nodes = tape.nodes.borrow();
            let first = &nodes[ids[0]].value;
            let mut data = Vec::with_capacity(first.len() * ids.len());
            for &id in &ids {
                let t = &nodes[id].value;
                if t.shape != first.shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack",
                        left: first.shape.clone(),
                        right: t.shape.clone(),
                    });
                }
                data.extend_from_slice(&t.data);
            }
            let mut shape = vec![ids.len()];
            shape.extend_from_slice(&first.shape);
            Tensor { shape, data }
        };
        Ok(tape.record(v, Op::Stack(ids.clone()), &ids))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "narrow",
                    axis,
                    rank: a.rank(),
                });
            }
            if len == 0 || start + len > a.shape[axis] {
                return Err(TensorError::InvalidArgument {
                    op: "narrow",
                    reason: format!("range {start}..{} exceeds extent {}", start + len, a.shape[axis]),
                });
            }
            let outer: usize = a.shape[..axis].iter().product();
            let inner: usize = a.shape[axis + 1..].iter().product();
            let in_block = a.shape[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = o * in_block + start * inner;
                data.extend_from_slice(&a.data[from..from + len * inner]);
            }
            let mut shape = a.shape.clone();
            shape[axis] = len;
            Ok(Tensor { shape, data })
        })?;
        Ok(self.tape.record(v, Op::Narrow { input: self.id, axis, start }, &[self.id]))
    }

    /// Repeats the tensor `n` times along a new leading axis.
    pub fn expand_leading(&self, n: usize) -> Var<'t> {
        let v = self.with(|a| {
            let mut shape = vec![n];
            shape.extend_from_slice(&a.shape);
            let mut data = Vec::with_capacity(a.len() * n);
            for _ in 0..n {
                data.extend_from_slice(&a.data);
            }
            Tensor { shape, data }
        });
        self.tape.record(v, Op::ExpandLeading(self.id), &[self.id])
    }

    /// Divides each row (last axis) by its sum; all-zero rows stay zero.
    pub fn row_normalize(&self) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if a.data.iter().any(|&x| x < 0.0 || x.is_nan()) {
                return Err(TensorError::InvalidArgument {
                    op: "row_normalize",
                    reason: "entries must be nonnegative".into(),
                });
            }
            Ok(row_normalized(a))
        })?;
        Ok(self.tape.record(v, Op::RowNormalize(self.id), &[self.id]))
    }

    /// Multiplies slice `b` of the leading axis by `scales[b]`.
    pub fn scale_batch(&self, scales: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(scales, |a, s| {
            if s.rank() != 1 || a.shape[0] != s.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_batch",
                    left: a.shape.clone(),
                    right: s.shape.clone(),
                });
            }
            let per = a.len() / s.len();
            let data = a.data.iter().enumerate().map(|(i, &x)| x * s.data[i / per]).collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })?;
        Ok(self.tape.record(v, Op::ScaleBatch(self.id, scales.id), &[self.id, scales.id]))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.with(Tensor::len);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let v = self.with(|a| Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        });
        Ok(self.tape.record(v, Op::MaskMul(self.id, mask), &[self.id]))
    }
}

pub(crate) fn row_normalized(a: &Tensor) -> Tensor {
    let n = *a.shape.last().unwrap();
    let mut data = a.data.clone();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for x in row.iter_mut() {
                *x /= s;
            }
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Gradients from one reverse sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when unreachable.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}
