use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Operands share a shape.
    Same,
    /// Right operand has the extent of the left operand's last axis.
    Row,
    /// Right operand holds a single value.
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Row {
        x: Var,
        row: usize,
    },
    Select {
        x: Var,
        index: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GroupNll {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// reverse index order is a valid topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize]) -> usize {
    shape.iter().product::<usize>().checked_div(cols_of(shape)).unwrap_or(0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; its requires-grad flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of leaf `v` into `target`'s accumulator.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let nb = self.value(b).len();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if nb == 1 {
            Ok(Broadcast::Scalar)
        } else if nb == cols_of(sa) && sb.iter().filter(|&&d| d != 1).count() <= 1 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let kind = self.broadcast_kind(a, b, name)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let cols = cols_of(&self.nodes[a.0].shape);
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let out: Vec<f64> = match kind {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Scalar => av.iter().map(|x| f(*x, bv[0])).collect(),
            Broadcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, bv[i % cols]))
                .collect(),
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        let op = if mul {
            Op::Mul(a, b, kind)
        } else {
            Op::Add(a, b, kind)
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Elementwise sum. `b` may also be a row vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product. `b` may also be a row vector or a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = cols_of(&shape);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = cols_of(&shape);
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = rows_of(&shape);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if start + width > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, width],
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, width], out, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = cols_of(self.shape(p));
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row `row` of a matrix as a `[1, cols]` matrix.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "row")?;
        if row >= r {
            return Err(contract(format!("row {row} out of range for {r} rows")));
        }
        let out = self.value(a)[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![1, c], out, Op::Row { x: a, row }, rg))
    }

    /// Element `index` of the flattened value, shape `[1]`.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(a)
            .get(index)
            .ok_or_else(|| contract(format!("select index {index} out of range")))?;
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![v], Op::Select { x: a, index }, rg))
    }

    /// Embedding lookup: rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(table, "gather")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(contract(format!("id {id} outside table of {r} rows")));
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask. Entries of `mask` carry the inverted
    /// keep-probability scaling already.
    pub fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Dropout { x: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// `-log Σ_{c ∈ targets} softmax(logits)_c` for a single row of logits.
    /// With one target this is ordinary cross-entropy; with several it is the
    /// cross-entropy of a class represented by multiple columns.
    pub fn group_nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.is_empty() || targets.iter().any(|&t| t >= n) {
            return Err(contract(format!(
                "group_nll targets {targets:?} invalid for {n} logits"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        softmax_in_place(&mut probs);
        let lv = self.value(logits);
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse_all = max + lv.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let tmax = targets.iter().map(|&t| lv[t]).fold(f64::NEG_INFINITY, f64::max);
        let lse_t = tmax + targets.iter().map(|&t| (lv[t] - tmax).exp()).sum::<f64>().ln();
        let loss = lse_all - lse_t;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::GroupNll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = acc_slot(&mut self.grads, Var(i), gi.len());
                slot.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                continue;
            }
            self.propagate(i, &gi, &mut g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let da = acc_slot(g, *a, m * k);
                    for r in 0..m {
                        let grow = &gi[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let db = acc_slot(g, *b, k * n);
                    for r in 0..m {
                        let grow = &gi[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, x) in drow.iter_mut().zip(grow) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b, kind) => {
                if needs(*a) {
                    let da = acc_slot(g, *a, gi.len());
                    da.iter_mut().zip(gi).for_each(|(d, x)| *d += x);
                }
                if needs(*b) {
                    let nb = len(*b);
                    let db = acc_slot(g, *b, nb);
                    reduce_broadcast(db, gi, *kind, |_| 1.0);
                }
            }
            Op::Mul(a, b, kind) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let cols = cols_of(&node.shape);
                if needs(*a) {
                    let da = acc_slot(g, *a, gi.len());
                    for (idx, d) in da.iter_mut().enumerate() {
                        let bval = match kind {
                            Broadcast::Same => bv[idx],
                            Broadcast::Scalar => bv[0],
                            Broadcast::Row => bv[idx % cols],
                        };
                        *d += gi[idx] * bval;
                    }
                }
                if needs(*b) {
                    let nb = len(*b);
                    let db = acc_slot(g, *b, nb);
                    reduce_broadcast(db, gi, *kind, |idx| av[idx]);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let da = acc_slot(g, *a, gi.len());
                    da.iter_mut().zip(gi).for_each(|(d, x)| *d += x * c);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let da = acc_slot(g, *a, gi.len());
                    for ((d, x), s) in da.iter_mut().zip(gi).zip(y) {
                        *d += x * s * (1.0 - s);
                    }
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let xv = &nodes[a.0].value;
                    let da = acc_slot(g, *a, gi.len());
                    for ((d, x), v) in da.iter_mut().zip(gi).zip(xv) {
                        *d += x / v;
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let xv = &nodes[a.0].value;
                    let da = acc_slot(g, *a, gi.len());
                    for ((d, x), v) in da.iter_mut().zip(gi).zip(xv) {
                        if *v > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let xv = &nodes[a.0].value;
                    let da = acc_slot(g, *a, gi.len());
                    for ((d, gx), &x) in da.iter_mut().zip(gi).zip(xv) {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
                        *d += gx * dy;
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let cols = cols_of(&node.shape).max(1);
                    let y = &node.value;
                    let da = acc_slot(g, *a, gi.len());
                    for ((drow, grow), yrow) in da
                        .chunks_mut(cols)
                        .zip(gi.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gx), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yy * (gx - dot);
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
                let cols = cols_of(&node.shape);
                let rows = rows_of(&node.shape);
                let gv = &nodes[gamma.0].value;
                if needs(*gamma) {
                    let dg = acc_slot(g, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += gi[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if needs(*beta) {
                    let db = acc_slot(g, *beta, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += gi[r * cols + c];
                        }
                    }
                }
                if needs(*x) {
                    let dx = acc_slot(g, *x, rows * cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let v = gi[r * cols + c] * gv[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] +=
                                rstd[r] / n * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let da = acc_slot(g, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gi[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let c = nodes[x.0].shape[1];
                    let w = node.shape[1];
                    let rows = node.shape[0];
                    let dx = acc_slot(g, *x, rows * c);
                    for i in 0..rows {
                        for j in 0..w {
                            dx[i * c + start + j] += gi[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].shape[1];
                    if needs(*p) {
                        let dp = acc_slot(g, *p, rows * pc);
                        for i in 0..rows {
                            for j in 0..pc {
                                dp[i * pc + j] += gi[i * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Row { x, row } => {
                if needs(*x) {
                    let c = node.shape[1];
                    let n = len(*x);
                    let dx = acc_slot(g, *x, n);
                    for j in 0..c {
                        dx[row * c + j] += gi[j];
                    }
                }
            }
            Op::Select { x, index } => {
                if needs(*x) {
                    let n = len(*x);
                    acc_slot(g, *x, n)[*index] += gi[0];
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let c = node.shape[1];
                    let n = len(*table);
                    let dt = acc_slot(g, *table, n);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += gi[k * c + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let dx = acc_slot(g, *x, gi.len());
                    for ((d, gx), m) in dx.iter_mut().zip(gi).zip(mask) {
                        *d += gx * m;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = len(*a);
                    acc_slot(g, *a, n).iter_mut().for_each(|d| *d += gi[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = len(*a);
                    let s = gi[0] / n as f64;
                    acc_slot(g, *a, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::GroupNll {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let mass: f64 = targets.iter().map(|&t| probs[t]).sum();
                    let dl = acc_slot(g, *logits, probs.len());
                    for (c, p) in probs.iter().enumerate() {
                        let mut d = *p;
                        if targets.contains(&c) {
                            d -= p / mass;
                        }
                        dl[c] += gi[0] * d;
                    }
                }
            }
        }
    }
}

fn reduce_broadcast(db: &mut [f64], gi: &[f64], kind: Broadcast, factor: impl Fn(usize) -> f64) {
    match kind {
        Broadcast::Same => {
            for (idx, d) in db.iter_mut().enumerate() {
                *d += gi[idx] * factor(idx);
            }
        }
        Broadcast::Scalar => {
            db[0] += gi.iter().enumerate().map(|(i, x)| x * factor(i)).sum::<f64>();
        }
        Broadcast::Row => {
            let cols = db.len();
            for (idx, x) in gi.iter().enumerate() {
                db[idx % cols] += x * factor(idx);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
