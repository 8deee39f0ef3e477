//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in exact reverse order, so the tape is always topologically sorted.

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Sum(Var),
    WeightedNll {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_parts(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Constant or input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Reads a parameter onto the tape; its gradient is routed back to the
    /// store by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push("param", p.value.clone(), Op::Param(id), p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum of same-shape tensors, or a matrix plus a row vector
    /// broadcast over its rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            return self.push("add", Tensor::new(sa, data)?, Op::Add(a, b), rg);
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let n = sb[0];
            let bv = self.value(b).data().to_vec();
            let data = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % n])
                .collect();
            return self.push("add", Tensor::new(sa, data)?, Op::AddRow(a, b), rg);
        }
        Err(Error::shape("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::shape("mul", format!("{sa:?} * {:?}", self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", Tensor::new(sa, data)?, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, s), rg)
    }

    /// Softmax over the last axis. With `causal`, row `i` only spans columns
    /// `0..=i` and the rest are exactly zero.
    pub fn softmax_lastdim(&mut self, x: Var, causal: bool) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        let rows = v.len() / cols.max(1);
        if causal && (v.shape().len() != 2 || rows != cols) {
            return Err(Error::shape(
                "softmax_lastdim",
                format!("causal softmax needs a square matrix, got {:?}", v.shape()),
            ));
        }
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let lim = if causal { r + 1 } else { cols };
            let row = &v.data()[r * cols..r * cols + lim];
            let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let mut sum = 0.0f64;
            let o = &mut out[r * cols..r * cols + lim];
            for (oi, &z) in o.iter_mut().zip(row) {
                let e = (z - max).exp();
                *oi = e;
                sum += e.as_f64();
            }
            let inv = T::from_f64(1.0 / sum);
            for oi in o.iter_mut() {
                *oi = *oi * inv;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax_lastdim", t, Op::Softmax(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length d.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64(rs);
            for j in 0..d {
                let h = T::from_f64((row[j].as_f64() - mean) * rs);
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&z| T::from_f64(gelu_parts(z.as_f64()).0))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    /// Gathers rows of `table` ([V, d]) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding_lookup", table)?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfBounds {
                    op: "embedding_lookup",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(
            "embedding_lookup",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Half-open range `start..end` along `axis` (0 = rows, 1 = columns) of a
    /// matrix, or along the only axis of a vector.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{end} of {shape:?}"),
            ));
        }
        let v = self.value(x);
        let (t, new_shape) = if shape.len() == 1 || axis == 0 {
            let inner: usize = shape[1..].iter().product();
            let mut ns = shape.clone();
            ns[0] = end - start;
            (v.data()[start * inner..end * inner].to_vec(), ns)
        } else {
            let (r, c) = (shape[0], shape[1]);
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&v.data()[i * c + start..i * c + end]);
            }
            (out, vec![r, w])
        };
        let t = Tensor::new(new_shape, t)?;
        let rg = self.rg(&[x]);
        self.push(
            "slice",
            t,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            rg,
        )
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} inputs, axis {axis}", xs.len())));
        }
        let shapes: Vec<(usize, usize)> = xs
            .iter()
            .map(|&v| self.dims2("concat", v))
            .collect::<Result<_>>()?;
        let (r0, c0) = shapes[0];
        let ok = shapes
            .iter()
            .all(|&(r, c)| if axis == 0 { c == c0 } else { r == r0 });
        if !ok {
            return Err(Error::shape("concat", format!("{shapes:?} along axis {axis}")));
        }
        let (t, shape) = if axis == 0 {
            let mut out = Vec::new();
            for &v in xs {
                out.extend_from_slice(self.value(v).data());
            }
            let rows = shapes.iter().map(|s| s.0).sum();
            (out, vec![rows, c0])
        } else {
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&v, &(_, c)) in xs.iter().zip(&shapes) {
                    out.extend_from_slice(&self.value(v).data()[i * c..(i + 1) * c]);
                }
            }
            (out, vec![r0, cols])
        };
        let t = Tensor::new(shape, t)?;
        let rg = self.rg(xs);
        self.push(
            "concat",
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[x]);
        self.push("transpose", t, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    /// `-sum_i w_i * log softmax(logits[rows_i])[targets_i]` as a scalar.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        rows: &[usize],
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let (r, v) = self.dims2("weighted_nll", logits)?;
        if rows.len() != targets.len() || rows.len() != weights.len() {
            return Err(Error::shape(
                "weighted_nll",
                format!(
                    "{} rows, {} targets, {} weights",
                    rows.len(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        for ((&row, &tgt), &w) in rows.iter().zip(targets).zip(weights) {
            if row >= r {
                return Err(Error::IndexOutOfBounds {
                    op: "weighted_nll",
                    index: row,
                    limit: r,
                });
            }
            if tgt >= v {
                return Err(Error::IndexOutOfBounds {
                    op: "weighted_nll",
                    index: tgt,
                    limit: v,
                });
            }
            let lp = log_softmax_at(&lv[row * v..(row + 1) * v], tgt);
            total -= w.as_f64() * lp;
        }
        let rg = self.rg(&[logits]);
        self.push(
            "weighted_nll",
            Tensor::scalar(T::from_f64(total)),
            Op::WeightedNll {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that requires them.
    pub fn backward_grads(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that accumulates parameter gradients into `store`.
    /// Parameters not reachable from `loss` keep their existing gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                if node.requires_grad {
                    store.accumulate_grad(*id, g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let mut acc = |v: Var, contrib: Vec<T>, nodes: &[Node<T>]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(contrib) {
                        *a = *a + b;
                    }
                }
                slot @ None => {
                    let shape = nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, contrib).expect("gradient shape"));
                }
            }
        };
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(gd, bv.data(), &mut da, m, n, k);
                    acc(*a, da, nodes);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(av.data(), gd, &mut db, m, k, n);
                    acc(*b, db, nodes);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec(), nodes);
                acc(*b, gd.to_vec(), nodes);
            }
            Op::AddRow(a, b) => {
                acc(*a, gd.to_vec(), nodes);
                let n = nodes[b.0].value.len();
                let mut db = vec![T::zero(); n];
                for (i, &x) in gd.iter().enumerate() {
                    db[i % n] = db[i % n] + x;
                }
                acc(*b, db, nodes);
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect(), nodes);
                acc(*b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect(), nodes);
            }
            Op::Scale(a, s) => {
                acc(*a, gd.iter().map(|&x| x * *s).collect(), nodes);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &gd[r * cols..(r + 1) * cols];
                    let dot = ys
                        .iter()
                        .zip(gs)
                        .map(|(&a, &b)| a.as_f64() * b.as_f64())
                        .sum::<f64>();
                    let dot = T::from_f64(dot);
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let rows = xhat.len() / d;
                let gv = nodes[gamma.0].value.data();
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let gs = &gd[r * d..(r + 1) * d];
                    let hs = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0f64;
                    let mut mean_dh_h = 0.0f64;
                    for j in 0..d {
                        dg[j] = dg[j] + gs[j] * hs[j];
                        db[j] = db[j] + gs[j];
                        let dh = (gs[j] * gv[j]).as_f64();
                        mean_dh += dh;
                        mean_dh_h += dh * hs[j].as_f64();
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    let rs = rstd[r].as_f64();
                    for j in 0..d {
                        let dh = (gs[j] * gv[j]).as_f64();
                        dx[r * d + j] =
                            T::from_f64(rs * (dh - mean_dh - hs[j].as_f64() * mean_dh_h));
                    }
                }
                acc(*x, dx, nodes);
                acc(*gamma, dg, nodes);
                acc(*beta, db, nodes);
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&z, &g)| g * T::from_f64(gelu_parts(z.as_f64()).1))
                    .collect();
                acc(*x, dx, nodes);
            }
            Op::Embedding { table, ids } => {
                let tv = &nodes[table.0].value;
                let d = tv.cols();
                let mut dt = vec![T::zero(); tv.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + gd[i * d + j];
                    }
                }
                acc(*table, dt, nodes);
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let xv = &nodes[x.0].value;
                let shape = xv.shape();
                let mut dx = vec![T::zero(); xv.len()];
                if shape.len() == 1 || *axis == 0 {
                    let inner: usize = shape[1..].iter().product();
                    dx[start * inner..end * inner].copy_from_slice(gd);
                } else {
                    let (r, c) = (shape[0], shape[1]);
                    let w = end - start;
                    for i in 0..r {
                        dx[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::Concat { xs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &v in xs {
                        let n = nodes[v.0].value.len();
                        acc(v, gd[off..off + n].to_vec(), nodes);
                        off += n;
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut off = 0;
                    for &v in xs {
                        let c = nodes[v.0].value.cols();
                        let mut dv = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            dv.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                        }
                        acc(v, dv, nodes);
                        off += c;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = gd[i * c + j];
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, vec![gd[0]; n], nodes);
            }
            Op::WeightedNll {
                logits,
                rows,
                targets,
                weights,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.cols();
                let mut dl = vec![T::zero(); lv.len()];
                let g0 = gd[0].as_f64();
                for ((&row, &tgt), &w) in rows.iter().zip(targets).zip(weights) {
                    let logit_row = &lv.data()[row * v..(row + 1) * v];
                    let probs = softmax_f64(logit_row);
                    let scale = g0 * w.as_f64();
                    for j in 0..v {
                        let onehot = if j == tgt { 1.0 } else { 0.0 };
                        dl[row * v + j] = dl[row * v + j] + T::from_f64(scale * (probs[j] - onehot));
                    }
                }
                acc(*logits, dl, nodes);
            }
        }
        Ok(())
    }
}

/// Softmax of one logit row, computed in f64.
pub fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
    let exps: Vec<f64> = row.iter().map(|&z| (z.as_f64() - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log softmax(row)[idx]`, computed in f64.
pub fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
    let lse = row.iter().map(|&z| (z.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[idx].as_f64() - lse
}
