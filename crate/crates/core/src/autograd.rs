//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every forward op appends a node holding its value; [`Graph::backward`]
//! walks the tape once in reverse. Nodes that do not depend on a trainable
//! leaf are skipped entirely, so frozen sub-networks cost nothing on the
//! backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// `bias[r]` added to every column of row `r`.
    Rows,
    /// `bias[c]` added to every row at column `c`.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Resize(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        b: Var,
        along: Broadcast,
    },
    SquaredColNorms(Var),
    SoftmaxRows(Var),
    SoftAggregate {
        logits: Var,
        /// 1 where the logit was inside the odds clamp, 0 where saturated.
        live: Vec<bool>,
    },
    SegLoss {
        probs: Var,
        labels: Arc<Vec<u8>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Odds clamp applied by [`Graph::soft_aggregate`].
pub const ODDS_MIN: f64 = 1e-6;
pub const ODDS_MAX: f64 = 1e6;
/// Probability floor inside the cross-entropy log.
pub const CE_EPS: f64 = 1e-12;
/// Additive smoothing of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("expected a matrix, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    /// Sum of several same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::shape("sum of zero terms"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x, axis, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Bilinear resample of a `[C, H, W]` value.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = tensor::resize_bilinear(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Resize(x), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ar, ac) = as_matrix(self.shape(a))?;
        let (br, bc) = as_matrix(self.shape(b))?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        tensor::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            needs,
        ))
    }

    pub fn add_bias(&mut self, x: Var, b: Var, along: Broadcast) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        let want = match along {
            Broadcast::Rows => r,
            Broadcast::Cols => c,
        };
        if self.shape(b) != [want] {
            return Err(Error::shape(format!(
                "bias {:?} does not broadcast over {r}x{c}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += match along {
                    Broadcast::Rows => bias[i],
                    Broadcast::Cols => bias[j],
                };
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::AddBias { x, b, along },
            needs,
        ))
    }

    /// `out[c] = sum_r x[r, c]^2`.
    pub fn squared_col_norms(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (j, o) in out.iter_mut().enumerate() {
                let v = src[i * c + j];
                *o += v * v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::SquaredColNorms(x), needs))
    }

    /// Row-wise softmax. With `top_k`, only the `k` largest entries of each
    /// row take part; the rest of the row is exactly zero.
    pub fn softmax_rows(&mut self, x: Var, top_k: Option<usize>) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let keep: &[usize] = match top_k {
                Some(k) if k < c => {
                    order.clear();
                    order.extend(0..c);
                    // Stable order so equal scores resolve toward lower indices.
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    &order[..k.max(1)]
                }
                _ => {
                    order.clear();
                    order.extend(0..c);
                    &order[..]
                }
            };
            let max = keep.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &j in keep {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for &j in keep {
                dst[j] /= total;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x), needs))
    }

    /// Multi-object soft aggregation of `[N, H, W]` logits into an
    /// `[N + 1, H, W]` distribution with background in channel 0.
    ///
    /// Object odds are `p / (1 - p)` with `p = sigmoid(logit)`, i.e. `exp(logit)`,
    /// clamped to `[ODDS_MIN, ODDS_MAX]`; background odds are 1.
    pub fn soft_aggregate(&mut self, logits: Var) -> Result<Var> {
        let (n, h, w) = self.value(logits).chw()?;
        let (lo, hi) = (ODDS_MIN.ln(), ODDS_MAX.ln());
        let src = self.value(logits).data();
        let plane = h * w;
        let mut live = vec![true; n * plane];
        let mut out = vec![0.0; (n + 1) * plane];
        for px in 0..plane {
            let mut total = 1.0;
            for i in 0..n {
                let l = src[i * plane + px];
                let odds = if l < lo {
                    live[i * plane + px] = false;
                    ODDS_MIN
                } else if l > hi {
                    live[i * plane + px] = false;
                    ODDS_MAX
                } else {
                    l.exp()
                };
                out[(i + 1) * plane + px] = odds;
                total += odds;
            }
            out[px] = 1.0 / total;
            for i in 0..n {
                out[(i + 1) * plane + px] /= total;
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![n + 1, h, w], out)?,
            Op::SoftAggregate { logits, live },
            needs,
        ))
    }

    /// Cross-entropy over the `(N + 1)`-way distribution (mean over pixels)
    /// plus the mean per-object soft-Dice loss, equally weighted.
    pub fn seg_loss(&mut self, probs: Var, labels: Arc<Vec<u8>>) -> Result<Var> {
        let (c, h, w) = self.value(probs).chw()?;
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "label map of {} pixels vs probabilities {h}x{w}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::shape(format!(
                "label {bad} outside {c} probability channels"
            )));
        }
        let loss = seg_loss_value(self.value(probs).data(), &labels, c, h * w);
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SegLoss { probs, labels },
            needs,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let dims = xv.chw()?;
                let (cout, ho, wo) = g.chw()?;
                let k = wv.shape()[2];
                let rows = dims.0 * k * k;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db: Vec<f64> = g
                            .data()
                            .chunks(ho * wo)
                            .map(|plane| plane.iter().sum())
                            .collect();
                        self.accumulate(grads, *b, Tensor::new(vec![cout], db)?);
                    }
                }
                if self.needs(*w) {
                    let (cols, _, _) = tensor::im2col(xv.data(), dims, k, *stride, *pad);
                    let mut dw = vec![0.0; cout * rows];
                    tensor::gemm(cout, ho * wo, rows, 1.0, g.data(), false, &cols, true, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * ho * wo];
                    tensor::gemm(rows, cout, ho * wo, 1.0, wv.data(), true, g.data(), false, 0.0, &mut dcols);
                    let dx = tensor::col2im(&dcols, dims, k, *stride, *pad);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, f) => {
                let dx = g.data().iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = shape[*axis];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let off = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[off..off + n * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(shape, data)?);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Resize(x) => {
                let (_, h, w) = self.value(*x).chw()?;
                let dx = tensor::resize_bilinear_adjoint(g, h, w)?;
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = as_matrix(g.shape())?;
                let (ar, ac) = as_matrix(av.shape())?;
                let k = if *trans_a { ar } else { ac };
                if self.needs(*a) {
                    // C = A B: dA = G B^T; with A stored transposed, dA^T = B G^T.
                    let mut da = vec![0.0; ar * ac];
                    if *trans_a {
                        tensor::gemm(k, n, m, 1.0, bv.data(), *trans_b, g.data(), true, 0.0, &mut da);
                    } else {
                        tensor::gemm(m, n, k, 1.0, g.data(), false, bv.data(), !*trans_b, 0.0, &mut da);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![ar, ac], da)?);
                }
                if self.needs(*b) {
                    let (br, bc) = as_matrix(bv.shape())?;
                    let mut db = vec![0.0; br * bc];
                    if *trans_b {
                        tensor::gemm(n, m, k, 1.0, g.data(), true, av.data(), *trans_a, 0.0, &mut db);
                    } else {
                        tensor::gemm(k, m, n, 1.0, av.data(), !*trans_a, g.data(), false, 0.0, &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![br, bc], db)?);
                }
            }
            Op::AddBias { x, b, along } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let (r, c) = as_matrix(g.shape())?;
                    let mut db = vec![0.0; if *along == Broadcast::Rows { r } else { c }];
                    for i in 0..r {
                        for j in 0..c {
                            let v = g.data()[i * c + j];
                            match along {
                                Broadcast::Rows => db[i] += v,
                                Broadcast::Cols => db[j] += v,
                            }
                        }
                    }
                    let len = db.len();
                    self.accumulate(grads, *b, Tensor::new(vec![len], db)?);
                }
            }
            Op::SquaredColNorms(x) => {
                let xv = self.value(*x);
                let (_, c) = as_matrix(xv.shape())?;
                let dx = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| 2.0 * v * g.data()[i % c])
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (_, c) = as_matrix(y.shape())?;
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SoftAggregate { logits, live } => {
                let p = &node.value;
                let (c, h, w) = p.chw()?;
                let plane = h * w;
                let n = c - 1;
                let mut dl = vec![0.0; n * plane];
                for px in 0..plane {
                    let dot: f64 = (0..c)
                        .map(|ch| p.data()[ch * plane + px] * g.data()[ch * plane + px])
                        .sum();
                    for i in 0..n {
                        let at = (i + 1) * plane + px;
                        if live[i * plane + px] {
                            dl[i * plane + px] = p.data()[at] * (g.data()[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, h, w], dl)?);
            }
            Op::SegLoss { probs, labels } => {
                let p = self.value(*probs);
                let (c, h, w) = p.chw()?;
                let mut dp = seg_loss_grad(p.data(), labels, c, h * w);
                let scale = g.data()[0];
                for v in &mut dp {
                    *v *= scale;
                }
                self.accumulate(grads, *probs, Tensor::new(vec![c, h, w], dp)?);
            }
        }
        Ok(())
    }
}

fn dice_stats(p: &[f64], labels: &[u8], obj: usize) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (pv, &l) in p.iter().zip(labels) {
        let gv = if l as usize == obj { 1.0 } else { 0.0 };
        inter += pv * gv;
        sum_p += pv;
        sum_g += gv;
    }
    (inter, sum_p, sum_g)
}

pub(crate) fn seg_loss_value(p: &[f64], labels: &[u8], c: usize, plane: usize) -> f64 {
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(px, &l)| -p[l as usize * plane + px].max(CE_EPS).ln())
        .sum::<f64>()
        / plane as f64;
    let n = c - 1;
    if n == 0 {
        return ce;
    }
    let dice: f64 = (1..c)
        .map(|obj| {
            let (i, sp, sg) = dice_stats(&p[obj * plane..(obj + 1) * plane], labels, obj);
            1.0 - (2.0 * i + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH)
        })
        .sum::<f64>()
        / n as f64;
    ce + dice
}

fn seg_loss_grad(p: &[f64], labels: &[u8], c: usize, plane: usize) -> Vec<f64> {
    let mut dp = vec![0.0; c * plane];
    for (px, &l) in labels.iter().enumerate() {
        let at = l as usize * plane + px;
        if p[at] > CE_EPS {
            dp[at] = -1.0 / (p[at] * plane as f64);
        }
    }
    let n = c - 1;
    for obj in 1..c {
        let slice = &p[obj * plane..(obj + 1) * plane];
        let (i, sp, sg) = dice_stats(slice, labels, obj);
        let denom = sp + sg + DICE_SMOOTH;
        let num = 2.0 * i + DICE_SMOOTH;
        for (px, &l) in labels.iter().enumerate() {
            let gv = if l as usize == obj { 1.0 } else { 0.0 };
            dp[obj * plane + px] -= (2.0 * gv * denom - num) / (denom * denom) / n as f64;
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * (seed as f64 + 0.618)).sin())
    }

    /// Central-difference check of `d loss / d leaf` for a graph builder.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|v| g.param(Arc::new(v.clone()))).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out).unwrap();
        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or(Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * eps);
                let a = analytic.data()[j];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "input {k} entry {j}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).len();
        let shape = g.shape(x).to_vec();
        let wts = g.constant(Tensor::from_fn(&[n, 1], |i| (i as f64 * 0.71).cos()));
        let flat = g.reshape(x, &[1, n]).unwrap();
        let _ = shape;
        let s = g.matmul(flat, wts, false, false).unwrap();
        g.reshape(s, &[1]).unwrap()
    }

    #[test]
    fn matmul_grads_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [3, 2] } else { [2, 3] };
            let b_shape = if tb { [4, 3] } else { [3, 4] };
            check(vec![t(&a_shape, 1), t(&b_shape, 2)], |g, v| {
                let m = g.matmul(v[0], v[1], ta, tb).unwrap();
                weighted_sum(g, m)
            });
        }
    }

    #[test]
    fn structural_op_grads() {
        check(vec![t(&[2, 3, 4], 3), t(&[1, 3, 4], 4)], |g, v| {
            let c = g.concat(&[v[0], v[1]], 0).unwrap();
            let s = g.slice(c, 1, 1, 2).unwrap();
            let r = g.resize(s, 5, 7).unwrap();
            weighted_sum(g, r)
        });
        check(vec![t(&[3, 5], 5), t(&[5], 6), t(&[3], 7)], |g, v| {
            let a = g.add_bias(v[0], v[1], Broadcast::Cols).unwrap();
            let b = g.add_bias(a, v[2], Broadcast::Rows).unwrap();
            let n = g.squared_col_norms(b).unwrap();
            let n = g.reshape(n, &[1, 5]).unwrap();
            let sm = g.softmax_rows(b, None).unwrap();
            let c = g.concat(&[sm, n], 0).unwrap();
            weighted_sum(g, c)
        });
    }

    #[test]
    fn topk_softmax_rows_sum_to_one_and_grad() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 9], 8));
        let y = g.softmax_rows(x, Some(3)).unwrap();
        for row in g.value(y).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|v| **v > 0.0).count(), 3);
        }
        check(vec![t(&[4, 9], 8)], |g, v| {
            let s = g.softmax_rows(v[0], Some(3)).unwrap();
            weighted_sum(g, s)
        });
    }

    #[test]
    fn aggregate_and_loss_grads() {
        let labels = Arc::new(vec![0u8, 1, 2, 2, 1, 0, 0, 2, 1, 1, 0, 2]);
        check(vec![t(&[2, 3, 4], 9)], move |g, v| {
            let p = g.soft_aggregate(v[0]).unwrap();
            g.seg_loss(p, labels.clone()).unwrap()
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], 1));
        let b = g.param(Arc::new(t(&[2, 2], 2)));
        let m = g.matmul(a, b, false, false).unwrap();
        let m = g.reshape(m, &[1, 4]).unwrap();
        let s = g.squared_col_norms(m).unwrap();
        let s = g.reshape(s, &[4, 1]).unwrap();
        let ones = g.constant(Tensor::full(&[1, 4], 1.0));
        let out = g.matmul(ones, s, false, false).unwrap();
        let out = g.reshape(out, &[1]).unwrap();
        let grads = g.backward(out).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
