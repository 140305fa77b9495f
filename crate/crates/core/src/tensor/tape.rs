use super::{ParamStore, Result, Tensor, TensorError};

/// Label value excluded from the cross-entropy average.
pub const IGNORE_INDEX: i64 = -100;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    BiasAdd(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { src: usize, start: usize },
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy {
        logits: usize,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Only leaves that require
/// gradients are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a (m×k) · b (k×n)`
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ · b` where `a` is `r×m` and `b` is `r×n`.
fn mm_tn(a: &[f64], r: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..r {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..m {
            let av = a[i * m + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Gradients flow to it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter from the store. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        let p = store.by_id(id);
        self.nodes.push(Node {
            value: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())?,
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: p.trainable.then_some(id),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::new(vec![m, n], mm(ta.data(), m, k, tb.data(), n))?;
        self.push("matmul", out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a · bᵀ`, the layout of a linear map with weight `b` of shape `(out, in)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul_nt", ta)?;
        let (n, k2) = dims2("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let out = Tensor::new(vec![m, n], mm_nt(ta.data(), m, k, tb.data(), n))?;
        self.push("matmul_nt", out, Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("transpose", ta)?;
        let out = Tensor::new(vec![c, r], transpose(ta.data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a.0), &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?;
        self.push("scale", out, Op::Scale(a.0, s), &[a.0])
    }

    /// Adds a `[n]` bias to every row of an `(m, n)` matrix.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = dims2("bias_add", ta)?;
        if tb.shape() != [n] {
            return Err(mismatch("bias_add", ta, tb));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("bias_add", out, Op::BiasAdd(a.0, bias.0), &[a.0, bias.0])
    }

    /// Concatenates 2-D values along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().expect("concat_cols needs at least one part"));
        let (rows, _) = dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = dims2("concat_cols", t)?;
            if r != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2("slice_cols", ta)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: cols,
            });
        }
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { src: a.0, start }, &[a.0])
    }

    /// Concatenates 2-D values along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().expect("concat_rows needs at least one part"));
        let (_, cols) = dims2("concat_rows", first)?;
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = dims2("concat_rows", t)?;
            if c != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2("slice_rows", ta)?;
        if len == 0 || start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: rows,
            });
        }
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        self.push("slice_rows", out, Op::SliceRows { src: a.0, start }, &[a.0])
    }

    /// Splits along the first dimension into consecutive chunks of the given sizes.
    pub fn split_rows(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let rows = self.value(a).rows();
        let total: usize = sizes.iter().sum();
        if total != rows {
            return Err(TensorError::ShapeMismatch {
                op: "split_rows",
                left: self.value(a).shape().to_vec(),
                right: sizes.to_vec(),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_rows(a, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            left: ta.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        self.push("reshape", out, Op::Reshape(a.0), &[a.0])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a.0), &[a.0])
    }

    /// Layer normalization over the last dimension with learnable `[n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.numel() / n;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())?;
        self.push("gelu", out, Op::Gelu(a.0), &[a.0])
    }

    /// Gathers rows of a `(vocab, d)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = dims2("embedding", tt)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, d],
                len: 0,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    /// Mean cross-entropy of `(n, vocab)` logits against `n` labels. Positions
    /// labelled [`IGNORE_INDEX`] are excluded; if all are excluded the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = dims2("cross_entropy", tl)?;
        if (0..vocab as i64).contains(&IGNORE_INDEX) {
            return Err(TensorError::IgnoreIndexInVocab {
                ignore: IGNORE_INDEX,
                vocab,
            });
        }
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = Vec::with_capacity(n * vocab);
        let mut total = 0.0;
        let mut count = 0;
        for (pos, (row, &label)) in tl.data().chunks(vocab).zip(labels).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
            if label == IGNORE_INDEX {
                continue;
            }
            if label < 0 || label as usize >= vocab {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    position: pos,
                    vocab,
                });
            }
            total += log_z - row[label as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates gradients into the trainable
    /// parameters of `store`. Frozen parameters never receive a gradient buffer.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                let p = store.by_id_mut(id);
                if p.trainable {
                    accumulate(&mut p.tensor.grad, g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |idx: usize| self.nodes[idx].requires_grad;
        let val = |idx: usize| &self.nodes[idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if rg(*a) {
                    accumulate(&mut grads[*a], mm_nt(g, m, n, tb.data(), k));
                }
                if rg(*b) {
                    accumulate(&mut grads[*b], mm_tn(ta.data(), m, k, g, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if rg(*a) {
                    accumulate(&mut grads[*a], mm(g, m, n, tb.data(), k));
                }
                if rg(*b) {
                    accumulate(&mut grads[*b], mm_tn(g, m, n, ta.data(), k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                accumulate(&mut grads[*a], transpose(g, c, r));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[*b], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let gb = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], gb);
                }
                if rg(*b) {
                    let ga = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*b], ga);
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[*a], g.iter().map(|x| x * s).collect());
            }
            Op::BiasAdd(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if rg(*b) {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p], gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (rows, cols) = (val(*src).shape()[0], val(*src).shape()[1]);
                let len = node.value.shape()[1];
                let mut gs = vec![0.0; rows * cols];
                for i in 0..rows {
                    gs[i * cols + start..i * cols + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(&mut grads[*src], gs);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if rg(p) {
                        accumulate(&mut grads[p], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                let cols = val(*src).shape()[1];
                let mut gs = vec![0.0; val(*src).numel()];
                gs[start * cols..start * cols + g.len()].copy_from_slice(g);
                accumulate(&mut grads[*src], gs);
            }
            Op::Reshape(a) => accumulate(&mut grads[*a], g.to_vec()),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    gx.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(&mut grads[*a], gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gd = val(*gain).data();
                if rg(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        gx.extend(dh.iter().zip(hr).map(|(d, h)| r * (d - mean_dh - h * mean_dh_h)));
                    }
                    accumulate(&mut grads[*x], gx);
                }
                if rg(*gain) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[*gain], gg);
                }
                if rg(*bias) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(acc, v)| *acc += v);
                    }
                    accumulate(&mut grads[*bias], gb);
                }
            }
            Op::Gelu(a) => {
                let gx = g.iter().zip(val(*a).data()).map(|(gv, &x)| gv * gelu_grad(x)).collect();
                accumulate(&mut grads[*a], gx);
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                let mut gt = vec![0.0; val(*table).numel()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(acc, v)| *acc += v);
                }
                accumulate(&mut grads[*table], gt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let vocab = val(*logits).shape()[1];
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let s = g[0] / *count as f64;
                    for (pos, &label) in labels.iter().enumerate() {
                        if label == IGNORE_INDEX {
                            continue;
                        }
                        let row = &mut gl[pos * vocab..(pos + 1) * vocab];
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = s * probs[pos * vocab + j];
                        }
                        row[label as usize] -= s;
                    }
                }
                accumulate(&mut grads[*logits], gl);
            }
            Op::Sum(a) => accumulate(&mut grads[*a], vec![g[0]; val(*a).numel()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn concat_cols_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 8]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]), true);
        let loss = tape.cross_entropy(logits, &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(logits).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            tape.cross_entropy(logits, &[-2]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn embedding_rejects_unknown_id() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding(table, &[4]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn linear_map_gradient_repeats_input() {
        // loss = sum(W·x) → dW[i][j] = x[j]
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), true);
        let x = tape.constant(t(&[2, 1], &[7.0, -3.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[7.0, -3.0, 7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let p = tape.leaf(t(&[1, 2], &[3.0, 4.0]), true);
        let y = tape.mul(c, p).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
    }
}
