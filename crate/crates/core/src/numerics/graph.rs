use super::functions::{lse, masked_softmax_row, normalize_row};
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use super::{AttentionMask, Tensor};
use crate::error::{shape, usage, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of graph outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    /// Every node output is rounded through `f32`.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    PermuteRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Im2Col {
        x: Var,
        w: usize,
        c: usize,
        k: usize,
        stride: usize,
    },
    CausalDepthwiseConv {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Sum(Var),
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are topologically ordered by creation, so the
/// backward pass is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::Double)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::Single {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape(format!("bias of {} for rows of {c}", tb.len())));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        let t = Tensor::raw(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let t = Tensor::raw(vec![m, n], matmul_nt_raw(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let t = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(t, Op::Act(a, f), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape(format!(
                "layer_norm: row width {c}, gain {}, bias {}",
                tg.len(),
                tb.len()
            )));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let (h, s) = normalize_row(tx.row(r), eps);
            out.extend(
                h.iter()
                    .zip(tg.data())
                    .zip(tb.data())
                    .map(|((h, g), b)| h * g + b),
            );
            xhat.extend(h);
            inv_std.push(s);
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let z = lse(row);
            out.extend(row.iter().map(|v| v - z));
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Row-wise softmax over the positions `mask` allows. Masked weights
    /// are exactly zero and fully masked rows are zero rows.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if mask.queries() != r || mask.keys() != c {
            return Err(shape(format!(
                "mask {}x{} over scores {r}x{c}",
                mask.queries(),
                mask.keys()
            )));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            masked_softmax_row(tx.row(i), mask.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::raw(vec![r, c], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if len == 0 || start + len > c {
            return Err(shape(format!("slice {start}..{} of {c} columns", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let t = Tensor::raw(vec![r, len], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| usage("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::raw(vec![r, total], out);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Output row `i` is input row `perm[i]`; `perm` need not be a bijection.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if perm.is_empty() || perm.iter().any(|&p| p >= tx.rows()) {
            return Err(shape("row index out of range"));
        }
        let c = tx.cols();
        let mut out = Vec::with_capacity(perm.len() * c);
        for &p in perm {
            out.extend_from_slice(tx.row(p));
        }
        let t = Tensor::raw(vec![perm.len(), c], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::PermuteRows(x, perm.to_vec()), rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() || ids.iter().any(|&i| i >= t.rows()) {
            return Err(usage(format!(
                "token id out of range for a table of {} rows",
                t.rows()
            )));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let t = Tensor::raw(vec![ids.len(), c], out);
        let rg = self.rg(table);
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Unfolds a channels-last `h × w × c` map (stored as `h × (w·c)`)
    /// into valid `k × k` patches with the given stride. Output rows are
    /// output positions in row-major order; columns are `(di, dj, channel)`.
    pub fn im2col(&mut self, x: Var, w: usize, c: usize, k: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if w == 0 || c == 0 || !tx.len().is_multiple_of(w * c) {
            return Err(shape("im2col: width/channels do not divide input"));
        }
        let h = tx.len() / (w * c);
        if h < k || w < k || stride == 0 {
            return Err(shape(format!("im2col: {h}x{w} map smaller than kernel {k}")));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let cols = k * k * c;
        let src = tx.data();
        let mut out = Vec::with_capacity(oh * ow * cols);
        for oi in 0..oh {
            for oj in 0..ow {
                for di in 0..k {
                    let base = (oi * stride + di) * w * c + oj * stride * c;
                    out.extend_from_slice(&src[base..base + k * c]);
                }
            }
        }
        let t = Tensor::raw(vec![oh * ow, cols], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Im2Col { x, w, c, k, stride }, rg))
    }

    /// Per-channel causal convolution: `y[t] = b + Σ_i w[i] ⊙ x[t - K + 1 + i]`
    /// with zeros before the first frame. `weight` is `K × d`.
    pub fn causal_depthwise_conv(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let (t_len, d) = (tx.rows(), tx.cols());
        let k = tw.rows();
        if tw.cols() != d || tb.len() != d {
            return Err(shape("depthwise conv: channel count mismatch"));
        }
        let mut out = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            for ch in 0..d {
                let mut acc = tb.data()[ch];
                for i in 0..k {
                    let src = t as isize - (k as isize - 1) + i as isize;
                    if src >= 0 {
                        acc += tw.at(i, ch) * tx.at(src as usize, ch);
                    }
                }
                out.push(acc);
            }
        }
        let t = Tensor::raw(vec![t_len, d], out);
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(t, Op::CausalDepthwiseConv { x, weight, bias }, rg))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(new_shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Scalar node `value = f(x)` whose gradient `df/dx` the caller has
    /// already evaluated. Used for losses with closed-form gradients.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(shape("scalar_fn gradient shape differs from input"));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, rg))
    }
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    delta(t.data_mut());
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], g: &[f64]) {
    accumulate(slot, shape, |d| {
        for (a, b) in d.iter_mut().zip(g) {
            *a += b;
        }
    });
}

/// Reverse sweep from a scalar node.
pub fn backward(g: &Graph, loss: Var) -> Result<Gradients> {
    if g.value(loss).len() != 1 {
        return Err(usage(format!(
            "backward needs a scalar loss, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    let mut grads: Vec<Option<Tensor>> = (0..g.nodes.len()).map(|_| None).collect();
    grads[loss.0] = Some(Tensor::scalar(1.0));

    for idx in (0..=loss.0).rev() {
        let node = &g.nodes[idx];
        if !node.requires_grad {
            continue;
        }
        let Some(gout) = grads[idx].take() else {
            continue;
        };
        let go = gout.data();
        let shp = |v: Var| g.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| &g.nodes[v.0].value;
        let need = |v: Var| g.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {
                grads[idx] = Some(gout);
                continue;
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        add_into(&mut grads[v.0], &shp(v), go);
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    add_into(&mut grads[a.0], &shp(*a), go);
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], &shp(*b), |d| {
                        d.iter_mut().zip(go).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if need(*a) {
                    accumulate(&mut grads[a.0], &shp(*a), |d| {
                        for i in 0..d.len() {
                            d[i] += go[i] * tb[i];
                        }
                    });
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], &shp(*b), |d| {
                        for i in 0..d.len() {
                            d[i] += go[i] * ta[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], &shp(*a), |d| {
                    d.iter_mut().zip(go).for_each(|(x, y)| *x += y * c)
                });
            }
            Op::AddBias(x, b) => {
                if need(*x) {
                    add_into(&mut grads[x.0], &shp(*x), go);
                }
                if need(*b) {
                    let c = val(*b).len();
                    accumulate(&mut grads[b.0], &shp(*b), |d| {
                        for (i, y) in go.iter().enumerate() {
                            d[i % c] += y;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if need(*a) {
                    let ga = matmul_nt_raw(go, tb.data(), m, n, k);
                    add_into(&mut grads[a.0], &shp(*a), &ga);
                }
                if need(*b) {
                    let gb = matmul_tn_raw(ta.data(), go, m, k, n);
                    add_into(&mut grads[b.0], &shp(*b), &gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if need(*a) {
                    let ga = matmul_raw(go, tb.data(), m, n, k);
                    add_into(&mut grads[a.0], &shp(*a), &ga);
                }
                if need(*b) {
                    let gb = matmul_tn_raw(go, ta.data(), m, n, k);
                    add_into(&mut grads[b.0], &shp(*b), &gb);
                }
            }
            Op::Transpose(a) => {
                let gt = gout.transpose();
                add_into(&mut grads[a.0], &shp(*a), gt.data());
            }
            Op::Act(a, f) => {
                let (x, y) = (val(*a).data(), node.value.data());
                accumulate(&mut grads[a.0], &shp(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += go[i] * f.derivative(x[i], y[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = val(*gain).len();
                let rows = inv_std.len();
                let gv = val(*gain).data();
                if need(*x) {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let dy = &go[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = dy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], &shp(*x), &gx);
                }
                if need(*gain) {
                    accumulate(&mut grads[gain.0], &shp(*gain), |d| {
                        for (i, y) in go.iter().enumerate() {
                            d[i % c] += y * xhat[i];
                        }
                    });
                }
                if need(*bias) {
                    accumulate(&mut grads[bias.0], &shp(*bias), |d| {
                        for (i, y) in go.iter().enumerate() {
                            d[i % c] += y;
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                accumulate(&mut grads[a.0], &shp(*a), |d| {
                    for r in 0..y.rows() {
                        let gs: f64 = go[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            let i = r * c + j;
                            d[i] += go[i] - y.data()[i].exp() * gs;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                accumulate(&mut grads[a.0], &shp(*a), |d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &go[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (node.value.rows(), node.value.cols());
                let c = val(*x).cols();
                accumulate(&mut grads[x.0], &shp(*x), |d| {
                    for r in 0..rows {
                        for j in 0..len {
                            d[r * c + start + j] += go[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if need(p) {
                        accumulate(&mut grads[p.0], &shp(p), |d| {
                            for r in 0..rows {
                                for j in 0..c {
                                    d[r * c + j] += go[r * total + off + j];
                                }
                            }
                        });
                    }
                    off += c;
                }
            }
            Op::PermuteRows(x, perm) | Op::GatherRows(x, perm) => {
                let c = node.value.cols();
                accumulate(&mut grads[x.0], &shp(*x), |d| {
                    for (i, &p) in perm.iter().enumerate() {
                        for j in 0..c {
                            d[p * c + j] += go[i * c + j];
                        }
                    }
                });
            }
            Op::Im2Col { x, w, c, k, stride } => {
                let h = val(*x).len() / (w * c);
                let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                let cols = k * k * c;
                accumulate(&mut grads[x.0], &shp(*x), |d| {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let row = (oi * ow + oj) * cols;
                            for di in 0..*k {
                                let base = (oi * stride + di) * w * c + oj * stride * c;
                                for q in 0..k * c {
                                    d[base + q] += go[row + di * k * c + q];
                                }
                            }
                        }
                    }
                });
            }
            Op::CausalDepthwiseConv { x, weight, bias } => {
                let (tx, tw) = (val(*x), val(*weight));
                let (t_len, dch) = (tx.rows(), tx.cols());
                let k = tw.rows();
                let mut gx = vec![0.0; t_len * dch];
                let mut gw = vec![0.0; k * dch];
                let mut gb = vec![0.0; dch];
                for t in 0..t_len {
                    for ch in 0..dch {
                        let gy = go[t * dch + ch];
                        gb[ch] += gy;
                        for i in 0..k {
                            let src = t as isize - (k as isize - 1) + i as isize;
                            if src >= 0 {
                                let s = src as usize;
                                gx[s * dch + ch] += gy * tw.at(i, ch);
                                gw[i * dch + ch] += gy * tx.at(s, ch);
                            }
                        }
                    }
                }
                if need(*x) {
                    add_into(&mut grads[x.0], &shp(*x), &gx);
                }
                if need(*weight) {
                    add_into(&mut grads[weight.0], &shp(*weight), &gw);
                }
                if need(*bias) {
                    add_into(&mut grads[bias.0], &shp(*bias), &gb);
                }
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], &shp(*a), go);
            }
            Op::Sum(a) => {
                let s = go[0];
                accumulate(&mut grads[a.0], &shp(*a), |d| {
                    d.iter_mut().for_each(|x| *x += s)
                });
            }
            Op::ScalarFn { x, grad } => {
                let s = go[0];
                accumulate(&mut grads[x.0], &shp(*x), |d| {
                    d.iter_mut().zip(grad.data()).for_each(|(a, b)| *a += s * b)
                });
            }
        }
    }
    // Only leaves keep their gradients.
    for (idx, node) in g.nodes.iter().enumerate() {
        if !matches!(node.op, Op::Leaf) {
            grads[idx] = None;
        }
    }
    Ok(Gradients { grads })
}
