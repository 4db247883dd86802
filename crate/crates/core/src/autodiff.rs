//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a row-major 2-D [`Tensor`]. Operations are
//! recorded eagerly in creation order, which is already a topological order,
//! so [`Tape::backward`] walks the node list once in reverse. A tape is built
//! per forward pass; there is no way to reuse one after `backward`, so
//! accumulated gradients never leak from one pass into the next.
//!
//! The primitive set is what the encoder needs: matmul, transpose,
//! elementwise arithmetic, row-broadcast bias add, GELU (tanh form), tanh,
//! sigmoid, exp, log, row softmax / log-softmax, layer norm, row gather,
//! row/column slicing, column concat, reshape and a few reductions.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: [1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.to_vec(),
        right: b.shape.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was on
    /// a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [m, k] = ta.shape;
        let [k2, n] = tb.shape;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: [m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose(self.value(a));
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b` is a `1 x cols` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape[0] != 1 || tb.shape[1] != ta.shape[1] {
            return Err(shape_err("add_row", ta, tb));
        }
        let cols = ta.shape[1];
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data[i % cols])
            .collect();
        let shape = ta.shape;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape,
            data: ta.data.iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let [r, c] = ta.shape;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: [r, c], data }, Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalisation with learned `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let [r, c] = tx.shape;
        if tg.shape != [1, c] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape != [1, c] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data[j] + tb.data[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor {
                shape: [r, c],
                data: out,
            },
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

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let [v, c] = tt.shape;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "gather",
                left: tt.shape.to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: [ids.len(), c],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let [r, c] = tx.shape;
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                left: tx.shape.to_vec(),
                right: vec![start, len],
            });
        }
        let data = tx.data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: [len, c],
                data,
            },
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let [r, c] = tx.shape;
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: tx.shape.to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: [r, len],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("concat_cols of zero tensors"))?;
        let r = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor {
                shape: [r, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        if rows * cols != tx.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: tx.shape.to_vec(),
                right: vec![rows, cols],
            });
        }
        let t = Tensor {
            shape: [rows, cols],
            data: tx.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Average over rows: `r x c` to `1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [r, c] = tx.shape;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(tx.row_slice(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let rg = self.rg(x);
        self.push(Tensor { shape: [1, c], data }, Op::MeanRows(x), rg)
    }

    /// Gathers individual `(row, col)` entries into a `1 x k` row.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let [r, c] = tx.shape;
        let mut flat = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::Shape {
                    op: "pick",
                    left: tx.shape.to_vec(),
                    right: vec![i, j],
                });
            }
            flat.push(i * c + j);
        }
        let data = flat.iter().map(|&f| tx.data[f]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: [1, at.len()],
                data,
            },
            Op::Pick { x, flat },
            rg,
        ))
    }

    /// Populates gradients of `loss` for every node on a differentiable path.
    /// Gradients from any previous call are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape;
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                node.grad = Some(Tensor {
                    shape: node.value.shape,
                    data: delta,
                })
            }
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Tensor) {
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                if self.rg(*a) {
                    let d = matmul_nt(g, &tb);
                    self.accumulate(*a, d.data);
                }
                if self.rg(*b) {
                    let d = matmul_tn(&ta, g);
                    self.accumulate(*b, d.data);
                }
            }
            Op::Transpose(a) => {
                let d = transpose(g);
                self.accumulate(*a, d.data);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.data.clone());
                self.accumulate(*b, g.data.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.data.clone());
                self.accumulate(*b, g.data.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.data.iter().zip(&self.value(*b).data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.data.iter().zip(&self.value(*a).data).map(|(g, x)| g * x).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::AddRow(a, b) => {
                let cols = g.shape[1];
                let mut db = vec![0.0; cols];
                for (i, v) in g.data.iter().enumerate() {
                    db[i % cols] += v;
                }
                self.accumulate(*a, g.data.clone());
                self.accumulate(*b, db);
            }
            Op::Scale(a, c) => {
                self.accumulate(*a, g.data.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, g.data.clone());
            }
            Op::Gelu(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(*a, d);
            }
            Op::Tanh(a) => {
                let d = g.data.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.data.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(*a, d);
            }
            Op::Exp(a) => {
                let d = g.data.iter().zip(&out.data).map(|(g, y)| g * y).collect();
                self.accumulate(*a, d);
            }
            Op::Log(a) => {
                let d = g.data.iter().zip(&self.value(*a).data).map(|(g, x)| g / x).collect();
                self.accumulate(*a, d);
            }
            Op::Softmax(a) => {
                let [r, c] = out.shape;
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(y, gy)| y * (gy - dot)));
                }
                self.accumulate(*a, d);
            }
            Op::LogSoftmax(a) => {
                let [r, c] = out.shape;
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let gsum: f64 = gy.iter().sum();
                    d.extend(y.iter().zip(gy).map(|(y, gy)| gy - y.exp() * gsum));
                }
                self.accumulate(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let [r, c] = out.shape;
                let gv = self.value(*gain).data.clone();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = Vec::with_capacity(r * c);
                let n = c as f64;
                for i in 0..r {
                    let gy = g.row_slice(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        dg[j] += gy[j] * xh[j];
                        db[j] += gy[j];
                        dxhat[j] = gy[j] * gv[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let inv = inv_std[i];
                    dx.extend((0..c).map(|j| inv / n * (n * dxhat[j] - s1 - xh[j] * s2)));
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dg);
                self.accumulate(*bias, db);
            }
            Op::Gather { table, ids } => {
                let [v, c] = self.value(*table).shape;
                let mut d = vec![0.0; v * c];
                for (row, &id) in ids.iter().enumerate() {
                    for (dst, src) in d[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(row)) {
                        *dst += src;
                    }
                }
                self.accumulate(*table, d);
            }
            Op::SliceRows { x, start } => {
                let [r, c] = self.value(*x).shape;
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + g.numel()].copy_from_slice(&g.data);
                self.accumulate(*x, d);
            }
            Op::SliceCols { x, start } => {
                let [r, c] = self.value(*x).shape;
                let len = g.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(*x, d);
            }
            Op::ConcatCols(parts) => {
                let r = g.shape[0];
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    self.accumulate(*p, d);
                }
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g.data.clone());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g.data[0]; n]);
            }
            Op::MeanRows(x) => {
                let [r, c] = self.value(*x).shape;
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.data.iter().map(|v| v / r as f64));
                }
                self.accumulate(*x, d);
            }
            Op::Pick { x, flat } => {
                let n = self.value(*x).numel();
                let mut d = vec![0.0; n];
                for (k, &f) in flat.iter().enumerate() {
                    d[f] += g.data[k];
                }
                self.accumulate(*x, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let [r, c] = t.shape;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|x| (x - m).exp()));
        let s: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= s);
    }
    Tensor { shape: [r, c], data }
}

fn transpose(t: &Tensor) -> Tensor {
    let [r, c] = t.shape;
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor { shape: [c, r], data }
}

/// `a · bᵀ`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let [m, k] = a.shape;
    let n = b.shape[0];
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            data[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { shape: [m, n], data }
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let [k, m] = a.shape;
    let n = b.shape[1];
    let mut data = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a.data[p * m..(p + 1) * m];
        let br = &b.data[p * n..(p + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: [m, n], data }
}

/// Central finite-difference checking of tape primitives.
pub mod gradcheck {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Norm-wise relative error between the analytic gradient and central
    /// differences of `build`, projected onto a fixed random weighting so
    /// every output element contributes.
    pub fn gradcheck(
        inputs: &[Tensor],
        rng: &mut ChaCha8Rng,
        build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let probe = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = build(&mut t, &vars).unwrap();
            let s = t.value(y).shape();
            rand_tensor(rng, s[0], s[1], -1.0, 1.0)
        };
        let eval = |xs: &[Tensor]| -> (f64, Tape, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let y = build(&mut t, &vars).unwrap();
            let w = t.constant(probe.clone());
            let p = t.mul(y, w).unwrap();
            let l = t.sum(p);
            (t.value(l).data()[0], t, vars.into_iter().chain([l]).collect())
        };
        let (_, mut tape, vars) = eval(inputs);
        let loss = *vars.last().unwrap();
        tape.backward(loss).unwrap();
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0, 0.0);
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; x.numel()]);
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[i] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                diff += (analytic[i] - numeric).powi(2);
                norm += analytic[i].powi(2) + numeric.powi(2);
            }
        }
        if norm == 0.0 {
            0.0
        } else {
            diff.sqrt() / norm.sqrt()
        }
    }

    pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

    pub type Generator = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

    /// `(name, input generator, builder)` for every primitive on the tape.
    pub fn primitive_cases() -> Vec<(&'static str, Generator, Builder)> {
        fn shp(rng: &mut ChaCha8Rng) -> (usize, usize) {
            (rng.gen_range(1..5), rng.gen_range(1..5))
        }
        vec![
            (
                "matmul",
                Box::new(|rng| {
                    let (m, k) = shp(rng);
                    let n = rng.gen_range(1..5);
                    vec![rand_tensor(rng, m, k, -1.0, 1.0), rand_tensor(rng, k, n, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.matmul(v[0], v[1])),
            ),
            (
                "transpose",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.transpose(v[0]))),
            ),
            (
                "add",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0), rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.add(v[0], v[1])),
            ),
            (
                "sub",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0), rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.sub(v[0], v[1])),
            ),
            (
                "mul",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0), rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.mul(v[0], v[1])),
            ),
            (
                "add_row",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0), rand_tensor(rng, 1, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.add_row(v[0], v[1])),
            ),
            (
                "scale",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
            ),
            (
                "add_scalar",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))),
            ),
            (
                "gelu",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -3.0, 3.0)]
                }),
                Box::new(|t, v| Ok(t.gelu(v[0]))),
            ),
            (
                "tanh",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -2.0, 2.0)]
                }),
                Box::new(|t, v| Ok(t.tanh(v[0]))),
            ),
            (
                "sigmoid",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -3.0, 3.0)]
                }),
                Box::new(|t, v| Ok(t.sigmoid(v[0]))),
            ),
            (
                "exp",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.exp(v[0]))),
            ),
            (
                "log",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, 0.5, 2.0)]
                }),
                Box::new(|t, v| Ok(t.log(v[0]))),
            ),
            (
                "softmax",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -2.0, 2.0)]
                }),
                Box::new(|t, v| Ok(t.softmax(v[0]))),
            ),
            (
                "log_softmax",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -2.0, 2.0)]
                }),
                Box::new(|t, v| Ok(t.log_softmax(v[0]))),
            ),
            (
                "layer_norm",
                Box::new(|rng| {
                    let r = rng.gen_range(1..4);
                    let c = rng.gen_range(2..6);
                    vec![
                        rand_tensor(rng, r, c, -2.0, 2.0),
                        rand_tensor(rng, 1, c, 0.5, 1.5),
                        rand_tensor(rng, 1, c, -0.5, 0.5),
                    ]
                }),
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            ),
            (
                "gather",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r + 1, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| {
                    let rows = t.value(v[0]).rows();
                    let ids: Vec<usize> = (0..5).map(|i| (i * 7 + 1) % rows).collect();
                    t.gather(v[0], &ids)
                }),
            ),
            (
                "slice_rows",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r + 1, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| {
                    let r = t.value(v[0]).rows();
                    t.slice_rows(v[0], 1, r - 1)
                }),
            ),
            (
                "slice_cols",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c + 1, -1.0, 1.0)]
                }),
                Box::new(|t, v| {
                    let c = t.value(v[0]).cols();
                    t.slice_cols(v[0], 1, c - 1)
                }),
            ),
            (
                "concat_cols",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0), rand_tensor(rng, r, c + 1, -1.0, 1.0)]
                }),
                Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]])),
            ),
            (
                "reshape",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| {
                    let n = t.value(v[0]).numel();
                    t.reshape(v[0], 1, n)
                }),
            ),
            (
                "sum",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.sum(v[0]))),
            ),
            (
                "mean",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.mean(v[0]))),
            ),
            (
                "mean_rows",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| Ok(t.mean_rows(v[0]))),
            ),
            (
                "pick",
                Box::new(|rng| {
                    let (r, c) = shp(rng);
                    vec![rand_tensor(rng, r, c, -1.0, 1.0)]
                }),
                Box::new(|t, v| {
                    let [r, c] = t.value(v[0]).shape();
                    t.pick(v[0], &[(0, 0), (r - 1, c - 1), (0, 0)])
                }),
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{gradcheck, primitive_cases, rand_tensor};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, gen, build) in primitive_cases() {
            for trial in 0..100 {
                let inputs = gen(&mut rng);
                let err = gradcheck(&inputs, &mut rng, build.as_ref());
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn squared_error_of_identical_inputs_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(vec![1.0, -2.0, 3.5]));
        let y = t.constant(Tensor::row(vec![1.0, -2.0, 3.5]));
        let d = t.sub(x, y).unwrap();
        let sq = t.mul(d, d).unwrap();
        let l = t.sum(sq);
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.7; 4]));
        let s = t.softmax(x);
        for v in t.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let ls = t.log_softmax(x);
        let nll = -t.value(ls).data()[2];
        assert!((nll - 4f64.ln()).abs() < 1e-12);
        assert!((nll - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = rand_tensor(&mut rng, 3, 7, -30.0, 30.0);
            let s = softmax_rows(&x);
            for r in 0..3 {
                let total: f64 = s.row_slice(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_function_gradient() {
        let mut t = Tape::new();
        let theta = t.param(Tensor::scalar(0.4));
        let x = t.constant(Tensor::scalar(3.0));
        let y = t.mul(theta, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(theta).unwrap().data()[0], 3.0);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn logistic_log_loss_gradient_at_zero() {
        // d/dθ −log σ(θx) at θ=0, x=1
        let mut t = Tape::new();
        let theta = t.param(Tensor::scalar(0.0));
        let x = t.constant(Tensor::scalar(1.0));
        let z = t.mul(theta, x).unwrap();
        let p = t.sigmoid(z);
        let lp = t.log(p);
        let nll = t.scale(lp, -1.0);
        t.backward(nll).unwrap();
        assert!((t.grad(theta).unwrap().data()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(2, 3));
        let b = t.param(Tensor::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        let c = t.param(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let x0 = rand_tensor(&mut rng, 2, 3, -1.0, 1.0);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::new();
            let w = t.param(w0.clone());
            let x = t.constant(x0.clone());
            let h = t.matmul(x, w).unwrap();
            let l1 = {
                let g = t.gelu(h);
                t.sum(g)
            };
            let l2 = {
                let s = t.log_softmax(h);
                t.mean(s)
            };
            let a1 = t.scale(l1, a);
            let b2 = t.scale(l2, b);
            let l = t.add(a1, b2).unwrap();
            t.backward(l).unwrap();
            t.grad(w).unwrap().data().to_vec()
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let g = grad_of(2.5, -0.75);
        for i in 0..g.len() {
            assert!((g[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn second_backward_starts_from_zero() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(2.0));
        let y = t.mul(w, w).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap().data()[0], 4.0);
    }


    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_for_any_logits(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..200.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = softmax_rows(&rand_tensor(&mut rng, rows, cols, -scale, scale));
            for r in 0..rows {
                let total: f64 = s.row_slice(r).iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn gradient_of_a_combination_is_the_combination_of_gradients(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w0 = rand_tensor(&mut rng, 3, 2, -1.0, 1.0);
            let x0 = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
            let grad_of = |a: f64, b: f64| {
                let mut t = Tape::new();
                let w = t.param(w0.clone());
                let x = t.constant(x0.clone());
                let h = t.matmul(x, w).unwrap();
                let th = t.tanh(h);
                let l1 = t.sum(th);
                let e = t.exp(h);
                let l2 = t.mean(e);
                let a1 = t.scale(l1, a);
                let b2 = t.scale(l2, b);
                let l = t.add(a1, b2).unwrap();
                t.backward(l).unwrap();
                t.grad(w).unwrap().data().to_vec()
            };
            let (g1, g2, g) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
            for i in 0..g.len() {
                proptest::prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
            }
        }
    }
}
