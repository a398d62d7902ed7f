//! Reverse-mode automatic differentiation over a per-trace graph.
//!
//! A [`Graph`] records every forward operation together with its value.
//! [`Graph::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into every node that requires a gradient.
//! All values inside a graph are matrices (`rows × cols`); vectors are
//! `1 × n` rows and scalars are `1 × 1`.
//!
//! Graphs are cheap to build and own their values, so independent traces
//! can live on separate threads while sharing read-only parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::{gemm_strided, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The primitive set exposed through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    /// Mean over axis 0 (rows) or 1 (columns).
    MeanPoolAxis(usize),
    LayerNorm,
    Gelu,
    Silu,
    /// Softmax along axis 0 or 1.
    SoftmaxAxis(usize),
    MseLoss,
    /// `[r,c] + [1,c]`, the row broadcast over every row.
    BroadcastAdd,
    /// Column chunk `index` of `chunks` equal column chunks.
    SliceChunk { chunks: usize, index: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Mean { a: Var, axis: usize },
    Sum(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    /// Keeps `Φ(x)` for the backward pass when a gradient is needed.
    Gelu { a: Var, cdf: Vec<f64> },
    Silu(Var),
    Softmax { a: Var, axis: usize },
    Mse(Var, Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Evaluation trace.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    params: Vec<(String, Var)>,
    trainable: [bool; Tag::ALL.len()],
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which no parameter requires a gradient.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            params: Vec::new(),
            trainable: [false; Tag::ALL.len()],
        }
    }

    /// A graph in which parameters carrying any of `tags` require gradients.
    pub fn with_trainable(tags: &[Tag]) -> Self {
        let mut g = Graph::new();
        for t in tags {
            g.trainable[t.to_byte() as usize] = true;
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (rows, cols) = value.dims2();
        let value = if value.rank() == 2 {
            value
        } else {
            value.reshape(vec![rows, cols]).expect("dims2 preserves numel")
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, rg: bool) -> Var {
        let value = Tensor::new(vec![rows, cols], data).expect("op produced consistent data");
        self.push(value, op, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a registry parameter as a leaf. Repeated binds of the same
    /// name within one graph return the same node.
    pub fn param(&mut self, reg: &ParamRegistry, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = reg.entry(name)?;
        let rg = self.trainable[entry.tag.to_byte() as usize];
        let v = self.push(entry.tensor.clone(), Op::Leaf, rg);
        self.bound.insert(name.to_owned(), v);
        if rg {
            self.params.push((name.to_owned(), v));
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.shape(v);
        [r, c]
    }

    /// Dispatch a [`Primitive`] over `inputs`.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Mul
            | Primitive::MseLoss
            | Primitive::BroadcastAdd => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Invalid(format!(
                "{prim:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        match prim {
            Primitive::MatMul => self.matmul(a, inputs[1]),
            Primitive::Add => self.add(a, inputs[1]),
            Primitive::Mul => self.mul(a, inputs[1]),
            Primitive::MeanPoolAxis(axis) => self.mean_axis(a, axis),
            Primitive::LayerNorm => self.layer_norm(a),
            Primitive::Gelu => Ok(self.gelu(a)),
            Primitive::Silu => Ok(self.silu(a)),
            Primitive::SoftmaxAxis(axis) => self.softmax(a, axis),
            Primitive::MseLoss => self.mse(a, inputs[1]),
            Primitive::BroadcastAdd => self.add_row(a, inputs[1]),
            Primitive::SliceChunk { chunks, index } => self.chunk_cols(a, chunks, index),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", &self.dims(a), &self.dims(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            self.data(a),
            strides(ar, ac, ta),
            self.data(b),
            strides(br, bc, tb),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push_data(m, n, out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &self.dims(a), &self.dims(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push_data(r, c, out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push_data(r, c, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(op, &self.dims(a), &self.dims(row)));
        }
        Ok(())
    }

    /// Add a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("broadcast_add", a, row)?;
        let (r, c) = self.shape(a);
        let rv = self.data(row);
        let out = self
            .data(a)
            .chunks_exact(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push_data(r, c, out, Op::AddRow(a, row), rg))
    }

    /// Multiply every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let (r, c) = self.shape(a);
        let rv = self.data(row);
        let out = self
            .data(a)
            .chunks_exact(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p * q))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push_data(r, c, out, Op::MulRow(a, row), rg))
    }

    /// Multiply `a` by the single value held in the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_by", &self.dims(a), &self.dims(s)));
        }
        let k = self.data(s)[0];
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push_data(r, c, out, Op::ScaleBy(a, s), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        let x = self.data(a);
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in x.chunks_exact(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Ok(self.push_data(1, c, out, Op::Mean { a, axis }, rg))
            }
            1 => {
                let out = x
                    .chunks_exact(c)
                    .map(|row| row.iter().sum::<f64>() / c as f64)
                    .collect();
                Ok(self.push_data(r, 1, out, Op::Mean { a, axis }, rg))
            }
            _ => Err(Error::Invalid(format!("mean_pool_axis: bad axis {axis}"))),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push_data(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Normalize each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        let mut rstds = Vec::with_capacity(r);
        for row in self.data(a).chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * rstd));
            rstds.push(rstd);
        }
        let rg = self.rg(&[a]);
        Ok(self.push_data(r, c, out, Op::LayerNorm { a, rstd: rstds }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        let cdf: Vec<f64> = self.data(a).iter().map(|&x| normal_cdf(x)).collect();
        let out = self.data(a).iter().zip(&cdf).map(|(x, p)| x * p).collect();
        let cdf = if rg { cdf } else { Vec::new() };
        self.push_data(r, c, out, Op::Gelu { a, cdf }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        match axis {
            1 => {
                for (src, dst) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                    softmax_into(src, dst);
                }
            }
            0 => {
                for j in 0..c {
                    let col: Vec<f64> = (0..r).map(|i| x[i * c + j]).collect();
                    let mut tmp = vec![0.0; r];
                    softmax_into(&col, &mut tmp);
                    for (i, v) in tmp.into_iter().enumerate() {
                        out[i * c + j] = v;
                    }
                }
            }
            _ => return Err(Error::Invalid(format!("softmax_axis: bad axis {axis}"))),
        }
        let rg = self.rg(&[a]);
        Ok(self.push_data(r, c, out, Op::Softmax { a, axis }, rg))
    }

    /// Mean of squared differences, a `1 × 1` result.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.data(a).len() as f64;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push_data(1, 1, vec![s], Op::Mse(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let out = self
            .data(a)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push_data(r, len, out, Op::SliceCols { a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.data(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push_data(len, c, out, Op::SliceRows { a, start }, rg))
    }

    pub fn chunk_cols(&mut self, a: Var, chunks: usize, index: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if chunks == 0 || c % chunks != 0 || index >= chunks {
            return Err(Error::shape("slice_chunk", &[r, c], &[chunks, index]));
        }
        let w = c / chunks;
        self.slice_cols(a, index * w, w)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(Error::shape("concat_cols", &self.dims(parts[0]), &self.dims(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push_data(r, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(Error::shape("concat_rows", &self.dims(parts[0]), &self.dims(p)));
            }
            out.extend_from_slice(self.data(p));
            r += self.shape(p).0;
        }
        let rg = self.rg(parts);
        Ok(self.push_data(r, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `idx[0], idx[1], ...` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Invalid(format!(
                "gather_rows: indices {idx:?} out of range for {r} rows"
            )));
        }
        let t = self.data(table);
        let out = idx
            .iter()
            .flat_map(|&i| t[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push_data(
            idx.len(),
            c,
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(vec![node.rows, node.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(vec![n.rows, n.cols], d).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let (m, n) = (r, c);
                let k = if *ta { ar } else { ac };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; ar * ac]);
                    if !ta {
                        // dA = dC · op(B)^T
                        gemm_strided(m, n, k, g, (n as isize, 1), bd, strides(br, bc, !tb), slot, 1.0);
                    } else {
                        // dA = op(B) · dC^T
                        gemm_strided(k, n, m, bd, strides(br, bc, *tb), g, (1, n as isize), slot, 1.0);
                    }
                }
                if self.requires_grad(*b) {
                    let slot = grads[b.0].get_or_insert_with(|| vec![0.0; br * bc]);
                    if !tb {
                        // dB = op(A)^T · dC
                        gemm_strided(k, m, n, ad, strides(ar, ac, !ta), g, (n as isize, 1), slot, 1.0);
                    } else {
                        // dB = dC^T · op(A)
                        gemm_strided(n, m, k, g, (1, n as isize), ad, strides(ar, ac, *ta), slot, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, g.iter().zip(bd).map(|(d, y)| d * y));
                self.acc(grads, *b, g.iter().zip(ad).map(|(d, x)| d * x));
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|d| d * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.iter().copied()),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.iter().copied());
                if self.requires_grad(*row) {
                    let s = col_sums(g, c);
                    self.acc(grads, *row, s.into_iter());
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.data(*row);
                if self.requires_grad(*a) {
                    let da = g.chunks_exact(c).flat_map(|gr| gr.iter().zip(rv).map(|(d, q)| d * q));
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*row) {
                    let ad = self.data(*a);
                    let mut s = vec![0.0; c];
                    for (gr, xr) in g.chunks_exact(c).zip(ad.chunks_exact(c)) {
                        for ((o, d), x) in s.iter_mut().zip(gr).zip(xr) {
                            *o += d * x;
                        }
                    }
                    self.acc(grads, *row, s.into_iter());
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.data(*s)[0];
                self.acc(grads, *a, g.iter().map(|d| d * k));
                if self.requires_grad(*s) {
                    let ds: f64 = g.iter().zip(self.data(*a)).map(|(d, x)| d * x).sum();
                    self.acc(grads, *s, std::iter::once(ds));
                }
            }
            Op::Mean { a, axis } => {
                let (ar, ac) = self.shape(*a);
                if *axis == 0 {
                    let inv = 1.0 / ar as f64;
                    self.acc(grads, *a, (0..ar * ac).map(|i| g[i % ac] * inv));
                } else {
                    let inv = 1.0 / ac as f64;
                    self.acc(grads, *a, (0..ar * ac).map(|i| g[i / ac] * inv));
                }
            }
            Op::Sum(a) => {
                let n = self.data(*a).len();
                self.acc(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::LayerNorm { a, rstd } => {
                let y = node.value.data();
                let mut dx = Vec::with_capacity(r * c);
                for ((gr, yr), &s) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(rstd) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / c as f64;
                    dx.extend(gr.iter().zip(yr).map(|(d, v)| s * (d - mg - v * mgy)));
                }
                self.acc(grads, *a, dx.into_iter());
            }
            Op::Gelu { a, cdf } => {
                let x = self.data(*a);
                let d = g.iter().zip(x).zip(cdf);
                self.acc(grads, *a, d.map(|((d, &v), p)| d * (p + v * INV_SQRT_2PI * (-0.5 * v * v).exp())));
            }
            Op::Silu(a) => {
                let x = self.data(*a);
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(d, &v)| {
                        let s = sigmoid(v);
                        d * s * (1.0 + v * (1.0 - s))
                    }),
                );
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                if *axis == 1 {
                    for i in 0..r {
                        let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                        let dot: f64 = gr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                } else {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| g[i * c + j] * y[i * c + j]).sum();
                        for i in 0..r {
                            dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
                self.acc(grads, *a, dx.into_iter());
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let k = 2.0 * g[0] / ad.len() as f64;
                self.acc(grads, *a, ad.iter().zip(bd).map(|(x, y)| k * (x - y)));
                self.acc(grads, *b, ad.iter().zip(bd).map(|(x, y)| -k * (x - y)));
            }
            Op::SliceCols { a, start } => {
                if self.requires_grad(*a) {
                    let (_, ac) = self.shape(*a);
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; r * ac]);
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.requires_grad(*a) {
                    let (ar, ac) = self.shape(*a);
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; ar * ac]);
                    for (s, d) in slot[start * c..(start + r) * c].iter_mut().zip(g) {
                        *s += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.requires_grad(p) {
                        let slot = grads[p.0].get_or_insert_with(|| vec![0.0; pr * pc]);
                        for i in 0..pr {
                            for j in 0..pc {
                                slot[i * pc + j] += g[i * c + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    self.acc(grads, p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::GatherRows { table, idx } => {
                if self.requires_grad(*table) {
                    let (tr, tc) = self.shape(*table);
                    let slot = grads[table.0].get_or_insert_with(|| vec![0.0; tr * tc]);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            slot[i * tc + j] += g[k * c + j];
                        }
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: impl Iterator<Item = f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => slot.iter_mut().zip(d).for_each(|(s, x)| *s += x),
            slot @ None => *slot = Some(d.collect()),
        }
    }
}

/// Row and column strides for an `rows × cols` row-major buffer, viewed
/// transposed when `t` is set.
fn strides(_rows: usize, cols: usize, t: bool) -> (isize, isize) {
    if t {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn col_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks_exact(c) {
        for (o, v) in s.iter_mut().zip(row) {
            *o += v;
        }
    }
    s
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in src {
        if v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (d, v) in dst.iter_mut().zip(src) {
        *d = (v - max).exp();
        total += *d;
    }
    let inv = 1.0 / total;
    for d in dst {
        *d *= inv;
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

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to a node, zero when unreachable.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(vec![self.shapes[v.0].0, self.shapes[v.0].1]))
    }

    /// Gradients of every trainable parameter bound to the graph, keyed by
    /// name. Parameters the loss does not depend on map to zeros.
    pub fn into_named(self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt_or_zero(*v)))
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }
}

/// Compare reverse-mode gradients of `f` at `point` with central
/// differences of step `h`. Returns the largest per-coordinate
/// `|autodiff - fd| / max(|autodiff|, |fd|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step {h} must be positive")));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let loss = f(&mut g, x)?;
    let grad = g.backward(loss)?.wrt_or_zero(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let l = f(&mut g, x)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let ad = grad.data()[i];
        worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8));
    }
    Ok(worst)
}
