//! Dense 64-bit tensors and a reverse-mode tape.
//!
//! Only the operators the network needs are provided. Matrix operators work
//! on rank-2 tensors (rows are samples); elementwise operators accept any
//! shape. All reductions run in a fixed sequential order so results are
//! bit-reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("replay of node {0} diverged from the recorded value")]
    ReplayMismatch(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DiffError::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Column vector (n, 1).
    pub fn column(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len(), 1], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => {
                Err(DiffError::ShapeMismatch { op, left: format!("{:?}", self.shape), right: "a rank-2 tensor".into() })
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.get(1).copied().unwrap_or(1);
        &self.data[r * c..(r + 1) * c]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// C (m×n) = A (m×k) · B (k×n) + beta·C, with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // Bounds: the highest touched index of each operand lies inside its slice.
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A contiguous block of rows that uses weight bank `bank`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub bank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupedLinear { x: Var, w: Var, b: Var, segments: Arc<[Segment]> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Mul { a: Var, b: Var },
    MulColumn { x: Var, c: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Concat { xs: Vec<Var> },
    Gather { x: Var, idx: Arc<[usize]> },
    ScatterSum { x: Var, idx: Arc<[usize]>, n: usize },
    ScatterMean { x: Var, idx: Arc<[usize]>, n: usize },
    Sum { x: Var },
    Huber { pred: Var, target: Var, delta: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Named parameters with stable insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| DiffError::UnknownParam(name.into()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, n) in self.names.iter().enumerate() {
            if self.index.insert(n.clone(), ParamId(i)).is_some() {
                return Err(DiffError::DuplicateParam(n.clone()));
            }
        }
        Ok(())
    }
}

/// Uniform(−√(1/fan_in), √(1/fan_in)) matrix.
pub fn init_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor { shape: vec![rows, cols], data }
}

/// Gradients of every parameter of a store, aligned with its ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Recorded computation. Values are computed eagerly at record time.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch { op, left: format!("{:?}", a.shape), right: format!("{:?}", b.shape) }
}

fn check_index(op: &'static str, idx: &[usize], len: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
        return Err(DiffError::IndexOutOfRange { op, index: bad, len });
    }
    Ok(())
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

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Constant, value: t });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: store.get(id).clone() });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// y = x·W + b with W of shape (in, out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.push(Op::Linear { x, w, b })
    }

    /// Per-segment linear map. `w` stacks one (in, out) block per bank,
    /// `b` holds one bias row per bank.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Var, segments: Arc<[Segment]>) -> Result<Var> {
        self.push(Op::GroupedLinear { x, w, b, segments })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.push(Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid { x })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul { a, b })
    }

    /// Row-wise scaling of x (n, d) by c (n, 1).
    pub fn mul_column(&mut self, x: Var, c: Var) -> Result<Var> {
        self.push(Op::MulColumn { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale { x, s })
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::Concat { xs: xs.to_vec() })
    }

    /// Rows `x[idx[r]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        self.push(Op::Gather { x, idx })
    }

    /// Row r of x is added into output row `idx[r]`; n output rows.
    pub fn scatter_sum(&mut self, x: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        self.push(Op::ScatterSum { x, idx, n })
    }

    /// Like `scatter_sum` divided by the segment size; empty segments are 0.
    pub fn scatter_mean(&mut self, x: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        self.push(Op::ScatterMean { x, idx, n })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum { x })
    }

    /// Mean Huber loss of pred against target.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        self.push(Op::Huber { pred, target, delta })
    }

    /// Pre-activations of every leaky ReLU on the tape, in record order.
    pub fn leaky_preactivations(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu { x, .. } = n.op {
                out.extend_from_slice(&self.nodes[x.0].value.data);
            }
        }
        out
    }

    /// Recompute every non-leaf node from its recorded inputs and require a
    /// bit-identical result.
    pub fn replay(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Constant | Op::Param(_)) {
                continue;
            }
            let v = self.compute(&n.op)?;
            let same =
                v.shape == n.value.shape && v.data.iter().zip(&n.value.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(DiffError::ReplayMismatch(i));
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::Constant | Op::Param(_) => unreachable!("leaves are not computed"),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (m, k) = xv.dims("linear")?;
                let (k2, n) = wv.dims("linear")?;
                if k != k2 {
                    return Err(shape_err("linear", xv, wv));
                }
                let mut out = vec![0.0; m * n];
                if let Some(b) = b {
                    let bv = self.val(*b);
                    if bv.len() != n {
                        return Err(shape_err("linear bias", wv, bv));
                    }
                    for row in out.chunks_mut(n.max(1)) {
                        row.copy_from_slice(&bv.data);
                    }
                }
                gemm(m, k, n, &xv.data, k, 1, &wv.data, n, 1, if b.is_some() { 1.0 } else { 0.0 }, &mut out);
                Ok(Tensor { shape: vec![m, n], data: out })
            }
            Op::GroupedLinear { x, w, b, segments } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let (m, k) = xv.dims("grouped_linear")?;
                let (wk, n) = wv.dims("grouped_linear")?;
                let (banks, bn) = bv.dims("grouped_linear bias")?;
                if k == 0 || wk != banks * k || bn != n {
                    return Err(shape_err("grouped_linear", xv, wv));
                }
                let mut out = vec![0.0; m * n];
                for s in segments.iter() {
                    if s.bank >= banks || s.start + s.len > m {
                        return Err(DiffError::IndexOutOfRange {
                            op: "grouped_linear",
                            index: s.bank.max(s.start + s.len),
                            len: banks.max(m),
                        });
                    }
                    let block = &mut out[s.start * n..(s.start + s.len) * n];
                    for row in block.chunks_mut(n) {
                        row.copy_from_slice(bv.row(s.bank));
                    }
                    gemm(s.len, k, n, &xv.data[s.start * k..], k, 1, &wv.data[s.bank * k * n..], n, 1, 1.0, block);
                }
                Ok(Tensor { shape: vec![m, n], data: out })
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x);
                Ok(Tensor {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&z| if z > 0.0 { z } else { slope * z }).collect(),
                })
            }
            Op::Sigmoid { x } => {
                let xv = self.val(*x);
                Ok(Tensor {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
                })
            }
            Op::Mul { a, b } | Op::Add { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let name = if matches!(op, Op::Mul { .. }) { "mul" } else { "add" };
                if av.shape != bv.shape {
                    return Err(shape_err(name, av, bv));
                }
                let data = if name == "mul" {
                    av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect()
                } else {
                    av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect()
                };
                Ok(Tensor { shape: av.shape.clone(), data })
            }
            Op::MulColumn { x, c } => {
                let (xv, cv) = (self.val(*x), self.val(*c));
                let (m, d) = xv.dims("mul_column")?;
                if cv.shape != [m, 1] {
                    return Err(shape_err("mul_column", xv, cv));
                }
                let mut data = xv.data.clone();
                for (row, &s) in data.chunks_mut(d.max(1)).zip(&cv.data) {
                    for v in row {
                        *v *= s;
                    }
                }
                Ok(Tensor { shape: xv.shape.clone(), data })
            }
            Op::Scale { x, s } => {
                let xv = self.val(*x);
                Ok(Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v * s).collect() })
            }
            Op::Concat { xs } => {
                let first = self.val(xs[0]);
                let (m, _) = first.dims("concat")?;
                let mut widths = Vec::with_capacity(xs.len());
                for &v in xs {
                    let t = self.val(v);
                    let (r, c) = t.dims("concat")?;
                    if r != m {
                        return Err(shape_err("concat", first, t));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (&v, &c) in xs.iter().zip(&widths) {
                        data.extend_from_slice(&self.val(v).data[r * c..(r + 1) * c]);
                    }
                }
                Ok(Tensor { shape: vec![m, total], data })
            }
            Op::Gather { x, idx } => {
                let xv = self.val(*x);
                let (m, d) = xv.dims("gather")?;
                check_index("gather", idx, m)?;
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    data.extend_from_slice(&xv.data[i * d..(i + 1) * d]);
                }
                Ok(Tensor { shape: vec![idx.len(), d], data })
            }
            Op::ScatterSum { x, idx, n } | Op::ScatterMean { x, idx, n } => {
                let name = if matches!(op, Op::ScatterSum { .. }) { "scatter_sum" } else { "scatter_mean" };
                let xv = self.val(*x);
                let (m, d) = xv.dims(name)?;
                if idx.len() != m {
                    return Err(DiffError::ShapeMismatch {
                        op: name,
                        left: format!("{:?}", xv.shape),
                        right: format!("{} segment ids", idx.len()),
                    });
                }
                check_index(name, idx, *n)?;
                let mut data = vec![0.0; n * d];
                for (r, &s) in idx.iter().enumerate() {
                    let dst = &mut data[s * d..(s + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&xv.data[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                if name == "scatter_mean" {
                    let counts = segment_counts(idx, *n);
                    for (row, &c) in data.chunks_mut(d.max(1)).zip(&counts) {
                        if c > 0 {
                            let inv = 1.0 / c as f64;
                            for v in row {
                                *v *= inv;
                            }
                        }
                    }
                }
                Ok(Tensor { shape: vec![*n, d], data })
            }
            Op::Sum { x } => Ok(Tensor::scalar(self.val(*x).data.iter().sum())),
            Op::Huber { pred, target, delta } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                if p.len() != t.len() {
                    return Err(shape_err("huber", p, t));
                }
                let n = p.len().max(1) as f64;
                let total: f64 = p
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(a, b)| {
                        let r = (a - b).abs();
                        if r <= *delta {
                            0.5 * r * r
                        } else {
                            delta * (r - 0.5 * delta)
                        }
                    })
                    .sum();
                Ok(Tensor::scalar(total / n))
            }
        }
    }

    /// Gradients of scalar `out` with respect to every parameter in `store`.
    /// Parameters that do not influence `out` get zeros.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Result<Gradients> {
        let ov = self.val(out);
        if ov.len() != 1 {
            return Err(DiffError::NotScalar(ov.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor { shape: ov.shape.clone(), data: vec![1.0] });
        let mut result = store.zeros_like();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => result[id.0].add_assign(&g),
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients(result))
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (m, k) = (xv.shape[0], xv.shape[1]);
                let n = wv.shape[1];
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, &g.data, n, 1, &wv.data, 1, n, 0.0, &mut dx);
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, &xv.data, 1, k, &g.data, n, 1, 0.0, &mut dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; n];
                    for row in g.data.chunks(n.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Self::accumulate(grads, *b, Tensor { shape: self.val(*b).shape.clone(), data: db });
                }
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: dx });
                Self::accumulate(grads, *w, Tensor { shape: wv.shape.clone(), data: dw });
            }
            Op::GroupedLinear { x, w, b, segments } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let k = xv.shape[1];
                let n = wv.shape[1];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; bv.len()];
                for s in segments.iter() {
                    let gs = &g.data[s.start * n..(s.start + s.len) * n];
                    let ws = &wv.data[s.bank * k * n..(s.bank + 1) * k * n];
                    gemm(s.len, n, k, gs, n, 1, ws, 1, n, 0.0, &mut dx[s.start * k..(s.start + s.len) * k]);
                    gemm(
                        k,
                        s.len,
                        n,
                        &xv.data[s.start * k..(s.start + s.len) * k],
                        1,
                        k,
                        gs,
                        n,
                        1,
                        1.0,
                        &mut dw[s.bank * k * n..(s.bank + 1) * k * n],
                    );
                    let dbr = &mut db[s.bank * n..(s.bank + 1) * n];
                    for row in gs.chunks(n) {
                        for (d, v) in dbr.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: dx });
                Self::accumulate(grads, *w, Tensor { shape: wv.shape.clone(), data: dw });
                Self::accumulate(grads, *b, Tensor { shape: bv.shape.clone(), data: db });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x);
                let data = xv.data.iter().zip(&g.data).map(|(&z, &d)| if z > 0.0 { d } else { slope * d }).collect();
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Sigmoid { x } => {
                let data = y.data.iter().zip(&g.data).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                Self::accumulate(grads, *x, Tensor { shape: y.shape.clone(), data });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let da = g.data.iter().zip(&bv.data).map(|(d, v)| d * v).collect();
                let db = g.data.iter().zip(&av.data).map(|(d, v)| d * v).collect();
                Self::accumulate(grads, *a, Tensor { shape: av.shape.clone(), data: da });
                Self::accumulate(grads, *b, Tensor { shape: bv.shape.clone(), data: db });
            }
            Op::MulColumn { x, c } => {
                let (xv, cv) = (self.val(*x), self.val(*c));
                let d = xv.shape[1].max(1);
                let mut dx = g.data.clone();
                let mut dc = vec![0.0; cv.len()];
                for (r, (row, xrow)) in dx.chunks_mut(d).zip(xv.data.chunks(d)).enumerate() {
                    let s = cv.data[r];
                    let mut acc = 0.0;
                    for (gv, xval) in row.iter_mut().zip(xrow) {
                        acc += *gv * xval;
                        *gv *= s;
                    }
                    dc[r] = acc;
                }
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: dx });
                Self::accumulate(grads, *c, Tensor { shape: cv.shape.clone(), data: dc });
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, s } => {
                Self::accumulate(
                    grads,
                    *x,
                    Tensor { shape: g.shape.clone(), data: g.data.iter().map(|v| v * s).collect() },
                );
            }
            Op::Concat { xs } => {
                let m = y.shape[0];
                let total = y.shape[1];
                let mut offset = 0;
                for &v in xs {
                    let shape = self.val(v).shape.clone();
                    let c = shape[1];
                    let mut data = Vec::with_capacity(m * c);
                    for r in 0..m {
                        data.extend_from_slice(&g.data[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    Self::accumulate(grads, v, Tensor { shape, data });
                }
            }
            Op::Gather { x, idx } => {
                let xv = self.val(*x);
                let d = xv.shape[1];
                let mut data = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(&g.data[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::ScatterSum { x, idx, .. } | Op::ScatterMean { x, idx, .. } => {
                let xv = self.val(*x);
                let d = xv.shape[1];
                let scale: Vec<f64> = match op {
                    Op::ScatterMean { n, .. } => {
                        segment_counts(idx, *n).into_iter().map(|c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect()
                    }
                    _ => Vec::new(),
                };
                let mut data = Vec::with_capacity(xv.len());
                for &s in idx.iter() {
                    let src = &g.data[s * d..(s + 1) * d];
                    if scale.is_empty() {
                        data.extend_from_slice(src);
                    } else {
                        data.extend(src.iter().map(|v| v * scale[s]));
                    }
                }
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Sum { x } => {
                let xv = self.val(*x);
                Self::accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: vec![g.data[0]; xv.len()] });
            }
            Op::Huber { pred, target, delta } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                let n = p.len().max(1) as f64;
                let dp: Vec<f64> =
                    p.data.iter().zip(&t.data).map(|(a, b)| g.data[0] * (a - b).clamp(-delta, *delta) / n).collect();
                let dt = dp.iter().map(|v| -v).collect();
                Self::accumulate(grads, *target, Tensor { shape: t.shape.clone(), data: dt });
                Self::accumulate(grads, *pred, Tensor { shape: p.shape.clone(), data: dp });
            }
        }
    }
}

fn segment_counts(idx: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n];
    for &s in idx {
        counts[s] += 1;
    }
    counts
}

/// Mean Huber loss on plain slices.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column(pred.to_vec()));
    let t = tape.constant(Tensor::column(target.to_vec()));
    let l = tape.huber(p, t, delta).expect("equal lengths");
    tape.value(l).data[0]
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// State shapes agree with the store.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().all(|(id, _, t)| self.m[id.0].shape == t.shape && self.v[id.0].shape == t.shape)
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let p = &mut store.values[i].data;
            let g = &grads.0[i].data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..p.len() {
                p[j] -= self.lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One compared coordinate of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCoordinate {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: Vec<FdCoordinate>,
    /// Coordinates dropped because a leaky ReLU sat on its kink.
    pub skipped: Vec<(ParamId, usize)>,
    pub max_rel_err: f64,
    pub worst: Option<(ParamId, usize)>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// |a − b| / max(|a|, |b|, 1e-6).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare tape gradients with central differences at `coords`.
///
/// `f` builds a tape for the given parameters and returns its scalar output.
/// A coordinate is skipped when any leaky ReLU pre-activation is not on the
/// same side of zero at the base point and at both perturbed points.
pub fn finite_diff_check<F>(store: &ParamStore, f: F, coords: &[(ParamId, usize)], step: f64) -> Result<FdReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, out) = f(store)?;
    let grads = tape.backward(out, store)?;
    let base = tape.leaky_preactivations();
    let mut work = store.clone();
    let mut report = FdReport { checked: Vec::new(), skipped: Vec::new(), max_rel_err: 0.0, worst: None };
    for &(pid, idx) in coords {
        let orig = store.get(pid).data[idx];
        work.get_mut(pid).data[idx] = orig + step;
        let (tp, op) = f(&work)?;
        work.get_mut(pid).data[idx] = orig - step;
        let (tm, om) = f(&work)?;
        work.get_mut(pid).data[idx] = orig;
        let (zp, zm) = (tp.leaky_preactivations(), tm.leaky_preactivations());
        let kink = base
            .iter()
            .zip(zp.iter().zip(&zm))
            .any(|(&z0, (&a, &b))| (z0 > 0.0) != (a > 0.0) || (z0 > 0.0) != (b > 0.0));
        if kink {
            report.skipped.push((pid, idx));
            continue;
        }
        let numeric = (tp.value(op).data[0] - tm.value(om).data[0]) / (2.0 * step);
        let analytic = grads.get(pid).data[idx];
        let rel_err = relative_error(analytic, numeric);
        if report.worst.is_none() || rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some((pid, idx));
        }
        report.checked.push(FdCoordinate { param: pid, index: idx, analytic, numeric, rel_err });
    }
    Ok(report)
}

/// `n` distinct coordinates drawn uniformly over all scalar parameters.
pub fn sample_coordinates<R: Rng>(store: &ParamStore, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut flat = Vec::with_capacity(store.num_scalars());
    for (id, _, t) in store.iter() {
        flat.extend((0..t.len()).map(|i| (id, i)));
    }
    let n = n.min(flat.len());
    rand::seq::index::sample(rng, flat.len(), n).into_iter().map(|i| flat[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(m(1, 2, &[0.0, 0.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scatter_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let s = t.scatter_sum(x, Arc::from(vec![0, 0, 1]), 2).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 3.0]);
        let mean = t.scatter_mean(x, Arc::from(vec![0, 0, 2]), 3).unwrap();
        assert_eq!(t.value(mean).data(), &[1.5, 0.0, 3.0]);
        assert!(t.scatter_sum(x, Arc::from(vec![0, 5, 1]), 2).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(&[1.0, 2.0], &[1.0, 2.0], 1.0), 0.0);
        assert_eq!(huber_loss(&[0.5], &[0.0], 1.0), 0.125);
        assert_eq!(huber_loss(&[2.0], &[0.0], 1.0), 1.5);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let other = store.add("unused", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let sq = t.mul(wv, wv).unwrap();
        let out = t.sum(sq).unwrap();
        let g = t.backward(out, &store).unwrap();
        assert_eq!(g.get(w).data(), &[6.0]);
        assert_eq!(g.get(other).data(), &[0.0]);
        assert!(matches!(t.backward(wv, &store), Ok(_)));
        let v = t.constant(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(t.backward(v, &store), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 3, &[0.0; 6]));
        let b = t.constant(m(2, 2, &[0.0; 4]));
        let err = t.add(a, b).unwrap_err();
        assert_eq!(err, DiffError::ShapeMismatch { op: "add", left: "[2, 3]".into(), right: "[2, 2]".into() });
        assert!(t.linear(a, b, None).is_err());
    }

    #[test]
    fn adamw_first_step_and_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(&store, 0.001).with_weight_decay(0.0);
        opt.update(&mut store, &Gradients(vec![Tensor::scalar(0.0)]));
        assert_eq!(store.get(w).data(), &[1.0]);
        let mut opt = AdamW::new(&store, 0.001).with_weight_decay(0.0);
        opt.update(&mut store, &Gradients(vec![Tensor::scalar(1.0)]));
        assert!((store.get(w).data()[0] - (1.0 - 0.001)).abs() < 1e-10);
    }
}
