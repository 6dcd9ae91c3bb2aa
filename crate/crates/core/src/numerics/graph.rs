//! Record-and-replay reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] for its lifetime; parameter leaves
//! read the store's buffers directly, and [`Graph::backward`] returns one
//! gradient buffer per stored parameter. Every value is a `rows × cols`
//! matrix, scalars are `1 × 1`.
//!
//! Blocked ops (`block_matmul_nt`, `block_matmul`, `block_mean_rows`) treat a
//! tall matrix as a stack of independent `block`-row slabs, which lets one
//! node run attention over many permutations at once.

use std::borrow::Cow;

use super::tensor::{kernels, Tensor};
use crate::error::{PierError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors. Ids are dense indices in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

impl ParamStore {
    pub const fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One gradient buffer per parameter of the store it was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    BlockMatMulNt { a: Var, b: Var, block: usize },
    BlockMatMul { s: Var, v: Var, block: usize },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    InterleaveRows(Vec<Var>),
    RepeatRows(Var, usize),
    TileRows(Var),
    GatherRows(Var, Vec<usize>),
    BlockMeanRows(Var, usize),
    SegmentMean(Var, Vec<(usize, usize)>),
    RowMean(Var),
    Sum(Var),
    Square(Var),
    Bce(Var, Vec<f64>),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Probability clamp applied inside the BCE node.
pub const BCE_CLAMP: f64 = 1e-12;

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<Var>>,
}

impl Graph<'static> {
    /// A graph with no parameter store, for pure tensor evaluation.
    pub fn standalone() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::BlockMatMulNt { a, b, .. } => vec![*a, *b],
            Op::BlockMatMul { s, v, .. } => vec![*s, *v],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::RepeatRows(a, _)
            | Op::TileRows(a)
            | Op::GatherRows(a, _)
            | Op::BlockMeanRows(a, _)
            | Op::SegmentMean(a, _)
            | Op::RowMean(a)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Bce(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::InterleaveRows(v) => v.clone(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape")
    }

    fn dims(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.shape(v);
        [r, c]
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Cow::Owned(t.data().to_vec()), t.rows(), t.cols(), Op::Input)
    }

    pub fn input_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(PierError::dim("input", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Input))
    }

    /// Leaf reading a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(PierError::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b)))
    }

    /// Per `block`-row slab: `a_blk · b_blkᵀ`, giving a `(rows × block)` result.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let ([ra, ca], [rb, cb]) = (self.dims(a), self.dims(b));
        if ra != rb || ca != cb || block == 0 || ra % block != 0 {
            return Err(PierError::dim("block_matmul_nt", &[ra, ca, block], &[rb, cb]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; ra * block];
        for blk in 0..ra / block {
            let base = blk * block;
            for i in 0..block {
                let arow = &av[(base + i) * ca..(base + i + 1) * ca];
                for j in 0..block {
                    let brow = &bv[(base + j) * ca..(base + j + 1) * ca];
                    out[(base + i) * block + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        Ok(self.push(Cow::Owned(out), ra, block, Op::BlockMatMulNt { a, b, block }))
    }

    /// Per slab: `s_blk (block × block) · v_blk (block × d)`.
    pub fn block_matmul(&mut self, s: Var, v: Var, block: usize) -> Result<Var> {
        let ([rs, cs], [rv, cv]) = (self.dims(s), self.dims(v));
        if rs != rv || cs != block || block == 0 || rs % block != 0 {
            return Err(PierError::dim("block_matmul", &[rs, cs], &[rv, cv]));
        }
        let (sv, vv) = (self.value(s), self.value(v));
        let mut out = vec![0.0; rv * cv];
        for blk in 0..rs / block {
            let base = blk * block;
            kernels::matmul_acc(
                &sv[base * block..(base + block) * block],
                &vv[base * cv..(base + block) * cv],
                &mut out[base * cv..(base + block) * cv],
                block,
                block,
                cv,
            );
        }
        Ok(self.push(Cow::Owned(out), rv, cv, Op::BlockMatMul { s, v, block }))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ([m, n], [br, bc]) = (self.dims(a), self.dims(bias));
        if br * bc != n {
            return Err(PierError::dim("add_bias", &[m, n], &[br, bc]));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Cow::Owned(out), m, n, Op::AddBias(a, bias)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(PierError::dim(name, &da, &db));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(Cow::Owned(out), da[0], da[1], op))
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

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let [m, n] = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(Cow::Owned(out), m, n, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => a,
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let [m, n] = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push(Cow::Owned(out), m, n, Op::SoftmaxRows(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let [m, n] = self.dims(a);
        if m * n != rows * cols {
            return Err(PierError::dim("reshape", &[m, n], &[rows, cols]));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(Cow::Owned(out), rows, cols, Op::Reshape(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|p| self.dims(*p)[0]).unwrap_or(0);
        let mut total = 0;
        for p in parts {
            let [r, c] = self.dims(*p);
            if r != m {
                return Err(PierError::dim("concat_cols", &[m], &[r, c]));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let c = self.dims(*p)[1];
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Cow::Owned(out), m, total, Op::ConcatCols(parts.to_vec())))
    }

    /// k matrices of shape `m × c` → `(m·k) × c`, row `i·k + j` = part j row i.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let k = parts.len();
        let [m, c] = parts.first().map(|p| self.dims(*p)).unwrap_or([0, 0]);
        for p in parts {
            if self.dims(*p) != [m, c] {
                return Err(PierError::dim("interleave_rows", &[m, c], &self.dims(*p)));
            }
        }
        let mut out = Vec::with_capacity(m * k * c);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Cow::Owned(out), m * k, c, Op::InterleaveRows(parts.to_vec())))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let [m, n] = self.dims(a);
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        self.push(Cow::Owned(out), m * times, n, Op::RepeatRows(a, times))
    }

    /// The whole matrix stacked `times` times.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let [m, n] = self.dims(a);
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        self.push(Cow::Owned(out), m * times, n, Op::TileRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let [m, n] = self.dims(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(PierError::dim("gather_rows", &[m, n], &[bad]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rows = indices.len();
        Ok(self.push(Cow::Owned(out), rows, n, Op::GatherRows(a, indices)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, (start..start + len).collect())
    }

    /// Every row replaced by the mean of its `block`-row slab.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Result<Var> {
        let [m, n] = self.dims(a);
        if block == 0 || m % block != 0 {
            return Err(PierError::dim("block_mean_rows", &[m, n], &[block]));
        }
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for blk in 0..m / block {
            let mut mean = vec![0.0; n];
            for i in 0..block {
                let r = blk * block + i;
                mean.iter_mut().zip(&src[r * n..(r + 1) * n]).for_each(|(s, x)| *s += x);
            }
            mean.iter_mut().for_each(|s| *s /= block as f64);
            for i in 0..block {
                let r = blk * block + i;
                out[r * n..(r + 1) * n].copy_from_slice(&mean);
            }
        }
        Ok(self.push(Cow::Owned(out), m, n, Op::BlockMeanRows(a, block)))
    }

    /// One output row per `(start, len)` span: the mean of those input rows,
    /// or zeros for an empty span.
    pub fn segment_mean(&mut self, a: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let [m, n] = self.dims(a);
        if spans.iter().any(|&(s, l)| s + l > m) {
            return Err(PierError::dim("segment_mean", &[m, n], &[spans.len()]));
        }
        let src = self.value(a);
        let mut out = vec![0.0; spans.len() * n];
        for (o, &(start, len)) in out.chunks_mut(n.max(1)).zip(spans) {
            for r in start..start + len {
                o.iter_mut().zip(&src[r * n..(r + 1) * n]).for_each(|(s, x)| *s += x);
            }
            if len > 0 {
                o.iter_mut().for_each(|s| *s /= len as f64);
            }
        }
        Ok(self.push(Cow::Owned(out), spans.len(), n, Op::SegmentMean(a, spans.to_vec())))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let [m, n] = self.dims(a);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n.max(1))
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.push(Cow::Owned(out), m, 1, Op::RowMean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(a))
    }

    /// Summed binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let [m, n] = self.dims(pred);
        if m * n != labels.len() {
            return Err(PierError::dim("bce", &[m, n], &[labels.len()]));
        }
        let loss: f64 = self
            .value(pred)
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        Ok(self.push(Cow::Owned(vec![loss]), 1, 1, Op::Bce(pred, labels.to_vec())))
    }

    /// Affine layer `x·W + b` followed by `act`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let h = self.matmul(x, w)?;
        let h = self.add_bias(h, b)?;
        Ok(self.activation(h, act))
    }

    /// `softmax(Q·Kᵀ/√d)·V` independently per `block`-row slab.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        let d = self.dims(q)[1];
        if self.dims(k) != self.dims(q) || self.dims(v)[0] != self.dims(q)[0] {
            return Err(PierError::dim("attention", &self.dims(q), &self.dims(k)));
        }
        let scores = self.block_matmul_nt(q, k, block)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scores);
        self.block_matmul(weights, v, block)
    }

    /// Reverse sweep from a scalar node, returning one buffer per parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut acc = Gradients::zeros_like(self.store);
        self.backward_into(loss, &mut acc)?;
        Ok(acc)
    }

    /// Like [`Graph::backward`] but adds into an existing accumulator.
    pub fn backward_into(&self, loss: Var, acc: &mut Gradients) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(PierError::Contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        if acc.len() != self.store.len() {
            return Err(PierError::Contract(format!(
                "gradient accumulator has {} slots, store has {}",
                acc.len(),
                self.store.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, acc);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>], acc: &mut Gradients) {
        let (rows, cols) = (node.rows, node.cols);
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        // Lazily allocated accumulator slot for a parent.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                acc.get_mut(*id).iter_mut().zip(g).for_each(|(a, x)| *a += x);
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.dims(*a);
                let n = cols;
                if needs(*a) {
                    kernels::matmul_nt_acc(g, self.value(*b), slot(grads, nodes, *a), m, k, n);
                }
                if needs(*b) {
                    kernels::matmul_tn_acc(self.value(*a), g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::BlockMatMulNt { a, b, block } => {
                let d = self.dims(*a)[1];
                let block = *block;
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for blk in 0..rows / block {
                        let base = blk * block;
                        for i in 0..block {
                            for j in 0..block {
                                let gij = g[(base + i) * block + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let brow = &bv[(base + j) * d..(base + j + 1) * d];
                                let garow = &mut ga[(base + i) * d..(base + i + 1) * d];
                                garow.iter_mut().zip(brow).for_each(|(o, x)| *o += gij * x);
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    for blk in 0..rows / block {
                        let base = blk * block;
                        for i in 0..block {
                            for j in 0..block {
                                let gij = g[(base + i) * block + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let arow = &av[(base + i) * d..(base + i + 1) * d];
                                let gbrow = &mut gb[(base + j) * d..(base + j + 1) * d];
                                gbrow.iter_mut().zip(arow).for_each(|(o, x)| *o += gij * x);
                            }
                        }
                    }
                }
            }
            Op::BlockMatMul { s, v, block } => {
                let block = *block;
                let d = cols;
                let (sv, vv) = (self.value(*s), self.value(*v));
                for blk in 0..rows / block {
                    let base = blk * block;
                    let gblk = &g[base * d..(base + block) * d];
                    if needs(*s) {
                        let gs = slot(grads, nodes, *s);
                        kernels::matmul_nt_acc(
                            gblk,
                            &vv[base * d..(base + block) * d],
                            &mut gs[base * block..(base + block) * block],
                            block,
                            block,
                            d,
                        );
                    }
                    if needs(*v) {
                        let gv = slot(grads, nodes, *v);
                        kernels::matmul_tn_acc(
                            &sv[base * block..(base + block) * block],
                            gblk,
                            &mut gv[base * d..(base + block) * d],
                            block,
                            block,
                            d,
                        );
                    }
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if needs(*b) {
                    add_into(slot(grads, nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, nodes, *a);
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, nodes, *b);
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, nodes, *a);
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, nodes, *a);
                for ((o, x), inp) in ga.iter_mut().zip(g).zip(av) {
                    if *inp > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = slot(grads, nodes, *a);
                for ((o, x), yv) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *o += x * yv * (1.0 - yv);
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let ga = slot(grads, nodes, *a);
                for ((o, x), inp) in ga.iter_mut().zip(g).zip(av) {
                    *o += 2.0 * inp * x;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, nodes, *a);
                for ((grow, yrow), orow) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((o, x), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (x - dot);
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, nodes, *a), g),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.dims(*p)[1];
                    if needs(*p) {
                        let gp = slot(grads, nodes, *p);
                        for i in 0..rows {
                            let src = &g[i * cols + offset..i * cols + offset + c];
                            add_into(&mut gp[i * c..(i + 1) * c], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::InterleaveRows(parts) => {
                let k = parts.len();
                for (j, p) in parts.iter().enumerate() {
                    if !needs(*p) {
                        continue;
                    }
                    let m = self.dims(*p)[0];
                    let gp = slot(grads, nodes, *p);
                    for i in 0..m {
                        let r = i * k + j;
                        add_into(&mut gp[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::RepeatRows(a, times) => {
                let ga = slot(grads, nodes, *a);
                for (r, grow) in g.chunks(cols).enumerate() {
                    let i = r / times;
                    add_into(&mut ga[i * cols..(i + 1) * cols], grow);
                }
            }
            Op::TileRows(a) => {
                let ga = slot(grads, nodes, *a);
                let n = ga.len();
                for chunk in g.chunks(n) {
                    add_into(ga, chunk);
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = slot(grads, nodes, *a);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::BlockMeanRows(a, block) => {
                let ga = slot(grads, nodes, *a);
                let inv = 1.0 / *block as f64;
                for blk in 0..rows / block {
                    let mut total = vec![0.0; cols];
                    for i in 0..*block {
                        let r = blk * block + i;
                        add_into(&mut total, &g[r * cols..(r + 1) * cols]);
                    }
                    for i in 0..*block {
                        let r = blk * block + i;
                        for (o, t) in ga[r * cols..(r + 1) * cols].iter_mut().zip(&total) {
                            *o += t * inv;
                        }
                    }
                }
            }
            Op::SegmentMean(a, spans) => {
                let ga = slot(grads, nodes, *a);
                for (r, &(start, len)) in spans.iter().enumerate() {
                    let inv = 1.0 / len.max(1) as f64;
                    for i in start..start + len {
                        for (o, x) in ga[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::RowMean(a) => {
                let n = self.dims(*a)[1];
                let ga = slot(grads, nodes, *a);
                for (i, gi) in g.iter().enumerate() {
                    ga[i * n..(i + 1) * n].iter_mut().for_each(|o| *o += gi / n as f64);
                }
            }
            Op::Sum(a) => {
                let ga = slot(grads, nodes, *a);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Bce(a, labels) => {
                let av = self.value(*a);
                let ga = slot(grads, nodes, *a);
                for ((o, &p), &y) in ga.iter_mut().zip(av).zip(labels) {
                    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    *o += g[0] * (-y / p + (1.0 - y) / (1.0 - p));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values.iter().map(|(n, t)| store.add(*n, t.clone())).collect();
        (store, ids)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let (store, ids) = store_with(&[("x", x)]);
        let mut g = Graph::new(&store);
        let xv = g.param(ids[0]);
        let loss = g.sum(xv);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.25, 4.0]]).unwrap();
        let (store, ids) = store_with(&[("x", x.clone())]);
        let mut g = Graph::new(&store);
        let xv = g.param(ids[0]);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(ids[0]), want.as_slice());
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let (store, ids) = store_with(&[("a", Tensor::filled(&[1, 2], 1.0)), ("b", Tensor::filled(&[2, 2], 3.0))]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[1]), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, ids) = store_with(&[("a", Tensor::filled(&[1, 2], 1.0))]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        assert!(matches!(g.backward(a), Err(PierError::Contract(_))));
    }

    #[test]
    fn repeated_param_calls_share_a_node() {
        let (store, ids) = store_with(&[("a", Tensor::filled(&[1, 2], 1.0))]);
        let mut g = Graph::new(&store);
        let a1 = g.param(ids[0]);
        let a2 = g.param(ids[0]);
        assert_eq!(a1, a2);
        let s = g.add(a1, a2).unwrap();
        let loss = g.sum(s);
        assert_eq!(g.backward(loss).unwrap().get(ids[0]), &[2.0, 2.0]);
    }

    #[test]
    fn interleave_and_repeat_layouts() {
        let mut g = Graph::standalone();
        let a = g.input(&Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = g.input(&Tensor::from_rows(&[vec![10.0], vec![20.0]]).unwrap());
        let il = g.interleave_rows(&[a, b]).unwrap();
        assert_eq!(g.value(il), &[1.0, 10.0, 2.0, 20.0]);
        let rep = g.repeat_rows(a, 2);
        assert_eq!(g.value(rep), &[1.0, 1.0, 2.0, 2.0]);
        let tile = g.tile_rows(a, 2);
        assert_eq!(g.value(tile), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        let mut g = Graph::standalone();
        let p = g.input(&Tensor::row_vector(&[1.0, 0.0]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!(g.scalar(l) < 1e-11);
        let l = g.bce(p, &[0.0, 1.0]).unwrap();
        assert!(g.scalar(l).is_finite());
    }
}
